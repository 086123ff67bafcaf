#include "tamperlab/cli.hpp"

int main(int argc, char** argv) { return tamperlab::cli::run(argc, argv); }
