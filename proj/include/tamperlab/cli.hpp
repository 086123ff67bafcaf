#pragma once

// Command-line front end. `run` takes the arguments after the program name
// and returns the process exit status.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tamperlab/config.hpp"
#include "tamperlab/detector.hpp"
#include "tamperlab/gradcheck_suite.hpp"
#include "tamperlab/metrics.hpp"
#include "tamperlab/parallel.hpp"
#include "tamperlab/render.hpp"
#include "tamperlab/srm.hpp"
#include "tamperlab/synth.hpp"
#include "tamperlab/train.hpp"

namespace tamperlab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct GlobalFlags {
  std::string config_path;
  std::string dump_config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool verbose = false;
};

/// Defaults, then the --config file, then --set overrides, then --seed/--jobs/--verbose.
inline RunConfig effective_config(const GlobalFlags& g) {
  RunConfig cfg;
  if (!g.config_path.empty()) apply_config_file(cfg, g.config_path);
  for (const auto& o : g.overrides) apply_override(cfg, o);
  if (g.seed) cfg.seed = *g.seed;
  if (g.jobs) cfg.jobs = *g.jobs;
  if (g.verbose) cfg.verbose = true;
  if (cfg.jobs == 0) throw ConfigError("jobs must be at least 1");
  cfg.detector.validate();
  return cfg;
}

inline std::vector<std::string> split_commas(const std::string& s) { return detail::split_list(s); }

/// "x1,y1,x2,y2"
inline Box parse_box(const std::string& s) {
  const auto parts = split_commas(s);
  if (parts.size() != 4) throw ConfigError("box must be x1,y1,x2,y2, got '" + s + "'");
  return {detail::parse_double(parts[0]), detail::parse_double(parts[1]), detail::parse_double(parts[2]),
          detail::parse_double(parts[3])};
}

inline std::string detections_json(const std::vector<Detection>& dets, ClassMode mode) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& d : dets)
    j.push_back({{"label", class_names(mode).at(static_cast<std::size_t>(d.label))},
                 {"score", d.score},
                 {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}});
  return j.dump(2) + "\n";
}

// --- commands ------------------------------------------------------------------------------

inline int cmd_make_corpus(const RunConfig& cfg, std::size_t count, const std::string& out_dir, std::ostream& out) {
  write_corpus(make_procedural_corpus(count, cfg.seed), out_dir);
  out << "wrote " << count << " corpus images to " << out_dir << "\n";
  return kExitOk;
}

struct GenArgs {
  std::string corpus, out_dir, techniques = "splice,copy_move,removal";
  std::size_t count = 0;
  double test_frac = 0.1;
  bool no_authentic = false;
};

inline int cmd_gen(const RunConfig& cfg, const GenArgs& a, std::ostream& out) {
  GenerateOptions opt;
  opt.count = a.count;
  opt.techniques = split_commas(a.techniques);
  opt.seed = cfg.seed;
  opt.test_fraction = a.test_frac;
  opt.authentic = !a.no_authentic;
  opt.jobs = cfg.jobs;
  const auto corpus = a.count ? load_corpus(a.corpus) : std::vector<SourceRecord>{};
  const auto samples = generate_dataset(corpus, opt);
  std::filesystem::create_directories(a.out_dir);
  const auto records = write_dataset(samples, a.out_dir, cfg.jobs);
  std::size_t n_test = 0;
  for (const auto& r : records) n_test += r.split == "test";
  out << "wrote " << records.size() << " records (" << records.size() - n_test << " train, " << n_test
      << " test) to " << (std::filesystem::path(a.out_dir) / "manifest.jsonl").string() << "\n";
  return kExitOk;
}

/// Loads the records of `split` ("all" for every record) and prepares them for training.
inline std::vector<PreparedSample> prepare_manifest(const std::string& manifest, const std::string& split,
                                                    const RunConfig& cfg) {
  const auto records = read_manifest(manifest);
  check_manifest_mode(records, cfg.detector.mode);
  const auto base = std::filesystem::path(manifest).parent_path();
  std::vector<const ManifestRecord*> chosen;
  for (const auto& r : records)
    if (split == "all" || r.split == split) chosen.push_back(&r);
  std::vector<PreparedSample> prepared(chosen.size());
  parallel_for(chosen.size(), cfg.jobs, [&](std::size_t i) {
    const TamperSample s = load_sample(*chosen[i], base);
    TrainingImage t{s.image, {}, {}};
    for (const auto& b : s.boxes) {
      t.boxes.push_back(b.box);
      t.classes.push_back(class_id(cfg.detector.mode, b.label));
    }
    prepared[i] = prepare_sample(t, cfg.detector);
  });
  return prepared;
}

struct TrainArgs {
  std::string manifest, ckpt, log, split = "train";
};

inline int cmd_train(const RunConfig& cfg, const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const auto samples = prepare_manifest(a.manifest, a.split, cfg);
  if (samples.empty()) throw std::runtime_error("no '" + a.split + "' records in " + a.manifest);
  Detector model = build_two_stream(cfg.detector, derive_seed(cfg.seed, 0));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, 1);
  const std::string log_path = a.log.empty() ? a.ckpt + ".loss.csv" : a.log;
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  write_loss_csv_header(log);
  train_detector(model, samples, tc, [&](long step, const LossBreakdown& l, double lr) {
    write_loss_csv_row(log, step, l, lr);
    if (cfg.verbose && (step % 50 == 0 || step + 1 == tc.steps))
      err << "step " << step << " l_total " << l.l_total << " lr " << lr << "\n";
  });
  save_detector(a.ckpt, model);
  out << "trained " << tc.steps << " steps on " << samples.size() << " images; wrote " << a.ckpt << " and "
      << log_path << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string manifest, ckpt, attacks, report, split = "test";
};

inline int cmd_eval(const RunConfig& cfg, const EvalArgs& a, std::ostream& out) {
  const Detector model = load_detector(a.ckpt, cfg.detector);
  std::vector<AttackSpec> attacks;
  for (const auto& s : split_commas(a.attacks)) attacks.push_back(AttackSpec::parse(s));
  const auto records = read_manifest(a.manifest);
  const auto report = evaluate_manifest(model, records, std::filesystem::path(a.manifest).parent_path(), attacks,
                                        a.split == "all" ? "" : a.split, cfg.jobs);
  const std::string text = report_text(report);
  if (a.report.empty()) {
    out << text;
  } else {
    std::ofstream f(a.report, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + a.report);
    f << text;
    for (const auto& r : report.reports)
      out << std::left << std::setw(12) << r.name << " F1 " << std::fixed << std::setprecision(4) << r.f1_best
          << "  AUC " << r.auc << "  AP " << r.mean_ap << "  AP50 " << r.mean_ap50 << "\n";
  }
  return kExitOk;
}

struct InferArgs {
  std::string ckpt, image, overlay, heatmap, json;
  std::vector<std::string> gt;
  bool no_scores = false;
};

inline int cmd_infer(const RunConfig& cfg, const InferArgs& a, std::ostream& out) {
  const Detector model = load_detector(a.ckpt, cfg.detector);
  const Image img = read_png_image(a.image);
  const auto dets = detect(model, img);
  std::vector<Box> gt;
  for (const auto& s : a.gt) gt.push_back(parse_box(s));
  OverlayOptions opt;
  opt.label_scores = !a.no_scores;
  if (!a.overlay.empty()) write_overlay(a.overlay, img, dets, model.config.mode, gt, opt);
  if (!a.heatmap.empty())
    write_png(a.heatmap, render_heatmap(img, rasterize_detections(dets, img.width, img.height)));
  const std::string text = detections_json(dets, model.config.mode);
  if (a.json.empty()) {
    out << text;
  } else {
    std::ofstream f(a.json, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + a.json);
    f << text;
  }
  return kExitOk;
}

inline int cmd_attack(const std::string& image, const std::string& spec, const std::string& out_path,
                      std::ostream& out) {
  const AttackSpec a = AttackSpec::parse(spec);
  const Image img = attack_image(read_png_image(image), a);
  write_png(out_path, img);
  out << "wrote " << a.name() << " of " << image << " to " << out_path << " (" << img.width << "x" << img.height
      << ")\n";
  return kExitOk;
}

inline int cmd_gradcheck(const RunConfig& cfg, bool ops_only, std::ostream& out) {
  GradCheckSuiteOptions opt;
  opt.seed = cfg.seed;
  opt.include_graph = !ops_only;
  const auto entries = run_gradcheck_suite(opt);
  double worst = 0;
  bool all_passed = true;
  for (const auto& e : entries) {
    worst = std::max(worst, e.max_rel_error);
    all_passed = all_passed && e.passed();
    if (cfg.verbose)
      out << std::left << std::setw(28) << e.name << std::scientific << std::setprecision(3) << e.max_rel_error
          << (e.passed() ? "" : "  FAILED") << "\n";
  }
  out << "max relative error: " << std::scientific << std::setprecision(3) << worst << "\n";
  return all_passed && worst < 1e-3 ? kExitOk : kExitFailure;
}

inline int cmd_srm_debug(const std::string& image, const std::string& out_path, std::ostream& out) {
  const NoiseMap n = cached_noise_map(read_png_image(image));
  write_png(out_path, noise_map_to_image(n, srm_kernel_bank().truncation));
  out << "wrote noise map of " << image << " to " << out_path << "\n";
  return kExitOk;
}

// --- dispatch ------------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Two-stream image manipulation detector", "tamperlab"};
  app.fallthrough();
  app.require_subcommand(1);
  GlobalFlags g;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--set", g.overrides, "override one config key (key=value), repeatable");
  auto* seed_opt = app.add_option("--seed", seed, "master seed");
  auto* jobs_opt = app.add_option("--jobs", jobs, "worker threads for gen, train preparation and eval");
  app.add_flag("--verbose", g.verbose, "progress output");
  app.add_option("--dump-config", g.dump_config, "write the effective config to this path");

  std::size_t corpus_count = 0;
  std::string corpus_out;
  auto* mk = app.add_subcommand("make-corpus", "write a procedural source corpus");
  mk->add_option("--count", corpus_count, "images")->required();
  mk->add_option("--out", corpus_out, "output directory")->required();

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate tampered samples and a manifest");
  gen_cmd->add_option("--corpus", gen.corpus, "corpus directory with index.json")->required();
  gen_cmd->add_option("--count", gen.count, "tampered samples")->required();
  gen_cmd->add_option("--techniques", gen.techniques, "comma list of splice, copy_move, removal");
  gen_cmd->add_option("--test-frac", gen.test_frac, "test fraction");
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_flag("--no-authentic", gen.no_authentic, "skip the authentic counterparts");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a detector on a manifest split");
  train_cmd->add_option("--manifest", train.manifest, "manifest.jsonl")->required();
  train_cmd->add_option("--ckpt", train.ckpt, "checkpoint to write")->required();
  train_cmd->add_option("--log", train.log, "loss CSV (default: <ckpt>.loss.csv)");
  train_cmd->add_option("--split", train.split, "train, test or all");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
  eval_cmd->add_option("--manifest", ev.manifest, "manifest.jsonl")->required();
  eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  eval_cmd->add_option("--attacks", ev.attacks, "comma list such as jpeg70,resize0.5");
  eval_cmd->add_option("--report", ev.report, "JSON report path (default: stdout)");
  eval_cmd->add_option("--split", ev.split, "train, test or all");

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "detect on one image");
  infer_cmd->add_option("--ckpt", inf.ckpt, "checkpoint")->required();
  infer_cmd->add_option("--image", inf.image, "PNG image")->required();
  infer_cmd->add_option("--overlay", inf.overlay, "overlay PNG to write");
  infer_cmd->add_option("--heatmap", inf.heatmap, "heatmap PNG to write");
  infer_cmd->add_option("--json", inf.json, "detections JSON (default: stdout)");
  infer_cmd->add_option("--gt", inf.gt, "ground-truth box x1,y1,x2,y2 drawn dashed, repeatable");
  infer_cmd->add_flag("--no-scores", inf.no_scores, "omit score text in the overlay");

  std::string atk_image, atk_spec, atk_out;
  auto* attack_cmd = app.add_subcommand("attack", "apply jpeg<Q> or resize<scale> to an image");
  attack_cmd->add_option("--image", atk_image, "PNG image")->required();
  attack_cmd->add_option("--attack", atk_spec, "attack spec")->required();
  attack_cmd->add_option("--out", atk_out, "PNG to write")->required();

  bool ops_only = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc_cmd->add_flag("--ops-only", ops_only, "skip the full-graph check");

  std::string srm_image, srm_out;
  auto* srm_cmd = app.add_subcommand("srm-debug", "write an image's noise map as PNG");
  srm_cmd->add_option("--image", srm_image, "PNG image")->required();
  srm_cmd->add_option("--out", srm_out, "PNG to write")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "tamperlab: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }
  if (*seed_opt) g.seed = seed;
  if (*jobs_opt) g.jobs = jobs;

  try {
    const RunConfig cfg = effective_config(g);
    if (!g.dump_config.empty()) {
      std::ofstream f(g.dump_config, std::ios::binary);
      if (!f) throw std::runtime_error("cannot write " + g.dump_config);
      f << dump_config(cfg);
    }
    if (*mk) return cmd_make_corpus(cfg, corpus_count, corpus_out, out);
    if (*gen_cmd) return cmd_gen(cfg, gen, out);
    if (*train_cmd) return cmd_train(cfg, train, out, err);
    if (*eval_cmd) return cmd_eval(cfg, ev, out);
    if (*infer_cmd) return cmd_infer(cfg, inf, out);
    if (*attack_cmd) return cmd_attack(atk_image, atk_spec, atk_out, out);
    if (*gc_cmd) return cmd_gradcheck(cfg, ops_only, out);
    if (*srm_cmd) return cmd_srm_debug(srm_image, srm_out, out);
  } catch (const std::exception& e) {
    err << "tamperlab: error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace tamperlab::cli
