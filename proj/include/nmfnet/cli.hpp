#pragma once

#include <CLI11.hpp>

#include <iostream>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "nmfnet/evaltools.hpp"

namespace nmfnet::cli {

struct GenArgs {
  std::string env = "all";
  std::size_t episodes = 1, frames = 100;
  double dr_fraction = 0.45;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string out;
};

struct TrainArgs {
  std::string data, modalities = "rgb,laser,cloud", dr = "on", out, loss_log;
  std::size_t epochs = 1, batch = 8, cloud_points = 512;
  double lr = 0.01, momentum = 0.9, clip = 1.0;
  std::uint64_t seed = 0, split_seed = 0;
  double train_fraction = 0.7;
};

struct EvalArgs {
  std::string ckpt, data, report, subset = "test";
  std::uint64_t seed = 0, split_seed = 0;
  double train_fraction = 0.7;
  std::size_t cloud_points = 512;
};

struct AblateArgs {
  std::string data, out;
  std::size_t epochs = 1, cloud_points = 512;
  double lr = 0.01, momentum = 0.9, clip = 1.0;
  std::uint64_t seed = 0, split_seed = 0;
  double train_fraction = 0.7;
  std::vector<std::string> only;
};

struct CamArgs {
  std::string ckpt, data, branch = "rgb", out, overlay;
  std::uint64_t frame = 0, seed = 0;
  std::size_t cloud_points = 512;
};

inline std::vector<Archetype> parse_envs(const std::string& s) {
  if (s == "all") return {kArchetypes.begin(), kArchetypes.end()};
  return {parse_archetype(s)};
}

/// Records of one subset of a split: the held-out part, the training part,
/// the dr-flagged held-out part (texture-shifted), or every record.
inline std::vector<FrameRecord> select_subset(const Manifest& m, const std::string& subset, double fraction,
                                              std::uint64_t split_seed) {
  if (subset == "all") return m.records;
  auto s = split(m, fraction, split_seed);
  if (subset == "test") return s.test;
  if (subset == "train") return s.train;
  if (subset == "dr-test") {
    std::vector<FrameRecord> out;
    for (const auto& r : s.test) {
      if (r.dr_flag) out.push_back(r);
    }
    return out;
  }
  throw ConfigError("unknown subset '" + subset + "' (expected test, train, dr-test or all)");
}

inline void run_gen(const GenArgs& a, std::ostream& out) {
  GenConfig g;
  g.envs = parse_envs(a.env);
  g.episodes = a.episodes;
  g.frames = a.frames;
  g.dr_fraction = a.dr_fraction;
  g.seed = a.seed;
  g.threads = a.threads;
  auto m = generate_dataset(g, a.out);
  std::size_t dr = 0;
  for (const auto& r : m.records) dr += r.dr_flag;
  out << "gen: wrote " << m.records.size() << " records (" << dr << " dr-flagged) to " << a.out << '\n';
}

inline void run_train(const TrainArgs& a, std::ostream& out) {
  if (a.dr != "on" && a.dr != "off") throw ConfigError("--dr expects on or off, got '" + a.dr + "'");
  auto m = read_manifest(a.data);
  auto s = split(m, a.train_fraction, a.split_seed);
  TrainConfig tc;
  tc.lr = a.lr;
  tc.momentum = a.momentum;
  tc.batch_size = a.batch;
  tc.epochs = a.epochs;
  tc.seed = a.seed;
  tc.modalities = Modalities::parse(a.modalities);
  tc.dr_training = a.dr == "on";
  tc.clip_norm = a.clip;
  tc.cloud_points = a.cloud_points;
  tc.checkpoint = a.out;
  tc.loss_log = a.loss_log.empty() ? a.out + ".loss.tsv" : a.loss_log;
  auto res = train(m, s.train, tc, [&](const EpochSummary& e) {
    out << "train: epoch " << e.epoch << " steps " << e.steps << " mean loss " << e.mean_loss << std::endl;
  });
  out << "train: " << res.record_ids.size() << " records used, " << res.excluded_dr
      << " dr-flagged records excluded, " << res.state.step << " steps\n";
  out << "train: checkpoint " << a.out << ", loss log " << tc.loss_log.string() << '\n';
}

inline void run_eval(const EvalArgs& a, std::ostream& out) {
  auto model = load_checkpoint<float>(a.ckpt);
  auto m = read_manifest(a.data);
  auto records = select_subset(m, a.subset, a.train_fraction, a.split_seed);
  LoaderConfig lc;
  lc.cloud_points = a.cloud_points;
  lc.cloud_seed = mix_seed({a.seed, 0xc10d});
  auto rep = rmse(model, m, records, lc, std::filesystem::path(a.ckpt).stem().string());
  for (const auto& w : rep.warnings) out << "eval: warning: " << w << '\n';
  auto text = eval_tsv_header() + eval_tsv_row(rep);
  if (!a.report.empty()) write_file_atomic(a.report, text);
  out << text;
}

inline void run_ablate(const AblateArgs& a, std::ostream& out) {
  auto m = read_manifest(a.data);
  AblationConfig cfg;
  cfg.train.epochs = a.epochs;
  cfg.train.lr = a.lr;
  cfg.train.momentum = a.momentum;
  cfg.train.clip_norm = a.clip;
  cfg.train.seed = a.seed;
  cfg.train.cloud_points = a.cloud_points;
  cfg.train_fraction = a.train_fraction;
  cfg.split_seed = a.split_seed;
  cfg.only = a.only;
  cfg.log = [&](const std::string& line) { out << line << std::endl; };
  auto rows = ablation_suite(m, cfg);
  auto text = encode_ablation_tsv(rows);
  if (!a.out.empty()) write_file_atomic(a.out, text);
  out << text;
}

inline void run_cam(const CamArgs& a, std::ostream& out) {
  auto model = load_checkpoint<float>(a.ckpt);
  auto m = read_manifest(a.data);
  auto it = std::find_if(m.records.begin(), m.records.end(), [&](const FrameRecord& r) { return r.frame_id == a.frame; });
  if (it == m.records.end()) throw ConfigError("frame " + std::to_string(a.frame) + " is not in " + a.data);
  LoaderConfig lc;
  lc.modalities = model.config.modalities;
  lc.cloud_points = a.cloud_points;
  lc.cloud_seed = mix_seed({a.seed, 0xc10d});
  auto b = load_batch(m, m.records, {static_cast<std::size_t>(it - m.records.begin())}, lc);
  auto branch = parse_cam_branch(a.branch);
  auto cam = grad_cam(model, b.inputs, branch);
  write_pgm(a.out, cam_to_image(cam));
  std::string overlay = a.overlay;
  if (overlay.empty()) overlay = (std::filesystem::path(a.out).replace_extension("").string() + "_overlay.ppm");
  write_ppm(overlay, cam_overlay(cam, cam_base_image(b.inputs, branch)));
  out << "cam: frame " << a.frame << " (" << archetype_name(it->env) << ", steering " << it->steering << ") -> "
      << a.out << ", " << overlay << '\n';
}

/// Entry point shared by the binary and the tests. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"NMFNet multimodal steering: data generation, training, evaluation"};
  app.set_config("--config", "", "read options from a key=value file");
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--env", ga.env, "house, city, cave or all")
      ->check(CLI::IsMember({"house", "city", "cave", "all"}))
      ->capture_default_str();
  gen->add_option("--episodes", ga.episodes, "episodes per environment")->capture_default_str();
  gen->add_option("--frames", ga.frames, "frames per episode")->capture_default_str();
  gen->add_option("--dr-fraction", ga.dr_fraction, "share of texture-randomized episodes")->capture_default_str();
  gen->add_option("--seed", ga.seed)->capture_default_str();
  gen->add_option("--threads", ga.threads, "worker threads, 0 for all cores; output does not depend on it")
      ->capture_default_str();
  gen->add_option("--out", ga.out, "output directory")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train on the training split of a dataset");
  tr->add_option("--data", ta.data)->required();
  tr->add_option("--modalities", ta.modalities, "comma list of rgb, laser, cloud")->capture_default_str();
  tr->add_option("--epochs", ta.epochs)->capture_default_str();
  tr->add_option("--lr", ta.lr)->capture_default_str();
  tr->add_option("--momentum", ta.momentum)->capture_default_str();
  tr->add_option("--batch", ta.batch)->capture_default_str();
  tr->add_option("--clip", ta.clip, "gradient norm clip, 0 disables")->capture_default_str();
  tr->add_option("--dr", ta.dr, "train on dr-flagged records")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
  tr->add_option("--seed", ta.seed)->capture_default_str();
  tr->add_option("--split-seed", ta.split_seed)->capture_default_str();
  tr->add_option("--train-fraction", ta.train_fraction)->capture_default_str();
  tr->add_option("--cloud-points", ta.cloud_points)->capture_default_str();
  tr->add_option("--loss-log", ta.loss_log, "defaults to <out>.loss.tsv");
  tr->add_option("--out", ta.out, "checkpoint path")->required();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "per-environment RMSE of a checkpoint");
  ev->add_option("--ckpt", ea.ckpt)->required();
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--report", ea.report, "TSV output");
  ev->add_option("--subset", ea.subset, "test, train, dr-test or all")
      ->check(CLI::IsMember({"test", "train", "dr-test", "all"}))
      ->capture_default_str();
  ev->add_option("--seed", ea.seed, "point sampling seed")->capture_default_str();
  ev->add_option("--split-seed", ea.split_seed)->capture_default_str();
  ev->add_option("--train-fraction", ea.train_fraction)->capture_default_str();
  ev->add_option("--cloud-points", ea.cloud_points)->capture_default_str();

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "train and score all seven modality subsets");
  ab->add_option("--data", aa.data)->required();
  ab->add_option("--epochs", aa.epochs)->capture_default_str();
  ab->add_option("--lr", aa.lr)->capture_default_str();
  ab->add_option("--momentum", aa.momentum)->capture_default_str();
  ab->add_option("--clip", aa.clip)->capture_default_str();
  ab->add_option("--seed", aa.seed)->capture_default_str();
  ab->add_option("--split-seed", aa.split_seed)->capture_default_str();
  ab->add_option("--train-fraction", aa.train_fraction)->capture_default_str();
  ab->add_option("--cloud-points", aa.cloud_points)->capture_default_str();
  ab->add_option("--only", aa.only, "restrict to these rows, e.g. --only Fusion --only RGB");
  ab->add_option("--out", aa.out, "TSV output");

  CamArgs ca;
  auto* cm = app.add_subcommand("cam", "Grad-CAM heat map for one frame");
  cm->add_option("--ckpt", ca.ckpt)->required();
  cm->add_option("--data", ca.data, "dataset holding the frame")->required();
  cm->add_option("--frame", ca.frame)->required();
  cm->add_option("--branch", ca.branch)->check(CLI::IsMember({"rgb", "laser"}))->capture_default_str();
  cm->add_option("--seed", ca.seed, "point sampling seed")->capture_default_str();
  cm->add_option("--cloud-points", ca.cloud_points)->capture_default_str();
  cm->add_option("--out", ca.out, "PGM heat map")->required();
  cm->add_option("--overlay", ca.overlay, "PPM overlay, defaults to <out>_overlay.ppm");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    // usage of the subcommand that failed, when one was named
    const CLI::App* shown = &app;
    for (const auto* sub : app.get_subcommands()) shown = sub;
    err << shown->help();
    return 2;
  }

  // only the chosen subcommand; the text reads back through --config
  for (const auto* sub : app.get_subcommands()) {
    out << "# resolved config\n[" << sub->get_name() << "]\n" << sub->config_to_str(true, false) << std::flush;
  }
  try {
    if (*gen) run_gen(ga, out);
    if (*tr) run_train(ta, out);
    if (*ev) run_eval(ea, out);
    if (*ab) run_ablate(aa, out);
    if (*cm) run_cam(ca, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace nmfnet::cli
