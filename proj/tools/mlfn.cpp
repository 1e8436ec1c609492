// mlfn: data generation, training, evaluation, verification, inspection and
// ablation for the multi-level factorisation network.

#include <malloc.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>

#include "mlfn/checkpoint.hpp"
#include "mlfn/config.hpp"
#include "mlfn/errors.hpp"
#include "mlfn/experiment.hpp"
#include "mlfn/inspect.hpp"
#include "mlfn/reid_eval.hpp"
#include "mlfn/synth.hpp"
#include "mlfn/training.hpp"
#include "mlfn/verify.hpp"

namespace fs = std::filesystem;
using namespace mlfn;

namespace {

constexpr int kOk = 0, kUsage = 1, kVerify = 2, kDiverged = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string ranks;
  std::string data;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_mode = true) {
  cmd->add_option("--config", c.config, "INI configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed (overrides the config)");
  if (with_mode) cmd->add_option("--mode", c.mode, "mlfn | nofusion | resnext | resnet");
  cmd->add_option("--data", c.data, "Dataset directory written by gen-data");
  cmd->add_option("--out", c.out, "Output directory");
}

config::RunConfig resolve(const Common& c, const std::string& fallback_config = {}) {
  config::RunConfig cfg;
  if (!c.config.empty()) cfg = config::load(c.config);
  else if (!fallback_config.empty() && fs::exists(fallback_config)) cfg = config::load(fallback_config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.mode.empty()) cfg.experiment.model.mode = model::parse_mode(c.mode);
  if (!c.ranks.empty()) cfg.experiment.ranks = config::parse_size_list(c.ranks);
  if (!c.data.empty()) cfg.data_dir = c.data;
  return cfg;
}

synth::ToyReIDDataset dataset(const config::RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return synth::load_dataset(cfg.data_dir);
  return synth::generate_dataset(synth::FactorSpec::standard(), cfg.data);
}

void set_classes(config::RunConfig& cfg, const synth::ToyReIDDataset& data) {
  cfg.experiment.model.num_classes = data.train_ids.size();
  cfg.experiment.model.input_height = data.height;
  cfg.experiment.model.input_width = data.width;
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw ContractError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

void print_row(const train::LogRow& r) {
  std::printf("iter %6zu  loss %.5f  lr %.3g  batch acc %.3f\n", r.iteration, r.loss, r.lr, r.train_acc);
  std::fflush(stdout);
}

std::string checkpoint_config(const std::string& ckpt) {
  return ckpt.empty() ? std::string() : (fs::path(ckpt).parent_path() / "config_resolved").string();
}

model::MlfnModel<float> load_trained(config::RunConfig& cfg, const synth::ToyReIDDataset& data,
                                     const std::string& ckpt) {
  set_classes(cfg, data);
  model::MlfnModel<float> m(cfg.experiment.model, cfg.seed);
  checkpoint::load_model(m, ckpt);
  return m;
}

// ---- subcommands ----------------------------------------------------------------

int gen_data(const Common& c) {
  auto cfg = resolve(c);
  if (c.seed) cfg.data.seed = *c.seed;
  const auto out = require_out(c);
  const auto data = synth::generate_dataset(synth::FactorSpec::standard(), cfg.data);
  synth::export_dataset(data, out);
  config::write_resolved(cfg, out);
  std::printf("%zu images of %zu identities written to %s\nchecksum %016llx\n", data.size(), data.id_count(),
              out.string().c_str(), static_cast<unsigned long long>(synth::directory_checksum(out)));
  return kOk;
}

int train_cmd(const Common& c, const std::string& resume) {
  auto cfg = resolve(c);
  const auto out = require_out(c);
  const auto data = dataset(cfg);
  set_classes(cfg, data);
  config::write_resolved(cfg, out);
  const auto labeled = experiment::training_images(data);
  model::MlfnModel<float> m(cfg.experiment.model, cfg.seed);
  auto tc = cfg.experiment.train;
  tc.seed = cfg.seed;
  train::RunOptions ro;
  ro.out_dir = out;
  if (!resume.empty()) ro.resume_from = resume;
  ro.on_log = print_row;
  const auto tr = train::run_training(tc, labeled, m, ro);
  auto res = experiment::evaluate(m, data, cfg.experiment, cfg.seed);
  res.final_loss = tr.final_loss;
  experiment::write_metrics_csv({res}, out / "metrics.csv");
  std::printf("train accuracy %.4f\n%s", res.train_accuracy, eval::format_report(res.r_report).c_str());
  std::printf("checkpoint %s\n", (out / "checkpoint.bin").string().c_str());
  return kOk;
}

int eval_cmd(const Common& c, const std::string& ckpt, const std::string& features, bool pair) {
  auto cfg = resolve(c, checkpoint_config(ckpt));
  if (!features.empty()) cfg.features = config::parse_feature_list(features);
  const auto data = dataset(cfg);
  auto m = load_trained(cfg, data, ckpt);
  const auto digest = model::config_digest(m.config());
  const auto split = synth::split_gallery_probe(data, data.test_ids);
  std::vector<int> pid, gid;
  for (auto i : split.probes) pid.push_back(data.ids[i]);
  for (auto i : split.gallery) gid.push_back(data.ids[i]);

  std::vector<eval::EvalReport> reports;
  for (auto kind : cfg.features) {
    const auto p = kind == eval::FeatureKind::pixels ? eval::pixel_features(data, split.probes)
                                                     : eval::extract_features(m, data, split.probes, kind);
    const auto g = kind == eval::FeatureKind::pixels ? eval::pixel_features(data, split.gallery)
                                                     : eval::extract_features(m, data, split.gallery, kind);
    reports.push_back(eval::evaluate(eval::distance_matrix(p, g), pid, gid, cfg.experiment.ranks,
                                     std::string(eval::feature_name(kind)), digest));
  }
  if (pair) {
    const auto train_fs = eval::extract_features(m, data, data.images_of(true), eval::FeatureKind::FS);
    const auto matcher = eval::fit_pair_matcher(train_fs.features, eval::sample_pairs(train_fs.ids, cfg.seed),
                                                cfg.experiment.pair_matcher);
    const auto p = eval::extract_features(m, data, split.probes, eval::FeatureKind::FS);
    const auto g = eval::extract_features(m, data, split.gallery, eval::FeatureKind::FS);
    reports.push_back(eval::evaluate(matcher.distance_matrix(p.features, g.features), pid, gid,
                                     cfg.experiment.ranks, "FS-pair", digest));
  }
  for (const auto& r : reports) std::cout << eval::format_report(r);
  if (!c.out.empty()) {
    const auto out = require_out(c);
    eval::write_report_csv(reports, out / "report.csv");
    config::write_resolved(cfg, out);
  }
  return kOk;
}

int grad_check_cmd(std::size_t max_coords, bool quiet) {
  constexpr double kKernelTol = 1e-6, kModelTol = 1e-5;
  double kernel_worst = 0.0;
  for (const auto& l : verify::kernel_gradient_suite()) {
    kernel_worst = std::max(kernel_worst, l.max_rel_error);
    if (!quiet) std::printf("kernel %-28s %.3e over %zu coords\n", l.name.c_str(), l.max_rel_error, l.coords);
  }
  verify::ModelGradOptions opts;
  opts.max_coords = max_coords;
  if (!quiet)
    opts.progress = [](const verify::GradCheckLine& l) {
      std::printf("param  %-28s %.3e over %zu coords\n", l.name.c_str(), l.max_rel_error, l.coords);
      std::fflush(stdout);
    };
  const auto rep = verify::model_gradient_check(opts);
  std::printf("kernels: max rel. err %.3e (limit %.0e)\n", kernel_worst, kKernelTol);
  std::printf("model:   max rel. err %.3e (limit %.0e) at %s; %zu coords, %zu refined, %zu on a kink, %.1f s\n",
              rep.max_rel_error, kModelTol, rep.worst_parameter.c_str(), rep.coords, rep.refined, rep.on_kink,
              rep.seconds);
  const bool ok = kernel_worst <= kKernelTol && rep.max_rel_error <= kModelTol;
  std::printf("%s\n", ok ? "gradient check passed" : "gradient check FAILED");
  return ok ? kOk : kVerify;
}

int inspect_cmd(const Common& c, const std::string& ckpt, std::optional<std::size_t> block,
                std::optional<std::size_t> unit, std::optional<std::size_t> m_flag) {
  auto cfg = resolve(c, checkpoint_config(ckpt));
  if (m_flag) cfg.inspect_m = *m_flag;
  const auto out = require_out(c);
  const auto data = dataset(cfg);
  auto m = load_trained(cfg, data, ckpt);
  if (!m.config().has_selection())
    throw ContractError("mode " + std::string(model::mode_name(m.config().mode)) + " has no selection modules");

  std::vector<inspect::UnitRanking> rankings;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto sel = inspect::selection_outputs(m, data, all);
  for (std::size_t b = 0; b < sel.size(); ++b) {
    if (block && *block != b) continue;
    const std::size_t k = sel[b].dim(1);
    for (std::size_t i = 0; i < k; ++i) {
      if (unit && *unit != i) continue;
      std::vector<double> scores(all.size());
      for (std::size_t j = 0; j < all.size(); ++j) scores[j] = sel[b][j * k + i];
      rankings.push_back(inspect::rank_scores(b, i, scores, all, cfg.inspect_m));
    }
  }
  if (block && *block >= sel.size()) throw ContractError("block " + std::to_string(*block) + " out of range");
  if (unit && rankings.empty()) throw ContractError("unit " + std::to_string(*unit) + " out of range");
  const auto dir = out / "inspect";
  inspect::export_report(rankings, data, dir);
  const auto table = inspect::correlate_units(m, data);
  inspect::write_correlations_csv(table, dir / "correlations.csv");
  config::write_resolved(cfg, out);
  for (std::size_t a = 0; a < table.attributes.size(); ++a) {
    const auto u = table.units[table.best_unit[a]];
    std::printf("%-8s best unit %zu_%zu  |r| %.3f\n", table.attributes[a].c_str(), u.block, u.unit,
                table.association[table.best_unit[a] * table.attributes.size() + a]);
  }
  for (std::size_t b = 0; b < sel.size(); ++b)
    std::printf("block %zu dominant attribute: %s\n", b,
                table.attributes[inspect::dominant_attribute(table, b)].c_str());
  std::printf("%zu rankings written under %s\n", rankings.size(), dir.string().c_str());
  return kOk;
}

int probe_cmd(const Common& c, const std::string& ckpt, const std::string& features) {
  auto cfg = resolve(c, checkpoint_config(ckpt));
  const auto kind = features.empty() ? eval::FeatureKind::FS : eval::parse_feature(features);
  const auto data = dataset(cfg);
  auto m = load_trained(cfg, data, ckpt);
  const auto train_f = eval::extract_features(m, data, data.images_of(true), kind);
  const auto test_f = eval::extract_features(m, data, data.images_of(false), kind);
  const auto r = eval::attribute_probe(train_f, test_f, data.attributes, data.attribute_names,
                                       cfg.experiment.attribute_probe);
  for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("features: %s\n", std::string(eval::feature_name(kind)).c_str());
  for (std::size_t a = 0; a < r.names.size(); ++a)
    std::printf("  %-8s accuracy %.3f  majority %.3f%s\n", r.names[a].c_str(), r.accuracy[a], r.majority[a],
                r.skipped[a] ? "  (skipped)" : "");
  std::printf("  mean     accuracy %.3f  majority %.3f\n", r.mean_accuracy, r.mean_majority);
  if (!c.out.empty()) {
    const auto out = require_out(c);
    std::ofstream csv(out / "probe.csv", std::ios::trunc);
    csv << "attribute,accuracy,majority,skipped\n";
    char buf[128];
    for (std::size_t a = 0; a < r.names.size(); ++a) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%d\n", r.names[a].c_str(), r.accuracy[a], r.majority[a],
                    r.skipped[a] ? 1 : 0);
      csv << buf;
    }
    if (!csv) throw IoError("write failed: " + (out / "probe.csv").string());
    config::write_resolved(cfg, out);
  }
  return kOk;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int ablate_cmd(const Common& c, const std::string& seeds_text) {
  auto cfg = resolve(c);
  const auto out = require_out(c);
  const auto seeds = seeds_text.empty() ? std::vector<std::size_t>{cfg.seed} : config::parse_size_list(seeds_text);
  const auto data = dataset(cfg);
  set_classes(cfg, data);
  config::write_resolved(cfg, out);

  const model::Mode modes[] = {model::Mode::mlfn, model::Mode::nofusion, model::Mode::resnext, model::Mode::resnet};
  std::vector<experiment::ExperimentResult> runs;
  std::ofstream csv(out / "ablation.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write " + (out / "ablation.csv").string());
  csv << "mode,rank1,mAP\n";
  for (auto mode : modes) {
    auto ec = cfg.experiment;
    ec.model.mode = mode;
    ec.analyses = false;
    std::vector<double> r1, map;
    for (auto s : seeds) {
      const auto run_dir = out / (std::string(model::mode_name(mode)) + "_seed" + std::to_string(s));
      fs::create_directories(run_dir);
      auto res = experiment::run(data, ec, s, run_dir);
      std::printf("%-9s seed %zu  train acc %.3f  R1 %.3f  mAP %.3f  (%.1f s)\n", res.mode.c_str(), s,
                  res.train_accuracy, res.r_report.cmc.front(), res.r_report.map, res.seconds);
      std::fflush(stdout);
      r1.push_back(res.r_report.cmc.front());
      map.push_back(res.r_report.map);
      runs.push_back(std::move(res));
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", std::string(model::mode_name(mode)).c_str(), median(r1),
                  median(map));
    csv << buf;
  }
  if (!csv) throw IoError("write failed: " + (out / "ablation.csv").string());
  experiment::write_metrics_csv(runs, out / "runs.csv");
  std::printf("ablation table written to %s\n", (out / "ablation.csv").string().c_str());
  return kOk;
}

void check_threads_env() {
  const char* v = std::getenv("MLFN_THREADS");
  if (!v) return;
  const std::string s(v);
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || std::stoul(s) == 0)
    throw ContractError("MLFN_THREADS must be a positive integer, got '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);

  CLI::App app{"Multi-level factorisation net: toy re-identification pipeline"};
  app.require_subcommand(1);
  Common c;
  std::string ckpt, features, resume, seeds;
  std::size_t max_coords = 0;
  bool quiet = false, pair = false;
  std::optional<std::size_t> block, unit, m_flag;

  auto* gen = app.add_subcommand("gen-data", "Generate and export the toy dataset");
  add_common(gen, c, false);

  auto* tr = app.add_subcommand("train", "Train a model");
  add_common(tr, c);
  tr->add_option("--resume", resume, "Training checkpoint to continue from")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Cross-view retrieval evaluation");
  add_common(ev, c);
  ev->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--features", features, "Comma list of R | FS | YN | pixels");
  ev->add_option("--ranks", c.ranks, "CMC ranks, e.g. 1,5,10");
  ev->add_flag("--pair-matcher", pair, "Also score FS with the learned pair matcher");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  gc->add_option("--max-coords", max_coords, "Coordinates per parameter tensor (0 = all)");
  gc->add_flag("--quiet", quiet, "Only print the summary");

  auto* in = app.add_subcommand("inspect", "Rank images by selection gates");
  add_common(in, c);
  in->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  in->add_option("--block", block, "Only this block");
  in->add_option("--unit", unit, "Only this unit");
  in->add_option("--m", m_flag, "Top and bottom images kept per unit");

  auto* pr = app.add_subcommand("probe-attrs", "Linear attribute probes on the factor signature");
  add_common(pr, c);
  pr->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  pr->add_option("--features", features, "FS (default) | R | YN");

  auto* ab = app.add_subcommand("ablate", "Train every mode on the same data and seeds");
  add_common(ab, c, false);
  ab->add_option("--seeds", seeds, "Comma list of seeds (default: --seed)");
  ab->add_option("--ranks", c.ranks, "CMC ranks, e.g. 1,5,10");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    check_threads_env();
    if (gen->parsed()) return gen_data(c);
    if (tr->parsed()) return train_cmd(c, resume);
    if (ev->parsed()) return eval_cmd(c, ckpt, features, pair);
    if (gc->parsed()) return grad_check_cmd(max_coords, quiet);
    if (in->parsed()) return inspect_cmd(c, ckpt, block, unit, m_flag);
    if (pr->parsed()) return probe_cmd(c, ckpt, features);
    if (ab->parsed()) return ablate_cmd(c, seeds);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const DeterminismError& e) {
    std::fprintf(stderr, "verification failed: %s\n", e.what());
    return kVerify;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}
