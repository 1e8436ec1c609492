#include "mlfn/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>

namespace mlfn::experiment {

ExperimentConfig ExperimentConfig::toy() {
  ExperimentConfig c;
  c.train.batch_size = 16;
  c.train.iterations = 800;
  c.train.optimizer.lr = 1e-3;
  c.train.log_every = 10;
  return c;
}

train::LabeledImages training_images(const synth::ToyReIDDataset& data) {
  std::map<int, int> dense;
  for (int id : data.train_ids) dense.emplace(id, static_cast<int>(dense.size()));
  train::LabeledImages out;
  const auto idx = data.images_of(true);
  out.images = data.gather(idx);
  for (std::size_t i : idx) out.labels.push_back(dense.at(data.ids[i]));
  out.classes = dense.size();
  return out;
}

namespace {

std::vector<int> ids_of(const synth::ToyReIDDataset& data, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(data.ids[i]);
  return out;
}

}  // namespace

ExperimentResult evaluate(model::MlfnModel<float>& model, const synth::ToyReIDDataset& data,
                          const ExperimentConfig& config, std::uint64_t seed) {
  ExperimentResult res;
  res.mode = std::string(model::mode_name(model.config().mode));
  res.seed = seed;
  const auto digest = model::config_digest(model.config());
  res.train_accuracy = train::classification_accuracy(model, training_images(data));

  const auto split = synth::split_gallery_probe(data, data.test_ids);
  const auto probe_ids = ids_of(data, split.probes), gallery_ids = ids_of(data, split.gallery);

  const auto pr = eval::extract_features(model, data, split.probes, eval::FeatureKind::R);
  const auto gr = eval::extract_features(model, data, split.gallery, eval::FeatureKind::R);
  res.r_report = eval::evaluate(eval::distance_matrix(pr, gr), probe_ids, gallery_ids, config.ranks, "R", digest);

  const auto pp = eval::pixel_features(data, split.probes);
  const auto gp = eval::pixel_features(data, split.gallery);
  res.pixel_report = eval::evaluate(eval::distance_matrix(pp, gp), probe_ids, gallery_ids, config.ranks, "pixels", digest);

  if (config.analyses && model.config().has_selection()) {
    const auto train_idx = data.images_of(true);
    const auto train_fs = eval::extract_features(model, data, train_idx, eval::FeatureKind::FS);
    const auto pairs = eval::sample_pairs(train_fs.ids, seed);
    const auto matcher = eval::fit_pair_matcher(train_fs.features, pairs, config.pair_matcher);
    res.fs_pair_train_accuracy = eval::pair_accuracy(matcher, train_fs.features, pairs);
    const auto pf = eval::extract_features(model, data, split.probes, eval::FeatureKind::FS);
    const auto gf = eval::extract_features(model, data, split.gallery, eval::FeatureKind::FS);
    res.fs_pair_report = eval::evaluate(matcher.distance_matrix(pf.features, gf.features), probe_ids,
                                        gallery_ids, config.ranks, "FS-pair", digest);

    const auto test_fs = eval::extract_features(model, data, data.images_of(false), eval::FeatureKind::FS);
    res.probe = eval::attribute_probe(train_fs, test_fs, data.attributes, data.attribute_names,
                                      config.attribute_probe);
    res.correlations = inspect::correlate_units(model, data);
  }
  res.model_checksum = model.checksum();
  return res;
}

ExperimentResult run(const synth::ToyReIDDataset& data, const ExperimentConfig& config,
                     std::uint64_t seed, const std::optional<std::filesystem::path>& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto labeled = training_images(data);
  auto mcfg = config.model;
  mcfg.num_classes = labeled.classes;
  model::MlfnModel<float> model(mcfg, seed);
  auto tc = config.train;
  tc.seed = seed;
  train::RunOptions ro;
  ro.out_dir = out_dir;
  const auto tr = train::run_training(tc, labeled, model, ro);
  ExperimentResult res = evaluate(model, data, config, seed);
  res.final_loss = tr.final_loss;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (out_dir) write_metrics_csv({res}, *out_dir / "metrics.csv");
  return res;
}

void write_metrics_csv(const std::vector<ExperimentResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "mode,seed,train_acc,final_loss";
  if (!results.empty())
    for (std::size_t r : results.front().r_report.ranks) out << ",R_rank" << r;
  out << ",R_mAP,pixel_rank1,fs_pair_rank1,probe_mean_acc,probe_majority,model_checksum\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.6f", v);
    out << buf;
  };
  for (const auto& r : results) {
    out << r.mode << ',' << r.seed;
    num(r.train_accuracy);
    num(r.final_loss);
    for (double c : r.r_report.cmc) num(c);
    num(r.r_report.map);
    num(r.pixel_report.cmc.front());
    if (r.fs_pair_report) num(r.fs_pair_report->cmc.front());
    else out << ",";
    if (r.probe) {
      num(r.probe->mean_accuracy);
      num(r.probe->mean_majority);
    } else {
      out << ",,";
    }
    std::snprintf(buf, sizeof buf, ",%016llx\n", static_cast<unsigned long long>(r.model_checksum));
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace mlfn::experiment
