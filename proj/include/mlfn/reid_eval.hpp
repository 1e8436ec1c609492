#pragma once

// Re-identification evaluation: feature extraction, L2 matching, CMC and
// mAP, a linear pair matcher on factor signatures, and linear attribute
// probes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlfn/model.hpp"
#include "mlfn/synth.hpp"
#include "mlfn/tensor.hpp"

namespace mlfn::eval {

/// R: fused representation; FS: factor signature; YN: pooled final block.
enum class FeatureKind { R, FS, YN, pixels };

std::string_view feature_name(FeatureKind kind);
/// Accepts R | FS | YN (case-sensitive) and pixels.
FeatureKind parse_feature(std::string_view name);

struct FeatureSet {
  FeatureKind kind = FeatureKind::R;
  Tensor<double> features;  // [n, d]
  std::vector<int> ids;
  std::vector<int> views;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return features.dim(1); }
};

/// Eval-mode forward over the chosen images. FS requires a model with
/// selection modules (ContractError otherwise).
template <Real T>
FeatureSet extract_features(model::MlfnModel<T>& model, const synth::ToyReIDDataset& data,
                            std::span<const std::size_t> indices, FeatureKind kind,
                            std::size_t batch = 128);

/// Flattened pixels, the nearest-neighbour baseline.
FeatureSet pixel_features(const synth::ToyReIDDataset& data, std::span<const std::size_t> indices);

/// Euclidean distances [P, G]. Throws ShapeError on a dimension mismatch.
Tensor<double> distance_matrix(const Tensor<double>& probe, const Tensor<double>& gallery);
Tensor<double> distance_matrix(const FeatureSet& probe, const FeatureSet& gallery);

/// Gallery order for one probe row: ascending distance, ties by index.
std::vector<std::size_t> ranked_gallery(const Tensor<double>& dist, std::size_t probe);

/// Fraction of probes whose first correct match is within rank r, for each
/// requested r (1-based). Throws ContractError when a probe identity is
/// absent from the gallery or a rank is 0.
std::vector<double> cmc(const Tensor<double>& dist, std::span<const int> probe_ids,
                        std::span<const int> gallery_ids, std::span<const std::size_t> ranks);

/// Average precision of every probe row.
std::vector<double> average_precisions(const Tensor<double>& dist, std::span<const int> probe_ids,
                                       std::span<const int> gallery_ids);

double mean_average_precision(const Tensor<double>& dist, std::span<const int> probe_ids,
                              std::span<const int> gallery_ids);

struct EvalReport {
  std::string feature;
  std::vector<std::size_t> ranks;
  std::vector<double> cmc;
  double map = 0.0;
  std::vector<double> average_precisions;
  std::uint64_t config_digest = 0;
};

EvalReport evaluate(const Tensor<double>& dist, std::span<const int> probe_ids,
                    std::span<const int> gallery_ids, std::span<const std::size_t> ranks,
                    std::string feature, std::uint64_t config_digest = 0);

/// `rank1,rank5,...` style header plus one row.
void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
/// One row per report; all reports must share their ranks.
void write_report_csv(std::span<const EvalReport> reports, const std::filesystem::path& path);
std::string format_report(const EvalReport& report);

// ---- logistic regression ------------------------------------------------------

struct LogisticOptions {
  /// L2 penalty on the weights (not the bias), scaled by the sample count.
  double l2 = 1e-3;
  std::size_t max_iterations = 100;
  double tolerance = 1e-10;
};

/// Binary logistic regression fitted by damped Newton iterations.
struct LogisticModel {
  std::vector<double> weights;
  double bias = 0.0;

  double score(const double* x) const;
};

/// x: [n, d]; labels 0/1. Throws ContractError when only one class occurs.
LogisticModel fit_logistic(const Tensor<double>& x, std::span<const int> labels,
                           const LogisticOptions& opts = {});

// ---- pair matcher --------------------------------------------------------------

struct Pair {
  std::size_t a;
  std::size_t b;
  bool same;
};

/// For each row, one positive (another row of its identity) and one negative
/// partner, drawn deterministically from `seed`. Rows whose identity has a
/// single row contribute only a negative.
std::vector<Pair> sample_pairs(std::span<const int> ids, std::uint64_t seed);

/// Linear scorer on |a - b|; higher means more likely the same identity.
class PairMatcher {
 public:
  explicit PairMatcher(LogisticModel model) : model_(std::move(model)) {}

  double score(const double* a, const double* b) const;
  /// Negated scores [P, G], usable wherever a distance matrix is expected.
  Tensor<double> distance_matrix(const Tensor<double>& probe, const Tensor<double>& gallery) const;
  const LogisticModel& model() const noexcept { return model_; }

 private:
  LogisticModel model_;
};

/// Throws ContractError when all pairs carry the same label.
PairMatcher fit_pair_matcher(const Tensor<double>& features, std::span<const Pair> pairs,
                             const LogisticOptions& opts = {});

/// Fraction of pairs on the correct side of score 0.
double pair_accuracy(const PairMatcher& matcher, const Tensor<double>& features,
                     std::span<const Pair> pairs);

// ---- attribute probes -----------------------------------------------------------

struct AttributeProbeResult {
  std::vector<std::string> names;
  std::vector<double> accuracy;  // held-out, per attribute
  std::vector<double> majority;  // majority-class rate on the same images
  std::vector<bool> skipped;     // constant over the training identities
  std::vector<std::string> warnings;
  double mean_accuracy = 0.0;
  double mean_majority = 0.0;
};

/// One linear classifier per attribute (one-vs-rest for more than two
/// values) on features standardized with training statistics. Features of
/// training-identity images fit the probes; test-identity images score them.
/// attributes[id][a] is the value index of attribute a for identity id.
AttributeProbeResult attribute_probe(const FeatureSet& train, const FeatureSet& test,
                                     const std::vector<std::vector<int>>& attributes,
                                     const std::vector<std::string>& names,
                                     const LogisticOptions& opts = {});

}  // namespace mlfn::eval
