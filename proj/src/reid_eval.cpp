#include "mlfn/reid_eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "mlfn/rng.hpp"
#include "mlfn/simd.hpp"

namespace mlfn::eval {

std::string_view feature_name(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::R: return "R";
    case FeatureKind::FS: return "FS";
    case FeatureKind::YN: return "YN";
    case FeatureKind::pixels: return "pixels";
  }
  return "?";
}

FeatureKind parse_feature(std::string_view name) {
  if (name == "R") return FeatureKind::R;
  if (name == "FS") return FeatureKind::FS;
  if (name == "YN") return FeatureKind::YN;
  if (name == "pixels") return FeatureKind::pixels;
  throw ContractError("unknown feature kind '" + std::string(name) + "' (expected R, FS, YN or pixels)");
}

template <Real T>
FeatureSet extract_features(model::MlfnModel<T>& model, const synth::ToyReIDDataset& data,
                            std::span<const std::size_t> indices, FeatureKind kind,
                            std::size_t batch) {
  if (kind == FeatureKind::pixels) return pixel_features(data, indices);
  if (kind == FeatureKind::FS && !model.config().has_selection())
    throw ContractError("FS features need a model with selection modules, not mode " +
                        std::string(model::mode_name(model.config().mode)));
  if (indices.empty()) throw ContractError("extract_features: no images");
  const bool was_training = model.training();
  model.set_training(false);
  FeatureSet out;
  out.kind = kind;
  std::vector<double> rows;
  std::size_t dim = 0;
  for (std::size_t lo = 0; lo < indices.size(); lo += batch) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<long>(lo),
                                         indices.begin() + static_cast<long>(std::min(lo + batch, indices.size())));
    ad::Tape<T> tape(false);
    const auto fwd = model.forward(tape, data.gather(chunk).template cast<T>());
    const Tensor<T>& f = kind == FeatureKind::R    ? fwd.representation.value()
                         : kind == FeatureKind::FS ? fwd.signature.value()
                                                   : fwd.pooled.value();
    dim = f.dim(1);
    rows.insert(rows.end(), f.values().begin(), f.values().end());
  }
  model.set_training(was_training);
  out.features = Tensor<double>({indices.size(), dim}, std::move(rows));
  for (std::size_t i : indices) {
    out.ids.push_back(data.ids[i]);
    out.views.push_back(data.views[i]);
  }
  return out;
}

FeatureSet pixel_features(const synth::ToyReIDDataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("pixel_features: no images");
  const std::size_t per = data.images.size() / data.size();
  FeatureSet out;
  out.kind = FeatureKind::pixels;
  std::vector<double> rows;
  rows.reserve(indices.size() * per);
  for (std::size_t i : indices) {
    const float* p = data.images.data() + i * per;
    rows.insert(rows.end(), p, p + per);
    out.ids.push_back(data.ids[i]);
    out.views.push_back(data.views[i]);
  }
  out.features = Tensor<double>({indices.size(), per}, std::move(rows));
  return out;
}

// ---- matching -------------------------------------------------------------------

Tensor<double> distance_matrix(const Tensor<double>& probe, const Tensor<double>& gallery) {
  if (probe.rank() != 2 || gallery.rank() != 2 || probe.dim(1) != gallery.dim(1))
    throw ShapeError("distance_matrix: probe " + shape_str(probe.shape()) + " vs gallery " +
                     shape_str(gallery.shape()));
  const std::size_t p = probe.dim(0), g = gallery.dim(0), d = probe.dim(1);
  Tensor<double> out({p, g});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < g; ++j)
      out[i * g + j] = std::sqrt(simd::squared_distance(probe.data() + i * d, gallery.data() + j * d, d));
  return out;
}

Tensor<double> distance_matrix(const FeatureSet& probe, const FeatureSet& gallery) {
  return distance_matrix(probe.features, gallery.features);
}

std::vector<std::size_t> ranked_gallery(const Tensor<double>& dist, std::size_t probe) {
  const std::size_t g = dist.dim(1);
  const double* row = dist.data() + probe * g;
  std::vector<std::size_t> order(g);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
  return order;
}

namespace {

void check_labels(const Tensor<double>& dist, std::span<const int> probe_ids,
                  std::span<const int> gallery_ids) {
  if (dist.rank() != 2 || dist.dim(0) != probe_ids.size() || dist.dim(1) != gallery_ids.size())
    throw ShapeError("distance matrix " + shape_str(dist.shape()) + " vs " +
                     std::to_string(probe_ids.size()) + " probes, " +
                     std::to_string(gallery_ids.size()) + " gallery items");
  for (int id : probe_ids)
    if (std::find(gallery_ids.begin(), gallery_ids.end(), id) == gallery_ids.end())
      throw ContractError("probe identity " + std::to_string(id) + " has no gallery match");
}

}  // namespace

std::vector<double> cmc(const Tensor<double>& dist, std::span<const int> probe_ids,
                        std::span<const int> gallery_ids, std::span<const std::size_t> ranks) {
  check_labels(dist, probe_ids, gallery_ids);
  for (std::size_t r : ranks)
    if (r == 0) throw ContractError("CMC ranks are 1-based");
  std::vector<double> hits(ranks.size(), 0.0);
  for (std::size_t q = 0; q < probe_ids.size(); ++q) {
    const auto order = ranked_gallery(dist, q);
    std::size_t first = 0;
    while (gallery_ids[order[first]] != probe_ids[q]) ++first;
    for (std::size_t k = 0; k < ranks.size(); ++k)
      if (first < ranks[k]) hits[k] += 1.0;
  }
  for (double& h : hits) h /= static_cast<double>(probe_ids.size());
  return hits;
}

std::vector<double> average_precisions(const Tensor<double>& dist, std::span<const int> probe_ids,
                                       std::span<const int> gallery_ids) {
  check_labels(dist, probe_ids, gallery_ids);
  std::vector<double> ap(probe_ids.size());
  for (std::size_t q = 0; q < probe_ids.size(); ++q) {
    const auto order = ranked_gallery(dist, q);
    double found = 0.0, total = 0.0;
    for (std::size_t pos = 0; pos < order.size(); ++pos)
      if (gallery_ids[order[pos]] == probe_ids[q]) {
        found += 1.0;
        total += found / static_cast<double>(pos + 1);
      }
    ap[q] = total / found;
  }
  return ap;
}

double mean_average_precision(const Tensor<double>& dist, std::span<const int> probe_ids,
                              std::span<const int> gallery_ids) {
  const auto ap = average_precisions(dist, probe_ids, gallery_ids);
  return std::accumulate(ap.begin(), ap.end(), 0.0) / static_cast<double>(ap.size());
}

EvalReport evaluate(const Tensor<double>& dist, std::span<const int> probe_ids,
                    std::span<const int> gallery_ids, std::span<const std::size_t> ranks,
                    std::string feature, std::uint64_t config_digest) {
  EvalReport r;
  r.feature = std::move(feature);
  r.ranks.assign(ranks.begin(), ranks.end());
  r.cmc = cmc(dist, probe_ids, gallery_ids, ranks);
  r.average_precisions = average_precisions(dist, probe_ids, gallery_ids);
  r.map = std::accumulate(r.average_precisions.begin(), r.average_precisions.end(), 0.0) /
          static_cast<double>(r.average_precisions.size());
  r.config_digest = config_digest;
  return r;
}

void write_report_csv(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  if (reports.empty()) throw ContractError("write_report_csv: no reports");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "feature";
  for (std::size_t r : reports.front().ranks) out << ",rank" << r;
  out << ",mAP,config_digest\n";
  char buf[64];
  for (const auto& report : reports) {
    if (report.ranks != reports.front().ranks) throw ContractError("write_report_csv: reports use different ranks");
    out << report.feature;
    for (double v : report.cmc) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.6f,%016llx\n", report.map,
                  static_cast<unsigned long long>(report.config_digest));
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  write_report_csv(std::span<const EvalReport>(&report, 1), path);
}

std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  char buf[64];
  os << "features: " << report.feature << '\n';
  for (std::size_t k = 0; k < report.ranks.size(); ++k) {
    std::snprintf(buf, sizeof buf, "  CMC@%-4zu %6.2f%%\n", report.ranks[k], 100.0 * report.cmc[k]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "  mAP      %6.2f%%\n", 100.0 * report.map);
  os << buf;
  return os.str();
}

// ---- logistic regression ---------------------------------------------------------

double LogisticModel::score(const double* x) const {
  double s = bias;
  for (std::size_t k = 0; k < weights.size(); ++k) s += weights[k] * x[k];
  return s;
}

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

LogisticModel fit_logistic(const Tensor<double>& x, std::span<const int> labels,
                           const LogisticOptions& opts) {
  if (x.rank() != 2 || x.dim(0) != labels.size())
    throw ShapeError("fit_logistic: features " + shape_str(x.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError("fit_logistic: labels must be 0 or 1");
    positives += static_cast<std::size_t>(y);
  }
  if (positives == 0 || positives == n)
    throw ContractError("fit_logistic: training labels contain a single class");

  // Column d is the bias; it is not penalised.
  Eigen::MatrixXd a(n, d + 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) a(static_cast<long>(i), static_cast<long>(k)) = x[i * d + k];
    a(static_cast<long>(i), static_cast<long>(d)) = 1.0;
  }
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) y(static_cast<long>(i)) = labels[i];
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(static_cast<long>(d + 1), opts.l2 * static_cast<double>(n));
  penalty(static_cast<long>(d)) = 0.0;

  auto objective = [&](const Eigen::VectorXd& w) {
    const Eigen::VectorXd z = a * w;
    double f = 0.0;
    for (long i = 0; i < z.size(); ++i) f += softplus(z(i)) - y(i) * z(i);
    return f + 0.5 * w.dot(penalty.cwiseProduct(w));
  };

  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<long>(d + 1));
  double f = objective(w);
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    const Eigen::VectorXd z = a * w;
    Eigen::VectorXd p(z.size()), s(z.size());
    for (long i = 0; i < z.size(); ++i) {
      p(i) = sigmoid(z(i));
      s(i) = std::max(p(i) * (1.0 - p(i)), 1e-12);
    }
    const Eigen::VectorXd grad = a.transpose() * (p - y) + penalty.cwiseProduct(w);
    Eigen::MatrixXd h = a.transpose() * s.asDiagonal() * a;
    h.diagonal() += penalty;
    h.diagonal().array() += 1e-10;
    const Eigen::VectorXd delta = h.ldlt().solve(grad);
    double step = 1.0, next = objective(w - delta);
    while (next > f && step > 1e-8) {
      step *= 0.5;
      next = objective(w - step * delta);
    }
    if (next > f) break;
    w -= step * delta;
    const double change = f - next;
    f = next;
    if (change <= opts.tolerance * std::max(1.0, std::abs(f))) break;
  }
  LogisticModel m;
  m.weights.assign(w.data(), w.data() + d);
  m.bias = w(static_cast<long>(d));
  return m;
}

// ---- pair matcher ------------------------------------------------------------------

std::vector<Pair> sample_pairs(std::span<const int> ids, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < ids.size(); ++i) by_id[ids[i]].push_back(i);
  if (by_id.size() < 2) throw ContractError("sample_pairs: need at least two identities");
  Rng rng(derive_seed(seed, {0x7061697273ULL}));
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& same = by_id[ids[i]];
    if (same.size() > 1) {
      std::size_t j = same[rng.below(same.size() - 1)];
      if (j == i) j = same.back();
      pairs.push_back({i, j, true});
    }
    std::size_t j;
    do j = rng.below(ids.size());
    while (ids[j] == ids[i]);
    pairs.push_back({i, j, false});
  }
  return pairs;
}

double PairMatcher::score(const double* a, const double* b) const {
  const std::size_t d = model_.weights.size();
  double s = model_.bias;
  for (std::size_t k = 0; k < d; ++k) s += model_.weights[k] * std::abs(a[k] - b[k]);
  return s;
}

Tensor<double> PairMatcher::distance_matrix(const Tensor<double>& probe, const Tensor<double>& gallery) const {
  const std::size_t d = model_.weights.size();
  if (probe.rank() != 2 || gallery.rank() != 2 || probe.dim(1) != d || gallery.dim(1) != d)
    throw ShapeError("pair matcher expects " + std::to_string(d) + "-dimensional features");
  const std::size_t p = probe.dim(0), g = gallery.dim(0);
  Tensor<double> out({p, g});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < g; ++j) out[i * g + j] = -score(probe.data() + i * d, gallery.data() + j * d);
  return out;
}

PairMatcher fit_pair_matcher(const Tensor<double>& features, std::span<const Pair> pairs,
                             const LogisticOptions& opts) {
  if (pairs.empty()) throw ContractError("fit_pair_matcher: no pairs");
  const std::size_t d = features.dim(1);
  std::vector<double> diffs(pairs.size() * d);
  std::vector<int> labels(pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const double* a = features.data() + pairs[k].a * d;
    const double* b = features.data() + pairs[k].b * d;
    for (std::size_t c = 0; c < d; ++c) diffs[k * d + c] = std::abs(a[c] - b[c]);
    labels[k] = pairs[k].same ? 1 : 0;
  }
  return PairMatcher(fit_logistic(Tensor<double>({pairs.size(), d}, std::move(diffs)), labels, opts));
}

double pair_accuracy(const PairMatcher& matcher, const Tensor<double>& features,
                     std::span<const Pair> pairs) {
  const std::size_t d = features.dim(1);
  std::size_t ok = 0;
  for (const Pair& p : pairs) {
    const double s = matcher.score(features.data() + p.a * d, features.data() + p.b * d);
    if ((s > 0) == p.same) ++ok;
  }
  return pairs.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(pairs.size());
}

// ---- attribute probes ------------------------------------------------------------------

AttributeProbeResult attribute_probe(const FeatureSet& train, const FeatureSet& test,
                                     const std::vector<std::vector<int>>& attributes,
                                     const std::vector<std::string>& names,
                                     const LogisticOptions& opts) {
  if (train.dim() != test.dim())
    throw ShapeError("attribute_probe: train and test feature widths differ");
  const std::size_t d = train.dim(), n_train = train.size(), n_test = test.size();

  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += train.features[i * d + k];
  for (double& m : mean) m /= static_cast<double>(n_train);
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t k = 0; k < d; ++k) sd[k] += std::pow(train.features[i * d + k] - mean[k], 2);
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(n_train));
    if (s < 1e-12) s = 1.0;
  }
  auto standardize = [&](const Tensor<double>& f) {
    Tensor<double> out = f;
    for (std::size_t i = 0; i < out.dim(0); ++i)
      for (std::size_t k = 0; k < d; ++k) out[i * d + k] = (out[i * d + k] - mean[k]) / sd[k];
    return out;
  };
  const Tensor<double> xtr = standardize(train.features), xte = standardize(test.features);

  AttributeProbeResult res;
  std::size_t scored = 0;
  for (std::size_t a = 0; a < names.size(); ++a) {
    auto value_of = [&](int id) {
      if (id < 0 || static_cast<std::size_t>(id) >= attributes.size())
        throw ContractError("attribute_probe: identity " + std::to_string(id) + " has no attribute row");
      return attributes[static_cast<std::size_t>(id)][a];
    };
    std::vector<int> ytr(n_train), yte(n_test);
    std::map<int, std::size_t> counts;
    for (std::size_t i = 0; i < n_train; ++i) ++counts[ytr[i] = value_of(train.ids[i])];
    for (std::size_t i = 0; i < n_test; ++i) yte[i] = value_of(test.ids[i]);

    res.names.push_back(names[a]);
    if (counts.size() < 2) {
      res.warnings.push_back("attribute '" + names[a] + "' is constant over the training identities; skipped");
      res.accuracy.push_back(0.0);
      res.majority.push_back(0.0);
      res.skipped.push_back(true);
      continue;
    }
    int majority = counts.begin()->first;
    for (const auto& [v, c] : counts)
      if (c > counts[majority]) majority = v;

    std::vector<int> classes;
    for (const auto& kv : counts) classes.push_back(kv.first);
    std::vector<LogisticModel> models;
    if (classes.size() == 2) {
      std::vector<int> y(n_train);
      for (std::size_t i = 0; i < n_train; ++i) y[i] = ytr[i] == classes[1];
      models.push_back(fit_logistic(xtr, y, opts));
    } else {
      for (int c : classes) {
        std::vector<int> y(n_train);
        for (std::size_t i = 0; i < n_train; ++i) y[i] = ytr[i] == c;
        models.push_back(fit_logistic(xtr, y, opts));
      }
    }
    std::size_t ok = 0, ok_majority = 0;
    for (std::size_t i = 0; i < n_test; ++i) {
      const double* x = xte.data() + i * d;
      int pred;
      if (models.size() == 1) {
        pred = models[0].score(x) > 0 ? classes[1] : classes[0];
      } else {
        std::size_t best = 0;
        for (std::size_t c = 1; c < models.size(); ++c)
          if (models[c].score(x) > models[best].score(x)) best = c;
        pred = classes[best];
      }
      ok += pred == yte[i];
      ok_majority += majority == yte[i];
    }
    res.accuracy.push_back(static_cast<double>(ok) / static_cast<double>(n_test));
    res.majority.push_back(static_cast<double>(ok_majority) / static_cast<double>(n_test));
    res.skipped.push_back(false);
    res.mean_accuracy += res.accuracy.back();
    res.mean_majority += res.majority.back();
    ++scored;
  }
  if (scored > 0) {
    res.mean_accuracy /= static_cast<double>(scored);
    res.mean_majority /= static_cast<double>(scored);
  }
  return res;
}

template FeatureSet extract_features<float>(model::MlfnModel<float>&, const synth::ToyReIDDataset&,
                                            std::span<const std::size_t>, FeatureKind, std::size_t);
template FeatureSet extract_features<double>(model::MlfnModel<double>&, const synth::ToyReIDDataset&,
                                             std::span<const std::size_t>, FeatureKind, std::size_t);

}  // namespace mlfn::eval
