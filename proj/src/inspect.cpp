#include "mlfn/inspect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "mlfn/ppm.hpp"

namespace mlfn::inspect {

template <Real T>
std::vector<Tensor<double>> selection_outputs(model::MlfnModel<T>& model,
                                              const synth::ToyReIDDataset& data,
                                              std::span<const std::size_t> indices,
                                              std::size_t batch) {
  if (!model.config().has_selection())
    throw ContractError("mode " + std::string(model::mode_name(model.config().mode)) +
                        " has no selection modules to inspect");
  if (indices.empty()) throw ContractError("selection_outputs: no images");
  const bool was_training = model.training();
  model.set_training(false);
  const std::size_t blocks = model.config().block_count();
  std::vector<std::vector<double>> rows(blocks);
  for (std::size_t lo = 0; lo < indices.size(); lo += batch) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<long>(lo),
                                         indices.begin() + static_cast<long>(std::min(lo + batch, indices.size())));
    ad::Tape<T> tape(false);
    const auto fwd = model.forward(tape, data.gather(chunk).template cast<T>());
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto v = fwd.selections[b].value().values();
      rows[b].insert(rows[b].end(), v.begin(), v.end());
    }
  }
  model.set_training(was_training);
  std::vector<Tensor<double>> out;
  for (std::size_t b = 0; b < blocks; ++b)
    out.emplace_back(Shape{indices.size(), model.config().blocks[b].factors}, std::move(rows[b]));
  return out;
}

UnitRanking rank_scores(std::size_t block, std::size_t unit, std::span<const double> scores,
                        std::span<const std::size_t> images, std::size_t m) {
  if (scores.size() != images.size()) throw ShapeError("rank_scores: scores and images differ in length");
  if (2 * m > images.size())
    throw ContractError("cannot keep " + std::to_string(m) + " top and bottom images out of " +
                        std::to_string(images.size()));
  std::vector<std::size_t> pos(images.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return images[a] < images[b];
  });
  UnitRanking r;
  r.block = block;
  r.unit = unit;
  for (std::size_t p : pos) {
    r.order.push_back(images[p]);
    r.sorted_scores.push_back(scores[p]);
  }
  r.top.assign(r.order.begin(), r.order.begin() + static_cast<long>(m));
  r.bottom.assign(r.order.end() - static_cast<long>(m), r.order.end());
  return r;
}

template <Real T>
UnitRanking rank_by_unit(model::MlfnModel<T>& model, const synth::ToyReIDDataset& data,
                         std::size_t block, std::size_t unit, std::size_t m) {
  const auto& cfg = model.config();
  if (block >= cfg.block_count())
    throw ContractError("block " + std::to_string(block) + " out of range (model has " +
                        std::to_string(cfg.block_count()) + ")");
  if (unit >= cfg.blocks[block].factors)
    throw ContractError("unit " + std::to_string(unit) + " out of range for block " +
                        std::to_string(block));
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (2 * m > all.size())
    throw ContractError("cannot keep " + std::to_string(m) + " top and bottom images out of " +
                        std::to_string(all.size()));
  const auto sel = selection_outputs(model, data, all);
  const std::size_t k = sel[block].dim(1);
  std::vector<double> scores(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) scores[i] = sel[block][i * k + unit];
  return rank_scores(block, unit, scores, all, m);
}

double association(std::span<const double> unit, std::span<const int> labels) {
  if (unit.size() != labels.size()) throw ShapeError("association: length mismatch");
  const std::set<int> values(labels.begin(), labels.end());
  if (values.size() < 2) return 0.0;
  const double n = static_cast<double>(unit.size());
  const double mu = std::accumulate(unit.begin(), unit.end(), 0.0) / n;
  double su = 0.0;
  for (double u : unit) su += (u - mu) * (u - mu);
  if (su <= 0.0) return 0.0;

  auto pearson_with = [&](int v) {
    double p = 0.0;
    for (int l : labels) p += l == v;
    p /= n;
    double cov = 0.0;
    for (std::size_t k = 0; k < unit.size(); ++k) cov += (unit[k] - mu) * ((labels[k] == v ? 1.0 : 0.0) - p);
    const double sl = n * p * (1.0 - p);
    return std::abs(cov) / std::sqrt(su * sl);
  };
  if (values.size() == 2) return pearson_with(*values.rbegin());
  double best = 0.0;
  for (int v : values) best = std::max(best, pearson_with(v));
  return best;
}

CorrelationTable correlate_units(const std::vector<Tensor<double>>& selections,
                                 const std::vector<std::vector<int>>& labels,
                                 const std::vector<std::string>& attribute_names) {
  if (labels.size() != attribute_names.size())
    throw ShapeError("correlate_units: label rows and attribute names differ");
  CorrelationTable t;
  t.attributes = attribute_names;
  for (std::size_t b = 0; b < selections.size(); ++b)
    for (std::size_t i = 0; i < selections[b].dim(1); ++i) t.units.push_back({b, i});
  if (t.units.empty() || attribute_names.empty()) throw ContractError("correlate_units: nothing to correlate");
  t.association = Tensor<double>({t.units.size(), attribute_names.size()});
  std::size_t row = 0;
  for (const auto& sel : selections) {
    const std::size_t n = sel.dim(0), k = sel.dim(1);
    std::vector<double> unit(n);
    for (std::size_t i = 0; i < k; ++i, ++row) {
      for (std::size_t j = 0; j < n; ++j) unit[j] = sel[j * k + i];
      for (std::size_t a = 0; a < attribute_names.size(); ++a) {
        if (labels[a].size() != n) throw ShapeError("correlate_units: label count differs from images");
        t.association[row * attribute_names.size() + a] = association(unit, labels[a]);
      }
    }
  }
  for (std::size_t a = 0; a < attribute_names.size(); ++a) {
    std::size_t best = 0;
    for (std::size_t u = 1; u < t.units.size(); ++u)
      if (t.association[u * attribute_names.size() + a] > t.association[best * attribute_names.size() + a])
        best = u;
    t.best_unit.push_back(best);
    t.best_block.push_back(t.units[best].block);
  }
  return t;
}

template <Real T>
CorrelationTable correlate_units(model::MlfnModel<T>& model, const synth::ToyReIDDataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto sel = selection_outputs(model, data, all);
  std::vector<std::vector<int>> labels(data.attribute_names.size(), std::vector<int>(data.size()));
  for (std::size_t a = 0; a < labels.size(); ++a)
    for (std::size_t k = 0; k < data.size(); ++k)
      labels[a][k] = data.attributes[static_cast<std::size_t>(data.ids[k])][a];
  return correlate_units(sel, labels, data.attribute_names);
}

std::size_t dominant_attribute(const CorrelationTable& table, std::size_t block) {
  const std::size_t na = table.attributes.size();
  double best = -1.0;
  std::size_t arg = 0;
  for (std::size_t u = 0; u < table.units.size(); ++u) {
    if (table.units[u].block != block) continue;
    for (std::size_t a = 0; a < na; ++a)
      if (table.association[u * na + a] > best) {
        best = table.association[u * na + a];
        arg = a;
      }
  }
  if (best < 0.0) throw ContractError("block " + std::to_string(block) + " has no units");
  return arg;
}

std::vector<float> montage(const synth::ToyReIDDataset& data, std::span<const std::size_t> images,
                           std::size_t cols, std::size_t& height, std::size_t& width) {
  if (images.empty() || cols == 0) throw ContractError("montage: nothing to tile");
  const std::size_t h = data.height, w = data.width;
  const std::size_t rows = (images.size() + cols - 1) / cols;
  height = rows * h;
  width = cols * w;
  std::vector<float> out(3 * height * width, 0.0f);
  const std::size_t per = 3 * h * w;
  for (std::size_t t = 0; t < images.size(); ++t) {
    const float* src = data.images.data() + images[t] * per;
    const std::size_t oy = (t / cols) * h, ox = (t % cols) * w;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(src + (c * h + y) * w, w, out.data() + (c * height + oy + y) * width + ox);
  }
  return out;
}

void export_report(std::span<const UnitRanking> rankings, const synth::ToyReIDDataset& data,
                   const std::filesystem::path& out_dir) {
  for (const auto& r : rankings) {
    const auto dir = out_dir / (std::to_string(r.block) + "_" + std::to_string(r.unit));
    std::filesystem::create_directories(dir);
    std::size_t h = 0, w = 0;
    const std::size_t m = r.top.size();
    if (m > 0) {
      auto px = montage(data, r.top, m, h, w);
      ppm::write(dir / "top.ppm", px.data(), h, w);
      px = montage(data, r.bottom, m, h, w);
      ppm::write(dir / "bottom.ppm", px.data(), h, w);
      std::vector<std::size_t> both = r.top;
      both.insert(both.end(), r.bottom.begin(), r.bottom.end());
      px = montage(data, both, m, h, w);
      ppm::write(dir / "montage.ppm", px.data(), h, w);
    }
    std::ofstream csv(dir / "scores.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write " + (dir / "scores.csv").string());
    csv << "rank,image,id,view,score\n";
    char buf[96];
    for (std::size_t k = 0; k < r.order.size(); ++k) {
      const std::size_t img = r.order[k];
      std::snprintf(buf, sizeof buf, "%zu,%zu,%d,%d,%.9g\n", k + 1, img, data.ids[img], data.views[img],
                    r.sorted_scores[k]);
      csv << buf;
    }
    if (!csv) throw IoError("write failed: " + (dir / "scores.csv").string());
  }
}

void write_correlations_csv(const CorrelationTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "block,unit";
  for (const auto& a : table.attributes) out << ',' << a;
  out << '\n';
  const std::size_t na = table.attributes.size();
  char buf[32];
  for (std::size_t u = 0; u < table.units.size(); ++u) {
    out << table.units[u].block << ',' << table.units[u].unit;
    for (std::size_t a = 0; a < na; ++a) {
      std::snprintf(buf, sizeof buf, ",%.6f", table.association[u * na + a]);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

#define MLFN_INSTANTIATE(T)                                                                        \
  template std::vector<Tensor<double>> selection_outputs<T>(                                       \
      model::MlfnModel<T>&, const synth::ToyReIDDataset&, std::span<const std::size_t>, std::size_t); \
  template UnitRanking rank_by_unit<T>(model::MlfnModel<T>&, const synth::ToyReIDDataset&,         \
                                       std::size_t, std::size_t, std::size_t);                     \
  template CorrelationTable correlate_units<T>(model::MlfnModel<T>&, const synth::ToyReIDDataset&);
MLFN_INSTANTIATE(float)
MLFN_INSTANTIATE(double)
#undef MLFN_INSTANTIATE

}  // namespace mlfn::inspect
