#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include "mlfn/inspect.hpp"
#include "mlfn/rng.hpp"

using namespace mlfn;
using namespace mlfn::inspect;
namespace fs = std::filesystem;

namespace {

synth::ToyReIDDataset small_data() {
  synth::GenerateOptions o;
  o.n_ids = 12;
  o.n_train = 8;
  o.imgs_per_id_per_view = 2;
  o.seed = 3;
  return synth::generate_dataset(synth::FactorSpec::standard(), o);
}

model::MlfnConfig config_for(const synth::ToyReIDDataset& d) {
  auto cfg = model::MlfnConfig::toy(d.train_ids.size());
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mlfn_inspect_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("constant gates rank images in index order") {
  const auto data = small_data();
  model::MlfnModel<float> m(config_for(data), 1);
  for (const auto& blk : m.blocks()) {
    auto w = blk.selector->fc3.weight;
    auto b = blk.selector->fc3.bias;
    w.mutable_value().fill(0.0f);
    b.mutable_value().fill(0.0f);
  }
  const auto r = rank_by_unit(m, data, 1, 2, 5);
  std::vector<std::size_t> expect(data.size());
  std::iota(expect.begin(), expect.end(), std::size_t{0});
  CHECK(r.order == expect);
  for (double s : r.sorted_scores) CHECK(s == 0.5);
}

TEST_CASE("twenty top and twenty bottom images") {
  const auto data = small_data();
  model::MlfnModel<float> m(config_for(data), 2);
  const auto r = rank_by_unit(m, data, 0, 1, 20);
  CHECK(r.top.size() == 20);
  CHECK(r.bottom.size() == 20);
  std::set<std::size_t> top(r.top.begin(), r.top.end()), bottom(r.bottom.begin(), r.bottom.end());
  std::vector<std::size_t> common;
  std::set_intersection(top.begin(), top.end(), bottom.begin(), bottom.end(), std::back_inserter(common));
  CHECK(common.empty());
  CHECK(std::is_sorted(r.sorted_scores.rbegin(), r.sorted_scores.rend()));
  CHECK(r.order.size() == data.size());
}

TEST_CASE("rank_scores sorts descending with ties by index") {
  const std::vector<double> scores{0.2, 0.9, 0.5, 0.9, 0.1};
  const std::vector<std::size_t> images{10, 11, 12, 13, 14};
  const auto r = rank_scores(0, 0, scores, images, 2);
  CHECK(r.order == std::vector<std::size_t>{11, 13, 12, 10, 14});
  CHECK(r.top == std::vector<std::size_t>{11, 13});
  CHECK(r.bottom == std::vector<std::size_t>{10, 14});
  CHECK_THROWS_AS(rank_scores(0, 0, scores, images, 3), ContractError);
}

TEST_CASE("gate values do not depend on batch composition") {
  const auto data = small_data();
  model::MlfnModel<float> m(config_for(data), 3);
  std::vector<std::size_t> fwd(data.size()), rev;
  std::iota(fwd.begin(), fwd.end(), std::size_t{0});
  rev.assign(fwd.rbegin(), fwd.rend());
  const auto a = selection_outputs(m, data, fwd, 7);
  const auto b = selection_outputs(m, data, rev, 16);
  CHECK(m.training());
  for (std::size_t blk = 0; blk < a.size(); ++blk) {
    const std::size_t k = a[blk].dim(1), n = data.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) CHECK(a[blk][i * k + j] == b[blk][(n - 1 - i) * k + j]);
  }
}

TEST_CASE("range and mode errors") {
  const auto data = small_data();
  model::MlfnModel<float> m(config_for(data), 4);
  CHECK_THROWS_AS(rank_by_unit(m, data, 4, 0, 5), ContractError);
  CHECK_THROWS_AS(rank_by_unit(m, data, 0, 4, 5), ContractError);
  CHECK_THROWS_AS(rank_by_unit(m, data, 0, 0, data.size() / 2 + 1), ContractError);
  auto cfg = config_for(data);
  cfg.mode = model::Mode::resnext;
  model::MlfnModel<float> plain(cfg, 4);
  CHECK_THROWS_AS(rank_by_unit(plain, data, 0, 0, 5), ContractError);
}

TEST_CASE("association") {
  const std::vector<int> labels{0, 1, 1, 0, 1, 0};
  std::vector<double> unit(labels.begin(), labels.end());
  CHECK(association(unit, labels) == doctest::Approx(1.0).epsilon(1e-12));
  for (double& u : unit) u = 3.0 - 2.0 * u;
  CHECK(association(unit, labels) == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<int> multi{0, 1, 2, 2, 1, 0, 2};
  std::vector<double> ind;
  for (int l : multi) ind.push_back(l == 2);
  CHECK(association(ind, multi) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK(association(std::vector<double>(6, 0.3), labels) == 0.0);
  CHECK(association(unit, std::vector<int>(6, 1)) == 0.0);
  CHECK_THROWS_AS(association(unit, multi), ShapeError);

  Rng rng(11);
  for (std::size_t n : {200, 400, 1000}) {
    std::vector<double> u(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = rng.uniform();
      l[i] = static_cast<int>(i % 2);
    }
    CHECK(association(u, l) < 0.2);
  }
}

TEST_CASE("correlation table picks the matching unit") {
  const std::size_t n = 8;
  const std::vector<std::vector<int>> labels{{0, 0, 1, 1, 0, 0, 1, 1}, {0, 1, 0, 1, 0, 1, 0, 1}};
  Tensor<double> b0({n, 2}), b1({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    b0[i * 2 + 0] = 0.5;
    b0[i * 2 + 1] = labels[1][i] ? 0.9 : 0.1;
    b1[i] = labels[0][i] ? 0.2 : 0.7;
  }
  const auto t = correlate_units({b0, b1}, labels, {"color", "carry"});
  CHECK(t.units.size() == 3);
  CHECK(t.best_unit == std::vector<std::size_t>{2, 1});
  CHECK(t.best_block == std::vector<std::size_t>{1, 0});
  CHECK(t.association[0] == 0.0);
  CHECK(dominant_attribute(t, 0) == 1);
  CHECK(dominant_attribute(t, 1) == 0);
  CHECK_THROWS_AS(dominant_attribute(t, 2), ContractError);
  CHECK_THROWS_AS(correlate_units({b0}, labels, {"color"}), ShapeError);
}

TEST_CASE("montage tiles forty images in two rows") {
  const auto data = small_data();
  std::vector<std::size_t> imgs(40);
  std::iota(imgs.begin(), imgs.end(), std::size_t{3});
  std::size_t h = 0, w = 0;
  const auto px = montage(data, imgs, 20, h, w);
  CHECK(h == 2 * data.height);
  CHECK(w == 20 * data.width);
  CHECK(px.size() == 3 * h * w);
  // tile 27 sits in row 1, column 7
  const auto img = data.image(imgs[27]);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < data.height; ++y)
      for (std::size_t x = 0; x < data.width; ++x)
        CHECK(px[(c * h + data.height + y) * w + 7 * data.width + x] == img.at(c, y, x));
  CHECK_THROWS_AS(montage(data, {}, 4, h, w), ContractError);
}

TEST_CASE("export writes nothing for an empty list") {
  const auto data = small_data();
  const auto dir = scratch("empty");
  export_report({}, data, dir);
  CHECK(!fs::exists(dir));
}

TEST_CASE("export layout and bit-identical re-export") {
  const auto data = small_data();
  model::MlfnModel<float> m(config_for(data), 5);
  const std::vector<UnitRanking> rankings{rank_by_unit(m, data, 2, 3, 20)};
  const auto a = scratch("a"), b = scratch("b");
  export_report(rankings, data, a);
  export_report(rankings, data, b);
  for (const char* f : {"top.ppm", "bottom.ppm", "montage.ppm", "scores.csv"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / "2_3" / f));
    CHECK(slurp(a / "2_3" / f) == slurp(b / "2_3" / f));
  }
  const auto csv = slurp(a / "2_3" / "scores.csv");
  CHECK(csv.starts_with("rank,image,id,view,score\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(data.size() + 1));
  fs::remove_all(a);
  fs::remove_all(b);
}
