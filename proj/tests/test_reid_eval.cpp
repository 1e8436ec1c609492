#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mlfn/reid_eval.hpp"
#include "mlfn/rng.hpp"

using namespace mlfn;
using namespace mlfn::eval;

namespace {

Tensor<double> matrix(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>({r, c}, std::move(v));
}

// Rank of gallery item j for probe q, counted without sorting: items strictly
// closer, or equally close with a lower index, come first.
std::size_t rank_of(const Tensor<double>& dist, std::size_t q, std::size_t j) {
  const std::size_t g = dist.dim(1);
  std::size_t r = 0;
  for (std::size_t k = 0; k < g; ++k) {
    const double dk = dist[q * g + k], dj = dist[q * g + j];
    if (dk < dj || (dk == dj && k < j)) ++r;
  }
  return r;
}

double brute_cmc(const Tensor<double>& dist, const std::vector<int>& pids, const std::vector<int>& gids,
                 std::size_t rank) {
  double hits = 0;
  for (std::size_t q = 0; q < pids.size(); ++q) {
    std::size_t best = gids.size();
    for (std::size_t j = 0; j < gids.size(); ++j)
      if (gids[j] == pids[q]) best = std::min(best, rank_of(dist, q, j));
    hits += best < rank ? 1.0 : 0.0;
  }
  return hits / static_cast<double>(pids.size());
}

double brute_ap(const Tensor<double>& dist, const std::vector<int>& pids, const std::vector<int>& gids,
                std::size_t q) {
  std::vector<std::size_t> rel_ranks;
  for (std::size_t j = 0; j < gids.size(); ++j)
    if (gids[j] == pids[q]) rel_ranks.push_back(rank_of(dist, q, j));
  double total = 0;
  for (std::size_t r : rel_ranks) {
    // relevant items at or before position r
    std::size_t above = 0;
    for (std::size_t s : rel_ranks) above += s <= r;
    total += static_cast<double>(above) / static_cast<double>(r + 1);
  }
  return total / static_cast<double>(rel_ranks.size());
}

}  // namespace

TEST_CASE("feature kind names") {
  for (auto k : {FeatureKind::R, FeatureKind::FS, FeatureKind::YN})
    CHECK(parse_feature(feature_name(k)) == k);
  CHECK_THROWS_AS(parse_feature("fs"), ContractError);
}

TEST_CASE("distance matrix") {
  SUBCASE("3-4-5") {
    const auto d = distance_matrix(matrix(1, 2, {0, 0}), matrix(1, 2, {3, 4}));
    CHECK(d[0] == 5.0);
  }
  SUBCASE("identical sets: zero diagonal and symmetry") {
    Rng rng(1);
    std::vector<double> v(7 * 5);
    for (double& x : v) x = rng.normal();
    const auto f = matrix(7, 5, v);
    const auto d = distance_matrix(f, f);
    for (std::size_t i = 0; i < 7; ++i) {
      CHECK(d[i * 7 + i] == 0.0);
      for (std::size_t j = 0; j < 7; ++j) CHECK(d[i * 7 + j] == d[j * 7 + i]);
    }
  }
  SUBCASE("loop oracle") {
    Rng rng(2);
    std::vector<double> p(13 * 37), g(17 * 37);
    for (double& x : p) x = rng.normal();
    for (double& x : g) x = rng.normal();
    const auto d = distance_matrix(matrix(13, 37, p), matrix(17, 37, g));
    for (std::size_t i = 0; i < 13; ++i)
      for (std::size_t j = 0; j < 17; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 37; ++k) s += (p[i * 37 + k] - g[j * 37 + k]) * (p[i * 37 + k] - g[j * 37 + k]);
        CHECK(std::abs(d[i * 17 + j] - std::sqrt(s)) <= 1e-10);
      }
  }
  CHECK_THROWS_AS(distance_matrix(matrix(1, 2, {0, 0}), matrix(1, 3, {0, 0, 0})), ShapeError);
}

TEST_CASE("cmc hand cases") {
  const std::vector<std::size_t> ranks{1, 2, 3};
  SUBCASE("one-hot features give perfect rank 1") {
    const auto p = matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const auto g = matrix(3, 3, {0, 0, 1, 1, 0, 0, 0, 1, 0});
    const std::vector<int> pid{0, 1, 2}, gid{2, 0, 1};
    CHECK(cmc(distance_matrix(p, g), pid, gid, ranks)[0] == 1.0);
  }
  SUBCASE("correct match second") {
    const auto d = matrix(1, 3, {0.5, 0.1, 0.9});
    const std::vector<int> pid{7}, gid{7, 3, 4};
    const auto c = cmc(d, pid, gid, ranks);
    CHECK(c[0] == 0.0);
    CHECK(c[1] == 1.0);
  }
  SUBCASE("three probes") {
    // Correct gallery item sits at positions 1, 2 and 3 of the sorted rows.
    const auto d = matrix(3, 3, {0.1, 0.2, 0.3,  //
                                 0.3, 0.2, 0.1,  //
                                 0.2, 0.1, 0.3});
    const std::vector<int> pid{0, 1, 2}, gid{0, 1, 2};
    const auto c = cmc(d, pid, gid, ranks);
    CHECK(c[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(c[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(c[2] == 1.0);
  }
  SUBCASE("ties resolve by gallery index") {
    const auto d = matrix(1, 2, {0.3, 0.3});
    CHECK(cmc(d, std::vector<int>{1}, std::vector<int>{0, 1}, ranks)[0] == 0.0);
    CHECK(cmc(d, std::vector<int>{0}, std::vector<int>{0, 1}, ranks)[0] == 1.0);
  }
  SUBCASE("errors") {
    const auto d = matrix(1, 2, {0.3, 0.4});
    CHECK_THROWS_AS(cmc(d, std::vector<int>{9}, std::vector<int>{0, 1}, ranks), ContractError);
    const std::vector<std::size_t> zero{0};
    CHECK_THROWS_AS(cmc(d, std::vector<int>{0}, std::vector<int>{0, 1}, zero), ContractError);
    CHECK_THROWS_AS(cmc(d, std::vector<int>{0, 1}, std::vector<int>{0, 1}, ranks), ShapeError);
  }
}

TEST_CASE("average precision hand cases") {
  SUBCASE("relevant at ranks 1 and 3") {
    const auto d = matrix(1, 4, {0.1, 0.2, 0.3, 0.4});
    const std::vector<int> pid{5}, gid{5, 1, 5, 2};
    CHECK(std::abs(mean_average_precision(d, pid, gid) - 5.0 / 6.0) <= 1e-12);
  }
  SUBCASE("all relevant first") {
    const auto d = matrix(2, 4, {0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.2, 0.1});
    const std::vector<int> pid{0, 1}, gid{0, 0, 1, 1};
    CHECK(mean_average_precision(d, pid, gid) == 1.0);
  }
  SUBCASE("relevant last") {
    const auto d = matrix(1, 5, {0.5, 0.1, 0.2, 0.3, 0.4});
    const std::vector<int> pid{3}, gid{3, 0, 1, 2, 4};
    CHECK(mean_average_precision(d, pid, gid) == doctest::Approx(0.2).epsilon(1e-15));
  }
}

TEST_CASE("cmc and mAP agree with brute force on 1000 random 10x20 instances") {
  Rng rng(2024);
  const std::vector<std::size_t> ranks{1, 2, 3, 5, 10, 20};
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> gid(20), pid(10);
    for (int& g : gid) g = static_cast<int>(rng.below(6));
    for (int& p : pid) p = gid[rng.below(20)];
    std::vector<double> v(200);
    // Coarse values so ties are common.
    for (double& x : v) x = static_cast<double>(rng.below(8)) / 4.0;
    const auto d = matrix(10, 20, v);
    const auto c = cmc(d, pid, gid, ranks);
    for (std::size_t k = 0; k < ranks.size(); ++k) worst = std::max(worst, std::abs(c[k] - brute_cmc(d, pid, gid, ranks[k])));
    const auto ap = average_precisions(d, pid, gid);
    double mean = 0;
    for (std::size_t q = 0; q < 10; ++q) {
      worst = std::max(worst, std::abs(ap[q] - brute_ap(d, pid, gid, q)));
      mean += brute_ap(d, pid, gid, q);
    }
    worst = std::max(worst, std::abs(mean_average_precision(d, pid, gid) - mean / 10.0));
    for (std::size_t k = 1; k < ranks.size(); ++k) CHECK(c[k] >= c[k - 1]);
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("AP is one exactly when every relevant item precedes every irrelevant one") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> gid(8);
    for (int& g : gid) g = static_cast<int>(rng.below(3));
    const int pid = gid[rng.below(8)];
    std::vector<double> v(8);
    for (double& x : v) x = rng.uniform();
    const auto d = matrix(1, 8, v);
    const auto order = ranked_gallery(d, 0);
    bool seen_irrelevant = false, separated = true;
    for (std::size_t j : order) {
      if (gid[j] != pid) seen_irrelevant = true;
      else if (seen_irrelevant) separated = false;
    }
    CHECK((average_precisions(d, std::vector<int>{pid}, gid)[0] == 1.0) == separated);
  }
}

TEST_CASE("report formatting") {
  const auto d = matrix(2, 2, {0.1, 0.2, 0.2, 0.1});
  const std::vector<int> ids{0, 1};
  const std::vector<std::size_t> ranks{1, 2};
  const auto r = evaluate(d, ids, ids, ranks, "R", 0xabcULL);
  CHECK(r.cmc == std::vector<double>{1.0, 1.0});
  CHECK(r.map == 1.0);
  const auto path = std::filesystem::temp_directory_path() / "mlfn_test_report.csv";
  write_report_csv(r, path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "feature,rank1,rank2,mAP,config_digest\nR,1.000000,1.000000,1.000000,0000000000000abc\n");
  std::filesystem::remove(path);
  CHECK(format_report(r).find("CMC@1") != std::string::npos);
}

TEST_CASE("logistic regression") {
  SUBCASE("separable data is classified perfectly") {
    Rng rng(3);
    std::vector<double> x;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
      const int label = i % 2;
      x.push_back(rng.uniform() + (label ? 1.5 : 0.0));
      x.push_back(rng.normal());
      y.push_back(label);
    }
    const auto m = fit_logistic(matrix(60, 2, x), y);
    for (int i = 0; i < 60; ++i) CHECK((m.score(x.data() + 2 * i) > 0) == (y[static_cast<std::size_t>(i)] == 1));
  }
  SUBCASE("recovers a known logit model") {
    Rng rng(4);
    std::vector<double> x;
    std::vector<int> y;
    for (int i = 0; i < 4000; ++i) {
      const double a = rng.normal(), b = rng.normal();
      x.push_back(a);
      x.push_back(b);
      const double p = 1.0 / (1.0 + std::exp(-(2.0 * a - 1.0 * b + 0.5)));
      y.push_back(rng.bernoulli(p) ? 1 : 0);
    }
    LogisticOptions o;
    o.l2 = 0.0;
    const auto m = fit_logistic(matrix(4000, 2, x), y, o);
    CHECK(m.weights[0] == doctest::Approx(2.0).epsilon(0.15));
    CHECK(m.weights[1] == doctest::Approx(-1.0).epsilon(0.15));
    CHECK(m.bias == doctest::Approx(0.5).epsilon(0.25));
  }
  CHECK_THROWS_AS(fit_logistic(matrix(2, 1, {0, 1}), std::vector<int>{1, 1}), ContractError);
}

TEST_CASE("pair matcher") {
  // Features: identity k has signature with bit k set, plus small noise.
  const std::size_t ids = 6, per = 4, dim = 6;
  Rng rng(8);
  std::vector<double> f;
  std::vector<int> labels;
  for (std::size_t id = 0; id < ids; ++id)
    for (std::size_t r = 0; r < per; ++r) {
      for (std::size_t k = 0; k < dim; ++k) f.push_back((k == id ? 1.0 : 0.0) + 0.05 * rng.uniform());
      labels.push_back(static_cast<int>(id));
    }
  const auto feats = matrix(ids * per, dim, f);
  const auto pairs = sample_pairs(labels, 1);
  std::size_t pos = 0;
  for (const auto& p : pairs) {
    CHECK(p.a != p.b);
    CHECK((labels[p.a] == labels[p.b]) == p.same);
    pos += p.same;
  }
  CHECK(pos * 2 == pairs.size());
  CHECK(sample_pairs(labels, 1).size() == pairs.size());

  const auto matcher = fit_pair_matcher(feats, pairs);
  CHECK(pair_accuracy(matcher, feats, pairs) == 1.0);

  // Identical inputs score the bias alone.
  const std::vector<double> z(dim, 0.3), w(dim, 0.9);
  CHECK(matcher.score(z.data(), z.data()) == matcher.model().bias);
  CHECK(matcher.score(w.data(), w.data()) == matcher.score(z.data(), z.data()));

  // As a distance: rank 1 for every identity.
  const auto d = matcher.distance_matrix(feats, feats);
  for (std::size_t i = 0; i < ids * per; ++i) {
    const auto order = ranked_gallery(d, i);
    CHECK(labels[order[1]] == labels[i]);
  }

  std::vector<Pair> only_pos;
  for (const auto& p : pairs)
    if (p.same) only_pos.push_back(p);
  CHECK_THROWS_AS(fit_pair_matcher(feats, only_pos), ContractError);
}

TEST_CASE("attribute probe") {
  // 12 identities, two attributes: a 3-valued one and a binary one; a
  // third attribute is constant over the training identities.
  const std::size_t n_ids = 12;
  std::vector<std::vector<int>> attrs(n_ids);
  for (std::size_t id = 0; id < n_ids; ++id)
    attrs[id] = {static_cast<int>(id % 3), static_cast<int>((id / 3) % 2), id < 8 ? 0 : 1};
  const std::vector<std::string> names{"color", "carry", "rare"};

  auto make = [&](bool train, auto feature) {
    FeatureSet s;
    std::vector<double> f;
    for (std::size_t id = 0; id < n_ids; ++id) {
      if ((id < 8) != train) continue;
      for (int r = 0; r < 3; ++r) {
        const auto row = feature(id, r);
        f.insert(f.end(), row.begin(), row.end());
        s.ids.push_back(static_cast<int>(id));
        s.views.push_back(0);
      }
    }
    s.features = Tensor<double>({s.ids.size(), f.size() / s.ids.size()}, f);
    return s;
  };

  SUBCASE("one-hot attribute encodings are probed perfectly") {
    auto onehot = [&](std::size_t id, int) {
      std::vector<double> v(5, 0.0);
      v[static_cast<std::size_t>(attrs[id][0])] = 1.0;
      v[3 + static_cast<std::size_t>(attrs[id][1])] = 1.0;
      return v;
    };
    const auto r = attribute_probe(make(true, onehot), make(false, onehot), attrs, names);
    CHECK(r.accuracy[0] == 1.0);
    CHECK(r.accuracy[1] == 1.0);
    CHECK(r.skipped == std::vector<bool>{false, false, true});
    CHECK(r.warnings.size() == 1);
    CHECK(r.mean_accuracy == 1.0);
  }
  SUBCASE("random features land near the majority rate") {
    // Larger population so chance performance is measurable.
    const std::size_t big = 400;
    std::vector<std::vector<int>> battrs(big);
    Rng rng(10);
    for (auto& a : battrs) a = {rng.bernoulli(0.7) ? 1 : 0};
    auto build = [&](std::size_t lo, std::size_t hi) {
      FeatureSet s;
      std::vector<double> f;
      for (std::size_t id = lo; id < hi; ++id) {
        for (int k = 0; k < 4; ++k) f.push_back(rng.normal());
        s.ids.push_back(static_cast<int>(id));
        s.views.push_back(0);
      }
      s.features = Tensor<double>({hi - lo, 4}, f);
      return s;
    };
    const auto train = build(0, 300), test = build(300, big);
    const auto r = attribute_probe(train, test, battrs, {"bag"});
    CHECK(std::abs(r.accuracy[0] - r.majority[0]) < 0.1);
    CHECK(r.majority[0] > 0.5);
  }
}
