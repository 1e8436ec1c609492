#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mlfn/autodiff.hpp"
#include "mlfn/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace mlfn;
using ad::Tape;
using ad::Var;
using TD = Tensor<double>;

TEST_CASE("gradient of a sum is all ones") {
  auto x = Var<double>::parameter(test::random_tensor<double>({3, 4}, 1));
  Tape<double> tape;
  ad::backward(tape, ad::sum(tape, x));
  CHECK(x.grad() == TD({3, 4}, 1.0));
}

TEST_CASE("gradient of x*x at 3 is 6") {
  auto x = Var<double>::parameter(TD::scalar(3.0));
  Tape<double> tape;
  ad::backward(tape, ad::mul(tape, x, x));
  CHECK(x.grad().item() == 6.0);
}

TEST_CASE("gradient of sigmoid(2x) at 0 is 0.5") {
  auto x = Var<double>::parameter(TD::scalar(0.0));
  Tape<double> tape;
  ad::backward(tape, ad::sigmoid(tape, ad::scale(tape, x, 2.0)));
  CHECK(x.grad().item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("fan-out accumulates both paths") {
  auto x = Var<double>::parameter(test::random_tensor<double>({5}, 2));
  Tape<double> tape;
  ad::backward(tape, ad::sum(tape, ad::add(tape, x, x)));
  CHECK(x.grad() == TD({5}, 2.0));
}

TEST_CASE("gradients accumulate across sweeps until zero_grad") {
  auto x = Var<double>::parameter(TD({2}, 1.0));
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    ad::backward(tape, ad::sum(tape, x));
  }
  CHECK(x.grad() == TD({2}, 2.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
  CHECK(x.grad() == TD({2}, 0.0));
}

TEST_CASE("mode4 product gradients") {
  const auto mv = test::random_tensor<double>({2, 3, 2, 4}, 3);
  const auto sv = test::random_tensor<double>({4}, 4);
  auto m = Var<double>::parameter(mv);
  auto s = Var<double>::parameter(sv);
  Tape<double> tape;
  ad::backward(tape, ad::sum(tape, ad::mode4_product(tape, m, s)));
  for (std::size_t i = 0; i < 4; ++i) {
    double expected = 0;
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t w = 0; w < 3; ++w)
        for (std::size_t c = 0; c < 2; ++c) {
          expected += mv.at(h, w, c, i);
          CHECK(m.grad().at(h, w, c, i) == sv[i]);
        }
    CHECK(std::abs(s.grad()[i] - expected) <= 1e-12);
  }
}

TEST_CASE("backward is linear in the loss") {
  const auto probe = test::random_tensor<double>({3, 3}, 5);
  auto x = Var<double>::parameter(test::random_tensor<double>({3, 3}, 6));
  auto run = [&](double factor) {
    x.zero_grad();
    Tape<double> tape;
    auto h = ad::sigmoid(tape, ad::mul(tape, x, x));
    ad::backward(tape, ad::scale(tape, ad::inner_product(tape, h, probe), factor));
    return x.grad();
  };
  const auto g1 = run(1.0);
  const auto g3 = run(-3.0);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g3[i] + 3.0 * g1[i]) <= 1e-12);
}

TEST_CASE("repeated evaluation is bit-identical") {
  auto x = Var<double>::parameter(test::random_tensor<double>({2, 3, 4, 4}, 7));
  auto w = Var<double>::parameter(test::random_tensor<double>({2, 3, 3, 3}, 8));
  const kernels::ConvSpec spec{3, 2, {3, 3}, {1, 1}, {1, 1}};
  auto run = [&] {
    w.zero_grad();
    Tape<double> tape;
    auto loss = ad::sum(tape, ad::relu(tape, ad::conv2d(tape, x, w, Var<double>{}, spec)));
    ad::backward(tape, loss);
    return std::pair{loss.value().item(), w.grad()};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("backward contract errors") {
  auto x = Var<double>::parameter(TD({2}, 1.0));
  Tape<double> tape;
  CHECK_THROWS_AS(ad::backward(tape, ad::relu(tape, x)), ContractError);
  auto c = Var<double>::constant(TD({2}, 1.0));
  Tape<double> tape2;
  CHECK_THROWS_AS(ad::backward(tape2, ad::sum(tape2, c)), ContractError);
}

TEST_CASE("a non-recording tape keeps no entries") {
  auto x = Var<double>::parameter(TD({2}, 1.0));
  Tape<double> tape(false);
  auto y = ad::sum(tape, ad::mul(tape, x, x));
  CHECK(tape.entries().empty());
  CHECK(y.value().item() == 2.0);
}

TEST_CASE("finite_diff_check detects a nondeterministic loss") {
  auto x = Var<double>::parameter(TD({2}, 1.0));
  int calls = 0;
  ad::LossFn f = [&](Tape<double>& t) {
    ++calls;
    return ad::scale(t, ad::sum(t, x), static_cast<double>(calls));
  };
  CHECK_THROWS_AS(ad::finite_diff_check(f, x, {}), DeterminismError);
}

TEST_CASE("finite_diff_check reports agreement on a smooth composite") {
  auto x = Var<double>::parameter(test::random_tensor<double>({4, 3}, 9));
  auto w = Var<double>::parameter(test::random_tensor<double>({3, 5}, 10));
  auto b = Var<double>::parameter(test::random_tensor<double>({5}, 11));
  const std::vector<int> labels{0, 2, 4, 1};
  ad::LossFn f = [&](Tape<double>& t) {
    return ad::softmax_cross_entropy(t, ad::sigmoid(t, ad::linear(t, x, w, b)), labels);
  };
  const auto r = ad::finite_diff_check(f, w, {});
  CHECK(r.coords_checked == 15);
  CHECK(r.max_rel_error <= 1e-6);
  const auto sampled = ad::finite_diff_check(f, x, {1e-4, 5, 3, 1e-6});
  CHECK(sampled.coords_checked == 5);
  CHECK(sampled.max_rel_error <= 1e-6);
}

TEST_CASE("relative_error") {
  CHECK(ad::relative_error(1.0, 1.0, 1e-6) == 0.0);
  CHECK(ad::relative_error(2.0, 1.0, 1e-6) == 0.5);
  CHECK(ad::relative_error(0.0, 1e-9, 1e-6) == doctest::Approx(1e-3));
}
