#include "mlfn/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mlfn/autodiff.hpp"
#include "mlfn/gradcheck.hpp"
#include "mlfn/kernels.hpp"
#include "mlfn/model.hpp"
#include "mlfn/rng.hpp"

namespace mlfn::verify {

using ad::Tape;
using ad::Var;
using TD = Tensor<double>;

namespace {

template <Real T>
Tensor<T> uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

bool all_zero(const TD& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return v == 0.0; });
}

struct KernelSuite {
  Rng rng;
  std::vector<GradCheckLine> lines;

  void check(const std::string& name, const ad::LossFn& f, Var<double>& v) {
    const auto r = ad::finite_diff_check(f, v, {1e-4, 0, 1, 1e-6});
    lines.push_back({name, r.max_rel_error, r.coords_checked, r.coords_refined, r.coords_on_kink});
  }
  Var<double> param(Shape s, double lo = -1.0, double hi = 1.0) {
    return Var<double>::parameter(uniform<double>(std::move(s), rng, lo, hi));
  }
  TD fixed(Shape s) { return uniform<double>(std::move(s), rng); }
};

}  // namespace

std::vector<GradCheckLine> kernel_gradient_suite(std::uint64_t seed) {
  KernelSuite k{Rng(seed), {}};
  {
    auto x = k.param({2, 3, 5, 4});
    auto w = k.param({4, 3, 3, 3});
    auto b = k.param({4});
    const kernels::ConvSpec spec{3, 4, {3, 3}, {2, 1}, {1, 1}};
    const auto probe = k.fixed({2, 4, 3, 4});
    auto f = [&](Tape<double>& t) { return ad::inner_product(t, ad::conv2d(t, x, w, b, spec), probe); };
    k.check("conv2d.x", f, x);
    k.check("conv2d.w", f, w);
    k.check("conv2d.b", f, b);
  }
  {
    auto x = k.param({4, 3, 2, 2});
    auto g = k.param({3}, 0.5, 1.5);
    auto b = k.param({3});
    kernels::BatchNormState<double> state{TD({3}, 0.0), TD({3}, 1.0)};
    const auto probe = k.fixed({4, 3, 2, 2});
    auto f = [&](Tape<double>& t) {
      auto y = ad::batch_norm(t, x, g, b, state, kernels::NormMode::train, {});
      return ad::inner_product(t, ad::mul(t, y, y), probe);
    };
    k.check("batch_norm.x", f, x);
    k.check("batch_norm.gamma", f, g);
    k.check("batch_norm.beta", f, b);
  }
  {
    auto x = k.param({2, 4, 3, 3});
    auto f = [&](Tape<double>& t) {
      const auto probe = TD({2, 4, 3, 3}, 0.5);
      return ad::inner_product(t, ad::relu(t, x), probe);
    };
    k.check("relu.x", f, x);
  }
  {
    auto x = k.param({2, 4, 4, 3});
    auto m = k.param({2, 4, 4, 3});
    auto s = k.param({3});
    auto w = k.param({4, 6});
    auto bias = k.param({6});
    const auto probe = k.fixed({2, 6});
    const auto probe_m = k.fixed({2, 4, 4});
    auto f = [&](Tape<double>& t) {
      auto h = ad::sigmoid(t, ad::linear(t, ad::global_avg_pool(t, x), w, bias));
      return ad::add(t, ad::inner_product(t, h, probe), ad::inner_product(t, ad::mode4_product(t, m, s), probe_m));
    };
    k.check("global_avg_pool.x", f, x);
    k.check("linear.w", f, w);
    k.check("linear.b", f, bias);
    k.check("mode4_product.m", f, m);
    k.check("mode4_product.s", f, s);
  }
  {
    auto a = k.param({3, 2});
    auto c = k.param({3, 3});
    const std::vector<int> labels{1, 4, 0};
    auto f = [&](Tape<double>& t) {
      const Var<double> parts[] = {a, c};
      return ad::softmax_cross_entropy(t, ad::concat(t, std::span<const Var<double>>(parts)), labels);
    };
    k.check("concat_cross_entropy.a", f, a);
    k.check("concat_cross_entropy.b", f, c);
  }
  {
    std::vector<Var<double>> parts;
    for (int i = 0; i < 3; ++i) parts.push_back(k.param({2, 2, 3, 3}));
    auto gates = k.param({2, 3}, 0.0, 1.0);
    const auto probe = k.fixed({2, 2, 3, 3});
    auto f = [&](Tape<double>& t) {
      return ad::inner_product(t, ad::gated_sum(t, std::span<const Var<double>>(parts), gates), probe);
    };
    k.check("gated_sum.gates", f, gates);
    for (std::size_t i = 0; i < parts.size(); ++i) k.check("gated_sum.part" + std::to_string(i), f, parts[i]);
  }
  return k.lines;
}

ModelGradReport model_gradient_check(const ModelGradOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = model::MlfnConfig::toy();
  cfg.input_height = opts.height;
  cfg.input_width = opts.width;
  model::MlfnModel<double> m(cfg, opts.seed);
  Rng rng(opts.seed + 2);
  const auto x = uniform<double>({opts.batch, cfg.input_channels, opts.height, opts.width}, rng, 0.0, 1.0);
  std::vector<int> labels(opts.batch);
  for (std::size_t i = 0; i < opts.batch; ++i) labels[i] = static_cast<int>((i * 7) % cfg.num_classes);
  ad::LossFn f = [&](Tape<double>& t) {
    return ad::softmax_cross_entropy(t, m.forward(t, x).logits, std::span<const int>(labels));
  };

  ModelGradReport rep;
  for (auto& p : m.parameters()) {
    auto v = p.var;
    const auto r = ad::finite_diff_check(f, v, {opts.step, opts.max_coords, opts.seed, opts.denom_floor, 1e-7});
    GradCheckLine line{p.name, r.max_rel_error, r.coords_checked, r.coords_refined, r.coords_on_kink};
    if (line.max_rel_error > rep.max_rel_error || rep.worst_parameter.empty()) {
      rep.max_rel_error = std::max(rep.max_rel_error, line.max_rel_error);
      rep.worst_parameter = line.name;
    }
    rep.coords += line.coords;
    rep.refined += line.refined;
    rep.on_kink += line.on_kink;
    if (opts.progress) opts.progress(line);
    rep.parameters.push_back(std::move(line));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

GateIsolation gate_isolation_check(std::uint64_t seed) {
  const auto cfg = model::MlfnConfig::toy();
  model::MlfnModel<double> m(cfg, seed);
  Rng rng(seed + 5);
  const std::size_t n = 3;
  const auto x = uniform<double>({n, cfg.input_channels, cfg.input_height, cfg.input_width}, rng, 0.0, 1.0);
  const std::vector<int> labels{1, 5, 9};
  model::ForwardOptions<double> fo;
  std::vector<std::size_t> dead(cfg.block_count());
  for (std::size_t b = 0; b < cfg.block_count(); ++b) {
    const std::size_t k = cfg.blocks[b].factors;
    dead[b] = (b + 1) % k;
    auto g = uniform<double>({n, k}, rng, 0.1, 1.0);
    for (std::size_t s = 0; s < n; ++s) g.at(s, dead[b]) = 0.0;
    fo.gate_overrides.push_back(Var<double>::constant(g));
  }
  Tape<double> tape;
  ad::backward(tape, ad::softmax_cross_entropy(tape, m.forward(tape, x, fo).logits, std::span<const int>(labels)));

  GateIsolation out;
  for (const auto& p : m.parameters()) {
    for (std::size_t b = 0; b < cfg.block_count(); ++b) {
      const std::string prefix = "block" + std::to_string(b) + ".fm";
      if (!p.name.starts_with(prefix)) continue;
      const std::size_t dot = p.name.find('.', prefix.size());
      const std::size_t unit = std::stoul(p.name.substr(prefix.size(), dot - prefix.size()));
      if (unit == dead[b]) {
        ++out.dead_tensors;
        if (!all_zero(p.var.grad())) ++out.nonzero_dead;
      } else if (!all_zero(p.var.grad())) {
        ++out.live_tensors;
      }
    }
  }
  return out;
}

double gate_linearity_check(std::uint64_t seed) {
  const auto cfg = model::MlfnConfig::toy();
  model::MlfnModel<double> m(cfg, seed);
  const std::size_t block = 2, unit = 1, n = 3;
  const auto& blk = m.blocks()[block];
  Rng rng(seed + 6);
  const auto x = Var<double>::constant(uniform<double>({n, cfg.blocks[block - 1].out_channels, 8, 4}, rng));
  const auto base = uniform<double>({n, cfg.blocks[block].factors}, rng, 0.1, 1.0);

  Tensor<double> probe;
  auto grads_at = [&](double factor) {
    m.zero_grad();
    TD g = base;
    for (std::size_t s = 0; s < n; ++s) g.at(s, unit) *= factor;
    Tape<double> tape;
    model::ForwardContext<double> ctx{tape, kernels::NormMode::train, {}};
    auto y = model::block_forward(blk, ctx, x, Var<double>::constant(g)).y;
    if (probe.size() == 0) probe = uniform<double>(y.value().shape(), rng);
    ad::backward(tape, ad::inner_product(tape, y, probe));
    std::vector<TD> out;
    const std::string prefix = "block" + std::to_string(block) + ".fm" + std::to_string(unit) + ".";
    for (const auto& p : m.parameters())
      if (p.name.starts_with(prefix)) out.push_back(p.var.grad());
    return out;
  };
  const auto g1 = grads_at(1.0);
  const auto g3 = grads_at(3.0);
  double worst = 0.0;
  for (std::size_t t = 0; t < g1.size(); ++t)
    for (std::size_t i = 0; i < g1[t].size(); ++i) {
      const double want = 3.0 * g1[t][i];
      if (want == 0.0 && g3[t][i] == 0.0) continue;
      worst = std::max(worst, std::abs(g3[t][i] - want) / std::max(std::abs(want), 1e-300));
    }
  return worst;
}

double resnext_equivalence(std::size_t inputs, std::uint64_t seed) {
  auto cfg = model::MlfnConfig::toy();
  model::MlfnModel<float> gated(cfg, seed);
  cfg.mode = model::Mode::resnext;
  model::MlfnModel<float> plain(cfg, seed + 91);
  plain.copy_matching_from(gated);
  Rng rng(seed + 7);
  const auto x = uniform<float>({inputs, cfg.input_channels, cfg.input_height, cfg.input_width}, rng, 0.0, 1.0);
  model::ForwardOptions<float> fo;
  for (const auto& b : cfg.blocks) fo.gate_overrides.push_back(Var<float>::constant(Tensor<float>({inputs, b.factors}, 1.0f)));
  Tape<float> t1(false), t2(false);
  const auto a = gated.forward(t1, x, fo).final_features.value();
  const auto b = plain.forward(t2, x).final_features.value();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
  return worst;
}

}  // namespace mlfn::verify
