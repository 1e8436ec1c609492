#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mlfn/checkpoint.hpp"
#include "mlfn/model.hpp"
#include "support/oracles.hpp"

using namespace mlfn;
using namespace mlfn::model;
using ad::Tape;
using ad::Var;
using TD = Tensor<double>;

namespace {

template <Real T>
Tensor<T> toy_images(std::size_t n, std::uint64_t seed) {
  return test::random_tensor<T>({n, 3, 32, 16}, seed, 0.0, 1.0);
}

template <Real T>
ForwardContext<T> train_ctx(Tape<T>& tape) {
  return {tape, kernels::NormMode::train, {}};
}

bool all_zero(const TD& t) {
  for (double v : t.values())
    if (v != 0.0) return false;
  return true;
}

}  // namespace

// ---- configuration ------------------------------------------------------------

TEST_CASE("signature dimension") {
  CHECK(MlfnConfig::toy().signature_dim() == 16);
  CHECK(MlfnConfig::reid_reference().signature_dim() == 512);
  CHECK(MlfnConfig::reid_reference().block_count() == 16);
  CHECK(MlfnConfig::cifar_reference().signature_dim() == 288);
  CHECK(MlfnConfig::cifar_reference().block_count() == 9);
  for (const auto& cfg : {MlfnConfig::toy(), MlfnConfig::reid_reference(), MlfnConfig::cifar_reference()})
    CHECK(cfg.scaled_channels(2).signature_dim() == cfg.signature_dim());
}

TEST_CASE("signature width does not depend on channel widths at runtime") {
  const auto cfg = MlfnConfig::toy();
  MlfnModel<float> narrow(cfg, 1);
  MlfnModel<float> wide(cfg.scaled_channels(2), 1);
  const auto x = toy_images<float>(2, 3);
  Tape<float> t1, t2;
  CHECK(narrow.forward(t1, x).signature.shape() == Shape{2, 16});
  CHECK(wide.forward(t2, x).signature.shape() == Shape{2, 16});
}

TEST_CASE("config validation") {
  auto cfg = MlfnConfig::toy();
  cfg.blocks[1].fsm_widths[2] = 3;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = MlfnConfig::toy();
  cfg.blocks.clear();
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  CHECK_THROWS_AS(parse_mode("moe"), ContractError);
  for (Mode m : {Mode::mlfn, Mode::nofusion, Mode::resnext, Mode::resnet}) CHECK(parse_mode(mode_name(m)) == m);
}

TEST_CASE("config digest tracks every field") {
  const auto a = MlfnConfig::toy();
  auto b = a;
  CHECK(config_digest(a) == config_digest(b));
  b.blocks[2].fm_width = 9;
  CHECK(config_digest(a) != config_digest(b));
  b = a;
  b.mode = Mode::resnext;
  CHECK(config_digest(a) != config_digest(b));
}

// ---- initialization -----------------------------------------------------------

TEST_CASE("initialization is deterministic in the seed") {
  const auto cfg = MlfnConfig::toy();
  CHECK(MlfnModel<float>(cfg, 7).checksum() == MlfnModel<float>(cfg, 7).checksum());
  CHECK(MlfnModel<float>(cfg, 7).checksum() != MlfnModel<float>(cfg, 8).checksum());
}

TEST_CASE("batch-norm layers start as identity affine maps") {
  MlfnModel<double> m(MlfnConfig::toy(), 1);
  std::size_t gammas = 0;
  for (const auto& p : m.parameters()) {
    if (p.name.ends_with(".gamma")) {
      ++gammas;
      CHECK(p.var.value() == TD(p.var.shape(), 1.0));
    }
    if (p.name.ends_with(".beta") || p.name.ends_with(".b")) CHECK(all_zero(p.var.value()));
  }
  CHECK(gammas > 0);
  for (const auto& b : m.buffers()) CHECK(b.tensor() == TD(b.tensor().shape(), b.is_var ? 1.0 : 0.0));
}

TEST_CASE("conv weights follow the fan-in variance") {
  auto cfg = MlfnConfig::toy();
  MlfnModel<double> m(cfg.scaled_channels(4), 2);
  const auto& w = m.parameter("block3.fm0.spatial.w").var.value();
  double sq = 0;
  for (double v : w.values()) sq += v * v;
  const double fan_in = static_cast<double>(w.dim(1) * 9);
  CHECK(sq / static_cast<double>(w.size()) == doctest::Approx(2.0 / fan_in).epsilon(0.1));
}

TEST_CASE("parameter count matches the closed form") {
  for (Mode mode : {Mode::mlfn, Mode::nofusion, Mode::resnext, Mode::resnet}) {
    auto cfg = MlfnConfig::toy();
    cfg.mode = mode;
    std::size_t expected = 3 * 9 * cfg.stem_channels + 2 * cfg.stem_channels;
    std::size_t in = cfg.stem_channels;
    for (const auto& b : cfg.blocks) {
      if (mode == Mode::resnet) {
        expected += factor_module_params(in, holistic_width(in, b), b.out_channels);
      } else {
        expected += b.factors * factor_module_params(in, b.fm_width, b.out_channels);
      }
      if (cfg.has_selection()) {
        const auto [f0, f1, f2] = b.fsm_widths;
        expected += in * f0 + f0 + 2 * f0 + f0 * f1 + f1 + 2 * f1 + f1 * f2 + f2;
      }
      if (b.stride != 1 || in != b.out_channels) expected += in * b.out_channels + 2 * b.out_channels;
      in = b.out_channels;
    }
    expected += in * cfg.fusion_dim + cfg.fusion_dim;
    if (cfg.fuses_signature()) expected += cfg.signature_dim() * cfg.fusion_dim + cfg.fusion_dim;
    expected += cfg.fusion_dim * cfg.num_classes + cfg.num_classes;
    CAPTURE(mode_name(mode));
    CHECK(MlfnModel<float>(cfg, 1).parameter_count() == expected);
  }
}

TEST_CASE("holistic width keeps the block parameter budget") {
  const auto cfg = MlfnConfig::toy();
  std::size_t in = cfg.stem_channels;
  for (const auto& b : cfg.blocks) {
    const double target = static_cast<double>(b.factors * factor_module_params(in, b.fm_width, b.out_channels));
    const std::size_t w = holistic_width(in, b);
    const double got = static_cast<double>(factor_module_params(in, w, b.out_channels));
    CHECK(std::abs(got - target) <= std::abs(static_cast<double>(factor_module_params(in, w + 1, b.out_channels)) - target));
    if (w > 1)
      CHECK(std::abs(got - target) <= std::abs(static_cast<double>(factor_module_params(in, w - 1, b.out_channels)) - target));
    in = b.out_channels;
  }
}

TEST_CASE("mode-specific structure") {
  auto cfg = MlfnConfig::toy();
  cfg.mode = Mode::nofusion;
  MlfnModel<float> nf(cfg, 1);
  CHECK_FALSE(nf.head().project_signature.has_value());
  CHECK(nf.blocks()[0].selector.has_value());
  cfg.mode = Mode::resnext;
  MlfnModel<float> rx(cfg, 1);
  CHECK_FALSE(rx.blocks()[0].selector.has_value());
  CHECK(rx.blocks()[0].factors.size() == 4);
  cfg.mode = Mode::resnet;
  MlfnModel<float> rn(cfg, 1);
  CHECK(rn.blocks()[0].factors.size() == 1);
  Tape<float> tape;
  const auto out = rn.forward(tape, toy_images<float>(2, 1));
  CHECK_FALSE(out.signature.valid());
  CHECK(out.logits.shape() == Shape{2, 32});
}

// ---- selection module -------------------------------------------------------------

TEST_CASE("selection module matches a composition of loop oracles") {
  MlfnModel<double> m(MlfnConfig::toy(), 4);
  const auto& blk = m.blocks()[1];
  const auto x = test::random_tensor<double>({5, 8, 6, 4}, 9);
  Tape<double> tape;
  auto ctx = train_ctx(tape);
  const auto out = fsm_forward(blk, ctx, Var<double>::constant(x));

  const auto& s = *blk.selector;
  auto h = test::oracle_gap(x);
  h = test::oracle_linear(h, s.fc1.weight.value(), s.fc1.bias.value());
  h = test::oracle_relu(test::oracle_batch_norm_train(h, s.bn1.gamma.value(), s.bn1.beta.value(), 1e-5));
  h = test::oracle_linear(h, s.fc2.weight.value(), s.fc2.bias.value());
  h = test::oracle_relu(test::oracle_batch_norm_train(h, s.bn2.gamma.value(), s.bn2.beta.value(), 1e-5));
  const auto a = test::oracle_linear(h, s.fc3.weight.value(), s.fc3.bias.value());
  CHECK(max_abs_diff(out.pre_activation.value(), a) <= 1e-12);
  CHECK(max_abs_diff(out.gates.value(), test::oracle_sigmoid(a)) <= 1e-12);
  CHECK(out.gates.shape() == Shape{5, 4});
}

TEST_CASE("selection module with zero last layer outputs one half") {
  MlfnModel<double> m(MlfnConfig::toy(), 4);
  const auto& blk = m.blocks()[0];
  auto w = blk.selector->fc3.weight;
  auto b = blk.selector->fc3.bias;
  w.mutable_value().fill(0.0);
  Tape<double> tape;
  auto ctx = train_ctx(tape);
  const auto x = Var<double>::constant(test::random_tensor<double>({3, 8, 4, 4}, 1));
  CHECK(fsm_forward(blk, ctx, x).gates.value() == TD({3, 4}, 0.5));
  b.mutable_value().fill(50.0);
  for (double g : fsm_forward(blk, ctx, x).gates.value().values()) CHECK(g >= 1.0 - 1e-12);
  b.mutable_value().fill(-50.0);
  for (double g : fsm_forward(blk, ctx, x).gates.value().values()) {
    CHECK(g > 0.0);
    CHECK(g <= 1e-12);
  }
}

TEST_CASE("selection module needs two samples in train mode") {
  MlfnModel<double> m(MlfnConfig::toy(), 4);
  Tape<double> tape;
  auto ctx = train_ctx(tape);
  CHECK_THROWS_AS(fsm_forward(m.blocks()[0], ctx, Var<double>::constant(TD({1, 8, 4, 4}))),
                  DegenerateBatchError);
  ForwardContext<double> eval{tape, kernels::NormMode::eval, {}};
  CHECK(fsm_forward(m.blocks()[0], eval, Var<double>::constant(TD({1, 8, 4, 4}))).gates.shape() ==
        Shape{1, 4});
}

// ---- block ------------------------------------------------------------------------

TEST_CASE("block with zero gates reduces to the shortcut") {
  MlfnModel<double> m(MlfnConfig::toy(), 5);
  for (std::size_t n : {0u, 1u}) {
    const auto& blk = m.blocks()[n];
    const auto x = Var<double>::constant(test::random_tensor<double>({3, blk.in_channels, 8, 4}, 10 + n));
    Tape<double> tape;
    auto ctx = train_ctx(tape);
    const auto y = block_forward(blk, ctx, x, Var<double>::constant(TD({3, 4}, 0.0))).y;
    CHECK(y.value() == blk.shortcut(ctx, x).value());
  }
  CHECK_FALSE(m.blocks()[0].projection.has_value());
  CHECK(m.blocks()[1].projection.has_value());
}

TEST_CASE("block with a one-hot gate passes a single factor module") {
  MlfnModel<double> m(MlfnConfig::toy(), 6);
  const auto& blk = m.blocks()[2];
  const auto x = Var<double>::constant(test::random_tensor<double>({2, 16, 8, 4}, 11));
  for (std::size_t i = 0; i < 4; ++i) {
    TD gates({2, 4});
    gates.at(0, i) = gates.at(1, i) = 1.0;
    Tape<double> tape;
    auto ctx = train_ctx(tape);
    const auto y = block_forward(blk, ctx, x, Var<double>::constant(gates)).y.value();
    const auto expect = kernels::add(blk.factors[i].forward(ctx, x).value(), blk.shortcut(ctx, x).value());
    CHECK(max_abs_diff(y, expect) <= 1e-12);
  }
}

TEST_CASE("block output is the gate-weighted sum plus shortcut") {
  MlfnModel<double> m(MlfnConfig::toy(), 7);
  const auto& blk = m.blocks()[3];
  const auto x = Var<double>::constant(test::random_tensor<double>({3, 32, 4, 2}, 12));
  Tape<double> tape;
  auto ctx = train_ctx(tape);
  const auto out = block_forward(blk, ctx, x);
  const auto& s = out.gates.value();
  TD expect = blk.shortcut(ctx, x).value();
  for (std::size_t i = 0; i < 4; ++i) {
    const auto f = blk.factors[i].forward(ctx, x).value();
    const std::size_t per = f.size() / 3;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t j = 0; j < per; ++j) expect[n * per + j] += s.at(n, i) * f[n * per + j];
  }
  CHECK(max_abs_diff(out.y.value(), expect) <= 1e-12);
}

TEST_CASE("all-ones gates reproduce the RESNEXT forward") {
  auto cfg = MlfnConfig::toy();
  MlfnModel<float> gated(cfg, 8);
  cfg.mode = Mode::resnext;
  MlfnModel<float> plain(cfg, 99);
  CHECK(plain.copy_matching_from(gated) == plain.parameters().size() + plain.buffers().size());
  ForwardOptions<float> opts;
  for (std::size_t n = 0; n < 4; ++n) opts.gate_overrides.push_back(Var<float>::constant(Tensor<float>({4, 4}, 1.0f)));
  const auto x = toy_images<float>(4, 13);
  Tape<float> t1, t2;
  const auto a = gated.forward(t1, x, opts).final_features.value();
  const auto b = plain.forward(t2, x).final_features.value();
  CHECK(max_abs_diff(a, b) <= 1e-6f);
}

// ---- gating gradients ----------------------------------------------------------

TEST_CASE("a zero gate blocks every gradient into its factor module") {
  MlfnModel<double> m(MlfnConfig::toy(), 9);
  const auto x = toy_images<double>(3, 14);
  const std::vector<int> labels{1, 5, 9};
  Rng rng(15);
  ForwardOptions<double> opts;
  for (std::size_t n = 0; n < 4; ++n) {
    TD g({3, 4});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.uniform(0.1, 1.0);
    for (std::size_t s = 0; s < 3; ++s) g.at(s, (n + 1) % 4) = 0.0;
    opts.gate_overrides.push_back(Var<double>::constant(g));
  }
  Tape<double> tape;
  ad::backward(tape, ad::softmax_cross_entropy(tape, m.forward(tape, x, opts).logits,
                                               std::span<const int>(labels)));
  std::size_t zero_checked = 0, live = 0;
  for (const auto& p : m.parameters()) {
    for (std::size_t n = 0; n < 4; ++n) {
      const std::string dead = "block" + std::to_string(n) + ".fm" + std::to_string((n + 1) % 4) + ".";
      const std::string alive = "block" + std::to_string(n) + ".fm" + std::to_string((n + 2) % 4) + ".";
      if (p.name.starts_with(dead)) {
        CAPTURE(p.name);
        CHECK(all_zero(p.var.grad()));
        ++zero_checked;
      }
      if (p.name.starts_with(alive) && !all_zero(p.var.grad())) ++live;
    }
  }
  CHECK(zero_checked == 4 * 9);
  CHECK(live > 0);
}

TEST_CASE("factor module gradients scale linearly with the injected gate") {
  MlfnModel<double> m(MlfnConfig::toy(), 10);
  const auto& blk = m.blocks()[2];
  const auto x = Var<double>::constant(test::random_tensor<double>({3, 16, 8, 4}, 16));
  const auto probe = test::random_tensor<double>({3, 32, 4, 2}, 17);
  const auto base = test::random_tensor<double>({3, 4}, 18, 0.1, 1.0);

  auto grads_at = [&](double factor) {
    m.zero_grad();
    TD g = base;
    for (std::size_t n = 0; n < 3; ++n) g.at(n, 1) *= factor;
    Tape<double> tape;
    auto ctx = train_ctx(tape);
    ad::backward(tape, ad::inner_product(tape, block_forward(blk, ctx, x, Var<double>::constant(g)).y, probe));
    std::vector<TD> out;
    for (const auto& p : m.parameters())
      if (p.name.starts_with("block2.fm1.")) out.push_back(p.var.grad());
    return out;
  };
  const auto g1 = grads_at(1.0);
  const auto g3 = grads_at(3.0);
  double worst = 0;
  for (std::size_t t = 0; t < g1.size(); ++t)
    for (std::size_t i = 0; i < g1[t].size(); ++i)
      worst = std::max(worst, std::abs(g3[t][i] - 3.0 * g1[t][i]) / std::max(std::abs(3.0 * g1[t][i]), 1e-300));
  CHECK(worst <= 1e-10);

  // Closed form for the last BN shift: dL/dbeta[c] = sum_n S[n,1] sum_hw probe[n,c,h,w].
  const auto beta_grad = g1.back();
  for (std::size_t c = 0; c < 32; ++c) {
    double expect = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 2; ++w) expect += base.at(n, 1) * probe.at(n, c, h, w);
    CHECK(std::abs(beta_grad[c] - expect) <= 1e-12);
  }
}

// ---- head ---------------------------------------------------------------------------

TEST_CASE("fuse averages the two projections") {
  FusionHead<double> head;
  TD eye({2, 2});
  eye.at(0, 0) = eye.at(1, 1) = 1.0;
  head.project_features = {Var<double>::parameter(eye), Var<double>::parameter(TD({2}))};
  head.project_signature = LinearLayer<double>{Var<double>::parameter(eye), Var<double>::parameter(TD({2}))};
  Tape<double> tape;
  auto ctx = train_ctx(tape);
  auto r = fuse(head, ctx, Var<double>::constant(TD({1, 2}, std::vector<double>{2, 0})),
                Var<double>::constant(TD({1, 2}, std::vector<double>{0, 2})));
  CHECK(r.value() == TD({1, 2}, std::vector<double>{1, 1}));

  const auto a = test::random_tensor<double>({3, 2}, 19);
  const auto b = test::random_tensor<double>({3, 2}, 20);
  auto ab = fuse(head, ctx, Var<double>::constant(a), Var<double>::constant(b));
  auto ba = fuse(head, ctx, Var<double>::constant(b), Var<double>::constant(a));
  CHECK(ab.value() == ba.value());
  auto same = fuse(head, ctx, Var<double>::constant(a), Var<double>::constant(a));
  CHECK(max_abs_diff(same.value(), a) <= 1e-15);

  FusionHead<double> bare;
  bare.project_features = head.project_features;
  CHECK_THROWS_AS(fuse(bare, ctx, Var<double>::constant(a), Var<double>::constant(b)), ContractError);
}

TEST_CASE("factor signature concatenates gates in block order") {
  Tape<double> tape;
  std::vector<Var<double>> sel;
  for (std::size_t n = 0; n < 3; ++n) sel.push_back(Var<double>::constant(TD({2, 4}, static_cast<double>(n))));
  const auto s = factor_signature(tape, std::span<const Var<double>>(sel), 3);
  CHECK(s.shape() == Shape{2, 12});
  CHECK(s.value().at(1, 5) == 1.0);
  CHECK(s.value().at(0, 11) == 2.0);
  CHECK_THROWS_AS(factor_signature(tape, std::span<const Var<double>>(sel), 4), ContractError);
  sel[1] = Var<double>{};
  CHECK_THROWS_AS(factor_signature(tape, std::span<const Var<double>>(sel), 3), ContractError);
}

TEST_CASE("full forward shapes") {
  MlfnModel<float> m(MlfnConfig::toy(), 11);
  Tape<float> tape;
  const auto out = m.forward(tape, toy_images<float>(3, 21));
  CHECK(out.logits.shape() == Shape{3, 32});
  CHECK(out.representation.shape() == Shape{3, 64});
  CHECK(out.signature.shape() == Shape{3, 16});
  CHECK(out.final_features.shape() == Shape{3, 64, 8, 4});
  CHECK(out.block_outputs.size() == 4);
  CHECK_THROWS_AS(m.forward(tape, Tensor<float>({3, 3, 16, 16})), ShapeError);
  CHECK_THROWS_AS(m.forward(tape, toy_images<float>(1, 1)), DegenerateBatchError);
  m.set_training(false);
  CHECK(m.forward(tape, toy_images<float>(1, 1)).logits.shape() == Shape{1, 32});
}

TEST_CASE("eval-mode outputs do not depend on batch composition") {
  MlfnModel<double> m(MlfnConfig::toy(), 12);
  m.set_training(false);
  const auto x = toy_images<double>(3, 22);
  Tape<double> tape(false);
  const auto all = m.forward(tape, x).representation.value();
  TD first({1, 3, 32, 16}, std::vector<double>(x.data(), x.data() + 3 * 32 * 16));
  const auto one = m.forward(tape, first).representation.value();
  for (std::size_t j = 0; j < 64; ++j) CHECK(std::abs(all.at(0, j) - one.at(0, j)) <= 1e-12);
}

// ---- checkpoint -------------------------------------------------------------------

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = std::filesystem::temp_directory_path() / "mlfn_test_model";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ckpt";
  MlfnModel<float> a(MlfnConfig::toy(), 13);
  {
    // Move the running statistics off their initial values.
    Tape<float> tape(false);
    a.forward(tape, toy_images<float>(4, 23));
  }
  checkpoint::save_model(a, path);
  MlfnModel<float> b(MlfnConfig::toy(), 14);
  CHECK(a.checksum() != b.checksum());
  checkpoint::load_model(b, path);
  CHECK(a.checksum() == b.checksum());
  a.set_training(false);
  b.set_training(false);
  const auto x = toy_images<float>(2, 24);
  Tape<float> t1(false), t2(false);
  CHECK(a.forward(t1, x).logits.value() == b.forward(t2, x).logits.value());

  auto other = MlfnConfig::toy();
  other.fusion_dim = 32;
  MlfnModel<float> c(other, 1);
  CHECK_THROWS_AS(checkpoint::load_model(c, path), ContractError);

  const auto bytes = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, bytes - 3);
  CHECK_THROWS_AS(checkpoint::read(path), IoError);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "NOPE";
  }
  CHECK_THROWS_AS(checkpoint::read(path), IoError);
  CHECK_THROWS_AS(checkpoint::read(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint bytes are reproducible") {
  const auto dir = std::filesystem::temp_directory_path() / "mlfn_test_model_bytes";
  std::filesystem::create_directories(dir);
  checkpoint::save_model(MlfnModel<float>(MlfnConfig::toy(), 15), dir / "a");
  checkpoint::save_model(MlfnModel<float>(MlfnConfig::toy(), 15), dir / "b");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  CHECK(slurp(dir / "a") == slurp(dir / "b"));
  CHECK(slurp(dir / "a").substr(0, 4) == "MLFN");
  std::filesystem::remove_all(dir);
}
