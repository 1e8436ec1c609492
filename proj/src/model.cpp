#include "mlfn/model.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mlfn/hash.hpp"

namespace mlfn::model {

std::string_view mode_name(Mode mode) {
  switch (mode) {
    case Mode::mlfn: return "mlfn";
    case Mode::nofusion: return "nofusion";
    case Mode::resnext: return "resnext";
    case Mode::resnet: return "resnet";
  }
  return "mlfn";
}

Mode parse_mode(std::string_view name) {
  if (name == "mlfn") return Mode::mlfn;
  if (name == "nofusion") return Mode::nofusion;
  if (name == "resnext") return Mode::resnext;
  if (name == "resnet") return Mode::resnet;
  throw ContractError("unknown mode '" + std::string(name) +
                      "' (expected mlfn|nofusion|resnext|resnet)");
}

// ---- configuration ----------------------------------------------------------

MlfnConfig MlfnConfig::toy(std::size_t num_classes) {
  MlfnConfig cfg;
  cfg.num_classes = num_classes;
  const std::size_t channels[] = {8, 16, 32, 64};
  const std::size_t strides[] = {1, 2, 2, 1};
  const std::size_t widths[] = {4, 4, 8, 16};
  for (int i = 0; i < 4; ++i) {
    BlockConfig b;
    b.out_channels = channels[i];
    b.stride = strides[i];
    b.factors = 4;
    b.fm_width = widths[i];
    b.fsm_widths = {16, 8, 4};
    cfg.blocks.push_back(b);
  }
  return cfg;
}

MlfnConfig MlfnConfig::reid_reference(std::size_t num_classes) {
  MlfnConfig cfg;
  cfg.num_classes = num_classes;
  cfg.input_height = 256;
  cfg.input_width = 128;
  cfg.stem_channels = 64;
  cfg.stem_kernel = 7;
  cfg.stem_stride = 2;
  cfg.fusion_dim = 1024;
  struct Stage {
    std::size_t blocks, channels, width, stride;
    std::array<std::size_t, 3> fsm;
  };
  const Stage stages[] = {{3, 256, 4, 1, {128, 64, 32}},
                          {4, 512, 8, 2, {256, 128, 32}},
                          {6, 1024, 16, 2, {512, 128, 32}},
                          {3, 2048, 32, 2, {512, 128, 32}}};
  for (const Stage& s : stages)
    for (std::size_t i = 0; i < s.blocks; ++i)
      cfg.blocks.push_back({s.channels, i == 0 ? s.stride : 1, 32, s.width, s.fsm});
  return cfg;
}

MlfnConfig MlfnConfig::cifar_reference(std::size_t num_classes) {
  MlfnConfig cfg;
  cfg.num_classes = num_classes;
  cfg.input_height = 32;
  cfg.input_width = 32;
  cfg.stem_channels = 64;
  cfg.fusion_dim = 1024;
  struct Stage {
    std::size_t channels, width, stride;
    std::array<std::size_t, 3> fsm;
  };
  const Stage stages[] = {{256, 4, 1, {128, 64, 32}},
                          {512, 8, 2, {256, 128, 32}},
                          {1024, 16, 2, {512, 128, 32}}};
  for (const Stage& s : stages)
    for (std::size_t i = 0; i < 3; ++i)
      cfg.blocks.push_back({s.channels, i == 0 ? s.stride : 1, 32, s.width, s.fsm});
  return cfg;
}

std::size_t MlfnConfig::signature_dim() const {
  std::size_t k = 0;
  for (const BlockConfig& b : blocks) k += b.factors;
  return k;
}

MlfnConfig MlfnConfig::scaled_channels(std::size_t factor) const {
  MlfnConfig cfg = *this;
  cfg.stem_channels *= factor;
  for (BlockConfig& b : cfg.blocks) {
    b.out_channels *= factor;
    b.fm_width *= factor;
  }
  return cfg;
}

void MlfnConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("invalid model config: " + msg); };
  if (blocks.empty()) fail("no blocks");
  if (input_channels == 0 || input_height == 0 || input_width == 0) fail("empty input shape");
  if (stem_channels == 0 || stem_kernel == 0 || stem_stride == 0) fail("bad stem");
  if (fusion_dim == 0) fail("fusion_dim must be positive");
  if (num_classes < 2) fail("need at least 2 classes");
  std::size_t h = (input_height + 2 * (stem_kernel / 2) - stem_kernel) / stem_stride + 1;
  std::size_t w = (input_width + 2 * (stem_kernel / 2) - stem_kernel) / stem_stride + 1;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockConfig& b = blocks[i];
    const std::string where = "block " + std::to_string(i) + ": ";
    if (b.out_channels == 0 || b.factors == 0 || b.fm_width == 0 || b.stride == 0)
      fail(where + "zero extent");
    if (b.fsm_widths[0] == 0 || b.fsm_widths[1] == 0) fail(where + "zero selection width");
    if (b.fsm_widths[2] != b.factors)
      fail(where + "last selection width " + std::to_string(b.fsm_widths[2]) +
           " must equal factor count " + std::to_string(b.factors));
    h = (h - 1) / b.stride + 1;
    w = (w - 1) / b.stride + 1;
  }
  if (h == 0 || w == 0) fail("spatial extent collapses");
}

std::size_t factor_module_params(std::size_t in_channels, std::size_t width,
                                 std::size_t out_channels) {
  const std::size_t convs = in_channels * width + 9 * width * width + width * out_channels;
  const std::size_t norms = 2 * (width + width + out_channels);
  return convs + norms;
}

std::size_t holistic_width(std::size_t in_channels, const BlockConfig& block) {
  const std::size_t target =
      block.factors * factor_module_params(in_channels, block.fm_width, block.out_channels);
  std::size_t best = 1;
  std::size_t best_gap = ~std::size_t{0};
  for (std::size_t w = 1;; ++w) {
    const std::size_t p = factor_module_params(in_channels, w, block.out_channels);
    const std::size_t gap = p > target ? p - target : target - p;
    if (gap < best_gap) {
      best_gap = gap;
      best = w;
    }
    if (p > target) break;
  }
  return best;
}

std::string serialize(const MlfnConfig& cfg) {
  std::ostringstream os;
  auto real = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "input_channels=" << cfg.input_channels << '\n'
     << "input_height=" << cfg.input_height << '\n'
     << "input_width=" << cfg.input_width << '\n'
     << "stem_channels=" << cfg.stem_channels << '\n'
     << "stem_kernel=" << cfg.stem_kernel << '\n'
     << "stem_stride=" << cfg.stem_stride << '\n'
     << "blocks=" << cfg.blocks.size() << '\n';
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const BlockConfig& b = cfg.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    os << p << "out_channels=" << b.out_channels << '\n'
       << p << "stride=" << b.stride << '\n'
       << p << "factors=" << b.factors << '\n'
       << p << "fm_width=" << b.fm_width << '\n'
       << p << "fsm_widths=" << b.fsm_widths[0] << ',' << b.fsm_widths[1] << ','
       << b.fsm_widths[2] << '\n';
  }
  os << "fusion_dim=" << cfg.fusion_dim << '\n'
     << "num_classes=" << cfg.num_classes << '\n'
     << "mode=" << mode_name(cfg.mode) << '\n'
     << "bn_eps=" << real(cfg.bn_eps) << '\n'
     << "bn_momentum=" << real(cfg.bn_momentum) << '\n';
  return os.str();
}

std::uint64_t config_digest(const MlfnConfig& cfg) { return fnv1a(serialize(cfg)); }

// ---- layers -----------------------------------------------------------------

template <Real T>
ad::Var<T> ConvLayer<T>::forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const {
  return ad::conv2d(ctx.tape, x, weight, ad::Var<T>{}, spec);
}

template <Real T>
ad::Var<T> BatchNormLayer<T>::forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const {
  return ad::batch_norm(ctx.tape, x, gamma, beta, *state, ctx.norm_mode, ctx.bn);
}

template <Real T>
ad::Var<T> LinearLayer<T>::forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const {
  return ad::linear(ctx.tape, x, weight, bias);
}

template <Real T>
ad::Var<T> FactorModule<T>::forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const {
  auto h = ad::relu(ctx.tape, bn_reduce.forward(ctx, reduce.forward(ctx, x)));
  h = ad::relu(ctx.tape, bn_spatial.forward(ctx, spatial.forward(ctx, h)));
  return bn_expand.forward(ctx, expand.forward(ctx, h));
}

template <Real T>
SelectionOutput<T> FactorSelectionModule<T>::forward(ForwardContext<T>& ctx,
                                                     const ad::Var<T>& x) const {
  auto pooled = ad::global_avg_pool(ctx.tape, x);
  auto h = ad::relu(ctx.tape, bn1.forward(ctx, fc1.forward(ctx, pooled)));
  h = ad::relu(ctx.tape, bn2.forward(ctx, fc2.forward(ctx, h)));
  SelectionOutput<T> out;
  out.pre_activation = fc3.forward(ctx, h);
  out.gates = ad::sigmoid(ctx.tape, out.pre_activation);
  return out;
}

template <Real T>
ad::Var<T> MlfnBlock<T>::shortcut(ForwardContext<T>& ctx, const ad::Var<T>& x) const {
  if (!projection) return x;
  return projection_bn->forward(ctx, projection->forward(ctx, x));
}

template <Real T>
BlockOutput<T> MlfnBlock<T>::forward(ForwardContext<T>& ctx, const ad::Var<T>& x,
                                     const ad::Var<T>& gate_override) const {
  if (x.value().rank() != 4 || x.value().dim(1) != in_channels)
    throw ShapeError("block input " + shape_str(x.shape()) + " but block expects " +
                     std::to_string(in_channels) + " channels");
  BlockOutput<T> out;
  if (gate_override.valid()) {
    out.gates = gate_override;
  } else if (selector) {
    out.gates = selector->forward(ctx, x).gates;
  }
  std::vector<ad::Var<T>> parts;
  parts.reserve(factors.size());
  for (const FactorModule<T>& fm : factors) parts.push_back(fm.forward(ctx, x));

  ad::Var<T> mixed;
  if (out.gates.valid()) {
    mixed = ad::gated_sum(ctx.tape, std::span<const ad::Var<T>>(parts), out.gates);
  } else {
    // Ungated aggregation: plain sum of all module outputs.
    mixed = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) mixed = ad::add(ctx.tape, mixed, parts[i]);
  }
  out.y = ad::add(ctx.tape, mixed, shortcut(ctx, x));
  return out;
}

template <Real T>
SelectionOutput<T> fsm_forward(const MlfnBlock<T>& block, ForwardContext<T>& ctx,
                               const ad::Var<T>& x) {
  if (!block.selector) throw ContractError("fsm_forward: block has no selection module");
  return block.selector->forward(ctx, x);
}

template <Real T>
BlockOutput<T> block_forward(const MlfnBlock<T>& block, ForwardContext<T>& ctx,
                             const ad::Var<T>& x, const ad::Var<T>& gate_override) {
  return block.forward(ctx, x, gate_override);
}

template <Real T>
ad::Var<T> factor_signature(ad::Tape<T>& tape, std::span<const ad::Var<T>> selections,
                            std::size_t expected_blocks) {
  if (selections.size() != expected_blocks)
    throw ContractError("factor_signature: " + std::to_string(selections.size()) +
                        " selections for " + std::to_string(expected_blocks) + " blocks");
  for (std::size_t i = 0; i < selections.size(); ++i)
    if (!selections[i].valid())
      throw ContractError("factor_signature: block " + std::to_string(i) + " has no selection");
  return ad::concat(tape, selections);
}

template <Real T>
ad::Var<T> fuse(const FusionHead<T>& head, ForwardContext<T>& ctx, const ad::Var<T>& pooled,
                const ad::Var<T>& signature) {
  if (!head.project_signature) throw ContractError("fuse: head has no signature projection");
  auto phi_y = head.project_features.forward(ctx, pooled);
  auto phi_s = head.project_signature->forward(ctx, signature);
  if (phi_y.shape() != phi_s.shape())
    throw ShapeError("fuse: projected dims differ " + shape_str(phi_y.shape()) + " vs " +
                     shape_str(phi_s.shape()));
  return ad::scale(ctx.tape, ad::add(ctx.tape, phi_y, phi_s), T(0.5));
}

// ---- model ------------------------------------------------------------------

template <Real T>
ConvLayer<T> MlfnModel<T>::make_conv(Rng& rng, const std::string& name,
                                     const kernels::ConvSpec& spec) {
  Tensor<T> w({spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1]});
  const double sd = std::sqrt(2.0 / static_cast<double>(spec.fan_in()));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(sd * rng.normal());
  ConvLayer<T> layer{spec, ad::Var<T>::parameter(std::move(w))};
  params_.push_back({name + ".w", layer.weight});
  return layer;
}

template <Real T>
BatchNormLayer<T> MlfnModel<T>::make_bn(const std::string& name, std::size_t channels) {
  BatchNormLayer<T> layer;
  layer.gamma = ad::Var<T>::parameter(Tensor<T>({channels}, T(1)));
  layer.beta = ad::Var<T>::parameter(Tensor<T>({channels}, T(0)));
  layer.state = std::make_shared<kernels::BatchNormState<T>>();
  layer.state->running_mean = Tensor<T>({channels}, T(0));
  layer.state->running_var = Tensor<T>({channels}, T(1));
  params_.push_back({name + ".gamma", layer.gamma});
  params_.push_back({name + ".beta", layer.beta});
  buffers_.push_back({name + ".running_mean", layer.state, false});
  buffers_.push_back({name + ".running_var", layer.state, true});
  return layer;
}

template <Real T>
LinearLayer<T> MlfnModel<T>::make_linear(Rng& rng, const std::string& name, std::size_t in,
                                         std::size_t out) {
  Tensor<T> w({in, out});
  const double sd = std::sqrt(1.0 / static_cast<double>(in));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(sd * rng.normal());
  LinearLayer<T> layer{ad::Var<T>::parameter(std::move(w)),
                       ad::Var<T>::parameter(Tensor<T>({out}, T(0)))};
  params_.push_back({name + ".w", layer.weight});
  params_.push_back({name + ".b", layer.bias});
  return layer;
}

template <Real T>
FactorModule<T> MlfnModel<T>::make_factor(Rng& rng, const std::string& name, std::size_t in,
                                          std::size_t width, std::size_t out,
                                          std::size_t stride) {
  FactorModule<T> fm;
  fm.reduce = make_conv(rng, name + ".reduce", {in, width, {1, 1}, {1, 1}, {0, 0}});
  fm.bn_reduce = make_bn(name + ".bn_reduce", width);
  fm.spatial =
      make_conv(rng, name + ".spatial", {width, width, {3, 3}, {stride, stride}, {1, 1}});
  fm.bn_spatial = make_bn(name + ".bn_spatial", width);
  fm.expand = make_conv(rng, name + ".expand", {width, out, {1, 1}, {1, 1}, {0, 0}});
  fm.bn_expand = make_bn(name + ".bn_expand", out);
  return fm;
}

template <Real T>
MlfnModel<T>::MlfnModel(MlfnConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(seed, {0x6d6c666eULL}));
  const std::size_t pad = config_.stem_kernel / 2;
  stem_ = make_conv(rng, "stem.conv",
                    {config_.input_channels, config_.stem_channels,
                     {config_.stem_kernel, config_.stem_kernel},
                     {config_.stem_stride, config_.stem_stride},
                     {pad, pad}});
  stem_bn_ = make_bn("stem.bn", config_.stem_channels);

  std::size_t in = config_.stem_channels;
  for (std::size_t n = 0; n < config_.blocks.size(); ++n) {
    const BlockConfig& bc = config_.blocks[n];
    const std::string prefix = "block" + std::to_string(n);
    MlfnBlock<T> block;
    block.in_channels = in;
    block.config = bc;
    if (config_.mode == Mode::resnet) {
      const std::size_t width = holistic_width(in, bc);
      block.factors.push_back(
          make_factor(rng, prefix + ".holistic", in, width, bc.out_channels, bc.stride));
    } else {
      for (std::size_t i = 0; i < bc.factors; ++i)
        block.factors.push_back(make_factor(rng, prefix + ".fm" + std::to_string(i), in,
                                            bc.fm_width, bc.out_channels, bc.stride));
    }
    if (config_.has_selection()) {
      FactorSelectionModule<T> fsm;
      fsm.fc1 = make_linear(rng, prefix + ".fsm.fc1", in, bc.fsm_widths[0]);
      fsm.bn1 = make_bn(prefix + ".fsm.bn1", bc.fsm_widths[0]);
      fsm.fc2 = make_linear(rng, prefix + ".fsm.fc2", bc.fsm_widths[0], bc.fsm_widths[1]);
      fsm.bn2 = make_bn(prefix + ".fsm.bn2", bc.fsm_widths[1]);
      fsm.fc3 = make_linear(rng, prefix + ".fsm.fc3", bc.fsm_widths[1], bc.fsm_widths[2]);
      block.selector = std::move(fsm);
    }
    if (bc.stride != 1 || in != bc.out_channels) {
      block.projection = make_conv(rng, prefix + ".shortcut",
                                   {in, bc.out_channels, {1, 1}, {bc.stride, bc.stride}, {0, 0}});
      block.projection_bn = make_bn(prefix + ".shortcut_bn", bc.out_channels);
    }
    blocks_.push_back(std::move(block));
    in = bc.out_channels;
  }

  head_.project_features = make_linear(rng, "head.project_features", in, config_.fusion_dim);
  if (config_.fuses_signature())
    head_.project_signature = make_linear(rng, "head.project_signature",
                                          config_.signature_dim(), config_.fusion_dim);
  head_.classifier =
      make_linear(rng, "head.classifier", config_.fusion_dim, config_.num_classes);
}

template <Real T>
ForwardResult<T> MlfnModel<T>::forward(ad::Tape<T>& tape, const Tensor<T>& images,
                                       const ForwardOptions<T>& opts) const {
  if (images.rank() != 4 || images.dim(1) != config_.input_channels ||
      images.dim(2) != config_.input_height || images.dim(3) != config_.input_width)
    throw ShapeError("model input " + shape_str(images.shape()) + " does not match configured [N," +
                     std::to_string(config_.input_channels) + "," +
                     std::to_string(config_.input_height) + "," +
                     std::to_string(config_.input_width) + "]");
  ForwardContext<T> ctx{tape, training_ ? kernels::NormMode::train : kernels::NormMode::eval,
                        {config_.bn_eps, config_.bn_momentum}};
  ForwardResult<T> r;
  auto x = ad::Var<T>::constant(images);
  x = ad::relu(tape, stem_bn_.forward(ctx, stem_.forward(ctx, x)));

  bool all_gated = true;
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    const ad::Var<T> override_gates =
        n < opts.gate_overrides.size() ? opts.gate_overrides[n] : ad::Var<T>{};
    BlockOutput<T> out = blocks_[n].forward(ctx, x, override_gates);
    x = out.y;
    all_gated = all_gated && out.gates.valid();
    r.block_outputs.push_back(out.y);
    r.selections.push_back(out.gates);
  }
  r.final_features = x;
  r.pooled = ad::global_avg_pool(tape, x);
  if (all_gated)
    r.signature = factor_signature(tape, std::span<const ad::Var<T>>(r.selections), blocks_.size());

  if (config_.fuses_signature()) {
    r.representation = fuse(head_, ctx, r.pooled, r.signature);
  } else {
    r.representation = head_.project_features.forward(ctx, r.pooled);
  }
  r.logits = head_.classifier.forward(ctx, r.representation);
  return r;
}

template <Real T>
const NamedVar<T>& MlfnModel<T>::parameter(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

template <Real T>
std::size_t MlfnModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

template <Real T>
std::uint64_t MlfnModel<T>::checksum() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params_) h = fnv1a(p.var.value().data(), p.var.value().size() * sizeof(T), h);
  for (const auto& b : buffers_) h = fnv1a(b.tensor().data(), b.tensor().size() * sizeof(T), h);
  return h;
}

template <Real T>
void MlfnModel<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

#define MLFN_INSTANTIATE_MODEL(T)                                                               \
  template struct ConvLayer<T>;                                                                 \
  template struct BatchNormLayer<T>;                                                            \
  template struct LinearLayer<T>;                                                               \
  template struct FactorModule<T>;                                                              \
  template struct FactorSelectionModule<T>;                                                     \
  template struct MlfnBlock<T>;                                                                 \
  template class MlfnModel<T>;                                                                  \
  template SelectionOutput<T> fsm_forward<T>(const MlfnBlock<T>&, ForwardContext<T>&,           \
                                             const ad::Var<T>&);                                \
  template BlockOutput<T> block_forward<T>(const MlfnBlock<T>&, ForwardContext<T>&,             \
                                           const ad::Var<T>&, const ad::Var<T>&);               \
  template ad::Var<T> factor_signature<T>(ad::Tape<T>&, std::span<const ad::Var<T>>,            \
                                          std::size_t);                                         \
  template ad::Var<T> fuse<T>(const FusionHead<T>&, ForwardContext<T>&, const ad::Var<T>&,      \
                              const ad::Var<T>&);

MLFN_INSTANTIATE_MODEL(float)
MLFN_INSTANTIATE_MODEL(double)

#undef MLFN_INSTANTIATE_MODEL

}  // namespace mlfn::model
