#include "mlfn/autodiff.hpp"

#include <atomic>
#include <string>

#include "mlfn/hash.hpp"
#include "mlfn/simd.hpp"

namespace mlfn::ad {
namespace {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <Real T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->id = next_node_id();
  return node;
}

}  // namespace

template <Real T>
void Node<T>::accumulate(const Tensor<T>& g) {
  if (g.shape() != value.shape())
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                     shape_str(value.shape()));
  if (grad.empty()) {
    grad = g;
    return;
  }
  simd::axpy(T(1), g.data(), grad.data(), grad.size());
}

template <Real T>
Var<T> Var<T>::constant(Tensor<T> value) {
  return Var(make_node(std::move(value), false));
}

template <Real T>
Var<T> Var<T>::parameter(Tensor<T> value) {
  return Var(make_node(std::move(value), true));
}

template <Real T>
const Tensor<T>& Var<T>::grad() const {
  if (node_->grad.empty()) node_->grad = Tensor<T>(node_->value.shape());
  return node_->grad;
}

template <Real T>
Var<T> Tape<T>::emit(std::string_view kernel, Tensor<T> value, std::span<const Var<T>> inputs,
                     BackwardFn backward) {
  bool needs = false;
  for (const Var<T>& in : inputs) needs = needs || in.requires_grad();
  needs = needs && recording_;
  auto node = make_node(std::move(value), needs);
  if (needs) {
    Entry e;
    e.kernel = kernel;
    e.inputs.reserve(inputs.size());
    for (const Var<T>& in : inputs) e.inputs.push_back(in.valid() ? in.id() : 0);
    e.output = node;
    e.backward = std::move(backward);
    entries_.push_back(std::move(e));
  }
  return Var<T>(std::move(node));
}

template <Real T>
void Tape<T>::note_pattern(const Tensor<T>& pre_activation) {
  std::uint64_t h = pattern_;
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (std::size_t i = 0; i < pre_activation.size(); ++i) {
    word = (word << 1) | (pre_activation[i] > T(0) ? 1u : 0u);
    if (++bits == 64) {
      h = fnv1a(&word, sizeof(word), h);
      word = 0;
      bits = 0;
    }
  }
  h = fnv1a(&word, sizeof(word), h);
  pattern_ = fnv1a(&bits, sizeof(bits), h);
}

template <Real T>
void backward(Tape<T>& tape, const Var<T>& loss) {
  if (!loss.valid() || loss.value().size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.valid() ? shape_str(loss.shape()) : std::string("<none>")));
  if (!loss.requires_grad())
    throw ContractError("backward: loss does not depend on any differentiable variable");
  loss.node()->accumulate(Tensor<T>(loss.shape(), T(1)));
  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad, it->output->value);
  }
}

// ---- ops --------------------------------------------------------------------

namespace {

template <Real T>
void push(const Var<T>& v, const Tensor<T>& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

template <Real T>
void push(const Var<T>& v, Tensor<T>&& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

}  // namespace

template <Real T>
Var<T> mode4_product(Tape<T>& tape, const Var<T>& m, const Var<T>& s) {
  auto out = kernels::mode4_product(m.value(), s.value());
  return tape.emit("mode4_product", std::move(out), {m, s}, [m, s](const Tensor<T>& g, const Tensor<T>&) {
    auto grads = kernels::mode4_product_backward(m.value(), s.value(), g);
    push(m, grads.dm);
    push(s, grads.ds);
  });
}

template <Real T>
Var<T> gated_sum(Tape<T>& tape, std::span<const Var<T>> parts, const Var<T>& gates) {
  std::vector<const Tensor<T>*> ptrs;
  for (const Var<T>& p : parts) ptrs.push_back(&p.value());
  auto out = kernels::gated_sum<T>(ptrs, gates.value());
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  inputs.push_back(gates);
  std::vector<Var<T>> saved(parts.begin(), parts.end());
  return tape.emit("gated_sum", std::move(out), inputs, [saved, gates](const Tensor<T>& g, const Tensor<T>&) {
    for (std::size_t i = 0; i < saved.size(); ++i)
      if (saved[i].requires_grad())
        saved[i].node()->accumulate(kernels::gated_sum_backward_part(gates.value(), i, g));
    if (gates.requires_grad()) {
      std::vector<const Tensor<T>*> ptrs;
      for (const Var<T>& p : saved) ptrs.push_back(&p.value());
      gates.node()->accumulate(kernels::gated_sum_backward_gates<T>(ptrs, g));
    }
  });
}

template <Real T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              const kernels::ConvSpec& spec) {
  auto out = kernels::conv2d(x.value(), w.value(), bias.valid() ? &bias.value() : nullptr, spec);
  std::vector<Var<T>> inputs{x, w};
  if (bias.valid()) inputs.push_back(bias);
  return tape.emit("conv2d", std::move(out), inputs, [x, w, bias, spec](const Tensor<T>& g, const Tensor<T>&) {
    auto grads = kernels::conv2d_backward(x.value(), w.value(), spec, g, x.requires_grad(),
                                          w.requires_grad(), bias.requires_grad());
    if (x.requires_grad()) push(x, grads.dx);
    if (w.requires_grad()) push(w, grads.dw);
    if (bias.requires_grad()) push(bias, grads.db);
  });
}

template <Real T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x) {
  auto out = kernels::global_avg_pool(x.value());
  return tape.emit("global_avg_pool", std::move(out), {x}, [x](const Tensor<T>& g, const Tensor<T>&) {
    push(x, kernels::global_avg_pool_backward(x.shape(), g));
  });
}

template <Real T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  kernels::BatchNormState<T>& state, kernels::NormMode mode,
                  const kernels::BatchNormOptions& opts) {
  auto cache = std::make_shared<kernels::BatchNormCache<T>>();
  const bool want_cache = tape.recording() &&
                          (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  auto out = kernels::batch_norm(x.value(), gamma.value(), beta.value(), state, mode, opts,
                                 want_cache ? cache.get() : nullptr);
  return tape.emit("batch_norm", std::move(out), {x, gamma, beta},
                   [x, gamma, beta, cache](const Tensor<T>& g, const Tensor<T>&) {
                     auto grads = kernels::batch_norm_backward(*cache, gamma.value(), g);
                     push(x, grads.dx);
                     push(gamma, grads.dgamma);
                     push(beta, grads.dbeta);
                   });
}

template <Real T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto out = kernels::linear(x.value(), w.value(), b.value());
  return tape.emit("linear", std::move(out), {x, w, b}, [x, w, b](const Tensor<T>& g, const Tensor<T>&) {
    auto grads = kernels::linear_backward(x.value(), w.value(), g, x.requires_grad(),
                                          w.requires_grad(), b.requires_grad());
    if (x.requires_grad()) push(x, grads.dx);
    if (w.requires_grad()) push(w, grads.dw);
    if (b.requires_grad()) push(b, grads.db);
  });
}

namespace {

template <Real T>
Var<T> activation_op(Tape<T>& tape, const Var<T>& x, kernels::Activation kind, const char* name) {
  auto out = kernels::activation(x.value(), kind);
  return tape.emit(name, std::move(out), {x}, [x, kind](const Tensor<T>& g, const Tensor<T>& y) {
    push(x, kernels::activation_backward(y, kind, g));
  });
}

}  // namespace

template <Real T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  if (tape.tracks_pattern()) tape.note_pattern(x.value());
  return activation_op(tape, x, kernels::Activation::relu, "relu");
}

template <Real T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  return activation_op(tape, x, kernels::Activation::sigmoid, "sigmoid");
}

template <Real T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  auto out = kernels::add(a.value(), b.value());
  return tape.emit("add", std::move(out), {a, b}, [a, b](const Tensor<T>& g, const Tensor<T>&) {
    push(a, g);
    push(b, g);
  });
}

template <Real T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  kernels::ensure_finite(out, "mul");
  return tape.emit("mul", std::move(out), {a, b}, [a, b](const Tensor<T>& g, const Tensor<T>&) {
    if (a.requires_grad()) {
      Tensor<T> da(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * b.value()[i];
      push(a, da);
    }
    if (b.requires_grad()) {
      Tensor<T> db(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * a.value()[i];
      push(b, db);
    }
  });
}

template <Real T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor) {
  auto out = kernels::scale(a.value(), factor);
  return tape.emit("scale", std::move(out), {a}, [a, factor](const Tensor<T>& g, const Tensor<T>&) {
    push(a, kernels::scale(g, factor));
  });
}

template <Real T>
Var<T> concat(Tape<T>& tape, std::span<const Var<T>> parts) {
  std::vector<const Tensor<T>*> ptrs;
  std::vector<std::size_t> widths;
  for (const Var<T>& p : parts) {
    ptrs.push_back(&p.value());
    widths.push_back(p.value().rank() == 2 ? p.value().dim(1) : 0);
  }
  auto out = kernels::concat<T>(ptrs);
  std::vector<Var<T>> saved(parts.begin(), parts.end());
  return tape.emit("concat", std::move(out), parts, [saved, widths](const Tensor<T>& g, const Tensor<T>&) {
    auto pieces = kernels::split(g, std::span<const std::size_t>(widths));
    for (std::size_t i = 0; i < saved.size(); ++i) push(saved[i], pieces[i]);
  });
}

template <Real T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  auto out = Tensor<T>::scalar(simd::sum(x.value().data(), x.value().size()));
  return tape.emit("sum", std::move(out), {x}, [x](const Tensor<T>& g, const Tensor<T>&) {
    push(x, Tensor<T>(x.shape(), g[0]));
  });
}

template <Real T>
Var<T> inner_product(Tape<T>& tape, const Var<T>& x, const Tensor<T>& weights) {
  require_same_shape(x.value(), weights, "inner_product");
  auto out = Tensor<T>::scalar(simd::dot(x.value().data(), weights.data(), weights.size()));
  return tape.emit("inner_product", std::move(out), {x}, [x, weights](const Tensor<T>& g, const Tensor<T>&) {
    push(x, kernels::scale(weights, g[0]));
  });
}

template <Real T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels) {
  auto r = kernels::softmax_cross_entropy(logits.value(), labels);
  std::vector<int> saved_labels(labels.begin(), labels.end());
  auto probs = std::make_shared<Tensor<T>>(std::move(r.probs));
  return tape.emit("softmax_cross_entropy", Tensor<T>::scalar(r.loss), {logits},
                   [logits, saved_labels, probs](const Tensor<T>& g, const Tensor<T>&) {
                     push(logits, kernels::softmax_cross_entropy_backward(
                                      *probs, std::span<const int>(saved_labels), g[0]));
                   });
}

#define MLFN_INSTANTIATE_AD(T)                                                                   \
  template struct Node<T>;                                                                       \
  template class Var<T>;                                                                         \
  template class Tape<T>;                                                                        \
  template void backward<T>(Tape<T>&, const Var<T>&);                                            \
  template Var<T> mode4_product<T>(Tape<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> gated_sum<T>(Tape<T>&, std::span<const Var<T>>, const Var<T>&);                \
  template Var<T> conv2d<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,               \
                            const kernels::ConvSpec&);                                           \
  template Var<T> global_avg_pool<T>(Tape<T>&, const Var<T>&);                                   \
  template Var<T> batch_norm<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,           \
                                kernels::BatchNormState<T>&, kernels::NormMode,                  \
                                const kernels::BatchNormOptions&);                               \
  template Var<T> linear<T>(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);              \
  template Var<T> relu<T>(Tape<T>&, const Var<T>&);                                              \
  template Var<T> sigmoid<T>(Tape<T>&, const Var<T>&);                                           \
  template Var<T> add<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                \
  template Var<T> mul<T>(Tape<T>&, const Var<T>&, const Var<T>&);                                \
  template Var<T> scale<T>(Tape<T>&, const Var<T>&, T);                                          \
  template Var<T> concat<T>(Tape<T>&, std::span<const Var<T>>);                                  \
  template Var<T> sum<T>(Tape<T>&, const Var<T>&);                                               \
  template Var<T> inner_product<T>(Tape<T>&, const Var<T>&, const Tensor<T>&);                   \
  template Var<T> softmax_cross_entropy<T>(Tape<T>&, const Var<T>&, std::span<const int>);

MLFN_INSTANTIATE_AD(float)
MLFN_INSTANTIATE_AD(double)

#undef MLFN_INSTANTIATE_AD

}  // namespace mlfn::ad
