#include "mlfn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mlfn/simd.hpp"

namespace mlfn::kernels {

std::size_t ConvSpec::out_extent(std::size_t in, int axis) const {
  const std::size_t k = kernel[axis];
  const std::size_t s = stride[axis];
  const std::size_t p = padding[axis];
  if (k == 0 || s == 0) throw ShapeError("conv spec: kernel and stride must be positive");
  if (in + 2 * p < k)
    throw ShapeError("conv spec: kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * p));
  return (in + 2 * p - k) / s + 1;
}

template <Real T>
void ensure_finite(const Tensor<T>& t, const char* kernel) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + kernel);
}

// ---- mode-4 product -------------------------------------------------------

template <Real T>
Tensor<T> mode4_product(const Tensor<T>& m, const Tensor<T>& s) {
  if (m.rank() != 4 || s.rank() != 1 || m.dim(3) != s.dim(0))
    throw ShapeError("mode4_product: " + shape_str(m.shape()) + " x " + shape_str(s.shape()));
  const std::size_t k = s.size();
  const std::size_t rows = m.size() / k;
  Tensor<T> out({m.dim(0), m.dim(1), m.dim(2)});
  for (std::size_t r = 0; r < rows; ++r) out[r] = simd::dot(m.data() + r * k, s.data(), k);
  ensure_finite(out, "mode4_product");
  return out;
}

template <Real T>
Mode4Grads<T> mode4_product_backward(const Tensor<T>& m, const Tensor<T>& s,
                                     const Tensor<T>& dout) {
  const std::size_t k = s.size();
  const std::size_t rows = m.size() / k;
  if (dout.size() != rows) throw ShapeError("mode4_product_backward: upstream gradient shape");
  Mode4Grads<T> g{Tensor<T>(m.shape()), Tensor<T>(s.shape())};
  for (std::size_t r = 0; r < rows; ++r) {
    const T d = dout[r];
    const T* mr = m.data() + r * k;
    T* dmr = g.dm.data() + r * k;
    for (std::size_t i = 0; i < k; ++i) {
      dmr[i] = d * s[i];
      g.ds[i] += d * mr[i];
    }
  }
  return g;
}

template <Real T>
Tensor<T> gated_sum(std::span<const Tensor<T>* const> parts, const Tensor<T>& gates) {
  if (parts.empty()) throw ShapeError("gated_sum: no parts");
  const Shape& shape = parts[0]->shape();
  const std::size_t batch = shape[0];
  if (gates.rank() != 2 || gates.dim(0) != batch || gates.dim(1) != parts.size())
    throw ShapeError("gated_sum: gates " + shape_str(gates.shape()) + " for " +
                     std::to_string(parts.size()) + " parts of " + shape_str(shape));
  for (const Tensor<T>* p : parts)
    if (p->shape() != shape) throw ShapeError("gated_sum: parts differ in shape");
  const std::size_t per = parts[0]->size() / batch;
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::size_t n = 0; n < batch; ++n)
      simd::axpy(gates.at(n, i), parts[i]->data() + n * per, out.data() + n * per, per);
  ensure_finite(out, "gated_sum");
  return out;
}

template <Real T>
Tensor<T> gated_sum_backward_part(const Tensor<T>& gates, std::size_t i, const Tensor<T>& dout) {
  const std::size_t batch = dout.dim(0);
  const std::size_t per = dout.size() / batch;
  Tensor<T> d(dout.shape());
  for (std::size_t n = 0; n < batch; ++n) {
    const T g = gates.at(n, i);
    const T* src = dout.data() + n * per;
    T* dst = d.data() + n * per;
    for (std::size_t j = 0; j < per; ++j) dst[j] = g * src[j];
  }
  return d;
}

template <Real T>
Tensor<T> gated_sum_backward_gates(std::span<const Tensor<T>* const> parts,
                                   const Tensor<T>& dout) {
  const std::size_t batch = dout.dim(0);
  const std::size_t per = dout.size() / batch;
  Tensor<T> dg({batch, parts.size()});
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::size_t n = 0; n < batch; ++n)
      dg.at(n, i) = simd::dot(parts[i]->data() + n * per, dout.data() + n * per, per);
  return dg;
}

// ---- convolution ----------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_h, out_w;
  std::size_t kh, kw, sh, sw, ph, pw;
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0; }
};

template <Real T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: expected NCHW input and OIHW weights, got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  if (x.dim(1) != spec.in_channels || w.dim(0) != spec.out_channels ||
      w.dim(1) != spec.in_channels || w.dim(2) != spec.kernel[0] || w.dim(3) != spec.kernel[1])
    throw ShapeError("conv2d: spec inconsistent with input " + shape_str(x.shape()) +
                     " / weights " + shape_str(w.shape()));
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_h = spec.out_extent(g.height, 0);
  g.out_w = spec.out_extent(g.width, 1);
  g.kh = spec.kernel[0];
  g.kw = spec.kernel[1];
  g.sh = spec.stride[0];
  g.sw = spec.stride[1];
  g.ph = spec.padding[0];
  g.pw = spec.padding[1];
  return g;
}

// Column matrices cover the whole batch: row r of the unrolled input lives
// at cols + r * ld, and image n occupies columns [n * P, (n + 1) * P) with
// P = out_h * out_w. Longer rows keep the SIMD primitives busy even when the
// spatial extent is tiny.
template <Real T>
void im2col(const T* img, const ConvGeometry& g, T* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.sh + i) -
                                    static_cast<std::ptrdiff_t>(g.ph);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.sw + j) -
                                      static_cast<std::ptrdiff_t>(g.pw);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width))
                          ? T(0)
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
}

template <Real T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img, std::size_t ld) {
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.sh + i) -
                                    static_cast<std::ptrdiff_t>(g.ph);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.sw + j) -
                                      static_cast<std::ptrdiff_t>(g.pw);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width))
              dst[static_cast<std::size_t>(iw)] += src[ow];
          }
        }
      }
}

template <Real T>
std::vector<T> unroll_batch(const Tensor<T>& x, const ConvGeometry& g) {
  const std::size_t P = g.col_cols();
  const std::size_t ld = g.batch * P;
  const std::size_t in_per = g.channels * g.height * g.width;
  std::vector<T> cols(g.col_rows() * ld);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* img = x.data() + n * in_per;
    if (g.pointwise()) {
      for (std::size_t c = 0; c < g.channels; ++c)
        std::copy(img + c * P, img + (c + 1) * P, cols.data() + c * ld + n * P);
    } else {
      im2col(img, g, cols.data() + n * P, ld);
    }
  }
  return cols;
}

}  // namespace

template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias,
                 const ConvSpec& spec) {
  const ConvGeometry g = conv_geometry(x, w, spec);
  if (bias && (bias->rank() != 1 || bias->dim(0) != spec.out_channels))
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()));
  const auto& vk = simd::active_kernels<T>();
  const std::size_t rows = g.col_rows();
  const std::size_t P = g.col_cols();
  const std::size_t ld = g.batch * P;
  const std::size_t out_ch = spec.out_channels;
  const std::vector<T> cols = unroll_batch(x, g);

  std::vector<T> acc(out_ch * ld, T(0));
  for (std::size_t oc = 0; oc < out_ch; ++oc) {
    T* arow = acc.data() + oc * ld;
    if (bias) std::fill(arow, arow + ld, (*bias)[oc]);
    const T* wrow = w.data() + oc * rows;
    for (std::size_t k = 0; k < rows; ++k) vk.axpy(wrow[k], cols.data() + k * ld, arow, ld);
  }
  Tensor<T> out({g.batch, out_ch, g.out_h, g.out_w});
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      const T* src = acc.data() + oc * ld + n * P;
      std::copy(src, src + P, out.data() + (n * out_ch + oc) * P);
    }
  ensure_finite(out, "conv2d");
  return out;
}

template <Real T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                               const Tensor<T>& dout, bool need_dx, bool need_dw, bool need_db) {
  const ConvGeometry g = conv_geometry(x, w, spec);
  const auto& vk = simd::active_kernels<T>();
  const std::size_t rows = g.col_rows();
  const std::size_t P = g.col_cols();
  const std::size_t ld = g.batch * P;
  const std::size_t out_ch = spec.out_channels;
  if (dout.shape() != Shape{g.batch, out_ch, g.out_h, g.out_w})
    throw ShapeError("conv2d_backward: upstream gradient shape " + shape_str(dout.shape()));
  Conv2dGrads<T> grads;

  std::vector<T> d(out_ch * ld);
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      const T* src = dout.data() + (n * out_ch + oc) * P;
      std::copy(src, src + P, d.data() + oc * ld + n * P);
    }
  if (need_db) {
    grads.db = Tensor<T>({out_ch});
    for (std::size_t oc = 0; oc < out_ch; ++oc) grads.db[oc] = vk.sum(d.data() + oc * ld, ld);
  }
  if (need_dw) {
    grads.dw = Tensor<T>(w.shape());
    const std::vector<T> cols = unroll_batch(x, g);
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      T* dwrow = grads.dw.data() + oc * rows;
      const T* drow = d.data() + oc * ld;
      for (std::size_t k = 0; k < rows; ++k) dwrow[k] = vk.dot(drow, cols.data() + k * ld, ld);
    }
  }
  if (need_dx) {
    grads.dx = Tensor<T>(x.shape());
    std::vector<T> dcols(rows * ld, T(0));
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      const T* wrow = w.data() + oc * rows;
      const T* drow = d.data() + oc * ld;
      for (std::size_t k = 0; k < rows; ++k) vk.axpy(wrow[k], drow, dcols.data() + k * ld, ld);
    }
    const std::size_t in_per = g.channels * g.height * g.width;
    for (std::size_t n = 0; n < g.batch; ++n) {
      T* img = grads.dx.data() + n * in_per;
      if (g.pointwise()) {
        for (std::size_t c = 0; c < g.channels; ++c) {
          const T* src = dcols.data() + c * ld + n * P;
          std::copy(src, src + P, img + c * P);
        }
      } else {
        col2im_add(dcols.data() + n * P, g, img, ld);
      }
    }
  }
  return grads;
}

// ---- pooling --------------------------------------------------------------

template <Real T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t i = 0; i < n * c; ++i) out[i] = simd::sum(x.data() + i * hw, hw) * inv;
  ensure_finite(out, "global_avg_pool");
  return out;
}

template <Real T>
Tensor<T> global_avg_pool_backward(const Shape& x_shape, const Tensor<T>& dout) {
  const std::size_t hw = x_shape[2] * x_shape[3];
  Tensor<T> dx(x_shape);
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t i = 0; i < dout.size(); ++i)
    std::fill(dx.data() + i * hw, dx.data() + (i + 1) * hw, dout[i] * inv);
  return dx;
}

// ---- batch norm -----------------------------------------------------------

template <Real T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, NormMode mode, const BatchNormOptions& opts,
                     std::type_identity_t<BatchNormCache<T>>* cache) {
  if (x.rank() < 2) throw ShapeError("batch_norm: rank below 2");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (n * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} ||
      state.running_mean.shape() != Shape{c} || state.running_var.shape() != Shape{c})
    throw ShapeError("batch_norm: parameter/state extents do not match channel count " +
                     std::to_string(c));
  if (mode == NormMode::train && n < 2)
    throw DegenerateBatchError("batch_norm: train mode needs at least 2 samples");

  std::vector<T> mean(c), inv_std(c);
  const T eps = static_cast<T>(opts.eps);
  if (mode == NormMode::train) {
    const std::size_t count = n * inner;
    const T momentum = static_cast<T>(opts.momentum);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s = 0;
      for (std::size_t b = 0; b < n; ++b) s += simd::sum(x.data() + (b * c + ch) * inner, inner);
      const T mu = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * c + ch) * inner;
        for (std::size_t j = 0; j < inner; ++j) v += (p[j] - mu) * (p[j] - mu);
      }
      const T var = v / static_cast<T>(count);
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = v / static_cast<T>(count - 1);
      state.running_mean[ch] = momentum * state.running_mean[ch] + (T(1) - momentum) * mu;
      state.running_var[ch] = momentum * state.running_var[ch] + (T(1) - momentum) * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(state.running_var[ch] + eps);
    }
  }

  Tensor<T> out(x.shape());
  Tensor<T> xhat;
  if (cache) xhat = Tensor<T>(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * inner;
      const T mu = mean[ch], is = inv_std[ch], g = gamma[ch], be = beta[ch];
      for (std::size_t j = 0; j < inner; ++j) {
        const T h = (x[off + j] - mu) * is;
        if (cache) xhat[off + j] = h;
        out[off + j] = g * h + be;
      }
    }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  ensure_finite(out, "batch_norm");
  return out;
}

template <Real T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                      const Tensor<T>& dout) {
  const Tensor<T>& xhat = cache.xhat;
  require_same_shape(xhat, dout, "batch_norm_backward");
  const std::size_t n = xhat.dim(0), c = xhat.dim(1);
  const std::size_t inner = xhat.size() / (n * c);
  const T count = static_cast<T>(n * inner);
  BatchNormGrads<T> g{Tensor<T>(xhat.shape()), Tensor<T>({c}), Tensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    T sum_d = 0, sum_dx = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * inner;
      sum_d += simd::sum(dout.data() + off, inner);
      sum_dx += simd::dot(dout.data() + off, xhat.data() + off, inner);
    }
    g.dbeta[ch] = sum_d;
    g.dgamma[ch] = sum_dx;
    const T k = gamma[ch] * cache.inv_std[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) {
        if (cache.mode == NormMode::train)
          g.dx[off + j] = k * (dout[off + j] - (sum_d + xhat[off + j] * sum_dx) / count);
        else
          g.dx[off + j] = k * dout[off + j];
      }
    }
  }
  return g;
}

// ---- dense ----------------------------------------------------------------

template <Real T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
      w.dim(1) != b.dim(0))
    throw ShapeError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()) + " + " +
                     shape_str(b.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1), e = w.dim(1);
  Tensor<T> out({n, e});
  for (std::size_t r = 0; r < n; ++r) {
    T* orow = out.data() + r * e;
    std::copy(b.data(), b.data() + e, orow);
    const T* xrow = x.data() + r * d;
    for (std::size_t k = 0; k < d; ++k) simd::axpy(xrow[k], w.data() + k * e, orow, e);
  }
  ensure_finite(out, "linear");
  return out;
}

template <Real T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dout,
                               bool need_dx, bool need_dw, bool need_db) {
  const std::size_t n = x.dim(0), d = x.dim(1), e = w.dim(1);
  if (dout.shape() != Shape{n, e}) throw ShapeError("linear_backward: upstream gradient shape");
  LinearGrads<T> g;
  if (need_dx) {
    g.dx = Tensor<T>(x.shape());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < d; ++k)
        g.dx[r * d + k] = simd::dot(w.data() + k * e, dout.data() + r * e, e);
  }
  if (need_dw) {
    g.dw = Tensor<T>(w.shape());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < d; ++k)
        simd::axpy(x[r * d + k], dout.data() + r * e, g.dw.data() + k * e, e);
  }
  if (need_db) {
    g.db = Tensor<T>({e});
    for (std::size_t r = 0; r < n; ++r) simd::axpy(T(1), dout.data() + r * e, g.db.data(), e);
  }
  return g;
}

// ---- elementwise ----------------------------------------------------------

template <Real T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y(x.shape());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T v = x[i];
      // Two-branch form keeps exp() from overflowing for large |v|.
      if (v >= T(0)) {
        y[i] = T(1) / (T(1) + std::exp(-v));
      } else {
        const T e = std::exp(v);
        y[i] = e / (T(1) + e);
      }
    }
  }
  ensure_finite(y, kind == Activation::relu ? "relu" : "sigmoid");
  return y;
}

template <Real T>
Tensor<T> activation_backward(const Tensor<T>& y, Activation kind, const Tensor<T>& dout) {
  require_same_shape(y, dout, "activation_backward");
  Tensor<T> dx(y.shape());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] > T(0) ? dout[i] : T(0);
  } else {
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dout[i] * y[i] * (T(1) - y[i]);
  }
  return dx;
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a;
  simd::axpy(T(1), b.data(), out.data(), out.size());
  ensure_finite(out, "add");
  return out;
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
  ensure_finite(out, "scale");
  return out;
}

// ---- concat / split -------------------------------------------------------

template <Real T>
Tensor<T> concat(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const std::size_t n = parts[0]->dim(0);
  std::size_t total = 0;
  for (const Tensor<T>* p : parts) {
    if (p->rank() != 2 || p->dim(0) != n)
      throw ShapeError("concat: part " + shape_str(p->shape()) + " incompatible with leading extent " +
                       std::to_string(n));
    total += p->dim(1);
  }
  Tensor<T> out({n, total});
  for (std::size_t r = 0; r < n; ++r) {
    T* dst = out.data() + r * total;
    for (const Tensor<T>* p : parts) {
      const std::size_t w = p->dim(1);
      std::copy(p->data() + r * w, p->data() + (r + 1) * w, dst);
      dst += w;
    }
  }
  return out;
}

template <Real T>
std::vector<Tensor<T>> split(const Tensor<T>& whole, std::span<const std::size_t> widths) {
  if (whole.rank() != 2) throw ShapeError("split: expected rank 2");
  const std::size_t n = whole.dim(0), total = whole.dim(1);
  std::size_t sum = 0;
  for (std::size_t w : widths) sum += w;
  if (sum != total) throw ShapeError("split: widths do not add up to " + std::to_string(total));
  std::vector<Tensor<T>> parts;
  parts.reserve(widths.size());
  std::size_t col = 0;
  for (std::size_t w : widths) {
    Tensor<T> p({n, w});
    for (std::size_t r = 0; r < n; ++r)
      std::copy(whole.data() + r * total + col, whole.data() + r * total + col + w,
                p.data() + r * w);
    parts.push_back(std::move(p));
    col += w;
  }
  return parts;
}

// ---- loss -----------------------------------------------------------------

template <Real T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  CrossEntropyResult<T> r{T(0), Tensor<T>(logits.shape())};
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c)
      throw ContractError("softmax_cross_entropy: label " + std::to_string(label) +
                          " outside [0," + std::to_string(c) + ")");
    const T* row = logits.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const T log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) r.probs[i * c + j] = std::exp(row[j] - log_z);
    total += static_cast<double>(log_z - row[label]);
  }
  r.loss = static_cast<T>(total / static_cast<double>(n));
  if (!std::isfinite(r.loss)) throw NumericError("non-finite value produced by softmax_cross_entropy");
  return r;
}

template <Real T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probs, std::span<const int> labels,
                                         T dloss) {
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  Tensor<T> d = probs;
  const T k = dloss / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i * c + static_cast<std::size_t>(labels[i])] -= T(1);
    for (std::size_t j = 0; j < c; ++j) d[i * c + j] *= k;
  }
  return d;
}

#define MLFN_INSTANTIATE_KERNELS(T)                                                              \
  template void ensure_finite<T>(const Tensor<T>&, const char*);                                 \
  template Tensor<T> mode4_product<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Mode4Grads<T> mode4_product_backward<T>(const Tensor<T>&, const Tensor<T>&,           \
                                                   const Tensor<T>&);                            \
  template Tensor<T> gated_sum<T>(std::span<const Tensor<T>* const>, const Tensor<T>&);          \
  template Tensor<T> gated_sum_backward_part<T>(const Tensor<T>&, std::size_t, const Tensor<T>&); \
  template Tensor<T> gated_sum_backward_gates<T>(std::span<const Tensor<T>* const>,              \
                                                 const Tensor<T>&);                              \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,             \
                               const ConvSpec&);                                                 \
  template Conv2dGrads<T> conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&,                 \
                                             const ConvSpec&, const Tensor<T>&, bool, bool,      \
                                             bool);                                              \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                       \
  template Tensor<T> global_avg_pool_backward<T>(const Shape&, const Tensor<T>&);                \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                   BatchNormState<T>&, NormMode, const BatchNormOptions&,        \
                                   BatchNormCache<T>*);                                          \
  template BatchNormGrads<T> batch_norm_backward<T>(const BatchNormCache<T>&, const Tensor<T>&,  \
                                                    const Tensor<T>&);                           \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template LinearGrads<T> linear_backward<T>(const Tensor<T>&, const Tensor<T>&,                 \
                                             const Tensor<T>&, bool, bool, bool);                \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation);                                \
  template Tensor<T> activation_backward<T>(const Tensor<T>&, Activation, const Tensor<T>&);     \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> concat<T>(std::span<const Tensor<T>* const>);                               \
  template std::vector<Tensor<T>> split<T>(const Tensor<T>&, std::span<const std::size_t>);      \
  template CrossEntropyResult<T> softmax_cross_entropy<T>(const Tensor<T>&,                      \
                                                          std::span<const int>);                 \
  template Tensor<T> softmax_cross_entropy_backward<T>(const Tensor<T>&, std::span<const int>,   \
                                                       T);

MLFN_INSTANTIATE_KERNELS(float)
MLFN_INSTANTIATE_KERNELS(double)

#undef MLFN_INSTANTIATE_KERNELS

}  // namespace mlfn::kernels
