#pragma once

// Small numeric kernels: evenly spaced grids, 1-D interpolated sampling and its
// adjoint, masked multi-head attention, feed-forward and layer norm, each with the
// input-gradient routine the DiffSim trainer needs.

#include <cmath>
#include <limits>
#include <vector>

#include "yose/tensor.hpp"

namespace yose {

// torch.linspace semantics: the first half steps forward from start, the second
// half backward from end, so both endpoints are exact.
inline Tensor<double> linspace(double start, double end, std::size_t count) {
  if (count == 0) throw std::invalid_argument("linspace: count must be >= 1");
  Tensor<double> out({count});
  if (count == 1) {
    out[0] = start;
    return out;
  }
  const double step = (end - start) / static_cast<double>(count - 1);
  const std::size_t half = count / 2;
  for (std::size_t i = 0; i < count; ++i)
    out[i] = i < half ? start + step * static_cast<double>(i)
                      : end - step * static_cast<double>(count - 1 - i);
  return out;
}

// Continuous index for normalized coordinate x over a length-L axis:
// u = ((x + 1) L - 1) / 2, so x = -1 + (2i + 1)/L lands on i.
struct SamplePoint {
  std::size_t i0;
  std::size_t i1;
  double w;  // weight of i1
};

// Rounding in the coordinate arithmetic leaves u a few ulp off an integer at
// exact centers; snapping inside this band keeps center sampling lossless.
inline constexpr double kCenterSnap = 1e-9;

inline SamplePoint sample_point(double x, std::size_t L) {
  if (std::isnan(x)) throw std::invalid_argument("gsample: NaN coordinate");
  double u = ((x + 1.0) * static_cast<double>(L) - 1.0) / 2.0;
  const double r = std::nearbyint(u);
  if (std::abs(u - r) <= kCenterSnap) u = r;
  const double fl = std::floor(u);
  const double w = u - fl;
  const auto last = static_cast<double>(L - 1);
  const auto i0 = static_cast<std::size_t>(std::clamp(fl, 0.0, last));
  const auto i1 = static_cast<std::size_t>(std::clamp(fl + 1.0, 0.0, last));
  return {i0, i1, w};
}

// values [B, L, C], coords [B, M] -> [B, M, C]; linear interpolation, border clamp.
template <class T>
Tensor<T> gsample_1d(const Tensor<T>& values, const Tensor<double>& coords) {
  require_ndim(values.shape(), 3, "gsample_1d values");
  require_ndim(coords.shape(), 2, "gsample_1d coords");
  const std::size_t B = values.dim(0), L = values.dim(1), C = values.dim(2), M = coords.dim(1);
  if (coords.dim(0) != B) throw std::invalid_argument("gsample_1d: batch mismatch");
  if (L == 0) throw std::invalid_argument("gsample_1d: empty axis");
  Tensor<T> out({B, M, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m) {
      const SamplePoint p = sample_point(coords(b, m), L);
      const T* v0 = values.ptr() + (b * L + p.i0) * C;
      const T* v1 = values.ptr() + (b * L + p.i1) * C;
      T* o = out.ptr() + (b * M + m) * C;
      if (p.w == 0.0) {
        std::copy(v0, v0 + C, o);
      } else {
        const T w1 = static_cast<T>(p.w), w0 = static_cast<T>(1.0 - p.w);
        for (std::size_t c = 0; c < C; ++c) o[c] = w0 * v0[c] + w1 * v1[c];
      }
    }
  return out;
}

// Adjoint of gsample_1d with respect to values.
template <class T>
Tensor<T> gsample_1d_backward(const Tensor<T>& grad_out, const Tensor<double>& coords,
                              std::size_t L) {
  require_ndim(grad_out.shape(), 3, "gsample_1d_backward grad_out");
  require_ndim(coords.shape(), 2, "gsample_1d_backward coords");
  const std::size_t B = grad_out.dim(0), M = grad_out.dim(1), C = grad_out.dim(2);
  if (coords.dim(0) != B || coords.dim(1) != M)
    throw std::invalid_argument("gsample_1d_backward: coords shape mismatch");
  Tensor<T> grad({B, L, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m) {
      const SamplePoint p = sample_point(coords(b, m), L);
      const T* g = grad_out.ptr() + (b * M + m) * C;
      T* d0 = grad.ptr() + (b * L + p.i0) * C;
      T* d1 = grad.ptr() + (b * L + p.i1) * C;
      if (p.w == 0.0) {
        for (std::size_t c = 0; c < C; ++c) d0[c] += g[c];
      } else {
        const T w1 = static_cast<T>(p.w), w0 = static_cast<T>(1.0 - p.w);
        for (std::size_t c = 0; c < C; ++c) {
          d0[c] += w0 * g[c];
          d1[c] += w1 * g[c];
        }
      }
    }
  return grad;
}

// x [..., C] times W [C, D] -> [..., D].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  require_ndim(w.shape(), 2, "linear weight");
  const std::size_t C = w.dim(0), D = w.dim(1);
  if (x.shape().empty() || x.shape().back() != C)
    throw std::invalid_argument("linear: input last dim " + shape_str(x.shape()) +
                                " does not match weight " + shape_str(w.shape()));
  const std::size_t rows = x.size() / C;
  Shape os = x.shape();
  os.back() = D;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * C;
    T* o = out.ptr() + r * D;
    for (std::size_t c = 0; c < C; ++c) {
      const T xc = xr[c];
      const T* wr = w.ptr() + c * D;
      for (std::size_t d = 0; d < D; ++d) o[d] += xc * wr[d];
    }
  }
  return out;
}

// grad_out [..., D] times W^T -> [..., C].
template <class T>
Tensor<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& w) {
  const std::size_t C = w.dim(0), D = w.dim(1);
  if (grad_out.shape().back() != D) throw std::invalid_argument("linear_backward: shape mismatch");
  const std::size_t rows = grad_out.size() / D;
  Shape os = grad_out.shape();
  os.back() = C;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = grad_out.ptr() + r * D;
    T* o = out.ptr() + r * C;
    for (std::size_t c = 0; c < C; ++c) {
      const T* wr = w.ptr() + c * D;
      T acc = 0;
      for (std::size_t d = 0; d < D; ++d) acc += g[d] * wr[d];
      o[c] = acc;
    }
  }
  return out;
}

namespace detail {

inline void check_attention_shapes(const Shape& q, const Shape& k, const Shape& v,
                                   const Shape& valid, std::size_t heads) {
  require_ndim(q, 3, "attention q");
  require_ndim(k, 3, "attention k");
  require_shape(v, k, "attention v");
  require_shape(valid, {k[0], k[1]}, "attention kv_valid");
  if (q[0] != k[0] || q[2] != k[2]) throw std::invalid_argument("attention: q/k shape mismatch");
  if (heads == 0 || q[2] % heads != 0)
    throw std::invalid_argument("attention: channels not divisible by heads");
}

// Head-major copies: qh [H][Mq][d], kt [H][d][Mk] (keys transposed), vh [H][Mk][d].
template <class T>
struct HeadLayout {
  std::vector<T> qh, kt, vh;
};

template <class T>
HeadLayout<T> split_heads(const T* q, const T* k, const T* v, std::size_t Mq, std::size_t Mk,
                          std::size_t C, std::size_t H) {
  const std::size_t d = C / H;
  HeadLayout<T> h{std::vector<T>(H * Mq * d), std::vector<T>(H * d * Mk), std::vector<T>(H * Mk * d)};
  for (std::size_t hh = 0; hh < H; ++hh) {
    for (std::size_t i = 0; i < Mq; ++i)
      for (std::size_t e = 0; e < d; ++e) h.qh[(hh * Mq + i) * d + e] = q[i * C + hh * d + e];
    for (std::size_t j = 0; j < Mk; ++j)
      for (std::size_t e = 0; e < d; ++e) {
        h.kt[(hh * d + e) * Mk + j] = k[j * C + hh * d + e];
        h.vh[(hh * Mk + j) * d + e] = v[j * C + hh * d + e];
      }
  }
  return h;
}

// Softmax probabilities for one query row; invalid keys get exactly 0.
template <class T>
void attention_probs(const T* qrow, const T* kt, const std::uint8_t* valid, std::size_t Mk,
                     std::size_t d, T scale, T* p) {
  std::fill(p, p + Mk, T{0});
  for (std::size_t e = 0; e < d; ++e) {
    const T qe = qrow[e];
    const T* kr = kt + e * Mk;
    for (std::size_t j = 0; j < Mk; ++j) p[j] += qe * kr[j];
  }
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < Mk; ++j)
    if (valid[j]) mx = std::max(mx, p[j] * scale);
  T sum = 0;
  for (std::size_t j = 0; j < Mk; ++j) {
    p[j] = valid[j] ? std::exp(p[j] * scale - mx) : T{0};
    sum += p[j];
  }
  const T inv = T{1} / sum;
  for (std::size_t j = 0; j < Mk; ++j) p[j] *= inv;
}

}  // namespace detail

// Multi-head scaled dot-product attention with a key padding mask.
// q [B, Mq, C], k/v [B, Mk, C], kv_valid [B, Mk] -> [B, Mq, C].
// Queries are processed in tiles so key/value rows are reused from cache; every
// output element keeps the same summation order as a row-at-a-time evaluation.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const Mask& kv_valid) {
  detail::check_attention_shapes(q.shape(), k.shape(), v.shape(), kv_valid.shape(), heads);
  constexpr std::size_t kTile = 8, kKeyChunk = 512;
  const std::size_t B = q.dim(0), Mq = q.dim(1), Mk = k.dim(1), C = q.dim(2), H = heads;
  const std::size_t d = C / H;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  Tensor<T> out({B, Mq, C});
  std::vector<T> scores(kTile * Mk), acc(kTile * d);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* valid = kv_valid.ptr() + b * Mk;
    if (std::none_of(valid, valid + Mk, [](std::uint8_t x) { return x != 0; }))
      throw std::invalid_argument("attention: no valid key in batch row " + std::to_string(b));
    auto hl = detail::split_heads(q.ptr() + b * Mq * C, k.ptr() + b * Mk * C, v.ptr() + b * Mk * C,
                                  Mq, Mk, C, H);
    for (std::size_t hh = 0; hh < H; ++hh) {
      const T* kt = hl.kt.data() + hh * d * Mk;
      const T* vh = hl.vh.data() + hh * Mk * d;
      for (std::size_t i0 = 0; i0 < Mq; i0 += kTile) {
        const std::size_t nt = std::min(kTile, Mq - i0);
        const T* qt = hl.qh.data() + (hh * Mq + i0) * d;
        std::fill(scores.begin(), scores.begin() + nt * Mk, T{0});
        for (std::size_t j0 = 0; j0 < Mk; j0 += kKeyChunk) {
          const std::size_t j1 = std::min(Mk, j0 + kKeyChunk);
          for (std::size_t e = 0; e < d; ++e) {
            const T* kr = kt + e * Mk;
            for (std::size_t t = 0; t < nt; ++t) {
              const T qe = qt[t * d + e];
              T* srow = scores.data() + t * Mk;
              for (std::size_t j = j0; j < j1; ++j) srow[j] += qe * kr[j];
            }
          }
        }
        for (std::size_t t = 0; t < nt; ++t) {
          T* p = scores.data() + t * Mk;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < Mk; ++j)
            if (valid[j]) mx = std::max(mx, p[j] * scale);
          T sum = 0;
          for (std::size_t j = 0; j < Mk; ++j) {
            p[j] = valid[j] ? std::exp(p[j] * scale - mx) : T{0};
            sum += p[j];
          }
          const T inv = T{1} / sum;
          for (std::size_t j = 0; j < Mk; ++j) p[j] *= inv;
        }
        std::fill(acc.begin(), acc.end(), T{0});
        for (std::size_t j = 0; j < Mk; ++j) {
          const T* vr = vh + j * d;
          for (std::size_t t = 0; t < nt; ++t) {
            const T pj = scores[t * Mk + j];
            if (pj == T{0}) continue;
            T* a = acc.data() + t * d;
            for (std::size_t e = 0; e < d; ++e) a[e] += pj * vr[e];
          }
        }
        for (std::size_t t = 0; t < nt; ++t)
          std::copy(acc.begin() + t * d, acc.begin() + (t + 1) * d,
                    out.ptr() + (b * Mq + i0 + t) * C + hh * d);
      }
    }
  }
  return out;
}

template <class T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv;
};

// Gradients of attention() with respect to q, k and v.
template <class T>
AttentionGrads<T> attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                     std::size_t heads, const Mask& kv_valid,
                                     const Tensor<T>& grad_out) {
  detail::check_attention_shapes(q.shape(), k.shape(), v.shape(), kv_valid.shape(), heads);
  require_shape(grad_out.shape(), q.shape(), "attention_backward grad_out");
  const std::size_t B = q.dim(0), Mq = q.dim(1), Mk = k.dim(1), C = q.dim(2), H = heads;
  const std::size_t d = C / H;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  AttentionGrads<T> g{Tensor<T>(q.shape()), Tensor<T>(k.shape()), Tensor<T>(v.shape())};
  std::vector<T> p(Mk), dp(Mk);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* valid = kv_valid.ptr() + b * Mk;
    auto hl = detail::split_heads(q.ptr() + b * Mq * C, k.ptr() + b * Mk * C, v.ptr() + b * Mk * C,
                                  Mq, Mk, C, H);
    for (std::size_t hh = 0; hh < H; ++hh) {
      const T* kt = hl.kt.data() + hh * d * Mk;
      const T* vh = hl.vh.data() + hh * Mk * d;
      for (std::size_t i = 0; i < Mq; ++i) {
        const T* qi = hl.qh.data() + (hh * Mq + i) * d;
        detail::attention_probs(qi, kt, valid, Mk, d, scale, p.data());
        const T* go = grad_out.ptr() + (b * Mq + i) * C + hh * d;
        T rowdot = 0;
        for (std::size_t j = 0; j < Mk; ++j) {
          T acc = 0;
          const T* vr = vh + j * d;
          for (std::size_t e = 0; e < d; ++e) acc += go[e] * vr[e];
          dp[j] = acc;
          rowdot += acc * p[j];
        }
        T* dqi = g.dq.ptr() + (b * Mq + i) * C + hh * d;
        for (std::size_t j = 0; j < Mk; ++j) {
          if (p[j] == T{0}) continue;
          const T ds = p[j] * (dp[j] - rowdot) * scale;
          T* dkj = g.dk.ptr() + (b * Mk + j) * C + hh * d;
          T* dvj = g.dv.ptr() + (b * Mk + j) * C + hh * d;
          const T* kj = k.ptr() + (b * Mk + j) * C + hh * d;
          for (std::size_t e = 0; e < d; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
            dvj[e] += p[j] * go[e];
          }
        }
      }
    }
  }
  return g;
}

template <class T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::sqrt(T{2})));
}

template <class T>
T gelu_grad(T x) {
  constexpr double inv_sqrt_2pi = 0.398942280401432677939946059934;
  return T{0.5} * (T{1} + std::erf(x / std::sqrt(T{2}))) +
         x * static_cast<T>(inv_sqrt_2pi) * std::exp(T{-0.5} * x * x);
}

// Position-wise w2 . gelu(w1 . x); x [..., C], w1 [C, F], w2 [F, C].
template <class T>
Tensor<T> ffn(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w2) {
  if (w1.ndim() != 2 || w2.ndim() != 2 || w1.dim(1) != w2.dim(0))
    throw std::invalid_argument("ffn: weight shapes inconsistent");
  Tensor<T> hidden = linear(x, w1);
  for (auto& h : hidden.data()) h = gelu(h);
  return linear(hidden, w2);
}

template <class T>
Tensor<T> ffn_backward(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w2,
                       const Tensor<T>& grad_out) {
  const Tensor<T> pre = linear(x, w1);
  Tensor<T> dh = linear_backward(grad_out, w2);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= gelu_grad(pre[i]);
  return linear_backward(dh, w1);
}

inline constexpr double kLayerNormEps = 1e-6;

// Normalizes over the last axis: (x - mean) / sqrt(var + eps), no affine terms.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x) {
  if (x.shape().empty() || x.shape().back() == 0)
    throw std::invalid_argument("layer_norm: channel axis must be >= 1");
  const std::size_t C = x.shape().back(), rows = x.size() / C;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * C;
    T mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(C);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    T* o = out.ptr() + r * C;
    for (std::size_t c = 0; c < C; ++c) o[c] = (xr[c] - mean) * inv;
  }
  return out;
}

template <class T>
Tensor<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_shape(grad_out.shape(), x.shape(), "layer_norm_backward");
  const std::size_t C = x.shape().back(), rows = x.size() / C;
  Tensor<T> dx(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * C;
    const T* g = grad_out.ptr() + r * C;
    T mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(C);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    T gsum = 0, gxhat = 0;
    for (std::size_t c = 0; c < C; ++c) {
      gsum += g[c];
      gxhat += g[c] * (xr[c] - mean) * inv;
    }
    T* o = dx.ptr() + r * C;
    const T n = static_cast<T>(C);
    for (std::size_t c = 0; c < C; ++c) {
      const T xhat = (xr[c] - mean) * inv;
      o[c] = inv * (g[c] - gsum / n - xhat * gxhat / n);
    }
  }
  return dx;
}

}  // namespace yose
