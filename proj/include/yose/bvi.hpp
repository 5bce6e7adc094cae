#pragma once

// Batch variable-length indexing: converts a binary token mask into normalized
// sampling coordinates that gather the masked tokens of every batch row into a
// right-padded short sequence, and scatter a short sequence back to full length.
// Both directions are linear interpolation, hence differentiable in the values.

#include "yose/numerics.hpp"

namespace yose {

enum class SamplingConvention {
  exact_center,    // grid points at -1 + (2i+1)/L, lossless with sample_point()
  paper_verbatim,  // literal linspace grids; round trips blend neighbours
};

inline constexpr double kPadCoordinate = 1.0;

struct BviIndex {
  Tensor<double> ind_f;              // [B, l_max], right-padded with kPadCoordinate
  Tensor<double> ind_b;              // [B, L]
  std::vector<std::size_t> lengths;  // masked tokens per row
  std::size_t l_max = 0;
  Mask pad_mask;                     // [B, l_max], 1 = real token

  std::size_t batch() const { return lengths.size(); }
  std::size_t tokens() const { return ind_b.dim(1); }
};

namespace detail {

inline Tensor<double> center_grid(std::size_t n) {
  Tensor<double> g({n});
  for (std::size_t i = 0; i < n; ++i)
    g[i] = -1.0 + static_cast<double>(2 * i + 1) / static_cast<double>(n);
  return g;
}

}  // namespace detail

inline BviIndex build_indices(const Mask& mask, SamplingConvention conv = SamplingConvention::exact_center) {
  require_ndim(mask.shape(), 2, "build_indices mask");
  require_binary(mask, "build_indices");
  const std::size_t B = mask.dim(0), L = mask.dim(1);
  if (B == 0 || L == 0) throw std::invalid_argument("build_indices: empty mask");

  const double Ld = static_cast<double>(L);
  const Tensor<double> sample = conv == SamplingConvention::exact_center
                                    ? detail::center_grid(L)
                                    : linspace(1.0 / (2.0 * Ld) - 1.0, 1.0 - 1.0 / (2.0 * Ld), L);

  BviIndex idx;
  idx.lengths.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t n = 0;
    for (std::size_t l = 0; l < L; ++l) n += mask(b, l);
    if (n == 0) throw std::invalid_argument("empty mask row b=" + std::to_string(b));
    idx.lengths[b] = n;
  }
  idx.l_max = *std::max_element(idx.lengths.begin(), idx.lengths.end());
  const std::size_t l_max = idx.l_max;

  idx.ind_f = Tensor<double>({B, l_max}, kPadCoordinate);
  idx.pad_mask = Mask({B, l_max}, 0);
  idx.ind_b = Tensor<double>({B, L});

  const Tensor<double> short_centers = detail::center_grid(l_max);
  const double delta = 1.0 / (2.0 * static_cast<double>(l_max));

  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t n = idx.lengths[b];
    Tensor<double> ind_short;
    if (conv == SamplingConvention::exact_center || l_max == 1) {
      ind_short = Tensor<double>({n});
      for (std::size_t j = 0; j < n; ++j) ind_short[j] = short_centers[j];
    } else {
      const double start = delta - 1.0;
      const double end = start + static_cast<double>(n - 1) * (2.0 - 2.0 * delta) /
                                     static_cast<double>(l_max - 1);
      ind_short = linspace(start, end, n);
    }
    std::size_t j = 0;
    for (std::size_t l = 0; l < L; ++l) {
      if (mask(b, l)) {
        idx.ind_f(b, j) = sample[l];
        idx.pad_mask(b, j) = 1;
        idx.ind_b(b, l) = ind_short[j];
        ++j;
      } else {
        idx.ind_b(b, l) = sample[l];
      }
    }
  }
  return idx;
}

template <class T>
Tensor<T> gather(const Tensor<T>& tokens, const BviIndex& idx) {
  require_ndim(tokens.shape(), 3, "gather tokens");
  if (tokens.dim(0) != idx.batch() || tokens.dim(1) != idx.tokens())
    throw std::invalid_argument("gather: tokens " + shape_str(tokens.shape()) +
                                " do not match index [" + std::to_string(idx.batch()) + "," +
                                std::to_string(idx.tokens()) + "]");
  return gsample_1d(tokens, idx.ind_f);
}

// Adjoint of gather().
template <class T>
Tensor<T> gather_backward(const Tensor<T>& grad_short, const BviIndex& idx) {
  return gsample_1d_backward(grad_short, idx.ind_f, idx.tokens());
}

namespace detail {

template <class T>
void apply_token_mask(Tensor<T>& x, const Mask& mask) {
  const std::size_t C = x.dim(2), n = mask.size();
  for (std::size_t t = 0; t < n; ++t)
    if (!mask[t]) std::fill(x.ptr() + t * C, x.ptr() + (t + 1) * C, T{0});
}

}  // namespace detail

// mask * gsample(short, ind_b): exactly zero at unmasked positions.
template <class T>
Tensor<T> scatter(const Tensor<T>& short_tokens, const BviIndex& idx, const Mask& mask) {
  require_ndim(short_tokens.shape(), 3, "scatter short");
  if (short_tokens.dim(0) != idx.batch() || short_tokens.dim(1) != idx.l_max)
    throw std::invalid_argument("scatter: short tokens " + shape_str(short_tokens.shape()) +
                                " do not match index l_max " + std::to_string(idx.l_max));
  require_shape(mask.shape(), {idx.batch(), idx.tokens()}, "scatter mask");
  Tensor<T> out = gsample_1d(short_tokens, idx.ind_b);
  detail::apply_token_mask(out, mask);
  return out;
}

// Adjoint of scatter().
template <class T>
Tensor<T> scatter_backward(const Tensor<T>& grad_out, const BviIndex& idx, const Mask& mask) {
  Tensor<T> g = grad_out;
  detail::apply_token_mask(g, mask);
  return gsample_1d_backward(g, idx.ind_b, idx.l_max);
}

// Key-validity row for [short tokens ++ extra_valid always-valid tokens].
inline Mask pad_attention_mask(const BviIndex& idx, std::size_t extra_valid) {
  const std::size_t B = idx.batch(), W = idx.l_max + extra_valid;
  Mask out({B, W}, 1);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < idx.l_max; ++j) out(b, j) = idx.pad_mask(b, j);
  return out;
}

inline Mask complement(const Mask& m) {
  Mask out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] ? 0 : 1;
  return out;
}

}  // namespace yose
