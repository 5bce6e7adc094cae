#pragma once

// Pixel mask -> latent token mask under 3D-VAE block strides, token flattening,
// and per-frame spatial dilation.

#include "yose/tensor.hpp"

namespace yose {

struct StrideSpec {
  std::size_t f_v = 4;
  std::size_t h_v = 8;
  std::size_t w_v = 8;
};

// A latent cell is 1 - prod(1 - m) over its f_v x h_v x w_v block, i.e. the OR of the block.
inline Mask embed_mask(const Mask& mask, const StrideSpec& s) {
  require_ndim(mask.shape(), 5, "embed_mask");
  if (mask.dim(1) != 1) throw std::invalid_argument("embed_mask: expected a single mask channel");
  if (s.f_v == 0 || s.h_v == 0 || s.w_v == 0)
    throw std::invalid_argument("embed_mask: strides must be >= 1");
  const std::size_t B = mask.dim(0), F = mask.dim(2), H = mask.dim(3), W = mask.dim(4);
  if (F % s.f_v || H % s.h_v || W % s.w_v)
    throw std::invalid_argument("embed_mask: dims " + shape_str(mask.shape()) +
                                " not divisible by strides (" + std::to_string(s.f_v) + "," +
                                std::to_string(s.h_v) + "," + std::to_string(s.w_v) + ")");
  require_binary(mask, "embed_mask");
  const std::size_t Fl = F / s.f_v, Hl = H / s.h_v, Wl = W / s.w_v;
  Mask out({B, 1, Fl, Hl, Wl}, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t h = 0; h < H; ++h) {
        const std::uint8_t* row = &mask(b, 0, f, h, 0);
        std::uint8_t* orow = &out(b, 0, f / s.f_v, h / s.h_v, 0);
        for (std::size_t w = 0; w < W; ++w) orow[w / s.w_v] |= row[w];
      }
  return out;
}

// [B, 1, F, H, W] -> [B, F*H*W]; frame-major, then row, then column.
template <class T>
Tensor<T> flatten_tokens(const Tensor<T>& grid) {
  require_ndim(grid.shape(), 5, "flatten_tokens");
  if (grid.dim(1) != 1) throw std::invalid_argument("flatten_tokens: expected one channel");
  return grid.reshaped({grid.dim(0), grid.dim(2) * grid.dim(3) * grid.dim(4)});
}

template <class T>
Tensor<T> unflatten_tokens(const Tensor<T>& tokens, std::size_t frames, std::size_t height,
                           std::size_t width) {
  require_ndim(tokens.shape(), 2, "unflatten_tokens");
  if (tokens.dim(1) != frames * height * width)
    throw std::invalid_argument("unflatten_tokens: token count does not match grid");
  return tokens.reshaped({tokens.dim(0), 1, frames, height, width});
}

// [B, C, F, H, W] -> [B, F*H*W, C] token-major features.
template <class T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
  require_ndim(grid.shape(), 5, "grid_to_tokens");
  const std::size_t B = grid.dim(0), C = grid.dim(1);
  const std::size_t L = grid.dim(2) * grid.dim(3) * grid.dim(4);
  Tensor<T> out({B, L, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t l = 0; l < L; ++l) out(b, l, c) = grid[(b * C + c) * L + l];
  return out;
}

template <class T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, std::size_t frames, std::size_t height,
                         std::size_t width) {
  require_ndim(tokens.shape(), 3, "tokens_to_grid");
  const std::size_t B = tokens.dim(0), L = tokens.dim(1), C = tokens.dim(2);
  if (L != frames * height * width)
    throw std::invalid_argument("tokens_to_grid: token count does not match grid");
  Tensor<T> out({B, C, frames, height, width});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * L + l] = tokens(b, l, c);
  return out;
}

// Square (2r+1)^2 structuring element, applied per frame; no temporal growth.
inline Mask dilate_mask(const Mask& mask, std::size_t radius) {
  require_ndim(mask.shape(), 5, "dilate_mask");
  if (radius == 0) return mask;
  const std::size_t planes = mask.dim(0) * mask.dim(1) * mask.dim(2);
  const std::size_t H = mask.dim(3), W = mask.dim(4);
  Mask rows(mask.shape(), 0), out(mask.shape(), 0);
  // Separable: horizontal pass then vertical pass.
  for (std::size_t p = 0; p < planes; ++p) {
    const std::uint8_t* src = mask.ptr() + p * H * W;
    std::uint8_t* tmp = rows.ptr() + p * H * W;
    std::uint8_t* dst = out.ptr() + p * H * W;
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        if (!src[h * W + w]) continue;
        const std::size_t lo = w >= radius ? w - radius : 0, hi = std::min(W - 1, w + radius);
        for (std::size_t x = lo; x <= hi; ++x) tmp[h * W + x] = 1;
      }
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        if (!tmp[h * W + w]) continue;
        const std::size_t lo = h >= radius ? h - radius : 0, hi = std::min(H - 1, h + radius);
        for (std::size_t y = lo; y <= hi; ++y) dst[y * W + w] = 1;
      }
  }
  return out;
}

// mask_dilate - mask, for a superset pair.
inline Mask overlap_band(const Mask& mask, const Mask& mask_dilate) {
  require_shape(mask_dilate.shape(), mask.shape(), "overlap_band");
  Mask out(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] && !mask_dilate[i])
      throw std::invalid_argument("overlap_band: dilated mask does not contain mask");
    out[i] = static_cast<std::uint8_t>(mask_dilate[i] - mask[i]);
  }
  return out;
}

}  // namespace yose
