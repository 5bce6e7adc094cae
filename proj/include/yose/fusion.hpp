#pragma once

// Boundary harmonization: mean/variance alignment over the dilation band, the
// {0, 0.5, 1} weighted blend, and nearest-unmasked-pixel prefill.

#include "yose/diffsim.hpp"

namespace yose {

inline constexpr double kSigmaFloor = 1e-5;

enum class StatsMode { pooled, per_channel };

// Per batch row: one entry when pooled, `channels` entries when per-channel.
template <class T>
struct OverlapStats {
  std::size_t groups = 1;
  std::vector<T> mu_pred, sigma_pred, mu_orig, sigma_orig;  // [B * groups]
};

namespace detail {

// Mean and population standard deviation of the valid rows of a gathered band.
template <class T>
void band_moments(const Tensor<T>& band, const Mask& valid, std::size_t b, StatsMode mode,
                  std::vector<T>& mu, std::vector<T>& sigma) {
  const std::size_t M = band.dim(1), C = band.dim(2);
  const std::size_t groups = mode == StatsMode::pooled ? 1 : C;
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t m = 0; m < M; ++m) {
      if (!valid(b, m)) continue;
      for (std::size_t c = 0; c < C; ++c) {
        if (mode == StatsMode::per_channel && c != gidx) continue;
        const double x = band(b, m, c);
        sum += x;
        ++n;
      }
    }
    const double mean = sum / static_cast<double>(n);
    for (std::size_t m = 0; m < M; ++m) {
      if (!valid(b, m)) continue;
      for (std::size_t c = 0; c < C; ++c) {
        if (mode == StatsMode::per_channel && c != gidx) continue;
        const double d = band(b, m, c) - mean;
        sq += d * d;
      }
    }
    mu.push_back(static_cast<T>(mean));
    sigma.push_back(static_cast<T>(std::sqrt(sq / static_cast<double>(n))));
  }
}

}  // namespace detail

// Statistics of pred and orig over the overlap band, extracted with the BVI gather.
template <class T>
OverlapStats<T> overlap_stats(const Tensor<T>& pred, const Tensor<T>& orig, const Mask& overlap,
                              StatsMode mode = StatsMode::pooled,
                              SamplingConvention conv = SamplingConvention::exact_center) {
  require_ndim(pred.shape(), 3, "overlap_stats pred");
  require_shape(orig.shape(), pred.shape(), "overlap_stats orig");
  require_shape(overlap.shape(), {pred.dim(0), pred.dim(1)}, "overlap_stats overlap");
  require_binary(overlap, "overlap_stats");
  for (std::size_t b = 0; b < overlap.dim(0); ++b) {
    std::size_t n = 0;
    for (std::size_t l = 0; l < overlap.dim(1); ++l) n += overlap(b, l);
    if (n < 2) throw std::invalid_argument("degenerate overlap band in row b=" + std::to_string(b));
  }
  const BviIndex idx = build_indices(overlap, conv);
  const Tensor<T> pb = gather(pred, idx), ob = gather(orig, idx);
  OverlapStats<T> st;
  st.groups = mode == StatsMode::pooled ? 1 : pred.dim(2);
  for (std::size_t b = 0; b < pred.dim(0); ++b) {
    detail::band_moments(pb, idx.pad_mask, b, mode, st.mu_pred, st.sigma_pred);
    detail::band_moments(ob, idx.pad_mask, b, mode, st.mu_orig, st.sigma_orig);
  }
  return st;
}

// tokens <- sigma_orig * (tokens - mu_pred) / sigma_pred + mu_orig, on the tokens
// selected by `region` (all tokens when null). Below kSigmaFloor only the mean shifts.
template <class T>
Tensor<T> align(const Tensor<T>& tokens, const OverlapStats<T>& stats, const Mask* region = nullptr) {
  require_ndim(tokens.shape(), 3, "align");
  const std::size_t B = tokens.dim(0), M = tokens.dim(1), C = tokens.dim(2);
  if (stats.mu_pred.size() != B * stats.groups || (stats.groups != 1 && stats.groups != C))
    throw std::invalid_argument("align: stats do not match tokens " + shape_str(tokens.shape()));
  if (region) require_shape(region->shape(), {B, M}, "align region");
  Tensor<T> out = tokens;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < M; ++m) {
      if (region && !(*region)(b, m)) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = b * stats.groups + (stats.groups == 1 ? 0 : c);
        T& x = out(b, m, c);
        if (stats.sigma_pred[k] < static_cast<T>(kSigmaFloor))
          x = x - stats.mu_pred[k] + stats.mu_orig[k];
        else
          x = stats.sigma_orig[k] * (x - stats.mu_pred[k]) / stats.sigma_pred[k] + stats.mu_orig[k];
      }
    }
  return out;
}

// (mask + mask_dilate) / 2, values in {0, 0.5, 1}.
template <class T>
Tensor<T> fusion_weights(const Mask& mask, const Mask& mask_dilate) {
  require_shape(mask_dilate.shape(), mask.shape(), "fusion_weights");
  Tensor<T> w(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 1 || mask_dilate[i] > 1) throw std::invalid_argument("fusion_weights: non-binary mask");
    if (mask[i] && !mask_dilate[i])
      throw std::invalid_argument("blend: mask_dilate does not contain mask");
    w[i] = static_cast<T>(mask[i] + mask_dilate[i]) / T{2};
  }
  return w;
}

// video_mask * (1 - W) + out * W over tokens [B, L, C] with masks [B, L].
template <class T>
Tensor<T> blend(const Tensor<T>& video_mask, const Tensor<T>& out, const Mask& mask,
                const Mask& mask_dilate) {
  require_ndim(video_mask.shape(), 3, "blend video_mask");
  require_shape(out.shape(), video_mask.shape(), "blend out");
  require_shape(mask.shape(), {video_mask.dim(0), video_mask.dim(1)}, "blend mask");
  const Tensor<T> w = fusion_weights<T>(mask, mask_dilate);
  const std::size_t C = video_mask.dim(2);
  Tensor<T> res(video_mask.shape());
  for (std::size_t t = 0; t < w.size(); ++t)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = t * C + c;
      if (w[t] == T{0}) res[i] = video_mask[i];
      else if (w[t] == T{1}) res[i] = out[i];
      else res[i] = video_mask[i] * (T{1} - w[t]) + out[i] * w[t];
    }
  return res;
}

// Replaces each masked pixel by its nearest unmasked pixel in the same frame
// (Euclidean; ties go to the earlier pixel in scan order).
// video [B, Ch, F, H, W], mask [B, 1, F, H, W].
template <class T>
Tensor<T> prefill_neighbors(const Tensor<T>& video, const Mask& mask) {
  require_ndim(video.shape(), 5, "prefill_neighbors video");
  const std::size_t B = video.dim(0), Ch = video.dim(1), F = video.dim(2), H = video.dim(3),
                    W = video.dim(4);
  require_shape(mask.shape(), {B, 1, F, H, W}, "prefill_neighbors mask");
  require_binary(mask, "prefill_neighbors");
  Tensor<T> out = video;
  const auto Hs = static_cast<long>(H), Ws = static_cast<long>(W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f) {
      const std::uint8_t* m = &mask(b, 0, f, 0, 0);
      if (std::all_of(m, m + H * W, [](std::uint8_t v) { return v != 0; }))
        throw std::invalid_argument("prefill_neighbors: fully masked frame b=" + std::to_string(b) +
                                    " f=" + std::to_string(f));
      for (long y = 0; y < Hs; ++y)
        for (long x = 0; x < Ws; ++x) {
          if (!m[y * Ws + x]) continue;
          // Expand Chebyshev rings; a ring of radius r holds distances >= r.
          long best_d2 = -1, best = -1;
          for (long r = 1;; ++r) {
            if (best_d2 >= 0 && r * r > best_d2) break;
            if (r > std::max(Hs, Ws)) break;
            for (long yy = y - r; yy <= y + r; ++yy) {
              if (yy < 0 || yy >= Hs) continue;
              const bool edge_row = (yy == y - r || yy == y + r);
              for (long xx = x - r; xx <= x + r; xx += edge_row ? 1 : 2 * r) {
                if (xx < 0 || xx >= Ws || m[yy * Ws + xx]) continue;
                const long d2 = (yy - y) * (yy - y) + (xx - x) * (xx - x);
                const long lin = yy * Ws + xx;
                if (best_d2 < 0 || d2 < best_d2 || (d2 == best_d2 && lin < best)) {
                  best_d2 = d2;
                  best = lin;
                }
              }
            }
          }
          for (std::size_t c = 0; c < Ch; ++c) {
            T* plane = &out(b, c, f, 0, 0);
            const T* src = &video(b, c, f, 0, 0);
            plane[y * Ws + x] = src[best];
          }
        }
    }
  return out;
}

struct FusionOptions {
  std::size_t dilate_radius = 2;
  StatsMode mode = StatsMode::pooled;
  bool band_only = false;  // align only the band tokens instead of every inner token
};

// DiffSim over the dilated mask, alignment on the dilation band, then blend with
// the masked-video latent. `frames/height/width` give the latent grid of the tokens.
template <class T>
Tensor<T> run_with_fusion(const LatentBundle<T>& bundle, std::size_t frames, std::size_t height,
                          std::size_t width, const DiffSimParams<T>& params,
                          const std::vector<ToyDitBlock<T>>& blocks, const DiffSimOptions& opts = {},
                          const FusionOptions& fo = {}, RunStats* stats = nullptr) {
  bundle.validate();
  const Mask& mask = bundle.latent_mask;
  const Mask dil = flatten_tokens(dilate_mask(unflatten_tokens(mask, frames, height, width), fo.dilate_radius));
  const Mask band = overlap_band(mask, dil);
  LatentBundle<T> wide = bundle;
  wide.latent_mask = dil;
  const Tensor<T> pred = run_diffsim(wide, params, blocks, opts, stats);
  const OverlapStats<T> st = overlap_stats(pred, bundle.lat_mask, band, fo.mode, opts.conv);
  const Tensor<T> aligned = align(pred, st, fo.band_only ? &band : &dil);
  return blend(bundle.lat_mask, aligned, mask, dil);
}

}  // namespace yose
