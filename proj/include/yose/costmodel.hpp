#pragma once

// Analytical FLOPs / speedup model of mask-aware DiT inference, mask-ratio corpus
// statistics, and an empirical wall-clock sweep over mask ratios.
//
//   G(gamma) = gamma * (49 + 12c + 4n + 4hn/c + 9f) * beta * eta,  beta = b*n*c
//   flops    = G(gamma) + phi * G(1)
//   speedup  = (1 + phi) / (gamma + phi)

#include <array>
#include <chrono>
#include <cstdio>
#include <ostream>
#include <random>

#include "yose/diffsim.hpp"

namespace yose {

struct CostModelConfig {
  double b = 1;
  double n = 89040;
  double c = 1536;
  double h = 12;
  double f = 8960;
  double eta = 30;
  double phi = 0;    // fixed overhead as a fraction of G(1)
  double gamma = 1;  // mask ratio

  void validate() const {
    for (double v : {b, n, c, h, f, eta})
      if (!(v >= 1)) throw std::invalid_argument("CostModelConfig: counts must be >= 1");
    if (!(gamma >= 0 && gamma <= 1)) throw std::invalid_argument("CostModelConfig: gamma must be in [0, 1]");
    if (!(phi >= 0)) throw std::invalid_argument("CostModelConfig: phi must be >= 0");
  }

  // 49 + 12c + 4n + 4hn/c + 9f
  double per_token_factor() const { return 49 + 12 * c + 4 * n + 4 * h * n / c + 9 * f; }
  double beta() const { return b * n * c; }
};

// G(gamma), the mask-proportional part only.
inline double linear_flops(const CostModelConfig& cfg) {
  cfg.validate();
  return cfg.gamma * cfg.per_token_factor() * cfg.beta() * cfg.eta;
}

inline double flops(const CostModelConfig& cfg) {
  CostModelConfig full = cfg;
  full.gamma = 1;
  return linear_flops(cfg) + cfg.phi * linear_flops(full);
}

inline double speedup(const CostModelConfig& cfg) {
  cfg.validate();
  return (1 + cfg.phi) / (cfg.gamma + cfg.phi);
}

inline double speedup(double gamma, double phi) {
  CostModelConfig cfg;
  cfg.gamma = gamma;
  cfg.phi = phi;
  return speedup(cfg);
}

// Solves (1 + phi) = s * (gamma + phi) for phi.
inline double fit_phi(double anchor_gamma, double anchor_speedup) {
  if (!(anchor_speedup > 1)) throw std::invalid_argument("fit_phi: anchor speedup must be > 1");
  if (!(anchor_gamma >= 0 && anchor_gamma < 1)) throw std::invalid_argument("fit_phi: anchor gamma must be in [0, 1)");
  const double phi = (1 - anchor_speedup * anchor_gamma) / (anchor_speedup - 1);
  if (phi < 0)
    throw std::invalid_argument("fit_phi: infeasible anchor (speedup " + std::to_string(anchor_speedup) +
                                " at gamma " + std::to_string(anchor_gamma) + " implies phi < 0)");
  return phi;
}

// Fraction of latent tokens masked after block embedding; the ratio that drives cost.
inline double effective_gamma(const Mask& pixel_mask, const StrideSpec& strides) {
  const Mask latent = embed_mask(pixel_mask, strides);
  return static_cast<double>(count_ones(latent)) / static_cast<double>(latent.size());
}

inline constexpr std::size_t kRatioBins = 20;  // 5% wide

struct MaskRatioStats {
  std::vector<double> ratios;
  std::array<std::size_t, kRatioBins> histogram{};
  double frac_below_20 = 0;
};

inline std::size_t ratio_bin(double ratio) {
  const auto bin = static_cast<std::size_t>(std::floor(ratio * kRatioBins + 1e-9));
  return std::min(bin, kRatioBins - 1);
}

inline MaskRatioStats mask_ratio_stats(std::span<const Mask> masks) {
  if (masks.empty()) throw std::invalid_argument("mask_ratio_stats: no masks");
  MaskRatioStats st;
  std::size_t below = 0;
  for (const Mask& m : masks) {
    require_binary(m, "mask_ratio_stats");
    const double r = static_cast<double>(count_ones(m)) / static_cast<double>(m.size());
    st.ratios.push_back(r);
    ++st.histogram[ratio_bin(r)];
    if (r < 0.20) ++below;
  }
  st.frac_below_20 = static_cast<double>(below) / static_cast<double>(masks.size());
  return st;
}

inline void write_histogram_csv(std::ostream& os, const MaskRatioStats& st) {
  os << "bin_lo,bin_hi,count,fraction\n";
  for (std::size_t i = 0; i < kRatioBins; ++i) {
    os << static_cast<double>(i) / kRatioBins << ',' << static_cast<double>(i + 1) / kRatioBins << ','
       << st.histogram[i] << ',' << static_cast<double>(st.histogram[i]) / st.ratios.size() << '\n';
  }
}

struct LinearFit {
  double slope = 0, intercept = 0, r2 = 0;
};

inline LinearFit linear_regression(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("linear_regression: need >= 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

struct BenchConfig {
  std::size_t tokens = 4096;
  std::size_t channels = 64;
  std::size_t eta = 4;
  std::size_t heads = 2;
  std::size_t ffn_dim = 0;  // 0 -> 2 * channels
  std::size_t warmup = 3;
  std::size_t reps = 5;
  std::uint64_t seed = 1;
};

struct BenchRow {
  double gamma = 0;
  double predicted_flops = 0;
  double ns_attention = 0;  // median attention + FFN time per run
  double ns_total = 0;      // median end-to-end run time
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Mask of exactly round(gamma * tokens) tokens at random positions, clamped so both
// inner and outer sets are non-empty.
inline Mask random_token_mask(std::size_t tokens, double gamma, std::mt19937_64& rng) {
  auto k = static_cast<std::size_t>(std::llround(gamma * static_cast<double>(tokens)));
  k = std::clamp<std::size_t>(k, 1, tokens - 1);
  std::vector<std::size_t> perm(tokens);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Mask m({1, tokens}, 0);
  for (std::size_t i = 0; i < k; ++i) m[perm[i]] = 1;
  return m;
}

// Sequential timing runs: `warmup` untimed, then the median of `reps` per gamma.
// Rounds visit every gamma in turn, so a slow stretch on the host costs one sample
// at several ratios instead of every sample at one ratio.
inline std::vector<BenchRow> bench_sweep(std::span<const double> gammas, const BenchConfig& cfg) {
  const std::size_t C = cfg.channels, L = cfg.tokens;
  const std::size_t F = cfg.ffn_dim ? cfg.ffn_dim : 2 * C;
  const auto blocks = make_toy_blocks<float>(cfg.eta, C, F, cfg.heads, cfg.seed);
  const auto params = DiffSimParams<float>::neutral(cfg.eta, C);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> nd(0.f, 1.f);
  Tensor<float> clean({1, L, C});
  for (auto& x : clean.data()) x = nd(rng);

  std::vector<ToyCase<float>> cases;
  for (double gamma : gammas)
    cases.push_back(make_case_from(clean, random_token_mask(L, gamma, rng), 0.5, cfg.seed + 17));
  std::vector<std::vector<double>> attn(gammas.size()), total(gammas.size());
  for (std::size_t r = 0; r < cfg.warmup + cfg.reps; ++r)
    for (std::size_t i = 0; i < gammas.size(); ++i) {
      RunStats st;
      (void)run_diffsim(cases[i].bundle, params, blocks, {}, &st);
      if (r >= cfg.warmup) {
        attn[i].push_back(st.block_ns);
        total[i].push_back(st.total_ns);
      }
    }

  std::vector<BenchRow> rows;
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    CostModelConfig cm;
    cm.b = 1;
    cm.n = static_cast<double>(L);
    cm.c = static_cast<double>(C);
    cm.h = static_cast<double>(cfg.heads);
    cm.f = static_cast<double>(F);
    cm.eta = static_cast<double>(cfg.eta);
    cm.gamma = gammas[i];
    rows.push_back({gammas[i], flops(cm), median(attn[i]), median(total[i])});
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, std::span<const BenchRow> rows) {
  os << "gamma,predicted_flops,measured_ns_attention,measured_ns_total\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.4f,%.6e,%.0f,%.0f\n", r.gamma, r.predicted_flops,
                  r.ns_attention, r.ns_total);
    os << buf;
  }
}

}  // namespace yose
