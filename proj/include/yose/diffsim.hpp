#pragma once

// Diffusion process simulator.
//
// Only masked (inner) tokens run through the DiT blocks. Unmasked (outer) tokens
// contribute keys/values built elementwise from the latents:
//   KV = G[i] * lat_mask + (1 - G[i]) * (lat_nis - lat_mask)
//   KV = (1 + S[i]) * KV + Bias[i]
// G is a scalar per block; S and Bias are per-channel vectors per block. The block
// weights are frozen; only (G, S, Bias) are trained, against a mask-restricted
// flow-matching loss.

#include <chrono>
#include <cmath>
#include <random>

#include "yose/bvi.hpp"
#include "yose/maskembed.hpp"
#include "yose/tensorio.hpp"

namespace yose {

template <class T>
struct LatentBundle {
  Tensor<T> lat_nis;   // [B, L, C] noise latent
  Tensor<T> lat_mask;  // [B, L, C] masked-video latent
  Mask latent_mask;    // [B, L], 1 = regenerate
  Tensor<T> pos_emb;   // [L, C]

  std::size_t batch() const { return lat_nis.dim(0); }
  std::size_t tokens() const { return lat_nis.dim(1); }
  std::size_t channels() const { return lat_nis.dim(2); }

  void validate() const {
    require_ndim(lat_nis.shape(), 3, "lat_nis");
    require_shape(lat_mask.shape(), lat_nis.shape(), "lat_mask");
    require_shape(latent_mask.shape(), {batch(), tokens()}, "latent_mask");
    require_shape(pos_emb.shape(), {tokens(), channels()}, "pos_emb");
    require_binary(latent_mask, "latent_mask");
  }
};

// Standard sin/cos table indexed by flattened token position.
template <class T>
Tensor<T> sinusoidal_embedding(std::size_t tokens, std::size_t channels) {
  Tensor<T> pe({tokens, channels});
  for (std::size_t l = 0; l < tokens; ++l)
    for (std::size_t c = 0; c < channels; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(c - c % 2) / static_cast<double>(channels));
      const double a = static_cast<double>(l) * freq;
      pe(l, c) = static_cast<T>(c % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  return pe;
}

template <class T>
struct DiffSimParams {
  std::size_t eta = 0;
  std::size_t channels = 0;
  std::vector<T> g;     // [eta]
  std::vector<T> s;     // [eta * channels]
  std::vector<T> bias;  // [eta * channels]
  bool train_g = true;
  bool train_s = true;
  bool train_bias = true;

  // G = 1, S = 0, Bias = 0: outer keys/values are exactly lat_mask.
  static DiffSimParams neutral(std::size_t eta, std::size_t channels) {
    DiffSimParams p;
    p.eta = eta;
    p.channels = channels;
    p.g.assign(eta, T{1});
    p.s.assign(eta * channels, T{0});
    p.bias.assign(eta * channels, T{0});
    return p;
  }

  void validate() const {
    if (g.size() != eta || s.size() != eta * channels || bias.size() != eta * channels)
      throw std::invalid_argument("DiffSimParams: group sizes do not match eta=" +
                                  std::to_string(eta) + ", channels=" + std::to_string(channels));
  }

  std::size_t count() const { return g.size() + s.size() + bias.size(); }
};

template <class T>
struct ToyDitBlock {
  std::size_t heads = 2;
  Tensor<T> wq, wk, wv, wo;  // [C, C]
  Tensor<T> w1;              // [C, F]
  Tensor<T> w2;              // [F, C]

  std::size_t channels() const { return wq.dim(0); }

  static ToyDitBlock random(std::size_t channels, std::size_t ffn_dim, std::size_t heads,
                            std::mt19937_64& rng) {
    auto mat = [&](std::size_t r, std::size_t c, double scale) {
      std::normal_distribution<double> nd(0.0, scale);
      Tensor<T> w({r, c});
      for (auto& x : w.data()) x = static_cast<T>(nd(rng));
      return w;
    };
    const double sc = 1.0 / std::sqrt(static_cast<double>(channels));
    const double sf = 1.0 / std::sqrt(static_cast<double>(ffn_dim));
    ToyDitBlock blk;
    blk.heads = heads;
    blk.wq = mat(channels, channels, sc);
    blk.wk = mat(channels, channels, sc);
    blk.wv = mat(channels, channels, sc);
    blk.wo = mat(channels, channels, sc);
    blk.w1 = mat(channels, ffn_dim, sc);
    blk.w2 = mat(ffn_dim, channels, sf);
    return blk;
  }
};

template <class T>
std::vector<ToyDitBlock<T>> make_toy_blocks(std::size_t eta, std::size_t channels,
                                            std::size_t ffn_dim, std::size_t heads,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ToyDitBlock<T>> blocks;
  for (std::size_t i = 0; i < eta; ++i)
    blocks.push_back(ToyDitBlock<T>::random(channels, ffn_dim, heads, rng));
  return blocks;
}

// FNV-1a over the raw bytes of every frozen weight.
template <class T>
std::uint64_t weights_digest(const std::vector<ToyDitBlock<T>>& blocks) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const Tensor<T>& t) {
    const auto* p = reinterpret_cast<const unsigned char*>(t.ptr());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& b : blocks) {
    h ^= b.heads;
    for (const auto* w : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) mix(*w);
  }
  return h;
}

enum class GatherSource { masked_latent, noise_latent };

struct DiffSimOptions {
  SamplingConvention conv = SamplingConvention::exact_center;
  GatherSource source = GatherSource::masked_latent;
};

struct RunStats {
  std::vector<std::size_t> query_rows;  // per block
  std::vector<std::size_t> key_rows;    // per block
  double block_ns = 0;                  // attention + FFN work
  double total_ns = 0;
};

template <class T>
Tensor<T> residual_latent(const Tensor<T>& lat_nis, const Tensor<T>& lat_mask) {
  require_shape(lat_mask.shape(), lat_nis.shape(), "residual_latent");
  Tensor<T> out(lat_nis.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lat_nis[i] - lat_mask[i];
  return out;
}

template <class T>
Tensor<T> simulate_kv(const LatentBundle<T>& bundle, const DiffSimParams<T>& params, std::size_t block) {
  if (block >= params.eta)
    throw std::out_of_range("simulate_kv: block " + std::to_string(block) + " out of range");
  const std::size_t C = bundle.channels();
  if (params.channels != C) throw std::invalid_argument("simulate_kv: channel mismatch");
  const T g = params.g[block];
  const T* s = params.s.data() + block * C;
  const T* bias = params.bias.data() + block * C;
  const Tensor<T>& lm = bundle.lat_mask;
  const Tensor<T>& ln = bundle.lat_nis;
  Tensor<T> kv(ln.shape());
  const std::size_t rows = kv.size() / C;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      const T res = ln[i] - lm[i];
      const T mixed = g * lm[i] + (T{1} - g) * res;
      kv[i] = (T{1} + s[c]) * mixed + bias[c];
    }
  return kv;
}

namespace detail {

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// [B, Ma, C] ++ [B, Mb, C] along tokens.
template <class T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t B = a.dim(0), Ma = a.dim(1), Mb = b.dim(1), C = a.dim(2);
  Tensor<T> out({B, Ma + Mb, C});
  for (std::size_t r = 0; r < B; ++r) {
    std::copy(a.ptr() + r * Ma * C, a.ptr() + (r + 1) * Ma * C, out.ptr() + r * (Ma + Mb) * C);
    std::copy(b.ptr() + r * Mb * C, b.ptr() + (r + 1) * Mb * C,
              out.ptr() + (r * (Ma + Mb) + Ma) * C);
  }
  return out;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> split_tokens(const Tensor<T>& x, std::size_t first) {
  const std::size_t B = x.dim(0), M = x.dim(1), C = x.dim(2);
  Tensor<T> a({B, first, C}), b({B, M - first, C});
  for (std::size_t r = 0; r < B; ++r) {
    std::copy(x.ptr() + r * M * C, x.ptr() + (r * M + first) * C, a.ptr() + r * first * C);
    std::copy(x.ptr() + (r * M + first) * C, x.ptr() + (r + 1) * M * C,
              b.ptr() + r * (M - first) * C);
  }
  return {std::move(a), std::move(b)};
}

inline Mask concat_masks(const Mask& a, const Mask& b) {
  const std::size_t B = a.dim(0), Ma = a.dim(1), Mb = b.dim(1);
  Mask out({B, Ma + Mb});
  for (std::size_t r = 0; r < B; ++r) {
    std::copy(a.ptr() + r * Ma, a.ptr() + (r + 1) * Ma, out.ptr() + r * (Ma + Mb));
    std::copy(b.ptr() + r * Mb, b.ptr() + (r + 1) * Mb, out.ptr() + r * (Ma + Mb) + Ma);
  }
  return out;
}

template <class T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t B) {
  Shape s = x.shape();
  s.insert(s.begin(), B);
  Tensor<T> out(s);
  for (std::size_t b = 0; b < B; ++b) std::copy(x.data().begin(), x.data().end(), out.ptr() + b * x.size());
  return out;
}

template <class T>
struct BlockTrace {
  Tensor<T> st_in, q_in, x, hq, q, k, v, st1, h2;
};

template <class T>
struct Trace {
  BviIndex inner, outer;
  Mask kv_valid;
  std::vector<BlockTrace<T>> blocks;
  Tensor<T> st_out;
  Tensor<T> out;
};

template <class T>
Trace<T> forward(const LatentBundle<T>& bundle, const DiffSimParams<T>& params,
                 const std::vector<ToyDitBlock<T>>& blocks, const DiffSimOptions& opts,
                 bool keep_trace, RunStats* stats) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  bundle.validate();
  params.validate();
  if (blocks.size() != params.eta)
    throw std::invalid_argument("run_diffsim: " + std::to_string(blocks.size()) +
                                " blocks but eta=" + std::to_string(params.eta));
  const std::size_t B = bundle.batch(), C = bundle.channels();
  if (params.channels != C) throw std::invalid_argument("run_diffsim: channel mismatch");

  Trace<T> tr;
  tr.inner = build_indices(bundle.latent_mask, opts.conv);
  tr.outer = build_indices(complement(bundle.latent_mask), opts.conv);
  tr.kv_valid = concat_masks(tr.outer.pad_mask, tr.inner.pad_mask);

  const Tensor<T> pos = broadcast_batch(bundle.pos_emb, B);
  const Tensor<T> pos_inner = gather(pos, tr.inner);
  const Tensor<T> pos_outer = gather(pos, tr.outer);

  Tensor<T> st = gather(opts.source == GatherSource::masked_latent ? bundle.lat_mask : bundle.lat_nis,
                        tr.inner);
  double block_ns = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const ToyDitBlock<T>& blk = blocks[i];
    const Tensor<T> xo = add(gather(simulate_kv(bundle, params, i), tr.outer), pos_outer);
    const auto t_block = clock::now();
    BlockTrace<T> bt;
    bt.q_in = add(st, pos_inner);
    bt.x = concat_tokens(xo, bt.q_in);
    bt.hq = layer_norm(bt.q_in);
    bt.q = linear(bt.hq, blk.wq);
    bt.k = linear(bt.x, blk.wk);
    bt.v = linear(bt.x, blk.wv);
    const Tensor<T> a = attention(bt.q, bt.k, bt.v, blk.heads, tr.kv_valid);
    bt.st1 = add(st, linear(a, blk.wo));
    bt.h2 = layer_norm(bt.st1);
    Tensor<T> next = add(bt.st1, ffn(bt.h2, blk.w1, blk.w2));
    block_ns += std::chrono::duration<double, std::nano>(clock::now() - t_block).count();
    if (stats) {
      stats->query_rows.push_back(bt.q.dim(1));
      stats->key_rows.push_back(bt.k.dim(1));
    }
    if (keep_trace) {
      bt.st_in = std::move(st);
      tr.blocks.push_back(std::move(bt));
    }
    st = std::move(next);
  }
  tr.out = scatter(st, tr.inner, bundle.latent_mask);
  tr.st_out = std::move(st);
  if (stats) {
    stats->block_ns += block_ns;
    stats->total_ns += std::chrono::duration<double, std::nano>(clock::now() - t_start).count();
  }
  return tr;
}

}  // namespace detail

// Returns [B, L, C]; exactly zero at unmasked tokens.
template <class T>
Tensor<T> run_diffsim(const LatentBundle<T>& bundle, const DiffSimParams<T>& params,
                      const std::vector<ToyDitBlock<T>>& blocks, const DiffSimOptions& opts = {},
                      RunStats* stats = nullptr) {
  return detail::forward(bundle, params, blocks, opts, false, stats).out;
}

// ||mask * (out - target)||^2 / ||mask||_1, with ||mask||_1 counting masked tokens.
template <class T>
T flow_matching_mask_loss(const Tensor<T>& out, const Tensor<T>& target, const Mask& latent_mask) {
  require_ndim(out.shape(), 3, "flow_matching_mask_loss out");
  require_shape(target.shape(), out.shape(), "flow_matching_mask_loss target");
  require_shape(latent_mask.shape(), {out.dim(0), out.dim(1)}, "flow_matching_mask_loss mask");
  const std::size_t n = count_ones(latent_mask), C = out.dim(2);
  if (n == 0) throw std::domain_error("flow_matching_mask_loss: all-zero mask, division by zero");
  T sum = 0;
  for (std::size_t t = 0; t < latent_mask.size(); ++t) {
    if (!latent_mask[t]) continue;
    for (std::size_t c = 0; c < C; ++c) {
      const T d = out[t * C + c] - target[t * C + c];
      sum += d * d;
    }
  }
  return sum / static_cast<T>(n);
}

template <class T>
struct ParamGrads {
  std::vector<T> g, s, bias;

  T norm() const {
    T acc = 0;
    for (const auto* v : {&g, &s, &bias})
      for (T x : *v) acc += x * x;
    return std::sqrt(acc);
  }
};

template <class T>
struct LossAndGrads {
  T loss;
  ParamGrads<T> grads;
};

// Reverse-mode gradients of the masked flow-matching loss with respect to the
// three parameter groups. Block weights are treated as constants.
template <class T>
LossAndGrads<T> grad_params(const LatentBundle<T>& bundle, const DiffSimParams<T>& params,
                            const std::vector<ToyDitBlock<T>>& blocks, const Tensor<T>& target,
                            const DiffSimOptions& opts = {}) {
  detail::Trace<T> tr = detail::forward(bundle, params, blocks, opts, true, nullptr);
  const Mask& mask = bundle.latent_mask;
  const std::size_t C = bundle.channels(), L = bundle.tokens();
  const std::size_t n_inner_keys = tr.outer.l_max;

  LossAndGrads<T> res;
  res.loss = flow_matching_mask_loss(tr.out, target, mask);

  Tensor<T> dout(tr.out.shape());
  const T scale = T{2} / static_cast<T>(count_ones(mask));
  for (std::size_t i = 0; i < dout.size(); ++i) dout[i] = scale * (tr.out[i] - target[i]);
  Tensor<T> dst = scatter_backward(dout, tr.inner, mask);

  res.grads.g.assign(params.eta, T{0});
  res.grads.s.assign(params.eta * C, T{0});
  res.grads.bias.assign(params.eta * C, T{0});

  for (std::size_t ii = blocks.size(); ii-- > 0;) {
    const ToyDitBlock<T>& blk = blocks[ii];
    const detail::BlockTrace<T>& bt = tr.blocks[ii];

    // st_out = st1 + ffn(LN(st1)); st1 = st_in + attn(...) Wo
    Tensor<T> dst1 = dst;
    detail::add_inplace(dst1, layer_norm_backward(bt.st1, ffn_backward(bt.h2, blk.w1, blk.w2, dst)));
    const Tensor<T> da = linear_backward(dst1, blk.wo);
    const AttentionGrads<T> ag = attention_backward(bt.q, bt.k, bt.v, blk.heads, tr.kv_valid, da);
    Tensor<T> dx = linear_backward(ag.dk, blk.wk);
    detail::add_inplace(dx, linear_backward(ag.dv, blk.wv));
    auto [dxo, dx_inner] = detail::split_tokens(dx, n_inner_keys);

    Tensor<T> dq_in = layer_norm_backward(bt.q_in, linear_backward(ag.dq, blk.wq));
    detail::add_inplace(dq_in, dx_inner);
    dst = std::move(dst1);
    detail::add_inplace(dst, dq_in);

    // Outer keys/values: xo = gather(KV_i, outer) + pos.
    const Tensor<T> dkv = gather_backward(dxo, tr.outer);
    const T g = params.g[ii];
    const T* s = params.s.data() + ii * C;
    T dg = 0;
    T* ds = res.grads.s.data() + ii * C;
    T* dbias = res.grads.bias.data() + ii * C;
    const std::size_t rows = bundle.batch() * L;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = r * C + c;
        const T lm = bundle.lat_mask[k], ln = bundle.lat_nis[k];
        const T mixed = g * lm + (T{1} - g) * (ln - lm);
        const T d = dkv[k];
        dbias[c] += d;
        ds[c] += d * mixed;
        dg += d * (T{1} + s[c]) * (lm - (ln - lm));
      }
    res.grads.g[ii] = dg;
  }
  if (!params.train_g) std::fill(res.grads.g.begin(), res.grads.g.end(), T{0});
  if (!params.train_s) std::fill(res.grads.s.begin(), res.grads.s.end(), T{0});
  if (!params.train_bias) std::fill(res.grads.bias.begin(), res.grads.bias.end(), T{0});
  return res;
}

template <class T>
struct ToyCase {
  LatentBundle<T> bundle;
  Tensor<T> target;  // velocity: noise - clean
};

struct ToyShape {
  std::size_t batch = 2;
  std::size_t frames = 4;
  std::size_t height = 4;
  std::size_t width = 4;
  std::size_t channels = 8;
  double mask_ratio = 0.3;
  double t = 0.5;  // flow-matching time of the noised latent
};

// Builds a toy case from a clean latent [B, L, C] and a token mask [B, L]:
// lat_nis = t*noise + (1-t)*clean, lat_mask = clean outside the mask, target = noise - clean.
template <class T>
ToyCase<T> make_case_from(const Tensor<T>& clean, const Mask& latent_mask, double t, std::uint64_t noise_seed) {
  require_ndim(clean.shape(), 3, "make_case_from clean");
  const std::size_t B = clean.dim(0), L = clean.dim(1), C = clean.dim(2);
  require_shape(latent_mask.shape(), {B, L}, "make_case_from mask");
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  ToyCase<T> tc;
  tc.bundle.lat_nis = Tensor<T>(clean.shape());
  tc.bundle.lat_mask = Tensor<T>(clean.shape());
  tc.target = Tensor<T>(clean.shape());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const T noise = static_cast<T>(nd(rng));
    const T x = clean[i];
    tc.bundle.lat_nis[i] = static_cast<T>(t) * noise + static_cast<T>(1.0 - t) * x;
    tc.bundle.lat_mask[i] = latent_mask[i / C] ? T{0} : x;
    tc.target[i] = noise - x;
  }
  tc.bundle.latent_mask = latent_mask;
  tc.bundle.pos_emb = sinusoidal_embedding<T>(L, C);
  return tc;
}

template <class T>
ToyCase<T> make_toy_case(std::uint64_t seed, const ToyShape& shape = {}) {
  const std::size_t L = shape.frames * shape.height * shape.width, C = shape.channels;
  Tensor<T> clean({shape.batch, L, C});
  Mask mask({shape.batch, L});
  for (std::size_t b = 0; b < shape.batch; ++b) {
    const SynthCase sc = synth_case(seed * 1000003ULL + b, shape.frames, shape.height, shape.width,
                                    C, shape.mask_ratio);
    const Tensor<float> tok = grid_to_tokens(sc.video);
    for (std::size_t i = 0; i < L * C; ++i) clean[b * L * C + i] = static_cast<T>(tok[i]);
    const Mask flat = flatten_tokens(sc.mask);
    std::copy(flat.data().begin(), flat.data().end(), mask.ptr() + b * L);
  }
  return make_case_from(clean, mask, shape.t, seed ^ 0x9E3779B97F4A7C15ULL);
}

struct FinetuneOptions {
  std::size_t steps = 200;
  double lr = 1e-2;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <class T>
struct FinetuneResult {
  DiffSimParams<T> params;
  std::vector<T> losses;  // loss seen at each step, before its update
  T initial_loss = 0;     // mean over the dataset, initial params
  T final_loss = 0;       // mean over the dataset, returned params
};

template <class T>
T dataset_loss(const std::vector<ToyCase<T>>& dataset, const DiffSimParams<T>& params,
               const std::vector<ToyDitBlock<T>>& blocks, const DiffSimOptions& opts) {
  T acc = 0;
  for (const auto& tc : dataset)
    acc += flow_matching_mask_loss(run_diffsim(tc.bundle, params, blocks, opts), tc.target,
                                   tc.bundle.latent_mask);
  return acc / static_cast<T>(dataset.size());
}

// Plain gradient descent on (G, S, Bias), cycling through the dataset one case per step.
template <class T>
FinetuneResult<T> finetune(const std::vector<ToyCase<T>>& dataset,
                           const std::vector<ToyDitBlock<T>>& blocks, DiffSimParams<T> params,
                           const FinetuneOptions& fo = {}, const DiffSimOptions& opts = {}) {
  if (fo.steps == 0) throw std::invalid_argument("finetune: steps must be >= 1");
  if (dataset.empty()) throw std::invalid_argument("finetune: empty dataset");
  FinetuneResult<T> res;
  res.initial_loss = dataset_loss(dataset, params, blocks, opts);
  const T lr = static_cast<T>(fo.lr);
  for (std::size_t step = 0; step < fo.steps; ++step) {
    const ToyCase<T>& tc = dataset[step % dataset.size()];
    LossAndGrads<T> lg = grad_params(tc.bundle, params, blocks, tc.target, opts);
    if (!std::isfinite(static_cast<double>(lg.loss)))
      throw std::runtime_error("finetune: loss diverged at step " + std::to_string(step));
    res.losses.push_back(lg.loss);
    T factor = lr;
    if (fo.clip_norm > 0) {
      const T n = lg.grads.norm();
      if (n > static_cast<T>(fo.clip_norm)) factor *= static_cast<T>(fo.clip_norm) / n;
    }
    for (std::size_t i = 0; i < params.g.size(); ++i) params.g[i] -= factor * lg.grads.g[i];
    for (std::size_t i = 0; i < params.s.size(); ++i) params.s[i] -= factor * lg.grads.s[i];
    for (std::size_t i = 0; i < params.bias.size(); ++i) params.bias[i] -= factor * lg.grads.bias[i];
  }
  res.final_loss = dataset_loss(dataset, params, blocks, opts);
  if (!std::isfinite(static_cast<double>(res.final_loss)))
    throw std::runtime_error("finetune: final loss is not finite");
  res.params = std::move(params);
  return res;
}

}  // namespace yose
