#pragma once

// Central finite differences of the masked flow-matching loss with respect to the
// DiffSim parameter groups. Uses only the forward pass, so it checks grad_params()
// independently.

#include "yose/diffsim.hpp"

namespace yose {

// Flat view over (g, s, bias) in that order.
template <class T>
T& param_at(DiffSimParams<T>& p, std::size_t i) {
  if (i < p.g.size()) return p.g[i];
  i -= p.g.size();
  if (i < p.s.size()) return p.s[i];
  return p.bias[i - p.s.size()];
}

template <class T>
T grad_at(const ParamGrads<T>& g, std::size_t i) {
  if (i < g.g.size()) return g.g[i];
  i -= g.g.size();
  if (i < g.s.size()) return g.s[i];
  return g.bias[i - g.s.size()];
}

inline std::vector<double> finite_difference_grads(const ToyCase<double>& tc,
                                                   const DiffSimParams<double>& params,
                                                   const std::vector<ToyDitBlock<double>>& blocks,
                                                   double eps, const DiffSimOptions& opts = {}) {
  DiffSimParams<double> p = params;
  std::vector<double> out(p.count());
  auto loss = [&] {
    return flow_matching_mask_loss(run_diffsim(tc.bundle, p, blocks, opts), tc.target,
                                   tc.bundle.latent_mask);
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    double& x = param_at(p, i);
    const double x0 = x;
    x = x0 + eps;
    const double up = loss();
    x = x0 - eps;
    const double dn = loss();
    x = x0;
    out[i] = (up - dn) / (2 * eps);
  }
  return out;
}

// |a - f| / max(|a|, |f|); components where both magnitudes are below `floor`
// are compared absolutely against it.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double diff = std::abs(analytic - numeric);
  return scale < floor ? diff / floor : diff / scale;
}

struct GradcheckReport {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  std::size_t components = 0;
  double loss = 0;
};

// Default toy instance: ToyShape{} latents, eta = 2, heads = 2, F = 16, and
// parameters drawn away from the neutral point so every path is exercised.
struct GradcheckInstance {
  ToyCase<double> tc;
  std::vector<ToyDitBlock<double>> blocks;
  DiffSimParams<double> params;
};

inline GradcheckInstance make_gradcheck_instance(std::uint64_t seed) {
  const ToyShape shape;
  GradcheckInstance inst{make_toy_case<double>(seed, shape),
                         make_toy_blocks<double>(2, shape.channels, 16, 2, seed + 101),
                         DiffSimParams<double>::neutral(2, shape.channels)};
  std::mt19937_64 rng(seed + 202);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& g : inst.params.g) g = 0.5 + u(rng);
  for (auto& s : inst.params.s) s = u(rng);
  for (auto& b : inst.params.bias) b = u(rng);
  return inst;
}

inline GradcheckReport run_gradcheck(const GradcheckInstance& inst, double eps,
                                     const DiffSimOptions& opts = {}) {
  const LossAndGrads<double> lg = grad_params(inst.tc.bundle, inst.params, inst.blocks, inst.tc.target, opts);
  const std::vector<double> fd = finite_difference_grads(inst.tc, inst.params, inst.blocks, eps, opts);
  GradcheckReport rep;
  rep.loss = lg.loss;
  rep.components = fd.size();
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double e = relative_error(grad_at(lg.grads, i), fd[i]);
    if (e > rep.max_rel_error) {
      rep.max_rel_error = e;
      rep.worst_index = i;
    }
  }
  return rep;
}

}  // namespace yose
