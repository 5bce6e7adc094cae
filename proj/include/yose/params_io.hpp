#pragma once

// DiffSim parameters on disk: <prefix>.g.yt, <prefix>.s.yt, <prefix>.bias.yt (f64)
// plus <prefix>.params.txt with the toy model description (key=value lines).
// Frozen block weights are regenerated from the recorded seed.

#include <map>

#include "yose/diffsim.hpp"

namespace yose {

struct ToyModelSpec {
  std::size_t eta = 2;
  std::size_t channels = 8;
  std::size_t heads = 2;
  std::size_t ffn_dim = 16;
  std::uint64_t seed = 0;

  template <class T>
  std::vector<ToyDitBlock<T>> blocks() const {
    return make_toy_blocks<T>(eta, channels, ffn_dim, heads, seed);
  }
};

inline void save_params(const std::string& prefix, const DiffSimParams<double>& p, const ToyModelSpec& spec) {
  p.validate();
  save_tensor(Tensor<double>({p.eta}, p.g), prefix + ".g.yt");
  save_tensor(Tensor<double>({p.eta, p.channels}, p.s), prefix + ".s.yt");
  save_tensor(Tensor<double>({p.eta, p.channels}, p.bias), prefix + ".bias.yt");
  std::ofstream f(prefix + ".params.txt", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + prefix + ".params.txt");
  f << "eta=" << spec.eta << "\nchannels=" << spec.channels << "\nheads=" << spec.heads
    << "\nffn=" << spec.ffn_dim << "\nseed=" << spec.seed << "\n";
}

inline ToyModelSpec load_model_spec(const std::string& prefix) {
  std::ifstream f(prefix + ".params.txt");
  if (!f) throw std::runtime_error("cannot open " + prefix + ".params.txt");
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(f, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> std::uint64_t {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error(prefix + ".params.txt: missing key " + key);
    return std::stoull(it->second);
  };
  ToyModelSpec spec;
  spec.eta = get("eta");
  spec.channels = get("channels");
  spec.heads = get("heads");
  spec.ffn_dim = get("ffn");
  spec.seed = get("seed");
  return spec;
}

inline DiffSimParams<double> load_params(const std::string& prefix) {
  const ToyModelSpec spec = load_model_spec(prefix);
  DiffSimParams<double> p = DiffSimParams<double>::neutral(spec.eta, spec.channels);
  p.g = load_tensor_as<double>(prefix + ".g.yt").vec();
  p.s = load_tensor_as<double>(prefix + ".s.yt").vec();
  p.bias = load_tensor_as<double>(prefix + ".bias.yt").vec();
  p.validate();
  return p;
}

}  // namespace yose
