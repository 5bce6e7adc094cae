#pragma once

// Command-line front end. dispatch() returns 0 on success, 1 on a module error
// (one-line diagnostic on `err`), 2 on a usage error.

#include <filesystem>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "yose/costmodel.hpp"
#include "yose/fusion.hpp"
#include "yose/gradcheck.hpp"
#include "yose/params_io.hpp"

namespace yose::cli {

namespace detail {

inline SamplingConvention parse_conv(const std::string& s) {
  if (s == "exact") return SamplingConvention::exact_center;
  if (s == "verbatim") return SamplingConvention::paper_verbatim;
  throw CLI::ValidationError("--conv", "expected exact|verbatim");
}

inline StrideSpec parse_strides(const std::string& s) {
  StrideSpec st;
  char c1 = 0, c2 = 0;
  std::istringstream is(s);
  if (!(is >> st.f_v >> c1 >> st.h_v >> c2 >> st.w_v) || c1 != ',' || c2 != ',')
    throw CLI::ValidationError("--strides", "expected f,h,w");
  return st;
}

// "lo:hi:step" inclusive of hi (within half a step), or a comma list.
inline std::vector<double> parse_gammas(const std::string& s) {
  std::vector<double> out;
  if (s.find(':') != std::string::npos) {
    double lo = 0, hi = 0, step = 0;
    char c1 = 0, c2 = 0;
    std::istringstream is(s);
    if (!(is >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || step <= 0)
      throw CLI::ValidationError("--gammas", "expected lo:hi:step");
    for (std::size_t k = 0;; ++k) {
      const double g = lo + static_cast<double>(k) * step;
      if (g > hi + 0.5 * step) break;
      out.push_back(std::round(g * 1e9) / 1e9);
    }
  } else {
    std::istringstream is(s);
    for (std::string tok; std::getline(is, tok, ',');) out.push_back(std::stod(tok));
  }
  if (out.empty()) throw CLI::ValidationError("--gammas", "empty list");
  return out;
}

// Latent token mask from a [B, L] or [B, 1, F, H, W] u8 tensor.
inline Mask load_token_mask(const std::string& path, Shape* grid = nullptr) {
  Mask m = load_tensor_as<std::uint8_t>(path);
  if (m.ndim() == 5) {
    if (grid) *grid = m.shape();
    return flatten_tokens(m);
  }
  require_ndim(m.shape(), 2, "token mask");
  return m;
}

template <class T>
int run_pipeline(const std::string& noise_path, const std::string& latent_path, const std::string& mask_path,
                 const std::string& params_prefix, const std::string& out_path, bool fusion,
                 std::size_t radius, const DiffSimOptions& opts, std::ostream& out) {
  Shape grid;
  LatentBundle<T> bundle;
  bundle.lat_nis = load_tensor_as<T>(noise_path);
  bundle.lat_mask = load_tensor_as<T>(latent_path);
  bundle.latent_mask = load_token_mask(mask_path, &grid);
  require_ndim(bundle.lat_nis.shape(), 3, "noise latent");
  bundle.pos_emb = sinusoidal_embedding<T>(bundle.tokens(), bundle.channels());

  const ToyModelSpec spec = load_model_spec(params_prefix);
  const DiffSimParams<double> p64 = load_params(params_prefix);
  DiffSimParams<T> params = DiffSimParams<T>::neutral(p64.eta, p64.channels);
  std::transform(p64.g.begin(), p64.g.end(), params.g.begin(), [](double v) { return static_cast<T>(v); });
  std::transform(p64.s.begin(), p64.s.end(), params.s.begin(), [](double v) { return static_cast<T>(v); });
  std::transform(p64.bias.begin(), p64.bias.end(), params.bias.begin(), [](double v) { return static_cast<T>(v); });
  const auto blocks = spec.blocks<T>();

  RunStats stats;
  Tensor<T> result;
  if (fusion) {
    if (grid.empty()) throw std::invalid_argument("--fusion needs a [B,1,F,H,W] latent mask");
    FusionOptions fo;
    fo.dilate_radius = radius;
    result = run_with_fusion(bundle, grid[2], grid[3], grid[4], params, blocks, opts, fo, &stats);
  } else {
    result = run_diffsim(bundle, params, blocks, opts, &stats);
  }
  save_tensor(result, out_path);
  out << "tokens=" << bundle.tokens() << " query_rows_per_block=" << stats.query_rows.front()
      << " key_rows_per_block=" << stats.key_rows.front() << " total_ms=" << stats.total_ns / 1e6 << "\n";
  return 0;
}

}  // namespace detail

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Mask-aware token selection toolkit for DiT video object removal"};
  app.require_subcommand(1);

  // index
  std::string mask_path, conv_str = "exact", out_prefix;
  auto* index = app.add_subcommand("index", "Build forward/backward BVI indices from a token mask");
  index->add_option("--mask", mask_path, "u8 mask [B,L] or [B,1,F,H,W]")->required();
  index->add_option("--conv", conv_str, "exact|verbatim");
  index->add_option("--out-prefix", out_prefix)->required();

  // embed-mask
  std::string strides_str = "4,8,8", out_path;
  auto* embed = app.add_subcommand("embed-mask", "Pixel mask -> latent mask by block OR");
  embed->add_option("--mask", mask_path, "u8 mask [B,1,F,H,W]")->required();
  embed->add_option("--strides", strides_str, "f,h,w");
  embed->add_option("--out", out_path)->required();

  // run
  std::string noise_path, latent_path, params_prefix, source_str = "mask";
  bool fusion = false;
  std::size_t radius = 2;
  auto* run = app.add_subcommand("run", "Single DiffSim pass over masked tokens");
  run->add_option("--noise", noise_path, "noise latent [B,L,C]")->required();
  run->add_option("--masked-latent", latent_path, "masked-video latent [B,L,C]")->required();
  run->add_option("--mask", mask_path, "latent mask [B,L] or [B,1,F,H,W]")->required();
  run->add_option("--params", params_prefix, "parameter prefix written by train")->required();
  run->add_option("--out", out_path)->required();
  run->add_flag("--fusion", fusion, "mean/variance alignment and weighted blend at the boundary");
  run->add_option("--dilate-radius", radius);
  run->add_option("--gather-source", source_str, "mask|noise")->check(CLI::IsMember({"mask", "noise"}));
  run->add_option("--conv", conv_str, "exact|verbatim");

  // train
  std::uint64_t seed = 0;
  std::size_t steps = 200, cases = 1;
  double lr = 1e-2, clip = 1.0;
  ToyModelSpec spec;
  auto* train = app.add_subcommand("train", "Fine-tune (G, S, Bias) on synthetic toy cases");
  train->add_option("--seed", seed);
  train->add_option("--steps", steps);
  train->add_option("--lr", lr);
  train->add_option("--clip", clip, "gradient norm clip, 0 disables");
  train->add_option("--cases", cases, "number of synthetic cases");
  train->add_option("--eta", spec.eta);
  train->add_option("--channels", spec.channels);
  train->add_option("--heads", spec.heads);
  train->add_option("--ffn", spec.ffn_dim);
  train->add_option("--out", out_prefix, "parameter prefix")->required();

  // flops
  CostModelConfig cm;
  double baseline_fps = 10.0;
  auto* fl = app.add_subcommand("flops", "Analytical FLOPs and model speedup");
  fl->set_help_flag("--help", "Print this help message and exit");
  fl->add_option("--gamma", cm.gamma, "mask ratio");
  fl->add_option("--b", cm.b);
  fl->add_option("--n", cm.n);
  fl->add_option("--c", cm.c);
  fl->add_option("--h", cm.h);
  fl->add_option("--f", cm.f);
  fl->add_option("--eta", cm.eta);
  fl->add_option("--phi", cm.phi);
  fl->add_option("--baseline-fps", baseline_fps);
  fl->add_option("--mask", mask_path, "pixel mask; gamma taken from its embedded latent mask");
  fl->add_option("--strides", strides_str, "f,h,w for --mask");

  // fit-phi
  double anchor_gamma = 0.05, anchor_speedup = 3.3, eval_gamma = 0.20;
  auto* fp = app.add_subcommand("fit-phi", "Fit the fixed-overhead ratio from a speedup anchor");
  fp->add_option("--anchor-gamma", anchor_gamma);
  fp->add_option("--anchor-speedup", anchor_speedup);
  fp->add_option("--eval-gamma", eval_gamma);

  // bench
  std::string gammas_str = "0.1:0.9:0.1", csv_path;
  BenchConfig bc;
  auto* bench = app.add_subcommand("bench", "Wall-clock sweep over mask ratios");
  bench->add_option("--gammas", gammas_str, "lo:hi:step or comma list");
  bench->add_option("--tokens", bc.tokens);
  bench->add_option("--channels", bc.channels);
  bench->add_option("--eta", bc.eta);
  bench->add_option("--heads", bc.heads);
  bench->add_option("--seed", bc.seed);
  bench->add_option("--csv", csv_path);

  // gradcheck
  double eps = 1e-4, tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Analytic vs finite-difference parameter gradients");
  gc->add_option("--seed", seed);
  gc->add_option("--eps", eps);
  gc->add_option("--tol", tol);

  // maskstats
  std::string dir;
  auto* ms = app.add_subcommand("maskstats", "Mask-ratio histogram over a directory of .yt masks");
  ms->add_option("--dir", dir)->required();
  ms->add_option("--csv", csv_path);

  // synth
  std::size_t frames = 4, height = 4, width = 4, channels = 8, batch = 2;
  double ratio = 0.3;
  auto* sy = app.add_subcommand("synth", "Write a synthetic toy case (noise, masked latent, mask, target)");
  sy->add_option("--seed", seed);
  sy->add_option("--batch", batch);
  sy->add_option("--frames", frames);
  sy->add_option("--height", height);
  sy->add_option("--width", width);
  sy->add_option("--channels", channels);
  sy->add_option("--mask-ratio", ratio);
  sy->add_option("--out-prefix", out_prefix)->required();

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    out << std::setprecision(6);
    if (*index) {
      const BviIndex idx = build_indices(detail::load_token_mask(mask_path), detail::parse_conv(conv_str));
      Tensor<double> lengths({idx.batch()});
      for (std::size_t b = 0; b < idx.batch(); ++b) lengths[b] = static_cast<double>(idx.lengths[b]);
      save_tensor(idx.ind_f, out_prefix + ".ind_f.yt");
      save_tensor(idx.ind_b, out_prefix + ".ind_b.yt");
      save_tensor(lengths, out_prefix + ".lengths.yt");
      save_tensor(idx.pad_mask, out_prefix + ".padmask.yt");
      out << "l_max=" << idx.l_max << "\n";
    } else if (*embed) {
      const Mask m = embed_mask(load_tensor_as<std::uint8_t>(mask_path), detail::parse_strides(strides_str));
      save_tensor(m, out_path);
      out << "latent_shape=" << shape_str(m.shape()) << " masked=" << count_ones(m) << "\n";
    } else if (*run) {
      DiffSimOptions opts;
      opts.conv = detail::parse_conv(conv_str);
      opts.source = source_str == "noise" ? GatherSource::noise_latent : GatherSource::masked_latent;
      const bool f64 = std::holds_alternative<Tensor<double>>(load_tensor(noise_path));
      return f64 ? detail::run_pipeline<double>(noise_path, latent_path, mask_path, params_prefix, out_path,
                                                fusion, radius, opts, out)
                 : detail::run_pipeline<float>(noise_path, latent_path, mask_path, params_prefix, out_path,
                                               fusion, radius, opts, out);
    } else if (*train) {
      spec.seed = seed;
      ToyShape shape;
      shape.channels = spec.channels;
      std::vector<ToyCase<double>> data;
      for (std::size_t i = 0; i < std::max<std::size_t>(cases, 1); ++i)
        data.push_back(make_toy_case<double>(seed + i, shape));
      const auto blocks = spec.blocks<double>();
      const auto res = finetune(data, blocks, DiffSimParams<double>::neutral(spec.eta, spec.channels),
                                {steps, lr, clip});
      save_params(out_prefix, res.params, spec);
      out << "initial_loss=" << res.initial_loss << " final_loss=" << res.final_loss
          << " ratio=" << res.final_loss / res.initial_loss << "\n";
    } else if (*fl) {
      if (!mask_path.empty())
        cm.gamma = effective_gamma(load_tensor_as<std::uint8_t>(mask_path), detail::parse_strides(strides_str));
      const double s = speedup(cm);
      out << "gamma=" << cm.gamma << "\nflops=" << flops(cm) << "\nspeedup=" << s
          << "\nmodel_fps=" << baseline_fps * s << "\n";
    } else if (*fp) {
      const double phi = fit_phi(anchor_gamma, anchor_speedup);
      out << "phi=" << phi << "\nspeedup(" << eval_gamma << ")=" << speedup(eval_gamma, phi) << "\n";
    } else if (*bench) {
      const std::vector<double> gammas = detail::parse_gammas(gammas_str);
      const auto rows = bench_sweep(gammas, bc);
      if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        if (!f) throw std::runtime_error("cannot write " + csv_path);
        write_bench_csv(f, rows);
      } else {
        write_bench_csv(out, rows);
      }
      std::vector<double> ns;
      for (const auto& r : rows) ns.push_back(r.ns_attention);
      if (gammas.size() >= 2) out << "r2_attention=" << linear_regression(gammas, ns).r2 << "\n";
    } else if (*gc) {
      const GradcheckReport rep = run_gradcheck(make_gradcheck_instance(seed), eps);
      out << "loss=" << rep.loss << " components=" << rep.components
          << " max_rel_error=" << rep.max_rel_error << "\n";
      return rep.max_rel_error <= tol ? 0 : 1;
    } else if (*ms) {
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.path().extension() == ".yt") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      std::vector<Mask> masks;
      for (const auto& p : files) masks.push_back(load_tensor_as<std::uint8_t>(p));
      const MaskRatioStats st = mask_ratio_stats(masks);
      if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        if (!f) throw std::runtime_error("cannot write " + csv_path);
        write_histogram_csv(f, st);
      }
      out << "masks=" << masks.size() << " frac_below_0.20=" << st.frac_below_20 << "\n";
    } else if (*sy) {
      ToyShape shape{batch, frames, height, width, channels, ratio, 0.5};
      const ToyCase<float> tc = make_toy_case<float>(seed, shape);
      save_tensor(tc.bundle.lat_nis, out_prefix + ".noise.yt");
      save_tensor(tc.bundle.lat_mask, out_prefix + ".latent.yt");
      save_tensor(unflatten_tokens(tc.bundle.latent_mask, frames, height, width), out_prefix + ".mask.yt");
      save_tensor(tc.target, out_prefix + ".target.yt");
      out << "tokens=" << tc.bundle.tokens() << " masked=" << count_ones(tc.bundle.latent_mask) << "\n";
    }
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace yose::cli
