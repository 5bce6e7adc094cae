#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"
#include "yose/cli.hpp"

using namespace yose;
using yose::test::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "yose");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST(Cli, Flops) {
  const auto r = run({"flops", "--gamma", "1", "--phi", "0"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("flops=1.87942e+15"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("speedup=1\n"), std::string::npos) << r.out;
}

TEST(Cli, FlopsFromPixelMask) {
  TempDir dir;
  Mask px({1, 1, 8, 16, 16}, 0);
  px(0, 0, 5, 9, 1) = 1;
  save_tensor(px, dir.file("px.yt"));
  const auto r = run({"flops", "--mask", dir.file("px.yt"), "--strides", "4,8,8"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("gamma=0.125\n"), std::string::npos) << r.out;
}

TEST(Cli, FitPhi) {
  const auto r = run({"fit-phi", "--anchor-gamma", "0.05", "--anchor-speedup", "3.3"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("phi=0.363043"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("speedup(0.2)=2.42085"), std::string::npos) << r.out;
}

TEST(Cli, ModuleErrorExitsOne) {
  const auto r = run({"fit-phi", "--anchor-gamma", "0.5", "--anchor-speedup", "20"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"index"}).code, 2);  // --mask and --out-prefix are required
  EXPECT_EQ(run({"flops", "--gamma", "abc"}).code, 2);
  EXPECT_EQ(run({"bench", "--gammas", "1:2"}).code, 2);
}

TEST(Cli, IndexWritesAllFields) {
  TempDir dir;
  const Mask m = test::mask_from({2, 4}, {1, 0, 0, 1, 1, 1, 1, 0});
  save_tensor(m, dir.file("m.yt"));
  const auto r = run({"index", "--mask", dir.file("m.yt"), "--conv", "verbatim", "--out-prefix", dir.file("ix")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto want = build_indices(m, SamplingConvention::paper_verbatim);
  EXPECT_TRUE(load_tensor_as<double>(dir.file("ix.ind_f.yt")) == want.ind_f);
  EXPECT_TRUE(load_tensor_as<double>(dir.file("ix.ind_b.yt")) == want.ind_b);
  EXPECT_EQ(load_tensor_as<double>(dir.file("ix.lengths.yt")).vec(), (std::vector<double>{2, 3}));
  EXPECT_TRUE(load_tensor_as<std::uint8_t>(dir.file("ix.padmask.yt")) == want.pad_mask);
  EXPECT_EQ(run({"index", "--mask", dir.file("m.yt"), "--conv", "sideways", "--out-prefix", dir.file("ix")}).code, 2);
}

TEST(Cli, IndexRejectsEmptyRow) {
  TempDir dir;
  save_tensor(test::mask_from({2, 3}, {1, 0, 0, 0, 0, 0}), dir.file("m.yt"));
  const auto r = run({"index", "--mask", dir.file("m.yt"), "--out-prefix", dir.file("ix")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("empty mask row b=1"), std::string::npos);
}

TEST(Cli, EmbedMask) {
  TempDir dir;
  Mask px({1, 1, 4, 4, 4}, 0);
  px(0, 0, 3, 0, 3) = 1;
  save_tensor(px, dir.file("px.yt"));
  const auto r = run({"embed-mask", "--mask", dir.file("px.yt"), "--strides", "2,2,2", "--out", dir.file("e.yt")});
  ASSERT_EQ(r.code, 0) << r.err;
  const Mask e = load_tensor_as<std::uint8_t>(dir.file("e.yt"));
  EXPECT_EQ(e.shape(), (Shape{1, 1, 2, 2, 2}));
  EXPECT_EQ(count_ones(e), 1u);
  EXPECT_EQ(e(0, 0, 1, 0, 1), 1);
  EXPECT_EQ(run({"embed-mask", "--mask", dir.file("px.yt"), "--strides", "3,2,2", "--out", dir.file("e.yt")}).code, 1);
  EXPECT_EQ(run({"embed-mask", "--mask", dir.file("px.yt"), "--strides", "2;2;2", "--out", dir.file("e.yt")}).code, 2);
}

TEST(Cli, SynthTrainRunPipeline) {
  TempDir dir;
  const std::string p = dir.file("case"), params = dir.file("params");
  ASSERT_EQ(run({"synth", "--seed", "4", "--out-prefix", p}).code, 0);
  const auto tr = run({"train", "--seed", "0", "--steps", "5", "--out", params});
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_NE(tr.out.find("final_loss="), std::string::npos);
  const ToyModelSpec spec = load_model_spec(params);
  EXPECT_EQ(spec.eta, 2u);
  EXPECT_EQ(load_params(params).g.size(), 2u);

  const auto r = run({"run", "--noise", p + ".noise.yt", "--masked-latent", p + ".latent.yt", "--mask", p + ".mask.yt",
                      "--params", params, "--out", dir.file("out.yt")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto out = load_tensor_as<float>(dir.file("out.yt"));
  const Mask mask = flatten_tokens(load_tensor_as<std::uint8_t>(p + ".mask.yt"));
  const std::size_t C = out.dim(2);
  for (std::size_t t = 0; t < mask.size(); ++t)
    if (!mask[t]) {
      for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(out[t * C + c], 0.0f);
    }

  const auto rf = run({"run", "--noise", p + ".noise.yt", "--masked-latent", p + ".latent.yt", "--mask", p + ".mask.yt",
                       "--params", params, "--out", dir.file("fused.yt"), "--fusion", "--dilate-radius", "1"});
  ASSERT_EQ(rf.code, 0) << rf.err;
  const auto fused = load_tensor_as<float>(dir.file("fused.yt"));
  const auto latent = load_tensor_as<float>(p + ".latent.yt");
  const Mask dil = flatten_tokens(dilate_mask(load_tensor_as<std::uint8_t>(p + ".mask.yt"), 1));
  for (std::size_t t = 0; t < dil.size(); ++t)
    if (!dil[t]) {
      for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(fused[t * C + c], latent[t * C + c]);
    }

  EXPECT_EQ(run({"run", "--noise", p + ".noise.yt", "--masked-latent", p + ".latent.yt", "--mask", p + ".mask.yt",
                 "--params", params, "--out", dir.file("x.yt"), "--gather-source", "neither"})
                .code,
            2);
}

TEST(Cli, Gradcheck) {
  const auto r = run({"gradcheck", "--seed", "0", "--eps", "1e-4"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("max_rel_error="), std::string::npos);
}

TEST(Cli, MaskStats) {
  TempDir dir;
  std::filesystem::create_directories(dir.path() / "masks");
  for (int i = 0; i < 4; ++i) {
    Mask m({1, 10}, 0);
    for (int j = 0; j < (i == 3 ? 5 : 1); ++j) m[static_cast<std::size_t>(j)] = 1;
    save_tensor(m, (dir.path() / "masks" / ("m" + std::to_string(i) + ".yt")).string());
  }
  const auto r = run({"maskstats", "--dir", (dir.path() / "masks").string(), "--csv", dir.file("h.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("masks=4 frac_below_0.20=0.75"), std::string::npos) << r.out;
  EXPECT_TRUE(std::filesystem::exists(dir.file("h.csv")));
  EXPECT_EQ(run({"maskstats", "--dir", dir.file("nope")}).code, 1);
}

TEST(Cli, BenchTiny) {
  TempDir dir;
  const auto r = run({"bench", "--gammas", "0.25,0.75", "--tokens", "128", "--channels", "8", "--eta", "1",
                      "--csv", dir.file("b.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("r2_attention="), std::string::npos);
  std::ifstream f(dir.file("b.csv"));
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "gamma,predicted_flops,measured_ns_attention,measured_ns_total");
}
