#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace yose;

namespace {

template <class T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// d<f(x), G>/dx by central differences.
template <class F>
Tensor<double> fd_grad(const Tensor<double>& x, const Tensor<double>& G, F&& f, double eps = 1e-5) {
  Tensor<double> g(x.shape());
  Tensor<double> xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + eps;
    const double up = dot(f(xp), G);
    xp[i] = x[i] - eps;
    const double dn = dot(f(xp), G);
    xp[i] = x[i];
    g[i] = (up - dn) / (2 * eps);
  }
  return g;
}

double max_rel(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), 1e-6}));
  return m;
}

// Textbook attention, one (batch, head, query) at a time.
Tensor<double> naive_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                               std::size_t heads, const Mask& valid) {
  const std::size_t B = q.dim(0), Mq = q.dim(1), Mk = k.dim(1), C = q.dim(2), d = C / heads;
  Tensor<double> out(q.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < Mq; ++i) {
        std::vector<double> w(Mk, 0.0);
        double mx = -1e300, z = 0;
        for (std::size_t j = 0; j < Mk; ++j) {
          if (!valid(b, j)) continue;
          double s = 0;
          for (std::size_t e = 0; e < d; ++e) s += q(b, i, h * d + e) * k(b, j, h * d + e);
          w[j] = s / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, w[j]);
        }
        for (std::size_t j = 0; j < Mk; ++j) {
          w[j] = valid(b, j) ? std::exp(w[j] - mx) : 0.0;
          z += w[j];
        }
        for (std::size_t e = 0; e < d; ++e) {
          double acc = 0;
          for (std::size_t j = 0; j < Mk; ++j) acc += w[j] / z * v(b, j, h * d + e);
          out(b, i, h * d + e) = acc;
        }
      }
  return out;
}

}  // namespace

TEST(Linspace, Examples) {
  EXPECT_EQ(linspace(0, 1, 2).vec(), (std::vector<double>{0, 1}));
  EXPECT_EQ(linspace(5, 5, 1).vec(), (std::vector<double>{5}));
  const auto g = linspace(1.0 / 8 - 1, 1 - 1.0 / 8, 4);
  EXPECT_DOUBLE_EQ(g[0], -0.875);
  EXPECT_NEAR(g[1], -0.2916666666666667, 1e-15);
  EXPECT_NEAR(g[2], 0.2916666666666667, 1e-15);
  EXPECT_DOUBLE_EQ(g[3], 0.875);
  EXPECT_THROW(linspace(0, 1, 0), std::invalid_argument);
}

TEST(Linspace, EndpointsExactAndEvenSpacing) {
  const auto g = linspace(-0.3, 0.7, 11);
  EXPECT_EQ(g[0], -0.3);
  EXPECT_EQ(g[10], 0.7);
  for (std::size_t i = 0; i < 11; ++i) EXPECT_NEAR(g[i], -0.3 + 0.1 * static_cast<double>(i), 1e-15);
}

TEST(GSample, ExactCentersAreLossless) {
  std::mt19937_64 rng(1);
  for (std::size_t L : {1u, 2u, 3u, 7u, 64u, 255u}) {
    const auto values = test::random_tensor<double>({1, L, 3}, rng);
    Tensor<double> coords({1, L});
    for (std::size_t i = 0; i < L; ++i)
      coords[i] = -1.0 + static_cast<double>(2 * i + 1) / static_cast<double>(L);
    EXPECT_TRUE(gsample_1d(values, coords) == values) << "L=" << L;
  }
}

TEST(GSample, MidpointAndClamp) {
  Tensor<double> v2({1, 2, 1}, std::vector<double>{2.0, 6.0});
  EXPECT_DOUBLE_EQ(gsample_1d(v2, Tensor<double>({1, 1}, 0.0))[0], 4.0);
  Tensor<double> v4({1, 4, 1}, std::vector<double>{1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(gsample_1d(v4, Tensor<double>({1, 1}, 1.0))[0], 4.0);
  EXPECT_DOUBLE_EQ(gsample_1d(v4, Tensor<double>({1, 1}, -1.0))[0], 1.0);
  EXPECT_DOUBLE_EQ(gsample_1d(v4, Tensor<double>({1, 1}, 7.0))[0], 4.0);
}

TEST(GSample, NaNRejected) {
  Tensor<double> v({1, 2, 1});
  EXPECT_THROW(gsample_1d(v, Tensor<double>({1, 1}, std::nan(""))), std::invalid_argument);
}

TEST(GSample, Linearity) {
  std::mt19937_64 rng(2);
  const auto v1 = test::random_tensor<double>({2, 9, 4}, rng);
  const auto v2 = test::random_tensor<double>({2, 9, 4}, rng);
  const auto x = test::random_tensor<double>({2, 13}, rng, -1.2, 1.2);
  Tensor<double> mix(v1.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 1.5 * v1[i] - 0.25 * v2[i];
  const auto a = gsample_1d(mix, x), b1 = gsample_1d(v1, x), b2 = gsample_1d(v2, x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], 1.5 * b1[i] - 0.25 * b2[i], 1e-14);
}

TEST(GSampleBackward, CenterAndMidpoint) {
  Tensor<double> g({1, 1, 2}, std::vector<double>{3.0, -1.0});
  const auto center = gsample_1d_backward(g, Tensor<double>({1, 1}, -1.0 + 5.0 / 4.0), 4);
  EXPECT_EQ(center.vec(), (std::vector<double>{0, 0, 0, 0, 3, -1, 0, 0}));
  const auto mid = gsample_1d_backward(g, Tensor<double>({1, 1}, 0.0), 4);
  EXPECT_EQ(mid.vec(), (std::vector<double>{0, 0, 1.5, -0.5, 1.5, -0.5, 0, 0}));
}

TEST(GSampleBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto v = test::random_tensor<double>({2, 6, 3}, rng);
  const auto x = test::random_tensor<double>({2, 10}, rng, -1.1, 1.1);
  const auto G = test::random_tensor<double>({2, 10, 3}, rng);
  const auto fd = fd_grad(v, G, [&](const Tensor<double>& vv) { return gsample_1d(vv, x); });
  EXPECT_LE(max_rel(gsample_1d_backward(G, x, 6), fd), 1e-6);
}

TEST(GSampleBackward, IsExactAdjoint) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = test::random_tensor<double>({3, 17, 5}, rng);
    const auto x = test::random_tensor<double>({3, 23}, rng, -1.3, 1.3);
    const auto G = test::random_tensor<double>({3, 23, 5}, rng);
    const double lhs = dot(gsample_1d(v, x), G), rhs = dot(v, gsample_1d_backward(G, x, 17));
    EXPECT_LE(std::abs(lhs - rhs), 1e-12 * std::max(1.0, std::abs(lhs)));
  }
}

TEST(Linear, MatchesNaiveAndBackwardIsTranspose) {
  std::mt19937_64 rng(5);
  const auto x = test::random_tensor<double>({2, 3, 4}, rng);
  const auto w = test::random_tensor<double>({4, 6}, rng);
  const auto y = linear(x, w);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t d = 0; d < 6; ++d) {
      double acc = 0;
      for (std::size_t c = 0; c < 4; ++c) acc += x[r * 4 + c] * w(c, d);
      EXPECT_NEAR(y[r * 6 + d], acc, 1e-14);
    }
  const auto G = test::random_tensor<double>({2, 3, 6}, rng);
  EXPECT_NEAR(dot(y, G), dot(x, linear_backward(G, w)), 1e-12);
}

TEST(Attention, SingleKeyBroadcastsValue) {
  std::mt19937_64 rng(6);
  const auto q = test::random_tensor<double>({1, 5, 4}, rng);
  const auto k = test::random_tensor<double>({1, 1, 4}, rng);
  const auto v = test::random_tensor<double>({1, 1, 4}, rng);
  const auto out = attention(q, k, v, 2, Mask({1, 1}, 1));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(out(0, i, c), v(0, 0, c));
}

TEST(Attention, IdenticalKeysGiveMeanOfValidValues) {
  std::mt19937_64 rng(7);
  const auto q = test::random_tensor<double>({1, 3, 4}, rng);
  Tensor<double> k({1, 5, 4});
  const auto krow = test::random_tensor<double>({4}, rng);
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t c = 0; c < 4; ++c) k(0, j, c) = krow[c];
  const auto v = test::random_tensor<double>({1, 5, 4}, rng);
  const Mask valid = test::mask_from({1, 5}, {1, 0, 1, 1, 0});
  const auto out = attention(q, k, v, 2, valid);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(out(0, i, c), (v(0, 0, c) + v(0, 2, c) + v(0, 3, c)) / 3.0, 1e-14);
}

TEST(Attention, MaskingLastKeyEqualsTruncation) {
  std::mt19937_64 rng(8);
  const auto q = test::random_tensor<float>({2, 6, 8}, rng);
  const auto k = test::random_tensor<float>({2, 9, 8}, rng);
  const auto v = test::random_tensor<float>({2, 9, 8}, rng);
  Mask valid({2, 9}, 1);
  valid(0, 8) = valid(1, 8) = 0;
  Tensor<float> kt({2, 8, 8}), vt({2, 8, 8});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 8; ++j)
      for (std::size_t c = 0; c < 8; ++c) {
        kt(b, j, c) = k(b, j, c);
        vt(b, j, c) = v(b, j, c);
      }
  const auto full = attention(q, k, v, 2, valid);
  const auto cut = attention(q, kt, vt, 2, Mask({2, 8}, 1));
  EXPECT_LE(test::max_abs_diff(full, cut), 1e-6);
}

TEST(Attention, MatchesNaiveOracle) {
  std::mt19937_64 rng(9);
  // Enough queries to span several tiles, and a partial last tile.
  const auto q = test::random_tensor<double>({2, 37, 8}, rng);
  const auto k = test::random_tensor<double>({2, 700, 8}, rng);
  const auto v = test::random_tensor<double>({2, 700, 8}, rng);
  const Mask valid = test::random_mask(2, 700, rng, 0.7);
  EXPECT_LE(test::max_abs_diff(attention(q, k, v, 2, valid), naive_attention(q, k, v, 2, valid)), 1e-13);
}

TEST(Attention, PermutationOfValidKeysInvariant) {
  std::mt19937_64 rng(10);
  const auto q = test::random_tensor<double>({1, 4, 6}, rng);
  const auto k = test::random_tensor<double>({1, 7, 6}, rng);
  const auto v = test::random_tensor<double>({1, 7, 6}, rng);
  const Mask valid = test::mask_from({1, 7}, {1, 1, 0, 1, 1, 1, 0});
  const std::vector<std::size_t> perm{5, 3, 6, 0, 4, 1, 2};
  Tensor<double> kp(k.shape()), vp(v.shape());
  Mask validp(valid.shape());
  for (std::size_t j = 0; j < 7; ++j) {
    validp(0, j) = valid(0, perm[j]);
    for (std::size_t c = 0; c < 6; ++c) {
      kp(0, j, c) = k(0, perm[j], c);
      vp(0, j, c) = v(0, perm[j], c);
    }
  }
  EXPECT_LE(test::max_abs_diff(attention(q, k, v, 3, valid), attention(q, kp, vp, 3, validp)), 1e-14);
}

TEST(Attention, Errors) {
  Tensor<double> q({1, 2, 4}), k({1, 3, 4}), v({1, 3, 4});
  EXPECT_THROW(attention(q, k, v, 2, Mask({1, 3}, 0)), std::invalid_argument);
  EXPECT_THROW(attention(q, k, v, 3, Mask({1, 3}, 1)), std::invalid_argument);
  EXPECT_THROW(attention(q, k, v, 2, Mask({1, 2}, 1)), std::invalid_argument);
}

TEST(AttentionBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto q = test::random_tensor<double>({2, 3, 4}, rng);
  const auto k = test::random_tensor<double>({2, 5, 4}, rng);
  const auto v = test::random_tensor<double>({2, 5, 4}, rng);
  const auto G = test::random_tensor<double>({2, 3, 4}, rng);
  const Mask valid = test::mask_from({2, 5}, {1, 1, 0, 1, 0, 0, 1, 1, 1, 1});
  const auto g = attention_backward(q, k, v, 2, valid, G);
  EXPECT_LE(max_rel(g.dq, fd_grad(q, G, [&](const Tensor<double>& x) { return attention(x, k, v, 2, valid); })), 1e-6);
  EXPECT_LE(max_rel(g.dk, fd_grad(k, G, [&](const Tensor<double>& x) { return attention(q, x, v, 2, valid); })), 1e-6);
  EXPECT_LE(max_rel(g.dv, fd_grad(v, G, [&](const Tensor<double>& x) { return attention(q, k, x, 2, valid); })), 1e-6);
  // Masked keys get no gradient at all.
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(g.dk(0, 2, c), 0.0);
    EXPECT_EQ(g.dv(0, 4, c), 0.0);
  }
}

TEST(Ffn, ZeroCases) {
  std::mt19937_64 rng(12);
  const auto w1 = test::random_tensor<double>({4, 6}, rng);
  const auto w2 = test::random_tensor<double>({6, 4}, rng);
  const auto zero = ffn(Tensor<double>({2, 3, 4}), w1, w2);
  for (double x : zero.data()) EXPECT_EQ(x, 0.0);
  const auto x = test::random_tensor<double>({2, 3, 4}, rng);
  const auto z2 = ffn(x, Tensor<double>({4, 6}), Tensor<double>({6, 4}));
  for (double y : z2.data()) EXPECT_EQ(y, 0.0);
}

TEST(Ffn, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(13);
  const auto x = test::random_tensor<double>({2, 5, 4}, rng);
  const auto w1 = test::random_tensor<double>({4, 7}, rng);
  const auto w2 = test::random_tensor<double>({7, 4}, rng);
  const auto y = ffn(x, w1, w2);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = 0;
      for (std::size_t f = 0; f < 7; ++f) {
        double h = 0;
        for (std::size_t i = 0; i < 4; ++i) h += x[r * 4 + i] * w1(i, f);
        acc += 0.5 * h * (1 + std::erf(h / std::sqrt(2.0))) * w2(f, c);
      }
      EXPECT_LE(std::abs(y[r * 4 + c] - acc), 1e-6 * std::max(1.0, std::abs(acc)));
    }
}

TEST(Ffn, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  const auto x = test::random_tensor<double>({2, 3, 4}, rng);
  const auto w1 = test::random_tensor<double>({4, 5}, rng);
  const auto w2 = test::random_tensor<double>({5, 4}, rng);
  const auto G = test::random_tensor<double>({2, 3, 4}, rng);
  const auto fd = fd_grad(x, G, [&](const Tensor<double>& xx) { return ffn(xx, w1, w2); });
  EXPECT_LE(max_rel(ffn_backward(x, w1, w2, G), fd), 1e-6);
}

TEST(LayerNorm, Examples) {
  const auto c = layer_norm(Tensor<double>({1, 4}, 2.5));
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  const auto pm = layer_norm(Tensor<double>({2}, std::vector<double>{1, -1}));
  EXPECT_NEAR(pm[0], 1.0, 1e-6);
  EXPECT_NEAR(pm[1], -1.0, 1e-6);
}

TEST(LayerNorm, RandomRowsAreStandardized) {
  std::mt19937_64 rng(15);
  const auto x = test::random_tensor<double>({6, 32}, rng, -3.0, 5.0);
  const auto y = layer_norm(x);
  for (std::size_t r = 0; r < 6; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 32; ++c) mu += y(r, c);
    mu /= 32;
    for (std::size_t c = 0; c < 32; ++c) var += (y(r, c) - mu) * (y(r, c) - mu);
    EXPECT_LE(std::abs(mu), 1e-6);
    EXPECT_LE(std::abs(std::sqrt(var / 32) - 1.0), 1e-4);
  }
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  const auto x = test::random_tensor<double>({3, 6}, rng);
  const auto G = test::random_tensor<double>({3, 6}, rng);
  const auto fd = fd_grad(x, G, [](const Tensor<double>& xx) { return layer_norm(xx); });
  EXPECT_LE(max_rel(layer_norm_backward(x, G), fd), 1e-6);
}
