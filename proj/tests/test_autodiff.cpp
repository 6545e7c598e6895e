#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowkd/autodiff.hpp"
#include "flowkd/rng.hpp"
#include "testutil.hpp"

using namespace flowkd;
using testutil::fd_gradient;
using testutil::random_tensor;
using testutil::rel_max_err;


TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(7);
  TensorD x0 = random_tensor<double>({2, 5, 4}, rng);
  TensorD y0 = random_tensor<double>({2, 5, 4}, rng);

  auto scalar_of = [&](const TensorD& xv) {
    Graph<double> g;
    auto x = g.leaf(xv, false);
    auto y = g.leaf(y0, false);
    auto z = g.mul(g.add(g.scale(x, 1.5), y), g.sub(x, y));
    return g.mean_sq(z).scalar();
  };
  Graph<double> g;
  auto x = g.leaf(x0, true);
  auto y = g.leaf(y0, false);
  auto z = g.mul(g.add(g.scale(x, 1.5), y), g.sub(x, y));
  auto loss = g.mean_sq(z);
  g.backward(loss);
  TensorD fd = fd_gradient<double>(scalar_of, x0);
  CHECK(rel_max_err(x.grad(), fd) < 1e-6);
}

TEST_CASE("relu and sigmoid gradients match finite differences") {
  Rng rng(8);
  // keep values away from the relu kink
  TensorD x0 = random_tensor<double>({3, 4, 4}, rng);
  for (int64_t i = 0; i < x0.size(); ++i)
    if (std::abs(x0[i]) < 0.05) x0[i] += 0.1;

  auto f = [&](const TensorD& xv) {
    Graph<double> g;
    auto x = g.leaf(xv, false);
    return g.mean_sq(g.sigmoid(g.relu(x))).scalar();
  };
  Graph<double> g;
  auto x = g.leaf(x0, true);
  auto loss = g.mean_sq(g.sigmoid(g.relu(x)));
  g.backward(loss);
  CHECK(rel_max_err(x.grad(), fd_gradient<double>(f, x0)) < 1e-6);
}

TEST_CASE("conv2d gradients (input, weight, bias) match finite differences") {
  Rng rng(9);
  for (Pad pad : {Pad::reflect, Pad::zero}) {
    for (int stride : {1, 2}) {
      TensorD x0 = random_tensor<double>({2, 6, 6}, rng);
      TensorD w0 = random_tensor<double>({3, 2, 3, 3}, rng, -0.5, 0.5);
      TensorD b0 = random_tensor<double>({3}, rng, -0.2, 0.2);

      auto run = [&](const TensorD& xv, const TensorD& wv, const TensorD& bv) {
        Graph<double> g;
        auto x = g.leaf(xv, false);
        auto w = g.leaf(wv, false);
        auto b = g.leaf(bv, false);
        return g.mean_sq(g.conv2d(x, w, b, stride, pad)).scalar();
      };

      Graph<double> g;
      auto x = g.leaf(x0, true);
      auto w = g.leaf(w0, true);
      auto b = g.leaf(b0, true);
      g.backward(g.mean_sq(g.conv2d(x, w, b, stride, pad)));

      auto fx = fd_gradient<double>([&](const TensorD& t) { return run(t, w0, b0); }, x0);
      auto fw = fd_gradient<double>([&](const TensorD& t) { return run(x0, t, b0); }, w0);
      auto fb = fd_gradient<double>([&](const TensorD& t) { return run(x0, w0, t); }, b0);
      CHECK(rel_max_err(x.grad(), fx) < 1e-6);
      CHECK(rel_max_err(w.grad(), fw) < 1e-6);
      CHECK(rel_max_err(b.grad(), fb) < 1e-6);
    }
  }
}

TEST_CASE("instance_norm gradients match finite differences") {
  Rng rng(10);
  TensorD x0 = random_tensor<double>({2, 4, 5}, rng);
  TensorD g0 = random_tensor<double>({2}, rng, 0.5, 1.5);
  TensorD b0 = random_tensor<double>({2}, rng, -0.5, 0.5);
  TensorD probe = random_tensor<double>({2, 4, 5}, rng);

  auto run = [&](const TensorD& xv, const TensorD& gv, const TensorD& bv) {
    Graph<double> g;
    auto x = g.leaf(xv, false);
    auto ga = g.leaf(gv, false);
    auto be = g.leaf(bv, false);
    return g.mean_sq(g.mul_const(g.instance_norm(x, ga, be), probe)).scalar();
  };
  Graph<double> g;
  auto x = g.leaf(x0, true);
  auto ga = g.leaf(g0, true);
  auto be = g.leaf(b0, true);
  g.backward(g.mean_sq(g.mul_const(g.instance_norm(x, ga, be), probe)));
  CHECK(rel_max_err(x.grad(), fd_gradient<double>(
                                  [&](const TensorD& t) { return run(t, g0, b0); }, x0)) < 1e-5);
  CHECK(rel_max_err(ga.grad(), fd_gradient<double>(
                                   [&](const TensorD& t) { return run(x0, t, b0); }, g0)) < 1e-6);
  CHECK(rel_max_err(be.grad(), fd_gradient<double>(
                                   [&](const TensorD& t) { return run(x0, g0, t); }, b0)) < 1e-6);
}

TEST_CASE("upsample, concat, gram, tv, mean gradients match finite differences") {
  Rng rng(11);
  TensorD x0 = random_tensor<double>({2, 3, 3}, rng);
  auto run = [&](const TensorD& xv) {
    Graph<double> g;
    auto x = g.leaf(xv, false);
    auto up = g.upsample_nearest2(x);
    auto cat = g.concat_ch({up, g.scale(up, -0.5)});
    auto gr = g.gram(cat);
    std::vector<Graph<double>::Var> terms = {g.mean_sq(gr), g.tv_mean(up), g.mean_all(cat)};
    return g.wsum(terms, {1.0, 2.0, 0.7}).scalar();
  };
  Graph<double> g;
  auto x = g.leaf(x0, true);
  auto up = g.upsample_nearest2(x);
  auto cat = g.concat_ch({up, g.scale(up, -0.5)});
  auto gr = g.gram(cat);
  std::vector<Graph<double>::Var> terms = {g.mean_sq(gr), g.tv_mean(up), g.mean_all(cat)};
  g.backward(g.wsum(terms, {1.0, 2.0, 0.7}));
  CHECK(rel_max_err(x.grad(), fd_gradient<double>(run, x0)) < 1e-6);
}

TEST_CASE("warp gradients w.r.t. source and flow match finite differences") {
  Rng rng(12);
  TensorD src0 = random_tensor<double>({1, 6, 6}, rng, 0.0, 1.0);
  // fractional in-bounds displacements keep bilinear differentiable
  TensorD u0 = random_tensor<double>({6, 6}, rng, 0.2, 0.8);
  TensorD v0 = random_tensor<double>({6, 6}, rng, -0.8, -0.2);

  auto run = [&](const TensorD& sv, const TensorD& uv, const TensorD& vv) {
    Graph<double> g;
    auto s = g.leaf(sv, false);
    auto u = g.leaf(uv, false);
    auto v = g.leaf(vv, false);
    return g.mean_sq(g.warp(s, u, v)).scalar();
  };
  Graph<double> g;
  auto s = g.leaf(src0, true);
  auto u = g.leaf(u0, true);
  auto v = g.leaf(v0, true);
  g.backward(g.mean_sq(g.warp(s, u, v)));
  CHECK(rel_max_err(s.grad(), fd_gradient<double>(
                                  [&](const TensorD& t) { return run(t, u0, v0); }, src0)) < 1e-4);
  CHECK(rel_max_err(u.grad(), fd_gradient<double>(
                                  [&](const TensorD& t) { return run(src0, t, v0); }, u0)) < 1e-4);
  CHECK(rel_max_err(v.grad(), fd_gradient<double>(
                                  [&](const TensorD& t) { return run(src0, u0, t); }, v0)) < 1e-4);
}

TEST_CASE("stack_rows + nuclear_norm gradient matches finite differences") {
  Rng rng(13);
  TensorD a0 = random_tensor<double>({2, 3, 3}, rng);
  TensorD b0 = random_tensor<double>({2, 3, 3}, rng);
  TensorD c0 = random_tensor<double>({2, 3, 3}, rng);

  // third row depends on `a` but the spectrum stays non-degenerate
  auto run = [&](const TensorD& av) {
    Graph<double> g;
    auto a = g.leaf(av, false);
    auto b = g.leaf(b0, false);
    auto c = g.leaf(c0, false);
    auto X = g.stack_rows({a, b, g.add(g.scale(a, 0.3), c)});
    return g.nuclear_norm(X).scalar();
  };
  Graph<double> g;
  auto a = g.leaf(a0, true);
  auto b = g.leaf(b0, false);
  auto c = g.leaf(c0, false);
  auto X = g.stack_rows({a, b, g.add(g.scale(a, 0.3), c)});
  g.backward(g.nuclear_norm(X));
  CHECK(rel_max_err(a.grad(), fd_gradient<double>(run, a0)) < 1e-5);
}

TEST_CASE("no gradient flows into frozen leaves") {
  Rng rng(14);
  TensorD x0 = random_tensor<double>({1, 4, 4}, rng);
  Graph<double> g;
  auto x = g.leaf(x0, true);
  auto frozen = g.leaf(x0, false);
  auto loss = g.mean_sq(g.mul(x, frozen));
  g.backward(loss);
  CHECK(x.grad().size() == x0.size());
  CHECK(frozen.grad().empty());
  CHECK_FALSE(frozen.requires_grad());
}
