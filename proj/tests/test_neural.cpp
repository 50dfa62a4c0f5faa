// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "groundkit/neural.hpp"

using namespace groundkit;
using Catch::Approx;

namespace {

std::vector<Matrix> random_sequence(Rng& rng, std::size_t T, int D, int B) {
  std::vector<Matrix> xs(T, Matrix(D, B));
  for (auto& x : xs)
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  return xs;
}

}  // namespace

TEST_CASE("activations") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(800.0) == Approx(1.0));
  CHECK(sigmoid(-800.0) >= 0.0);
  Vector x(4);
  x << 1000.0, 1001.0, -5.0, 0.0;
  const Vector p = softmax(x);
  CHECK(p.sum() == Approx(1.0).margin(1e-12));
  CHECK(p.allFinite());
  CHECK(softmax(Vector::Constant(1, 3.0))[0] == 1.0);
  Matrix m(3, 2);
  m << 1, 2, 3, 4, 5, 6;
  const Matrix s = softmax_columns(m);
  CHECK(s.col(0).sum() == Approx(1.0));
  CHECK(s.col(1).sum() == Approx(1.0));
}

TEST_CASE("l2 normalization") {
  Vector v(2);
  v << 3, 4;
  CHECK(l2_normalize(v).norm() == Approx(1.0));
  CHECK_THROWS_WITH(l2_normalize(Vector::Zero(3)), "zero norm");
  CHECK(l2_normalize(Vector::Zero(3), 1e-8).norm() == 0.0);
}

TEST_CASE("losses against closed forms") {
  const std::vector<double> logits = {0.0, 2.0, -3.0}, targets = {1.0, 0.0, 1.0};
  std::vector<double> grad(3);
  const double expect = (std::log(2.0) + std::log1p(std::exp(2.0)) + std::log1p(std::exp(3.0))) / 3.0;
  CHECK(bce_per_logit(logits, targets, grad) == Approx(expect));
  CHECK(grad[0] == Approx((0.5 - 1.0) / 3.0));
  CHECK(grad[1] == Approx(sigmoid(2.0) / 3.0));
  CHECK(bce_per_logit(std::vector<double>{800.0}, std::vector<double>{0.0}) == Approx(800.0));
  CHECK_THROWS_AS(bce_per_logit(logits, std::vector<double>{1.0}), Error);

  Matrix l(3, 2);
  l << 1, 0, 2, 0, 3, 0;
  std::vector<int> cls = {2, 0};
  Matrix g;
  const double ce = cross_entropy(l, cls, &g);
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(ce == Approx(((lse - 3.0) + std::log(3.0)) / 2.0));
  CHECK(g.col(1)(0) == Approx((1.0 / 3.0 - 1.0) / 2.0));
  CHECK(g.sum() == Approx(0.0).margin(1e-12));
  std::vector<int> bad = {5, 0};
  CHECK_THROWS_AS(cross_entropy(l, bad), Error);
}

TEST_CASE("AdamW matches a reference implementation") {
  // Reference values from torch.optim.AdamW in float64 (lr 0.1, betas 0.9/0.999,
  // eps 1e-8, weight decay 1e-2) with a linear decay to zero over 50 steps.
  Parameter w("w", 2, 1);
  w.value << 0.0, 5.0;
  Vector target(2);
  target << 3.0, -1.0;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  AdamW opt(cfg, 50);
  const ParameterList ps = {&w};
  for (int step = 1; step <= 50; ++step) {
    w.grad = w.value - target;
    opt.step(ps);
    if (step == 1) {
      CHECK(w.value(0) == Approx(0.09999999966666667).epsilon(1e-12));
      CHECK(w.value(1) == Approx(4.895000000166667).epsilon(1e-12));
    }
    if (step == 10) {
      CHECK(w.value(0) == Approx(0.8950403875661402).epsilon(1e-10));
      CHECK(w.value(1) == Approx(4.0536064722806).epsilon(1e-10));
    }
  }
  CHECK(w.value(0) == Approx(2.209122541524634).epsilon(1e-10));
  CHECK(w.value(1) == Approx(2.4832168935710377).epsilon(1e-10));
  CHECK(opt.position() == 50);
  CHECK(opt.lr_at(50) == 0.0);
  CHECK(opt.lr_at(25) == Approx(0.05));
}

TEST_CASE("AdamW skips frozen columns and rejects non-finite gradients") {
  Parameter p("emb", 2, 3);
  p.frozen_cols = {0, 1, 0};
  p.grad.setOnes();
  AdamW opt(AdamWConfig{}, 10);
  opt.step({&p});
  CHECK(p.value.col(1).isZero());
  CHECK_FALSE(p.value.col(0).isZero());
  p.grad(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH(opt.step({&p}), Catch::Matchers::StartsWith("gradient overflow"));
}

TEST_CASE("bidirectional GRU forward matches a reference implementation") {
  // Reference from torch.nn.GRU(2, 2, bidirectional=True) in float64; torch
  // orders the output [forward; backward], this implementation [backward; forward].
  BiGru g("g", 2, 2);
  for (int dir = 0; dir < 2; ++dir) {
    auto& cell = dir == 0 ? g.forward_cell : g.backward_cell;
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 2; ++j) {
        cell.w_x.value(i, j) = 0.1 * std::sin(i + 2 * j + 1) * (dir ? -1.5 : 1.0);
        cell.w_h.value(i, j) = 0.2 * std::cos(i - j) * (dir ? 0.5 : 1.0);
      }
      cell.b_x.value(i, 0) = 0.05 * i;
      cell.b_h.value(i, 0) = -0.03 * i;
    }
  }
  std::vector<Matrix> xs(3, Matrix(2, 1));
  for (int t = 0; t < 3; ++t)
    for (int j = 0; j < 2; ++j) xs[static_cast<std::size_t>(t)](j, 0) = 0.5 * (t + 1) - 0.3 * j;
  const auto out = g.forward(xs);
  const double ref[3][4] = {
      {0.05101647328327619, 0.0877885815364485, 0.16976489608220324, 0.11305145487795287},
      {0.062475344242221634, 0.1483620782785554, 0.15690763441135946, 0.06618844928191407},
      {0.05581873520085626, 0.1941913559321549, 0.10881099860461226, 0.026472684993003613}};
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(out[t](0, 0) == Approx(ref[t][2]).epsilon(1e-12));
    CHECK(out[t](1, 0) == Approx(ref[t][3]).epsilon(1e-12));
    CHECK(out[t](2, 0) == Approx(ref[t][0]).epsilon(1e-12));
    CHECK(out[t](3, 0) == Approx(ref[t][1]).epsilon(1e-12));
  }
}

TEST_CASE("GRU shape contract and errors") {
  Rng rng(1);
  BiGru g("g", 3, 4);
  g.init(rng);
  const auto xs = random_sequence(rng, 5, 3, 2);
  const auto out = g.forward(xs);
  REQUIRE(out.size() == 5);
  CHECK(out[0].rows() == 8);
  CHECK(out[0].cols() == 2);
  CHECK_THROWS_WITH(g.forward({}), "gru_bidirectional: empty sequence");
  CHECK_THROWS_AS(g.forward(random_sequence(rng, 2, 5, 1)), Error);
  // A batch of two equals two separate runs.
  std::vector<Matrix> first(5), second(5);
  for (std::size_t t = 0; t < 5; ++t) {
    first[t] = xs[t].col(0);
    second[t] = xs[t].col(1);
  }
  const auto a = g.forward(first), b = g.forward(second);
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK((out[t].col(0) - a[t]).norm() < 1e-14);
    CHECK((out[t].col(1) - b[t]).norm() < 1e-14);
  }
}

TEST_CASE("GRU gradients pass finite differences at three parameter points") {
  for (std::uint64_t point = 0; point < 3; ++point) {
    Rng rng(100 + point);
    BiGru g("g", 3, 4);
    g.init(rng);
    const auto xs = random_sequence(rng, 4, 3, 2);
    std::vector<Matrix> w = random_sequence(rng, 4, 8, 2);
    auto loss = [&](bool backward) {
      BiGru::Cache cache;
      const auto out = g.forward(xs, &cache);
      double l = 0.0;
      for (std::size_t t = 0; t < out.size(); ++t) l += out[t].cwiseProduct(w[t]).sum() + 0.5 * out[t].squaredNorm();
      if (backward) {
        std::vector<Matrix> d(out.size());
        for (std::size_t t = 0; t < out.size(); ++t) d[t] = w[t] + out[t];
        g.backward(cache, d);
      }
      return l;
    };
    const auto res = gradient_check(g.parameters(), loss, rng, 20);
    INFO(res.worst);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("GRU input gradients pass finite differences") {
  Rng rng(5);
  BiGru g("g", 2, 3);
  g.init(rng);
  auto xs = random_sequence(rng, 3, 2, 1);
  BiGru::Cache cache;
  const auto out = g.forward(xs, &cache);
  std::vector<Matrix> ones(out.size(), Matrix::Ones(6, 1));
  const auto dx = g.backward(cache, ones);
  for (std::size_t t = 0; t < xs.size(); ++t)
    for (Eigen::Index i = 0; i < 2; ++i) {
      const double saved = xs[t](i, 0);
      auto total = [&] {
        double s = 0.0;
        for (const auto& o : g.forward(xs)) s += o.sum();
        return s;
      };
      xs[t](i, 0) = saved + 1e-6;
      const double up = total();
      xs[t](i, 0) = saved - 1e-6;
      const double down = total();
      xs[t](i, 0) = saved;
      CHECK(dx[t](i, 0) == Approx((up - down) / 2e-6).epsilon(1e-6));
    }
}

TEST_CASE("gradient checker catches a wrong gradient") {
  Parameter p("p", 1, 1);
  p.value(0, 0) = 2.0;
  Rng rng(0);
  auto wrong = [&](bool backward) {
    if (backward) p.grad(0, 0) += 3.0 * p.value(0, 0);  // true derivative is 2w
    return p.value(0, 0) * p.value(0, 0);
  };
  CHECK(gradient_check({&p}, wrong, rng).max_rel_error > 0.1);
}

TEST_CASE("checkpoint round trip and corruption") {
  Checkpoint ck;
  ck.header = R"({"kind":"test"})";
  Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, 6.5;
  ck.tensors["a"] = a;
  ck.tensors["b"] = Matrix::Constant(1, 1, -0.25);
  const auto path = (std::filesystem::temp_directory_path() / "groundkit_ck.bin").string();
  save_checkpoint(path, ck);
  const auto back = load_checkpoint(path);
  CHECK(back.header == ck.header);
  CHECK(back.at("a") == a);
  CHECK(back.at("b")(0, 0) == -0.25);
  CHECK_THROWS_AS(back.at("missing"), Error);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("bad magic"));
  std::filesystem::resize_file(path, 10);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::filesystem::remove(path);

  Parameter p("p", 2, 2), q("p", 2, 2);
  p.value.setConstant(3.0);
  p.m.setConstant(0.5);
  Checkpoint c2;
  store_parameters(c2, {&p}, true);
  restore_parameters(c2, {&q}, true);
  CHECK(q.value == p.value);
  CHECK(q.m == p.m);
  Parameter wrong("p", 3, 1);
  CHECK_THROWS_AS(restore_parameters(c2, {&wrong}), Error);
}
