#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "cornerdet/gradcheck.hpp"
#include "cornerdet/losses.hpp"
#include "cornerdet/ops.hpp"

using namespace cornerdet;

namespace {

// Scalar evaluation of the focal detection loss, straight from its definition.
double focal_ref(const std::vector<double>& p_raw, const std::vector<double>& y, int n, double a = 2, double b = 4,
                 double eps = 1e-6) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double p = std::clamp(p_raw[i], eps, 1 - eps);
    if (y[i] == 1.0) {
      s += std::pow(1 - p, a) * std::log(p);
    } else {
      s += std::pow(1 - y[i], b) * std::pow(p, a) * std::log(1 - p);
    }
  }
  return -s / n;
}

double smooth_l1_ref(double d) { return std::abs(d) < 1 ? 0.5 * d * d : std::abs(d) - 0.5; }

double det(const std::vector<double>& p, const std::vector<double>& y, int n = 1) {
  Graph<double> g(false);
  const std::size_t len = p.size();
  const int objs[] = {n};
  return det_loss(g.constant(Tensor<double>({1, 1, len}, p)), Tensor<double>({1, 1, len}, y), objs, LossConfig{})
      .value()[0];
}

// Pull and push for per-object (tl, br) embeddings placed on a 1 x N grid.
std::pair<double, double> pull_push(const std::vector<std::pair<double, double>>& e, double delta = 1) {
  const std::size_t n = e.size();
  Tensor<double> tl({1, 1, 1, n}), br({1, 1, 1, n});
  std::vector<std::vector<CornerIndex>> corners(1);
  for (std::size_t k = 0; k < n; ++k) {
    tl[k] = e[k].first;
    br[k] = e[k].second;
    CornerIndex c;
    c.tl_x = c.br_x = static_cast<int>(k);
    corners[0].push_back(c);
  }
  LossConfig cfg;
  cfg.delta = delta;
  Graph<double> g(false);
  auto [pull, push] = pull_push_loss(g.constant(tl), g.constant(br), std::span<const std::vector<CornerIndex>>(corners), cfg);
  return {pull.value()[0], push.value()[0]};
}

std::pair<double, double> pull_push_ref(const std::vector<std::pair<double, double>>& e, double delta = 1) {
  const double n = static_cast<double>(e.size());
  std::vector<double> mean;
  double pull = 0, push = 0;
  for (auto [t, b] : e) {
    const double m = (t + b) / 2;
    mean.push_back(m);
    pull += (t - m) * (t - m) + (b - m) * (b - m);
  }
  for (std::size_t k = 0; k < e.size(); ++k)
    for (std::size_t j = 0; j < e.size(); ++j)
      if (j != k) push += std::max(0.0, delta - std::abs(mean[k] - mean[j]));
  return {pull / n, e.size() > 1 ? push / (n * (n - 1)) : 0.0};
}

double offset(const std::vector<std::pair<double, double>>& diffs) {
  const std::size_t n = diffs.size();
  Tensor<double> pred({1, 2, 1, n});
  std::vector<std::vector<CornerIndex>> corners(1);
  for (std::size_t k = 0; k < n; ++k) {
    CornerIndex c;
    c.tl_x = static_cast<int>(k);
    c.tl_off_x = 0.25f;
    c.tl_off_y = 0.5f;
    pred[k] = 0.25 + diffs[k].first;
    pred[n + k] = 0.5 + diffs[k].second;
    corners[0].push_back(c);
  }
  Graph<double> g(false);
  return offset_loss(g.constant(pred), std::span<const std::vector<CornerIndex>>(corners), CornerType::TopLeft)
      .value()[0];
}

}  // namespace

TEST_CASE("detection loss fixtures") {
  const double eps = 1e-6;
  CHECK(det({1 - eps, eps, eps, eps}, {1, 0, 0, 0.5}) < 1e-4);
  CHECK(det({0.5}, {1}) == doctest::Approx(0.17329).epsilon(1e-4));
  CHECK(det({0.5}, {1}) == doctest::Approx(focal_ref({0.5}, {1}, 1)).epsilon(1e-12));
  CHECK(det({0.5}, {0.9}) == doctest::Approx(1.7329e-5).epsilon(1e-4));
  CHECK(std::abs(det({0.5}, {0.9}) - focal_ref({0.5}, {0.9}, 1)) < 1e-12);
  // clamping keeps log(0) out
  CHECK(std::isfinite(det({0.0, 1.0}, {1, 0})));
}

TEST_CASE("detection loss matches the scalar reference on random maps") {
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(12), y(12);
    int positives = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      p[i] = u(rng);
      y[i] = u(rng) < 0.2 ? 1.0 : (u(rng) < 0.5 ? 0.0 : u(rng));
      positives += y[i] == 1.0;
    }
    const int n = std::max(positives, 1);
    CHECK(std::abs(det(p, y, n) - focal_ref(p, y, n)) < 1e-6);
  }
}

TEST_CASE("detection loss is separable over cells") {
  std::mt19937_64 rng(53);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 20; ++trial) {
    const double p1 = u(rng), p2 = u(rng);
    const double y1 = trial % 2 ? 1.0 : u(rng), y2 = u(rng);
    CHECK(det({p1, p2}, {y1, y2}) == doctest::Approx(det({p1}, {y1}) + det({p2}, {y2})).epsilon(1e-12));
  }
}

TEST_CASE("detection loss falls as a positive's probability rises") {
  double prev = std::numeric_limits<double>::infinity();
  for (double p = 0.01; p < 1.0; p += 0.01) {
    const double l = det({p, 0.3, 0.2}, {1, 0, 0.7});
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("detection loss needs objects") {
  CHECK_THROWS_AS(det({0.5}, {0}, 0), std::invalid_argument);
}

TEST_CASE("offset loss fixtures") {
  CHECK(offset({{0, 0}}) == 0.0);
  CHECK(offset({{0.5, 0}}) == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(offset({{2, 0}}) == doctest::Approx(1.5).epsilon(1e-12));
  const double want = (smooth_l1_ref(0.3) + smooth_l1_ref(-1.7) + smooth_l1_ref(0.9) + smooth_l1_ref(2.5)) / 2;
  CHECK(std::abs(offset({{0.3, -1.7}, {0.9, 2.5}}) - want) < 1e-6);
  Graph<double> g(false);
  std::vector<std::vector<CornerIndex>> none(1);
  CHECK_THROWS_AS(offset_loss(g.constant(Tensor<double>({1, 2, 2, 2})), std::span<const std::vector<CornerIndex>>(none),
                              CornerType::BottomRight),
                  std::invalid_argument);
}

TEST_CASE("offset loss gradient touches only gathered cells") {
  Tensor<double> pred({1, 2, 3, 3}, 0.4);
  std::vector<std::vector<CornerIndex>> corners(1);
  CornerIndex c;
  c.br_x = 2;
  c.br_y = 1;
  corners[0].push_back(c);
  Graph<double> g;
  auto p = g.leaf(pred);
  g.backward(offset_loss(p, std::span<const std::vector<CornerIndex>>(corners), CornerType::BottomRight));
  const auto& gr = g.grad(p);
  for (std::size_t i = 0; i < gr.numel(); ++i) {
    const bool gathered = i == 1 * 3 + 2 || i == 9 + 1 * 3 + 2;
    CHECK((gr[i] != 0) == gathered);
  }
}

TEST_CASE("pull and push fixtures") {
  CHECK(pull_push({{0.3, 0.3}}) == std::pair<double, double>{0, 0});
  CHECK(pull_push({{0, 0}, {1, 1}}).second == doctest::Approx(0.0));
  CHECK(pull_push({{0.4, 0.4}, {0.4, 0.4}}).second == doctest::Approx(1.0).epsilon(1e-12));
  std::mt19937_64 rng(57);
  std::normal_distribution<double> nd(0, 0.7);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::pair<double, double>> e(1 + trial % 5);
    for (auto& [a, b] : e) {
      a = nd(rng);
      b = nd(rng);
    }
    const auto got = pull_push(e), want = pull_push_ref(e);
    CHECK(std::abs(got.first - want.first) < 1e-6);
    CHECK(std::abs(got.second - want.second) < 1e-6);
  }
}

TEST_CASE("pull and push are shift invariant") {
  std::mt19937_64 rng(59);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::pair<double, double>> e(3), shifted(3);
    const double c = 5 * nd(rng);
    for (std::size_t k = 0; k < 3; ++k) {
      e[k] = {nd(rng), nd(rng)};
      shifted[k] = {e[k].first + c, e[k].second + c};
    }
    const auto a = pull_push(e), b = pull_push(shifted);
    CHECK(a.first == doctest::Approx(b.first).epsilon(1e-9));
    CHECK(a.second == doctest::Approx(b.second).epsilon(1e-9));
  }
}

TEST_CASE("total loss") {
  LossConfig cfg;
  CHECK(total_loss(LossParts{1, 1, 1, 1}, cfg) == doctest::Approx(2.2));
  CHECK(total_loss(LossParts{0, 0, 0, 0}, cfg) == 0.0);
  cfg.pull_weight = cfg.push_weight = cfg.offset_weight = 1;
  CHECK(total_loss(LossParts{1, 2, 3, 4}, cfg) == doctest::Approx(10.0));
  CHECK_THROWS_WITH_AS(total_loss(LossParts{1, std::nan(""), 0, 0}, cfg), doctest::Contains("pull"), std::domain_error);
  CHECK_THROWS_WITH_AS(total_loss(LossParts{1, 0, 0, INFINITY}, cfg), doctest::Contains("off"), std::domain_error);

  Graph<double> g;
  auto s = [&](double v) { return g.leaf(Tensor<double>::scalar(v)); };
  auto d = s(1), pl = s(1), ps = s(1), of = s(1);
  auto t = total_loss(d, pl, ps, of, LossConfig{});
  CHECK(t.value()[0] == doctest::Approx(2.2));
  g.backward(t);
  CHECK(g.grad(pl)[0] == doctest::Approx(0.1));
  CHECK(g.grad(of)[0] == doctest::Approx(1.0));
}

TEST_CASE("loss gradients match finite differences") {
  for (const char* op : {"det_loss", "offset_loss", "pull_loss", "push_loss", "total_loss"}) {
    const auto res = run_gradient_suite(op, 20, 5);
    INFO(op, " ", res[0].max_rel_error);
    CHECK(res[0].passed());
  }
  std::vector<Tensor<double>> in = {
      Tensor<double>({1, 2, 2, 2}, std::vector<double>{0.3, 0.8, 0.1, 0.45, 0.6, 0.2, 0.9, 0.05})};
  const Tensor<double> gt({1, 2, 2, 2}, std::vector<double>{1, 0.5, 0, 0.2, 0.7, 1, 0, 0.1});
  auto f = [&](Graph<double>&, const std::vector<Var<double>>& v) {
    const int n[] = {2};
    return det_loss(v[0], gt, n, LossConfig{});
  };
  CHECK(gradient_check(f, in) < 1e-5);
}
