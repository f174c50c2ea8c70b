#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "cornerdet/autodiff.hpp"
#include "cornerdet/checkpoint.hpp"
#include "cornerdet/gradcheck.hpp"
#include "cornerdet/ops.hpp"
#include "oracles.hpp"

using namespace cornerdet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{}), ShapeError);
}

TEST_CASE("conv2d box filter counts") {
  Graph<float> g(false);
  auto x = g.constant(Tensor<float>({1, 1, 3, 3}, 1.f));
  auto w = g.constant(Tensor<float>({1, 1, 3, 3}, 1.f));
  auto b = g.constant(Tensor<float>({1}, 0.f));
  const auto& y = conv2d(x, w, b, 1, 1).value();
  CHECK(y.at(0, 0, 1, 1) == 9.f);
  CHECK(y.at(0, 0, 0, 0) == 4.f);
  CHECK(y.at(0, 0, 2, 2) == 4.f);
  CHECK(y.at(0, 0, 0, 1) == 6.f);
}

TEST_CASE("conv2d identity kernel") {
  std::mt19937_64 rng(3);
  Graph<float> g(false);
  auto xt = random_tensor<float>({2, 3, 5, 6}, rng);
  Tensor<float> w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.f;
  auto y = conv2d(g.constant(xt), g.constant(w), g.constant(Tensor<float>({3})), 1, 0);
  CHECK(y.value() == xt);
}

TEST_CASE("conv2d matches the direct loop evaluation") {
  std::mt19937_64 rng(11);
  struct Case {
    Shape x, w;
    int stride, pad;
  };
  const std::vector<Case> cases = {{{2, 3, 8, 8}, {4, 3, 3, 3}, 2, 1}, {{1, 2, 7, 5}, {3, 2, 3, 3}, 1, 1},
                                   {{2, 4, 9, 9}, {2, 4, 1, 1}, 2, 0}, {{1, 1, 6, 6}, {2, 1, 5, 5}, 1, 2},
                                   {{3, 2, 5, 7}, {2, 2, 3, 3}, 1, 0}};
  for (const auto& c : cases) {
    auto x = random_tensor<float>(c.x, rng);
    auto w = random_tensor<float>(c.w, rng);
    auto b = random_tensor<float>({c.w[0]}, rng);
    Graph<float> g(false);
    const auto got = conv2d(g.constant(x), g.constant(w), g.constant(b), c.stride, c.pad).value();
    const auto want = oracle::conv2d(x, w, b, c.stride, c.pad);
    REQUIRE(got.shape() == want.shape());
    double worst = 0;
    for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, double(std::abs(got[i] - want[i])));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("conv2d shape errors name the dimension") {
  Graph<float> g(false);
  auto x = g.constant(Tensor<float>({1, 2, 4, 4}));
  auto w = g.constant(Tensor<float>({1, 3, 3, 3}));
  auto b = g.constant(Tensor<float>({1}));
  CHECK_THROWS_WITH_AS(conv2d(x, w, b, 1, 1), doctest::Contains("dimension 1"), ShapeError);
  auto w_even = g.constant(Tensor<float>({1, 2, 2, 2}));
  CHECK_THROWS(conv2d(x, w_even, b, 1, 1));
  auto big = g.constant(Tensor<float>({1, 2, 7, 7}));
  CHECK_THROWS_WITH(conv2d(x, big, b, 1, 0), doctest::Contains("dimension"));
  auto w_ok = g.constant(Tensor<float>({1, 2, 3, 3}));
  CHECK_THROWS(conv2d(x, w_ok, b, 3, 1));
}

TEST_CASE("batchnorm train mode") {
  BatchNormOptions opts;
  SUBCASE("normalised input passes through") {
    Tensor<float> x({2, 1, 1, 2}, std::vector<float>{1, -1, 1, -1});
    Graph<float> g(false);
    BatchNormState<float> st(1);
    auto y = batchnorm2d(g.constant(x), g.constant(Tensor<float>({1}, 1.f)), g.constant(Tensor<float>({1})), st, opts);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == doctest::Approx(x[i]).epsilon(1e-4));
  }
  SUBCASE("constant input gives beta") {
    Tensor<float> x({2, 2, 3, 3}, 7.f);
    Graph<float> g(false);
    BatchNormState<float> st(2);
    auto y = batchnorm2d(g.constant(x), g.constant(Tensor<float>({2}, 1.f)), g.constant(Tensor<float>({2}, 5.f)), st,
                         opts);
    for (float v : y.value().data()) CHECK(v == doctest::Approx(5.f));
  }
  SUBCASE("random input statistics") {
    std::mt19937_64 rng(5);
    auto x = random_tensor<double>({4, 2, 4, 4}, rng, -3, 5);
    Graph<double> g(false);
    BatchNormState<double> st(2);
    const auto& y = batchnorm2d(g.constant(x), g.constant(Tensor<double>({2}, 1.0)), g.constant(Tensor<double>({2})), st,
                                opts)
                        .value();
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0, ss = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 16; ++i) s += y[(n * 2 + c) * 16 + i];
      const double mean = s / 64;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 16; ++i) ss += std::pow(y[(n * 2 + c) * 16 + i] - mean, 2);
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(ss / 64 - 1) < 1e-3);
    }
    // running stats moved 10% toward the batch statistics
    CHECK(st.running_mean[0] != 0.0);
  }
  SUBCASE("single element per channel is rejected") {
    Graph<float> g(false);
    BatchNormState<float> st(1);
    CHECK_THROWS_AS(batchnorm2d(g.constant(Tensor<float>({1, 1, 1, 1})), g.constant(Tensor<float>({1}, 1.f)),
                                g.constant(Tensor<float>({1})), st, opts),
                    std::invalid_argument);
  }
}

TEST_CASE("batchnorm eval mode uses running statistics") {
  Graph<float> g(false);
  BatchNormState<float> st(1);
  st.running_mean[0] = 2.f;
  st.running_var[0] = 4.f;
  BatchNormOptions opts;
  opts.train = false;
  auto y = batchnorm2d(g.constant(Tensor<float>({1, 1, 1, 1}, 6.f)), g.constant(Tensor<float>({1}, 1.f)),
                       g.constant(Tensor<float>({1})), st, opts);
  CHECK(y.value()[0] == doctest::Approx(4.0 / std::sqrt(4.0 + 1e-5)));
}

TEST_CASE("elementwise ops") {
  Graph<float> g(false);
  CHECK(sigmoid(g.constant(Tensor<float>::scalar(0.f))).value()[0] == 0.5f);
  auto r = relu(g.constant(Tensor<float>({3}, std::vector<float>{-1, 0, 2}))).value();
  CHECK(r == Tensor<float>({3}, std::vector<float>{0, 0, 2}));
  auto up = upsample_nearest2x(g.constant(Tensor<float>({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}))).value();
  CHECK(up == Tensor<float>({1, 1, 4, 4}, std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  CHECK_THROWS_AS(add(g.constant(Tensor<float>({2, 3})), g.constant(Tensor<float>({3, 2}))), ShapeError);
  CHECK_THROWS_AS(add(g.constant(Tensor<float>({2, 3})), g.constant(Tensor<float>({2, 3, 1}))), ShapeError);
}

TEST_CASE("relu subgradient at zero is zero") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>({3}, std::vector<double>{-1, 0, 1}));
  g.backward(sum(relu(x)));
  CHECK(g.grad(x) == Tensor<double>({3}, std::vector<double>{0, 0, 1}));
}

TEST_CASE("maxpool3x3 equals the window max oracle") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor<float>({1, 2, 8, 8}, rng);
    CHECK(maxpool3x3(x) == oracle::window_max(x));
  }
  auto x = random_tensor<float>({1, 1, 1, 5}, rng);
  CHECK(maxpool3x3(x) == oracle::window_max(x));
}

TEST_CASE("backward basics") {
  SUBCASE("sum of a parameter gives ones") {
    Parameter<double> p("p", Tensor<double>({2, 3}, 0.7));
    Graph<double> g;
    g.backward(sum(g.param(p)));
    for (double v : p.grad.data()) CHECK(v == 1.0);
  }
  SUBCASE("half squared norm gives the value") {
    Parameter<double> p("p", Tensor<double>({4}, std::vector<double>{1, -2, 3, 0.5}));
    Graph<double> g;
    auto v = g.param(p);
    g.backward(scale(sum(mul(v, v)), 0.5));
    CHECK(p.grad == p.value);
  }
  SUBCASE("non-scalar loss is rejected") {
    Graph<double> g;
    auto v = g.leaf(Tensor<double>({2}));
    CHECK_THROWS_AS(g.backward(v), ShapeError);
  }
  SUBCASE("gradient reaching a node twice accumulates") {
    Graph<double> g;
    auto v = g.leaf(Tensor<double>({2}, std::vector<double>{1, 2}));
    g.backward(sum(add(v, v)));
    CHECK(g.grad(v) == Tensor<double>({2}, 2.0));
  }
  SUBCASE("graph is topologically ordered") {
    Graph<double> g;
    auto a = g.leaf(Tensor<double>({2}, 1.0));
    auto b = sigmoid(relu(a));
    auto c = sum(mul(b, a));
    for (std::size_t id = 0; id < g.size(); ++id)
      for (int in : g.node(static_cast<int>(id)).inputs) CHECK(in < static_cast<int>(id));
    CHECK(c.id == static_cast<int>(g.size()) - 1);
  }
}

TEST_CASE("composite graph matches central differences") {
  std::mt19937_64 rng(21);
  std::vector<Tensor<double>> inputs = {random_tensor<double>({2, 2, 5, 5}, rng), random_tensor<double>({3, 2, 3, 3}, rng),
                                        random_tensor<double>({3}, rng), random_tensor<double>({2, 3, 5, 5}, rng)};
  auto f = [](Graph<double>& g, const std::vector<Var<double>>& v) {
    auto y = sigmoid(conv2d(v[0], v[1], v[2], 1, 1));
    return sum(mul(upsample_nearest2x(y), upsample_nearest2x(v[3])));
  };
  CHECK(gradient_check(f, inputs) < 1e-5);
}

TEST_CASE("every op passes the finite-difference suite") {
  for (const auto& name : gradient_suite_ops()) {
    if (name == "model") continue;
    const auto res = run_gradient_suite(name, 20, 7);
    REQUIRE(res.size() == 1);
    INFO(name, " max rel err ", res[0].max_rel_error);
    CHECK(res[0].trials >= 20);
    CHECK(res[0].passed());
  }
  CHECK_THROWS_AS(run_gradient_suite("no_such_op"), std::invalid_argument);
}

TEST_CASE("adam") {
  AdamConfig cfg;
  SUBCASE("zero gradient leaves parameters unchanged") {
    Parameter<float> p("p", Tensor<float>({3}, std::vector<float>{1, 2, 3}));
    auto before = p.value;
    Parameter<float>* ps[] = {&p};
    adam_step<float>(ps, cfg);
    CHECK(p.value == before);
    CHECK(p.step == 1);
  }
  SUBCASE("first step moves each coordinate by about lr") {
    Parameter<double> p("p", Tensor<double>({3}, std::vector<double>{1, 2, 3}));
    p.grad = Tensor<double>({3}, std::vector<double>{0.3, -5, 1e-2});
    Parameter<double>* ps[] = {&p};
    adam_step<double>(ps, cfg);
    CHECK(p.value[0] == doctest::Approx(1 - cfg.lr).epsilon(1e-6));
    CHECK(p.value[1] == doctest::Approx(2 + cfg.lr).epsilon(1e-6));
    CHECK(p.value[2] == doctest::Approx(3 - cfg.lr).epsilon(1e-6));
  }
  SUBCASE("descent on x^2") {
    Parameter<double> p("x", Tensor<double>::scalar(1.0));
    Parameter<double>* ps[] = {&p};
    for (int i = 0; i < 100; ++i) {
      p.zero_grad();
      Graph<double> g;
      auto x = g.param(p);
      g.backward(sum(mul(x, x)));
      adam_step<double>(ps, cfg);
    }
    CHECK(std::abs(p.value[0]) < 1.0);
    CHECK(p.value[0] == doctest::Approx(1 - 100 * cfg.lr).epsilon(1e-3));
  }
}

TEST_CASE("checkpoint archive round trip") {
  TensorArchive a;
  a["w"] = Tensor<float>({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6.5f});
  a["b.bias"] = Tensor<float>({1}, -0.25f);
  std::stringstream ss;
  write_archive(ss, a);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "CNCK");
  CHECK(read_archive(ss) == a);
  std::stringstream bad("XXXX1234");
  CHECK_THROWS_AS(read_archive(bad), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_archive(truncated), FormatError);
}
