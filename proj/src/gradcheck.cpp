#include "cornerdet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cornerdet/corner_pool.hpp"
#include "cornerdet/data.hpp"
#include "cornerdet/losses.hpp"
#include "cornerdet/model.hpp"
#include "cornerdet/ops.hpp"
#include "cornerdet/train.hpp"

namespace cornerdet {
namespace {

using Rng = std::mt19937_64;
using TensorD = Tensor<double>;

constexpr double kOpTolerance = 1e-5;
constexpr double kModelTolerance = 1e-4;
constexpr double kStep = 1e-5;

TensorD uniform(Rng& rng, Shape s, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  TensorD t(std::move(s));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Values bounded away from zero, for kinks at the origin.
TensorD away_from_zero(Rng& rng, Shape s) {
  TensorD t = uniform(rng, std::move(s), 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) {
    if (sign(rng)) v = -v;
  }
  return t;
}

// Distinct values at least 0.01 apart, so max-based ops have no near ties.
TensorD distinct(Rng& rng, Shape s) {
  TensorD t(std::move(s));
  std::vector<double> v(t.numel());
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  std::uniform_real_distribution<double> jitter(0.0, 0.005);
  const double scale = 2.0 / static_cast<double>(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = (v[i] + jitter(rng)) * std::max(scale, 0.01) - 1.0;
  return t;
}

int pick(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Scalar projection of a tensor-valued op with a fixed random weighting.
Var<double> project(Graph<double>& g, Var<double> out, Rng& rng) {
  return sum(mul(out, g.constant(uniform(rng, out.shape(), -1.0, 1.0))));
}

struct OpCase {
  LossBuilder loss;
  std::vector<TensorD> inputs;
};

using CaseMaker = std::function<OpCase(Rng&)>;

std::vector<std::vector<CornerIndex>> random_corners(Rng& rng, std::size_t batch, int h, int w, int max_objects) {
  std::vector<std::vector<CornerIndex>> out(batch);
  std::uniform_real_distribution<float> off(0.0f, 0.99f);
  for (auto& list : out) {
    const int n = pick(rng, 1, max_objects);
    for (int k = 0; k < n; ++k) {
      CornerIndex c;
      c.cls = 0;
      c.tl_x = pick(rng, 0, w - 1);
      c.tl_y = pick(rng, 0, h - 1);
      c.br_x = pick(rng, c.tl_x, w - 1);
      c.br_y = pick(rng, c.tl_y, h - 1);
      c.tl_off_x = off(rng);
      c.tl_off_y = off(rng);
      c.br_off_x = off(rng);
      c.br_off_y = off(rng);
      list.push_back(c);
    }
  }
  return out;
}

std::map<std::string, CaseMaker> op_cases() {
  std::map<std::string, CaseMaker> m;

  m["conv2d"] = [](Rng& rng) {
    const int k = pick(rng, 0, 1) ? 3 : 1, stride = pick(rng, 1, 2), pad = k == 3 ? pick(rng, 0, 1) : 0;
    const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const std::size_t h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    auto seed = rng();
    return OpCase{[stride, pad, seed](Graph<double>& g, const std::vector<Var<double>>& in) {
                    Rng r(seed);
                    return project(g, conv2d(in[0], in[1], in[2], stride, pad), r);
                  },
                  {uniform(rng, {n, cin, h, w}, -1, 1),
                   uniform(rng, {cout, cin, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, -1, 1),
                   uniform(rng, {cout}, -1, 1)}};
  };

  auto bn = [](bool train) {
    return [train](Rng& rng) {
      const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
      auto seed = rng();
      BatchNormState<double> st(c);
      st.running_mean = uniform(rng, {c}, -0.5, 0.5);
      st.running_var = uniform(rng, {c}, 0.5, 1.5);
      return OpCase{[train, seed, st](Graph<double>& g, const std::vector<Var<double>>& in) {
                      Rng r(seed);
                      BatchNormState<double> s = st;
                      BatchNormOptions o;
                      o.train = train;
                      return project(g, batchnorm2d(in[0], in[1], in[2], s, o), r);
                    },
                    {uniform(rng, {n, c, h, w}, -2, 2), uniform(rng, {c}, 0.5, 1.5), uniform(rng, {c}, -1, 1)}};
    };
  };
  m["batchnorm2d_train"] = bn(true);
  m["batchnorm2d_eval"] = bn(false);

  auto unary = [](std::function<Var<double>(Var<double>)> op, bool kink_at_zero) {
    return [op, kink_at_zero](Rng& rng) {
      const Shape s{static_cast<std::size_t>(pick(rng, 1, 2)), static_cast<std::size_t>(pick(rng, 1, 3)),
                    static_cast<std::size_t>(pick(rng, 1, 4)), static_cast<std::size_t>(pick(rng, 1, 4))};
      auto seed = rng();
      TensorD x = kink_at_zero ? away_from_zero(rng, s) : uniform(rng, s, -3, 3);
      return OpCase{[op, seed](Graph<double>& g, const std::vector<Var<double>>& in) {
                      Rng r(seed);
                      return project(g, op(in[0]), r);
                    },
                    {std::move(x)}};
    };
  };
  m["relu"] = unary([](Var<double> x) { return relu(x); }, true);
  m["sigmoid"] = unary([](Var<double> x) { return sigmoid(x); }, false);
  m["scale"] = unary([](Var<double> x) { return scale(x, -1.7); }, false);
  m["upsample_nearest2x"] = unary([](Var<double> x) { return upsample_nearest2x(x); }, false);
  m["sum"] = [](Rng& rng) {
    const Shape s{static_cast<std::size_t>(pick(rng, 1, 3)), static_cast<std::size_t>(pick(rng, 1, 5))};
    return OpCase{[](Graph<double>&, const std::vector<Var<double>>& in) {
                    return scale(sum(mul(in[0], in[0])), 0.5);
                  },
                  {uniform(rng, s, -2, 2)}};
  };

  auto binary = [](std::function<Var<double>(Var<double>, Var<double>)> op) {
    return [op](Rng& rng) {
      const Shape s{static_cast<std::size_t>(pick(rng, 1, 2)), static_cast<std::size_t>(pick(rng, 1, 3)),
                    static_cast<std::size_t>(pick(rng, 1, 4)), static_cast<std::size_t>(pick(rng, 1, 4))};
      auto seed = rng();
      return OpCase{[op, seed](Graph<double>& g, const std::vector<Var<double>>& in) {
                      Rng r(seed);
                      return project(g, op(in[0], in[1]), r);
                    },
                    {uniform(rng, s, -2, 2), uniform(rng, s, -2, 2)}};
    };
  };
  m["add"] = binary([](Var<double> a, Var<double> b) { return add(a, b); });
  m["mul"] = binary([](Var<double> a, Var<double> b) { return mul(a, b); });

  m["weighted_sum"] = [](Rng& rng) {
    const int n = pick(rng, 1, 4);
    std::vector<TensorD> in;
    std::vector<double> w;
    for (int i = 0; i < n; ++i) {
      in.push_back(uniform(rng, {1}, -2, 2));
      w.push_back(uniform(rng, {1}, -2, 2)[0]);
    }
    return OpCase{[w](Graph<double>&, const std::vector<Var<double>>& v) {
                    std::vector<Var<double>> sq;
                    for (const auto& x : v) sq.push_back(mul(x, x));
                    return weighted_sum(sq, w);
                  },
                  std::move(in)};
  };

  const ScanDirection dirs[] = {ScanDirection::BottomToTop, ScanDirection::RightToLeft, ScanDirection::TopToBottom,
                                ScanDirection::LeftToRight};
  for (ScanDirection d : dirs) {
    m["scan_max_" + to_string(d)] = [d](Rng& rng) {
      const Shape s{static_cast<std::size_t>(pick(rng, 1, 2)), static_cast<std::size_t>(pick(rng, 1, 2)),
                    static_cast<std::size_t>(pick(rng, 1, 6)), static_cast<std::size_t>(pick(rng, 1, 6))};
      auto seed = rng();
      return OpCase{[d, seed](Graph<double>& g, const std::vector<Var<double>>& in) {
                      Rng r(seed);
                      return project(g, scan_max(in[0], d), r);
                    },
                    {distinct(rng, s)}};
    };
  }
  auto pool = [](bool top_left) {
    return [top_left](Rng& rng) {
      const Shape s{static_cast<std::size_t>(pick(rng, 1, 2)), static_cast<std::size_t>(pick(rng, 1, 2)),
                    static_cast<std::size_t>(pick(rng, 1, 6)), static_cast<std::size_t>(pick(rng, 1, 6))};
      auto seed = rng();
      return OpCase{[top_left, seed](Graph<double>& g, const std::vector<Var<double>>& in) {
                      Rng r(seed);
                      return project(g, top_left ? corner_pool_topleft(in[0], in[1]) : corner_pool_bottomright(in[0], in[1]),
                                     r);
                    },
                    {distinct(rng, s), distinct(rng, s)}};
    };
  };
  m["corner_pool_topleft"] = pool(true);
  m["corner_pool_bottomright"] = pool(false);

  m["det_loss"] = [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    TensorD gt = uniform(rng, {b, c, h, w}, 0.0, 0.95);
    std::vector<int> counts;
    for (std::size_t i = 0; i < b; ++i) {
      const int pos = pick(rng, 1, 2);
      for (int k = 0; k < pos; ++k) {
        gt.at(i, static_cast<std::size_t>(pick(rng, 0, static_cast<int>(c) - 1)),
              static_cast<std::size_t>(pick(rng, 0, static_cast<int>(h) - 1)),
              static_cast<std::size_t>(pick(rng, 0, static_cast<int>(w) - 1))) = 1.0;
      }
      counts.push_back(pos);
    }
    return OpCase{[gt, counts](Graph<double>&, const std::vector<Var<double>>& in) {
                    return det_loss(in[0], gt, counts, LossConfig{});
                  },
                  {uniform(rng, {b, c, h, w}, 0.05, 0.95)}};
  };

  m["offset_loss"] = [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    const auto corners = random_corners(rng, b, static_cast<int>(h), static_cast<int>(w), 3);
    const CornerType type = pick(rng, 0, 1) ? CornerType::TopLeft : CornerType::BottomRight;
    return OpCase{[corners, type](Graph<double>&, const std::vector<Var<double>>& in) {
                    return offset_loss(in[0], std::span<const std::vector<CornerIndex>>(corners), type);
                  },
                  {uniform(rng, {b, 2, h, w}, -2, 3)}};
  };

  auto pull_push = [](bool want_pull) {
    return [want_pull](Rng& rng) {
      const std::size_t b = pick(rng, 1, 2), h = pick(rng, 3, 5), w = pick(rng, 3, 5);
      const auto corners = random_corners(rng, b, static_cast<int>(h), static_cast<int>(w), 4);
      return OpCase{[corners, want_pull](Graph<double>&, const std::vector<Var<double>>& in) {
                      auto [pull, push] =
                          pull_push_loss(in[0], in[1], std::span<const std::vector<CornerIndex>>(corners), LossConfig{});
                      return want_pull ? pull : push;
                    },
                    {uniform(rng, {b, 1, h, w}, -1, 1), uniform(rng, {b, 1, h, w}, -1, 1)}};
    };
  };
  m["pull_loss"] = pull_push(true);
  m["push_loss"] = pull_push(false);

  m["total_loss"] = [](Rng& rng) {
    LossConfig cfg;
    cfg.pull_weight = uniform(rng, {1}, 0, 1)[0];
    cfg.push_weight = uniform(rng, {1}, 0, 1)[0];
    cfg.offset_weight = uniform(rng, {1}, 0, 2)[0];
    std::vector<TensorD> in;
    for (int i = 0; i < 4; ++i) in.push_back(uniform(rng, {1}, -2, 2));
    return OpCase{[cfg](Graph<double>&, const std::vector<Var<double>>& v) {
                    return total_loss(mul(v[0], v[0]), mul(v[1], v[1]), mul(v[2], v[2]), mul(v[3], v[3]), cfg);
                  },
                  std::move(in)};
  };
  return m;
}

// Which side of every ReLU and max-scan switch each element sits on. Central
// differences are only valid when x-h, x and x+h share one pattern.
std::vector<bool> branch_pattern(const Graph<double>& g) {
  std::vector<bool> bits;
  for (int id = 0; id < static_cast<int>(g.size()); ++id) {
    const auto& n = g.node(id);
    if (n.op == "relu") {
      for (double v : n.value.data()) bits.push_back(v > 0);
    } else if (n.op.rfind("scan_max", 0) == 0) {
      const Tensor<double>& in = g.value(n.inputs[0]);
      for (std::size_t i = 0; i < in.numel(); ++i) bits.push_back(n.value[i] == in[i]);
    }
  }
  return bits;
}

// Full-model check on a tiny configuration over a sample of parameter coordinates.
GradCheckResult model_check(int trials, std::uint64_t seed, std::size_t coords_per_trial) {
  GradCheckResult res{"model", trials, 0, 0, 0.0, kModelTolerance};
  Rng rng(seed);
  DataConfig dc;
  dc.image_size = 16;
  dc.min_extent = 4;
  dc.max_extent = 9;
  dc.max_objects = 2;
  for (int t = 0; t < trials; ++t) {
    ModelConfig mc;
    mc.input_size = 16;
    mc.channels = {4, 6, 8};
    mc.stacks = t % 2 == 0 ? 1 : 2;
    Model<double> model(mc, rng());

    std::vector<Tensor<double>> images;
    std::vector<TargetMaps> targets;
    const TargetConfig tc = targets_for_model(mc, TargetConfig{});
    // Batch statistics over fewer images make the loss curved enough that
    // h = 1e-5 differences drift past the tolerance.
    while (images.size() < 8) {
      Sample s = generate_sample(rng, dc, "g");
      if (s.annotations.empty()) continue;
      images.push_back(s.image.cast<double>());
      targets.push_back(make_targets(s.annotations, tc));
    }
    const Tensor<double> batch = stack_batch<double>(images);
    const LossConfig lc;
    auto loss_at = [&](std::vector<bool>* pattern) {
      Graph<double> g(false);
      const double v = model_loss(g, model, batch, targets, lc, true).total.value()[0];
      *pattern = branch_pattern(g);
      return v;
    };

    model.zero_grad();
    std::vector<bool> base;
    {
      Graph<double> g;
      auto lg = model_loss(g, model, batch, targets, lc, true);
      g.backward(lg.total);
      base = branch_pattern(g);
    }
    const auto params = model.parameters();
    std::size_t total = 0;
    for (auto* p : params) total += p->value.numel();
    std::uniform_int_distribution<std::size_t> coord(0, total - 1);
    for (std::size_t k = 0; k < coords_per_trial; ++k) {
      std::size_t flat = coord(rng), pi = 0;
      while (flat >= params[pi]->value.numel()) flat -= params[pi++]->value.numel();
      Parameter<double>& p = *params[pi];
      const double orig = p.value[flat];
      std::vector<bool> pat_up, pat_down;
      p.value[flat] = orig + kStep;
      const double up = loss_at(&pat_up);
      p.value[flat] = orig - kStep;
      const double down = loss_at(&pat_down);
      p.value[flat] = orig;
      if (pat_up != base || pat_down != base) {
        ++res.skipped;
        continue;
      }
      const double numeric = (up - down) / (2 * kStep);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(p.grad[flat], numeric));
      ++res.coordinates;
    }
  }
  return res;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

double gradient_check(const LossBuilder& f, const std::vector<Tensor<double>>& inputs, double h) {
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
    Var<double> loss = f(g, leaves);
    g.backward(loss);
    for (const auto& v : leaves) analytic.push_back(g.grad(v));
  }
  auto eval = [&](const std::vector<Tensor<double>>& at) {
    Graph<double> g(false);
    std::vector<Var<double>> leaves;
    for (const auto& t : at) leaves.push_back(g.leaf(t, false));
    return f(g, leaves).value()[0];
  };
  std::vector<Tensor<double>> work = inputs;
  double worst = 0;
  for (std::size_t i = 0; i < work.size(); ++i) {
    for (std::size_t j = 0; j < work[i].numel(); ++j) {
      const double orig = work[i][j];
      work[i][j] = orig + h;
      const double up = eval(work);
      work[i][j] = orig - h;
      const double down = eval(work);
      work[i][j] = orig;
      worst = std::max(worst, relative_error(analytic[i][j], (up - down) / (2 * h)));
    }
  }
  return worst;
}

std::vector<std::string> gradient_suite_ops() {
  std::vector<std::string> names;
  for (const auto& [name, maker] : op_cases()) names.push_back(name);
  names.push_back("model");
  return names;
}

std::vector<GradCheckResult> run_gradient_suite(const std::string& only, int trials, std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("gradient suite: trials must be >= 1");
  const auto cases = op_cases();
  if (!only.empty() && only != "model" && !cases.count(only)) {
    std::string known;
    for (const auto& n : gradient_suite_ops()) known += (known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown op '" + only + "' (known: " + known + ")");
  }
  std::vector<GradCheckResult> out;
  std::uint64_t salt = 0;
  for (const auto& [name, maker] : cases) {
    ++salt;
    if (!only.empty() && only != name) continue;
    Rng rng(seed * 1000003ULL + salt);
    GradCheckResult r{name, trials, 0, 0, 0.0, kOpTolerance};
    for (int t = 0; t < trials; ++t) {
      OpCase c = maker(rng);
      for (const auto& in : c.inputs) r.coordinates += in.numel();
      r.max_rel_error = std::max(r.max_rel_error, gradient_check(c.loss, c.inputs, kStep));
    }
    out.push_back(r);
  }
  if (only.empty() || only == "model") out.push_back(model_check(trials, seed, 40));
  return out;
}

std::string gradient_report(const std::vector<GradCheckResult>& results) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %7s %8s %8s %12s %10s %s\n", "op", "trials", "coords", "skipped",
                "max_rel_err", "tol", "status");
  os << buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-28s %7d %8zu %8zu %12.3e %10.1e %s\n", r.op.c_str(), r.trials, r.coordinates,
                  r.skipped, r.max_rel_error, r.tolerance, r.passed() ? "ok" : "FAIL");
    os << buf;
  }
  return os.str();
}

}  // namespace cornerdet
