// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include "cornerdet/checkpoint.hpp"
#include "cornerdet/corner_pool.hpp"
#include "cornerdet/data.hpp"
#include "cornerdet/decode.hpp"
#include "cornerdet/eval.hpp"
#include "cornerdet/gradcheck.hpp"
#include "cornerdet/losses.hpp"
#include "cornerdet/parallel.hpp"
#include "cornerdet/targets.hpp"
#include "cornerdet/train.hpp"
#include "oracles.hpp"

using namespace cornerdet;

namespace {

// Tolerances and budgets.
constexpr double kPoolSeconds = 10;
constexpr double kGradOpTol = 1e-5;
constexpr double kGradModelTol = 1e-4;
constexpr int kGradTrials = 20;
constexpr double kGradSeconds = 120;
constexpr double kRadiusSeconds = 60;
constexpr double kLossTol = 1e-6;
constexpr double kRoundTripPx = 2.0;
constexpr double kAp50Gate = 0.80;
constexpr double kOracleGap = 0.05;
constexpr int kMainIterations = 5000;
constexpr int kAblationIterations = kMainIterations;  // ablations train the default schedule
constexpr std::uint64_t kAblationSeeds[] = {1, 2, 3};
constexpr double kBenchSpeedup = 5.0;
constexpr int kDeterminismSteps = 100;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("criterion %2d %-28s %s  %s\n", id, name.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void pool_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> b(1, 2), c(1, 8), hw(1, 16);
  std::normal_distribution<float> nd;
  std::uniform_int_distribution<int> small(-3, 3);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<float> x({b(rng), c(rng), hw(rng), hw(rng)});
    // every fourth tensor uses small integers so ties are exercised
    for (auto& v : x.data()) v = trial % 4 == 0 ? static_cast<float>(small(rng)) : nd(rng);
    for (auto d : {ScanDirection::BottomToTop, ScanDirection::RightToLeft, ScanDirection::TopToBottom,
                   ScanDirection::LeftToRight}) {
      mismatches += !(scan_max(x, d) == oracle::ray_max(x, d));
    }
  }
  const double secs = seconds_since(t0);
  report(1, "corner-pool oracle", mismatches == 0 && secs < kPoolSeconds,
         fmt("%d mismatches over 800 scans, %.2f s", mismatches, secs));
}

void gradients() {
  const auto t0 = Clock::now();
  const auto results = run_gradient_suite("", kGradTrials, 1);
  const double secs = seconds_since(t0);
  bool ok = secs < kGradSeconds;
  double worst_op = 0, model_err = -1;
  std::string bad;
  for (const auto& r : results) {
    const double tol = r.op == "model" ? kGradModelTol : kGradOpTol;
    const bool pass = r.coordinates > 0 && r.trials >= kGradTrials && r.max_rel_error < tol;
    if (!pass) bad += " " + r.op;
    ok = ok && pass;
    if (r.op == "model") {
      model_err = r.max_rel_error;
    } else {
      worst_op = std::max(worst_op, r.max_rel_error);
    }
  }
  std::cout << gradient_report(results);
  report(2, "gradient suite", ok,
         fmt("%zu ops, worst op %.2e, model %.2e, %.1f s%s", results.size(), worst_op, model_err, secs,
             bad.empty() ? "" : (" failing:" + bad).c_str()));
}

void radius() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> side(2.0, 64.0);
  int bad = 0;
  for (int i = 0; i < 500; ++i) {
    const double w = side(rng), h = side(rng);
    const int r = gaussian_radius(w, h, 0.3);
    bad += !(oracle::min_iou_at(w, h, r) >= 0.3 && oracle::min_iou_at(w, h, r + 1) < 0.3);
  }
  const double secs = seconds_since(t0);
  report(3, "radius correctness", bad == 0 && secs < kRadiusSeconds, fmt("%d/500 violations, %.1f s", bad, secs));
}

double det1(double p, double y) {
  Graph<double> g(false);
  const int n[] = {1};
  return det_loss(g.constant(Tensor<double>({1, 1, 1}, std::vector<double>{p})),
                  Tensor<double>({1, 1, 1}, std::vector<double>{y}), n, LossConfig{})
      .value()[0];
}

double det_near_perfect() {
  const double eps = 1e-6;
  Graph<double> g(false);
  const int n[] = {1};
  return det_loss(g.constant(Tensor<double>({1, 1, 4}, std::vector<double>{1 - eps, eps, eps, eps})),
                  Tensor<double>({1, 1, 4}, std::vector<double>{1, 0, 0, 0}), n, LossConfig{})
      .value()[0];
}

double offset1(double dx, double dy) {
  Tensor<double> pred({1, 2, 1, 1}, std::vector<double>{0.25 + dx, 0.75 + dy});
  std::vector<std::vector<CornerIndex>> corners(1);
  CornerIndex c;
  c.tl_off_x = 0.25f;
  c.tl_off_y = 0.75f;
  corners[0].push_back(c);
  Graph<double> g(false);
  return offset_loss(g.constant(pred), std::span<const std::vector<CornerIndex>>(corners), CornerType::TopLeft)
      .value()[0];
}

std::pair<double, double> pull_push2(std::vector<std::pair<double, double>> e) {
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
  Graph<double> g(false);
  auto [pull, push] =
      pull_push_loss(g.constant(tl), g.constant(br), std::span<const std::vector<CornerIndex>>(corners), LossConfig{});
  return {pull.value()[0], push.value()[0]};
}

void loss_fixtures() {
  // scalar evaluations written out by hand
  const double ln2 = std::log(2.0);
  struct Row {
    const char* name;
    double got, want;
    double tol;
  };
  const Row rows[] = {
      {"det near-perfect", det_near_perfect(), 0.0, 1e-4},
      {"det y=1 p=0.5", det1(0.5, 1.0), 0.25 * ln2, kLossTol},
      {"det y=0.9 p=0.5", det1(0.5, 0.9), std::pow(0.1, 4) * 0.25 * ln2, kLossTol},
      {"offset equal", offset1(0, 0), 0.0, kLossTol},
      {"offset (0.5,0)", offset1(0.5, 0), 0.5 * 0.25, kLossTol},
      {"offset (2,0)", offset1(2, 0), 2 - 0.5, kLossTol},
      {"pull N=1", pull_push2({{0.3, 0.3}}).first, 0.0, kLossTol},
      {"push N=1", pull_push2({{0.3, 0.3}}).second, 0.0, kLossTol},
      {"push margin met", pull_push2({{0, 0}, {1, 1}}).second, 0.0, kLossTol},
      {"push equal means", pull_push2({{0.4, 0.4}, {0.4, 0.4}}).second, 1.0, kLossTol},
      {"total defaults", total_loss(LossParts{1, 1, 1, 1}, LossConfig{}), 2.2, kLossTol},
  };
  bool ok = true;
  std::string bad;
  double worst = 0;
  for (const auto& r : rows) {
    const double err = std::abs(r.got - r.want);
    worst = std::max(worst, r.tol == kLossTol ? err : 0.0);
    if (!(err < r.tol)) {
      ok = false;
      bad += fmt(" [%s: %.9g vs %.9g]", r.name, r.got, r.want);
    }
  }
  report(4, "loss fixtures", ok, fmt("%zu fixtures, worst abs error %.2e", std::size(rows), worst) + bad);
}

void decode_round_trip() {
  const auto samples = generate_samples(100, 107, DataConfig{});
  const TargetConfig tc;
  std::size_t boxes = 0, found = 0;
  double worst = 0;
  for (const auto& s : samples) {
    const auto t = make_targets(s.annotations, tc);
    const std::size_t h = tc.out_height, w = tc.out_width;
    const auto blank = [&] {
      return CornerMaps{Tensor<float>({static_cast<std::size_t>(tc.num_classes), h, w}), Tensor<float>({1, h, w}),
                        Tensor<float>({2, h, w})};
    };
    CornerMaps tl = blank(), br = blank();
    apply_oracle(tl, br, t, OracleMode::GtHeatOff, true);
    const auto dets = decode(tl, br, DecodeConfig{});
    for (const auto& a : s.annotations) {
      ++boxes;
      double best = 1e9;
      for (const auto& d : dets) {
        if (d.cls != a.cls) continue;
        const double e = std::max({std::abs(d.box.x1 - a.box.x1), std::abs(d.box.y1 - a.box.y1),
                                   std::abs(d.box.x2 - a.box.x2), std::abs(d.box.y2 - a.box.y2)});
        best = std::min(best, e);
      }
      found += best < kRoundTripPx;
      worst = std::max(worst, best);
    }
  }
  report(5, "decode round trip", found == boxes,
         fmt("%zu/%zu boxes within %.0f px, worst %.3f px", found, boxes, kRoundTripPx, worst));
}

std::vector<Sample> with_objects(std::vector<Sample> v) {
  std::erase_if(v, [](const Sample& s) { return s.annotations.empty(); });
  return v;
}

ApTable evaluate(Model<float>& model, const TrainConfig& tc, const std::vector<Sample>& val,
                 OracleMode mode = OracleMode::None) {
  EvalConfig ec;
  ec.num_classes = model.config().num_classes;
  return oracle_substitution(model, val, mode, DecodeConfig{}, targets_for_model(model.config(), tc.targets), ec);
}

double ap50(Model<float>& model, const TrainConfig& tc, const std::vector<Sample>& val) {
  return evaluate(model, tc, val).ap50;
}

Model<float> train(const ModelConfig& mc, TrainConfig tc, const std::vector<Sample>& data, int iterations) {
  Model<float> model(mc, tc.seed);
  Trainer trainer(model, data, tc);
  const auto t0 = Clock::now();
  trainer.run(iterations, [&](int step, const StepLog& log) {
    if ((step + 1) % 500 == 0)
      std::printf("    step %d total %.4f (%.0f s)\n", step + 1, log.total, seconds_since(t0)), std::fflush(stdout);
  });
  return model;
}

// AP50 of the end-to-end run, which is also the seed-1 default ablation run.
double main_ap50 = -1;

void end_to_end(const std::vector<Sample>& train_set, const std::vector<Sample>& val) {
  TrainConfig tc;
  tc.seed = kAblationSeeds[0];
  std::printf("  training default config for %d iterations on %zu images\n", kMainIterations, train_set.size());
  const auto t0 = Clock::now();
  Model<float> model = train(ModelConfig{}, tc, train_set, kMainIterations);
  const double secs = seconds_since(t0);
  const ApTable none = evaluate(model, tc, val);
  main_ap50 = none.ap50;
  report(6, "end-to-end AP50", none.ap50 >= kAp50Gate,
         fmt("AP50 %.4f (gate %.2f), %d iterations, %.0f s", none.ap50, kAp50Gate, kMainIterations, secs));

  // COCO AP over IoU 0.50:0.95, as in the error-analysis table
  const ApTable heat = evaluate(model, tc, val, OracleMode::GtHeat);
  const ApTable heat_off = evaluate(model, tc, val, OracleMode::GtHeatOff);
  report(7, "error-analysis ordering", none.ap + kOracleGap <= heat.ap && heat.ap <= heat_off.ap,
         fmt("AP none %.4f, gt_heat %.4f, gt_heat_off %.4f (AP50 %.4f, %.4f, %.4f)", none.ap, heat.ap, heat_off.ap,
             none.ap50, heat.ap50, heat_off.ap50));
}

// `known` holds the AP50 of an identical run already made for the first seed, or < 0.
double mean_ap50(const ModelConfig& mc, TrainConfig tc, const std::vector<Sample>& train_set,
                 const std::vector<Sample>& val, const char* label, double known = -1) {
  double sum = 0;
  for (auto seed : kAblationSeeds) {
    tc.seed = seed;
    double ap = known;
    if (seed != kAblationSeeds[0] || known < 0) {
      Model<float> model = train(mc, tc, train_set, kAblationIterations);
      ap = ap50(model, tc, val);
    }
    std::printf("  %-14s seed %llu AP50 %.4f\n", label, static_cast<unsigned long long>(seed), ap);
    std::fflush(stdout);
    sum += ap;
  }
  return sum / std::size(kAblationSeeds);
}

// The default configuration appears in both ablations; trained once.
double default_mean = -1;

void pooling_ablation(const std::vector<Sample>& train_set, const std::vector<Sample>& val) {
  ModelConfig pooled, plain;
  plain.corner_pool = false;
  const std::size_t pa = Model<float>(pooled, 1).parameter_count(), pb = Model<float>(plain, 1).parameter_count();
  const double a = default_mean = mean_ap50(pooled, TrainConfig{}, train_set, val, "corner pool", main_ap50);
  const double b = mean_ap50(plain, TrainConfig{}, train_set, val, "no pool");
  report(8, "corner-pooling ablation", pa == pb && a >= b,
         fmt("mean AP50 pool %.4f vs no pool %.4f, gap %+.4f, params %zu/%zu", a, b, a - b, pa, pb));
}

void radius_ablation(const std::vector<Sample>& train_set, const std::vector<Sample>& val) {
  double ap[3];
  const RadiusMode modes[] = {RadiusMode::Gaussian, RadiusMode::Fixed, RadiusMode::None};
  ap[0] = default_mean;
  for (int i = 1; i < 3; ++i) {
    TrainConfig tc;
    tc.targets.radius_mode = modes[i];
    ap[i] = mean_ap50(ModelConfig{}, tc, train_set, val, to_string(modes[i]).c_str());
  }
  std::printf("  gaussian       mean AP50 %.4f (default runs above)\n", ap[0]);
  report(9, "penalty-reduction ablation", ap[0] >= ap[1] && ap[1] >= ap[2],
         fmt("mean AP50 gaussian %.4f, fixed %.4f, none %.4f, gaps %+.4f %+.4f", ap[0], ap[1], ap[2], ap[0] - ap[1],
             ap[1] - ap[2]));
}

void bench() {
  const auto rows = bench_pool({{256, 256}}, 3, 8, 109);
  const double s = rows.front().speedup();
  report(10, "pooling benchmark", s >= kBenchSpeedup,
         fmt("256x256x8: naive %.1f ms, scan %.1f ms, speedup %.1fx", rows.front().naive_ms, rows.front().scan_ms, s));
}

void determinism(const std::vector<Sample>& train_set) {
  const int saved = num_threads();
  set_num_threads(1);
  auto run = [&] {
    Model<float> m(ModelConfig{}, 7);
    TrainConfig tc;
    tc.seed = 7;
    Trainer t(m, train_set, tc);
    t.run(kDeterminismSteps);
    std::ostringstream os;
    write_archive(os, m.state());
    return os.str();
  };
  const std::string a = run(), b = run();
  set_num_threads(saved);
  report(11, "determinism", a == b, fmt("%d steps, %zu-byte checkpoints %s", kDeterminismSteps, a.size(),
                                        a == b ? "identical" : "differ"));
}

}  // namespace

int main() {
  set_num_threads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
  const auto t0 = Clock::now();
  pool_oracle();
  gradients();
  radius();
  loss_fixtures();
  decode_round_trip();

  const auto train_set = with_objects(generate_samples(2000, 1, DataConfig{}));
  const auto val = generate_samples(200, 99, DataConfig{}, "val");
  end_to_end(train_set, val);
  pooling_ablation(train_set, val);
  radius_ablation(train_set, val);
  bench();
  determinism(train_set);

  std::printf("%d criteria failed, %.0f s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
