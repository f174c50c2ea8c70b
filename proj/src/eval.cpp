#include "cornerdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cornerdet {
namespace {

constexpr int kRecallPoints = 101;

struct AreaRange {
  double lo;
  double hi;  // inclusive
  bool contains(double a) const { return a >= lo && a <= hi; }
};

// One detection in a class-wide ranking.
struct Ranked {
  float score;
  std::size_t image;
  Box box;
};

// Class AP at one threshold, or nullopt when the class has no ground truth in range.
std::optional<double> class_ap(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<Annotation>>& gts, int cls, double thr,
                               const AreaRange& range, std::vector<double>* precision) {
  std::vector<std::vector<Box>> gt_boxes(gts.size());
  std::vector<std::vector<bool>> ignored(gts.size()), matched(gts.size());
  std::size_t num_gt = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& a : gts[i]) {
      if (a.cls != cls) continue;
      gt_boxes[i].push_back(a.box);
      const bool ign = !range.contains(a.box.area());
      ignored[i].push_back(ign);
      matched[i].push_back(false);
      if (!ign) ++num_gt;
    }
  }
  if (num_gt == 0) return std::nullopt;

  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const auto& d : dets[i]) {
      if (d.cls == cls) ranked.push_back(Ranked{d.score, i, d.box});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<bool> tp;
  tp.reserve(ranked.size());
  for (const auto& r : ranked) {
    auto best_match = [&](bool want_ignored) {
      int best = -1;
      double best_iou = -1;
      if (r.image >= gt_boxes.size()) return best;
      for (std::size_t g = 0; g < gt_boxes[r.image].size(); ++g) {
        if (matched[r.image][g] || ignored[r.image][g] != want_ignored) continue;
        const double o = iou(r.box, gt_boxes[r.image][g]);
        if (o >= thr && o > best_iou) {
          best = static_cast<int>(g);
          best_iou = o;
        }
      }
      return best;
    };
    int g = best_match(false);
    if (g >= 0) {
      matched[r.image][static_cast<std::size_t>(g)] = true;
      tp.push_back(true);
      continue;
    }
    g = best_match(true);
    if (g >= 0) {
      matched[r.image][static_cast<std::size_t>(g)] = true;
      continue;
    }
    if (!range.contains(r.box.area())) continue;
    tp.push_back(false);
  }
  return interpolated_ap(tp, num_gt, precision);
}

// Mean over classes with ground truth; -1 when no class has any.
double mean_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation>>& gts,
               int num_classes, double thr, const AreaRange& range, std::vector<PrCurve>* curves) {
  double total = 0;
  int n = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<double> prec;
    const auto ap = class_ap(dets, gts, c, thr, range, curves ? &prec : nullptr);
    if (!ap) continue;
    total += *ap;
    ++n;
    if (curves) curves->push_back(PrCurve{c, thr, std::move(prec)});
  }
  return n > 0 ? total / n : -1.0;
}

double mean_over_thresholds(const std::vector<std::vector<Detection>>& dets,
                            const std::vector<std::vector<Annotation>>& gts, const EvalConfig& cfg,
                            const AreaRange& range) {
  double total = 0;
  for (double thr : cfg.iou_thresholds) {
    const double ap = mean_ap(dets, gts, cfg.num_classes, thr, range, nullptr);
    if (ap < 0) return -1.0;
    total += ap;
  }
  return total / static_cast<double>(cfg.iou_thresholds.size());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

double interpolated_ap(const std::vector<bool>& tp, std::size_t num_gt, std::vector<double>* precision_out) {
  std::vector<double> recall(tp.size()), precision(tp.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i]) ++hits;
    recall[i] = num_gt > 0 ? static_cast<double>(hits) / static_cast<double>(num_gt) : 0.0;
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  std::vector<double> sampled(kRecallPoints, 0.0);
  std::size_t idx = 0;
  for (int r = 0; r < kRecallPoints; ++r) {
    const double level = r / 100.0;
    while (idx < recall.size() && recall[idx] < level - 1e-12) ++idx;
    if (idx < recall.size()) sampled[static_cast<std::size_t>(r)] = precision[idx];
  }
  const double ap = std::accumulate(sampled.begin(), sampled.end(), 0.0) / kRecallPoints;
  if (precision_out) *precision_out = std::move(sampled);
  return ap;
}

ApTable average_precision(const std::vector<std::vector<Detection>>& dets,
                          const std::vector<std::vector<Annotation>>& gts, const EvalConfig& cfg) {
  if (cfg.iou_thresholds.empty()) throw std::invalid_argument("average_precision: no IoU thresholds");
  const AreaRange all{0, std::numeric_limits<double>::infinity()};
  const AreaRange small{0, std::nextafter(cfg.small_area, 0.0)};
  const AreaRange medium{cfg.small_area, cfg.large_area};
  const AreaRange large{std::nextafter(cfg.large_area, std::numeric_limits<double>::infinity()),
                        std::numeric_limits<double>::infinity()};

  ApTable t;
  t.thresholds = cfg.iou_thresholds;
  double total = 0;
  for (double thr : cfg.iou_thresholds) {
    const double ap = std::max(0.0, mean_ap(dets, gts, cfg.num_classes, thr, all, &t.curves));
    t.ap_per_threshold.push_back(ap);
    total += ap;
  }
  t.ap = total / static_cast<double>(cfg.iou_thresholds.size());
  t.ap50 = std::max(0.0, mean_ap(dets, gts, cfg.num_classes, 0.5, all, nullptr));
  t.ap75 = std::max(0.0, mean_ap(dets, gts, cfg.num_classes, 0.75, all, nullptr));
  t.ap_small = mean_over_thresholds(dets, gts, cfg, small);
  t.ap_medium = mean_over_thresholds(dets, gts, cfg, medium);
  t.ap_large = mean_over_thresholds(dets, gts, cfg, large);
  return t;
}

std::string ap_report_text(const ApTable& t) {
  std::ostringstream os;
  os << "AP    " << fmt(t.ap) << '\n'
     << "AP50  " << fmt(t.ap50) << '\n'
     << "AP75  " << fmt(t.ap75) << '\n'
     << "APs   " << fmt(t.ap_small) << '\n'
     << "APm   " << fmt(t.ap_medium) << '\n'
     << "APl   " << fmt(t.ap_large) << '\n';
  return os.str();
}

std::string ap_report_csv(const ApTable& t, const std::string& label) {
  std::ostringstream os;
  os << "label,ap,ap50,ap75,ap_small,ap_medium,ap_large\n"
     << label << ',' << fmt(t.ap) << ',' << fmt(t.ap50) << ',' << fmt(t.ap75) << ',' << fmt(t.ap_small) << ','
     << fmt(t.ap_medium) << ',' << fmt(t.ap_large) << '\n';
  return os.str();
}

std::string pr_curve_csv(const ApTable& t) {
  std::ostringstream os;
  os << "class,iou_threshold,recall,precision\n";
  for (const auto& c : t.curves) {
    for (std::size_t r = 0; r < c.precision.size(); ++r) {
      os << c.cls << ',' << fmt(c.iou_threshold) << ',' << fmt(static_cast<double>(r) / 100.0) << ','
         << fmt(c.precision[r]) << '\n';
    }
  }
  return os.str();
}

std::string to_string(Quadrant q) {
  switch (q) {
    case Quadrant::TopLeft: return "top_left";
    case Quadrant::TopRight: return "top_right";
    case Quadrant::BottomLeft: return "bottom_left";
    case Quadrant::BottomRight: return "bottom_right";
  }
  return "?";
}

double corner_map(const std::vector<Tensor<float>>& heat, const std::vector<std::vector<CornerGt>>& gts,
                  const CornerMapConfig& cfg) {
  if (heat.size() != gts.size()) throw std::invalid_argument("corner_map: heat and ground-truth counts differ");
  if (heat.empty()) return 0.0;
  const std::size_t classes = heat[0].dim(0);
  auto inside = [&](int x, int y, std::size_t h, std::size_t w) {
    if (!cfg.quadrant) return true;
    const bool left = 2 * static_cast<std::size_t>(x) < w, top = 2 * static_cast<std::size_t>(y) < h;
    switch (*cfg.quadrant) {
      case Quadrant::TopLeft: return top && left;
      case Quadrant::TopRight: return top && !left;
      case Quadrant::BottomLeft: return !top && left;
      case Quadrant::BottomRight: return !top && !left;
    }
    return true;
  };

  std::vector<std::vector<Corner>> peaks(heat.size());
  for (std::size_t i = 0; i < heat.size(); ++i) {
    if (heat[i].ndim() != 3 || heat[i].dim(0) != classes) throw ShapeError("corner_map: heat must be [C,H,W]");
    const std::size_t h = heat[i].dim(1), w = heat[i].dim(2);
    for (const auto& c : top_corners(heat_nms(heat[i]), cfg.top_k)) {
      // cells zeroed by NMS are not peaks
      if (c.score > 0 && inside(c.x, c.y, h, w)) peaks[i].push_back(c);
    }
  }

  double total = 0;
  int counted = 0;
  for (std::size_t cls = 0; cls < classes; ++cls) {
    std::vector<std::vector<const CornerGt*>> g(gts.size());
    std::vector<std::vector<bool>> used(gts.size());
    std::size_t num_gt = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& c : gts[i]) {
        if (static_cast<std::size_t>(c.cls) != cls || !inside(c.x, c.y, heat[i].dim(1), heat[i].dim(2))) continue;
        g[i].push_back(&c);
        used[i].push_back(false);
        ++num_gt;
      }
    }
    if (num_gt == 0) continue;
    struct P {
      float score;
      std::size_t image;
      int x, y;
    };
    std::vector<P> ranked;
    for (std::size_t i = 0; i < peaks.size(); ++i) {
      for (const auto& c : peaks[i]) {
        if (static_cast<std::size_t>(c.cls) == cls) ranked.push_back(P{c.score, i, c.x, c.y});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const P& a, const P& b) { return a.score > b.score; });
    std::vector<bool> tp;
    tp.reserve(ranked.size());
    for (const auto& p : ranked) {
      int best = -1;
      double best_d = 0;
      for (std::size_t k = 0; k < g[p.image].size(); ++k) {
        if (used[p.image][k]) continue;
        const CornerGt& c = *g[p.image][k];
        const double r = cfg.radius >= 0 ? cfg.radius : c.radius;
        const double d = std::hypot(p.x - c.x, p.y - c.y);
        if (d <= r && (best < 0 || d < best_d)) {
          best = static_cast<int>(k);
          best_d = d;
        }
      }
      if (best >= 0) used[p.image][static_cast<std::size_t>(best)] = true;
      tp.push_back(best >= 0);
    }
    total += interpolated_ap(tp, num_gt);
    ++counted;
  }
  return counted > 0 ? total / counted : 0.0;
}

std::vector<CornerGt> corner_gts(const TargetMaps& t, bool top_left) {
  std::vector<CornerGt> out;
  for (const auto& c : t.corners) {
    out.push_back(top_left ? CornerGt{c.cls, c.tl_x, c.tl_y, c.radius} : CornerGt{c.cls, c.br_x, c.br_y, c.radius});
  }
  return out;
}

std::string to_string(OracleMode m) {
  switch (m) {
    case OracleMode::None: return "none";
    case OracleMode::GtHeat: return "gt_heat";
    case OracleMode::GtHeatOff: return "gt_heat_off";
  }
  return "?";
}

OracleMode parse_oracle_mode(const std::string& s) {
  if (s == "none") return OracleMode::None;
  if (s == "gt_heat") return OracleMode::GtHeat;
  if (s == "gt_heat_off") return OracleMode::GtHeatOff;
  throw std::invalid_argument("unknown oracle mode '" + s + "' (expected none, gt_heat or gt_heat_off)");
}

void apply_oracle(CornerMaps& tl, CornerMaps& br, const TargetMaps& t, OracleMode mode, bool oracle_embeddings) {
  if (mode != OracleMode::None) {
    tl.heat.fill(0.0f);
    br.heat.fill(0.0f);
    for (const auto& c : t.corners) {
      const auto cls = static_cast<std::size_t>(c.cls);
      tl.heat.at(cls, static_cast<std::size_t>(c.tl_y), static_cast<std::size_t>(c.tl_x)) = 1.0f;
      br.heat.at(cls, static_cast<std::size_t>(c.br_y), static_cast<std::size_t>(c.br_x)) = 1.0f;
    }
  }
  if (mode == OracleMode::GtHeatOff) {
    tl.off = t.tl_off;
    br.off = t.br_off;
  }
  if (oracle_embeddings) {
    // Far from anything a trained head produces, and far apart from each other.
    for (std::size_t k = 0; k < t.corners.size(); ++k) {
      const auto& c = t.corners[k];
      const float e = 100.0f * static_cast<float>(k + 1);
      tl.emb.at(0, static_cast<std::size_t>(c.tl_y), static_cast<std::size_t>(c.tl_x)) = e;
      br.emb.at(0, static_cast<std::size_t>(c.br_y), static_cast<std::size_t>(c.br_x)) = e;
    }
  }
}

std::vector<std::vector<Detection>> detect(Model<float>& model, const std::vector<Sample>& samples,
                                           const DecodeConfig& dcfg, const TargetConfig& tcfg,
                                           const DetectOptions& opts) {
  const bool use_targets = opts.oracle != OracleMode::None || opts.oracle_embeddings;
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  std::vector<std::vector<Detection>> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += bs) {
    const std::size_t end = std::min(samples.size(), start + bs);
    std::vector<Tensor<float>> images, flipped;
    std::vector<Sample> flip_samples;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(samples[i].image);
      if (opts.flip_fusion) {
        flip_samples.push_back(hflip(samples[i]));
        flipped.push_back(flip_samples.back().image);
      }
    }
    const Predictions pred = model.predict(stack_batch<float>(images));
    Predictions pred_flip;
    if (opts.flip_fusion) pred_flip = model.predict(stack_batch<float>(flipped));

    for (std::size_t i = start; i < end; ++i) {
      const std::size_t b = i - start;
      CornerMaps tl = image_maps(pred.tl, b), br = image_maps(pred.br, b);
      if (use_targets) apply_oracle(tl, br, make_targets(samples[i].annotations, tcfg), opts.oracle, opts.oracle_embeddings);
      if (!opts.flip_fusion) {
        out.push_back(decode(tl, br, dcfg));
        continue;
      }
      CornerMaps tlf = image_maps(pred_flip.tl, b), brf = image_maps(pred_flip.br, b);
      if (use_targets) {
        apply_oracle(tlf, brf, make_targets(flip_samples[b].annotations, tcfg), opts.oracle, opts.oracle_embeddings);
      }
      out.push_back(decode_flip_fused(tl, br, tlf, brf, static_cast<double>(samples[i].image.dim(2)), dcfg));
    }
  }
  return out;
}

ApTable oracle_substitution(Model<float>& model, const std::vector<Sample>& samples, OracleMode mode,
                            const DecodeConfig& dcfg, const TargetConfig& tcfg, const EvalConfig& ecfg,
                            bool oracle_embeddings) {
  DetectOptions opts;
  opts.oracle = mode;
  opts.oracle_embeddings = oracle_embeddings;
  const auto dets = detect(model, samples, dcfg, tcfg, opts);
  std::vector<std::vector<Annotation>> gts;
  gts.reserve(samples.size());
  for (const auto& s : samples) gts.push_back(s.annotations);
  return average_precision(dets, gts, ecfg);
}

}  // namespace cornerdet
