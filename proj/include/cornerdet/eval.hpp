#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cornerdet/box.hpp"
#include "cornerdet/data.hpp"
#include "cornerdet/decode.hpp"
#include "cornerdet/model.hpp"
#include "cornerdet/targets.hpp"

namespace cornerdet {

struct EvalConfig {
  std::vector<double> iou_thresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  double small_area = 256;   // area < small_area is small
  double large_area = 576;   // area > large_area is large
  int num_classes = 3;
};

/// Interpolated precision at recall 0, 0.01, ..., 1.
struct PrCurve {
  int cls = 0;
  double iou_threshold = 0;
  std::vector<double> precision;  // 101 entries
};

struct ApTable {
  double ap = 0;    // mean over iou_thresholds
  double ap50 = 0;
  double ap75 = 0;
  double ap_small = 0;
  double ap_medium = 0;
  double ap_large = 0;
  std::vector<double> thresholds;
  std::vector<double> ap_per_threshold;  // class-averaged
  std::vector<PrCurve> curves;           // all areas, per class and threshold
};

/// 101-point interpolated AP of one ranked list. `tp` flags in rank order.
double interpolated_ap(const std::vector<bool>& tp, std::size_t num_gt, std::vector<double>* precision_out = nullptr);

/// COCO-style AP with greedy score-ordered matching. Classes without ground
/// truth are left out of the class mean. Size buckets ignore ground truth
/// outside the area range and detections that match it or fall outside it.
ApTable average_precision(const std::vector<std::vector<Detection>>& dets,
                          const std::vector<std::vector<Annotation>>& gts, const EvalConfig& cfg);

std::string ap_report_text(const ApTable& t);
std::string ap_report_csv(const ApTable& t, const std::string& label);
std::string pr_curve_csv(const ApTable& t);

/// Ground-truth corner on the output grid with its matching radius.
struct CornerGt {
  int cls = 0;
  int x = 0;
  int y = 0;
  double radius = 0;
};

enum class Quadrant { TopLeft, TopRight, BottomLeft, BottomRight };
std::string to_string(Quadrant q);

struct CornerMapConfig {
  int top_k = 100;
  double radius = -1;  // < 0: each ground-truth corner uses its own object radius
  std::optional<Quadrant> quadrant;
};

/// Corner detection as per-class retrieval: NMS peaks ranked by score, a peak
/// is positive iff within the radius of an unmatched ground-truth corner of its
/// class. Returns AP averaged over classes with ground truth.
double corner_map(const std::vector<Tensor<float>>& heat, const std::vector<std::vector<CornerGt>>& gts,
                  const CornerMapConfig& cfg);

/// Top-left or bottom-right ground-truth corners from targets.
std::vector<CornerGt> corner_gts(const TargetMaps& t, bool top_left);

enum class OracleMode { None, GtHeat, GtHeatOff };
std::string to_string(OracleMode m);
/// Throws std::invalid_argument for anything but none, gt_heat, gt_heat_off.
OracleMode parse_oracle_mode(const std::string& s);

struct DetectOptions {
  OracleMode oracle = OracleMode::None;
  bool oracle_embeddings = false;  // distinct constant per object at both corners
  bool flip_fusion = false;
  std::size_t batch_size = 16;
};

/// Replaces predicted maps with ground truth: heat becomes exact positives,
/// offsets the target offsets (gt_heat_off only), embeddings per-object constants
/// (when requested).
void apply_oracle(CornerMaps& tl, CornerMaps& br, const TargetMaps& t, OracleMode mode, bool oracle_embeddings);

/// Runs the model over `samples` and decodes each image.
std::vector<std::vector<Detection>> detect(Model<float>& model, const std::vector<Sample>& samples,
                                           const DecodeConfig& dcfg, const TargetConfig& tcfg,
                                           const DetectOptions& opts);

/// AP with the selected predictions replaced by ground truth.
ApTable oracle_substitution(Model<float>& model, const std::vector<Sample>& samples, OracleMode mode,
                            const DecodeConfig& dcfg, const TargetConfig& tcfg, const EvalConfig& ecfg,
                            bool oracle_embeddings = false);

}  // namespace cornerdet
