#pragma once

#include <string>
#include <vector>

#include "cornerdet/box.hpp"
#include "cornerdet/tensor.hpp"

namespace cornerdet {

/// How negatives near a positive corner are attenuated.
///   Gaussian: object-dependent radius from the IoU rule (default).
///   Fixed:    one radius for every object.
///   None:     no attenuation, only the exact positives are marked.
enum class RadiusMode { Gaussian, Fixed, None };

std::string to_string(RadiusMode m);
/// Parses "gaussian", "fixed" (radius 2.5), "fixed:<r>" or "none".
RadiusMode parse_radius_mode(const std::string& s, double* fixed_radius);

struct TargetConfig {
  int downsample = 4;
  double iou_threshold = 0.3;
  int min_radius = 0;
  int num_classes = 3;
  std::size_t out_height = 16;
  std::size_t out_width = 16;
  RadiusMode radius_mode = RadiusMode::Gaussian;
  double fixed_radius = 2.5;
};

/// Per-object corner record on the output grid.
struct CornerIndex {
  int cls = 0;
  int tl_x = 0, tl_y = 0;
  int br_x = 0, br_y = 0;
  float tl_off_x = 0, tl_off_y = 0;
  float br_off_x = 0, br_off_y = 0;
  double radius = 0;
};

/// Training targets for one image.
struct TargetMaps {
  Tensor<float> tl_heat;  // [C,H,W]
  Tensor<float> br_heat;  // [C,H,W]
  Tensor<float> tl_off;   // [2,H,W], channel 0 = x, 1 = y
  Tensor<float> br_off;   // [2,H,W]
  std::vector<CornerIndex> corners;
};

/// Smallest IoU with the original box over all corner displacements whose
/// components are bounded by `r`, over integer displacements.
/// Degenerate displaced boxes are skipped.
double worst_case_iou(double width, double height, int r);

/// Largest integer r such that every pair of corners displaced by at most r
/// per coordinate still yields IoU >= t with the original box.
int gaussian_radius(double width, double height, double t);

/// heat[c] = max(heat[c], exp(-(dx^2+dy^2) / (2 sigma^2))) over the disk of
/// integer offsets within `radius`, sigma = max(radius, 1) / 3; the center is set to 1.
void splat_gaussian(Tensor<float>& heat, int cls, int cx, int cy, double radius);

/// Builds heatmaps, offsets and the corner list for boxes given in input pixels.
TargetMaps make_targets(const std::vector<Annotation>& boxes, const TargetConfig& cfg);

}  // namespace cornerdet
