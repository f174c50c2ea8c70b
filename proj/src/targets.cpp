#include "cornerdet/targets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace cornerdet {

std::string to_string(RadiusMode m) {
  switch (m) {
    case RadiusMode::Gaussian: return "gaussian";
    case RadiusMode::Fixed: return "fixed";
    case RadiusMode::None: return "none";
  }
  return "unknown";
}

RadiusMode parse_radius_mode(const std::string& s, double* fixed_radius) {
  if (s == "gaussian") return RadiusMode::Gaussian;
  if (s == "none") return RadiusMode::None;
  if (s == "fixed") {
    if (fixed_radius) *fixed_radius = 2.5;
    return RadiusMode::Fixed;
  }
  if (s.rfind("fixed:", 0) == 0) {
    std::size_t used = 0;
    const std::string num = s.substr(6);
    double r = 0;
    try {
      r = std::stod(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != num.size() || num.empty() || !(r >= 0)) {
      throw std::invalid_argument("radius_mode: bad fixed radius '" + num + "'");
    }
    if (fixed_radius) *fixed_radius = r;
    return RadiusMode::Fixed;
  }
  throw std::invalid_argument("radius_mode: expected gaussian, none, fixed or fixed:<r>, got '" + s + "'");
}

namespace {

struct AxisCase {
  double inter;
  double extent;
};

// Integer displacements (a of the near corner, c of the far one) along one
// axis, reduced to those no other case beats with less overlap and more extent.
// Thin boxes make the +-r extremes degenerate, so interior shifts matter.
std::vector<AxisCase> axis_cases(double e, int r) {
  std::vector<AxisCase> all;
  for (int a = -r; a <= r; ++a) {
    for (int c = -r; c <= r; ++c) {
      const double extent = e + c - a;
      if (extent <= 0) continue;
      all.push_back({std::max(0.0, std::min(e, e + c) - std::max(0.0, static_cast<double>(a))), extent});
    }
  }
  std::sort(all.begin(), all.end(), [](const AxisCase& x, const AxisCase& y) {
    return x.inter != y.inter ? x.inter < y.inter : x.extent > y.extent;
  });
  std::vector<AxisCase> front;
  for (const auto& k : all) {
    if (front.empty() || k.extent > front.back().extent) front.push_back(k);
  }
  return front;
}

}  // namespace

double worst_case_iou(double width, double height, int r) {
  if (r < 0) throw std::invalid_argument("worst_case_iou: negative radius");
  const double area = width * height;
  double worst = 1.0;
  for (const auto& cx : axis_cases(width, r)) {
    for (const auto& cy : axis_cases(height, r)) {
      const double inter = cx.inter * cy.inter;
      const double uni = area + cx.extent * cy.extent - inter;
      worst = std::min(worst, inter / uni);
    }
  }
  return worst;
}

int gaussian_radius(double width, double height, double t) {
  if (!(width > 0) || !(height > 0)) {
    throw std::invalid_argument("gaussian_radius: box size must be positive");
  }
  if (!(t > 0) || t > 1) throw std::invalid_argument("gaussian_radius: t must lie in (0, 1]");

  const double s = width + height;
  const double area = width * height;
  // Both corners move inward: (w-2r)(h-2r) / wh = t.
  const double r_in = (s - std::sqrt(std::max(0.0, s * s - 4 * (1 - t) * area))) / 4;
  // Both corners move outward: wh / ((w+2r)(h+2r)) = t.
  const double r_out = (-t * s + std::sqrt(t * t * s * s + 4 * t * (1 - t) * area)) / (4 * t);
  // One corner in, one out along each axis: (w-r)(h-r) / (2wh - (w-r)(h-r)) = t.
  const double r_shift = (s - std::sqrt(std::max(0.0, s * s - 4 * area * (1 - t) / (1 + t)))) / 2;

  const double closed = std::min({r_in, r_out, r_shift});
  int r = static_cast<int>(std::floor(closed + 1e-9));
  r = std::max(r, 0);

  const auto ok = [&](int rr) { return worst_case_iou(width, height, rr) >= t; };
  if (ok(r) && !ok(r + 1)) return r;

  // Closed form disagrees with the extreme-case evaluation: search.
  r = 0;
  while (ok(r + 1)) ++r;
  return r;
}

void splat_gaussian(Tensor<float>& heat, int cls, int cx, int cy, double radius) {
  if (heat.ndim() != 3) throw ShapeError("splat_gaussian: heat must be [C,H,W], got " + shape_str(heat.shape()));
  const int c = static_cast<int>(heat.dim(0));
  const int h = static_cast<int>(heat.dim(1));
  const int w = static_cast<int>(heat.dim(2));
  if (cls < 0 || cls >= c) throw std::out_of_range("splat_gaussian: class out of range");
  if (cx < 0 || cx >= w || cy < 0 || cy >= h) throw std::out_of_range("splat_gaussian: center out of bounds");
  if (radius < 0) throw std::invalid_argument("splat_gaussian: negative radius");

  const double sigma = std::max(radius, 1.0) / 3.0;
  const double denom = 2 * sigma * sigma;
  const int reach = static_cast<int>(std::floor(radius));
  for (int dy = -reach; dy <= reach; ++dy) {
    for (int dx = -reach; dx <= reach; ++dx) {
      const double d2 = static_cast<double>(dx * dx + dy * dy);
      if (d2 > radius * radius) continue;
      const int x = cx + dx, y = cy + dy;
      if (x < 0 || x >= w || y < 0 || y >= h) continue;
      float& cell = heat.at(static_cast<std::size_t>(cls), static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      cell = std::max(cell, static_cast<float>(std::exp(-d2 / denom)));
    }
  }
  heat.at(static_cast<std::size_t>(cls), static_cast<std::size_t>(cy), static_cast<std::size_t>(cx)) = 1.0f;
}

TargetMaps make_targets(const std::vector<Annotation>& boxes, const TargetConfig& cfg) {
  if (cfg.downsample < 1) throw std::invalid_argument("make_targets: downsample must be >= 1");
  if (!(cfg.iou_threshold > 0) || cfg.iou_threshold > 1) {
    throw std::invalid_argument("make_targets: iou_threshold must lie in (0, 1]");
  }
  const std::size_t c = static_cast<std::size_t>(cfg.num_classes);
  const std::size_t h = cfg.out_height, w = cfg.out_width;
  TargetMaps maps{Tensor<float>(Shape{c, h, w}), Tensor<float>(Shape{c, h, w}), Tensor<float>(Shape{2, h, w}),
                  Tensor<float>(Shape{2, h, w}), {}};
  const double n = cfg.downsample;
  const double img_w = static_cast<double>(w) * n, img_h = static_cast<double>(h) * n;

  auto cell = [](double v, double n_, std::size_t extent, float& off) {
    const double g = v / n_;
    const double fl = std::floor(g);
    off = static_cast<float>(g - fl);
    if (off >= 1.0f) off = std::nextafter(1.0f, 0.0f);
    return static_cast<int>(std::clamp(fl, 0.0, static_cast<double>(extent - 1)));
  };

  for (const auto& a : boxes) {
    const Box& b = a.box;
    if (!(b.x2 > b.x1) || !(b.y2 > b.y1)) throw std::invalid_argument("make_targets: degenerate box");
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > img_w || b.y2 > img_h) {
      throw std::invalid_argument("make_targets: box outside the image");
    }
    if (a.cls < 0 || a.cls >= cfg.num_classes) throw std::out_of_range("make_targets: class id out of range");

    CornerIndex k;
    k.cls = a.cls;
    k.tl_x = cell(b.x1, n, w, k.tl_off_x);
    k.tl_y = cell(b.y1, n, h, k.tl_off_y);
    k.br_x = cell(b.x2, n, w, k.br_off_x);
    k.br_y = cell(b.y2, n, h, k.br_off_y);

    switch (cfg.radius_mode) {
      case RadiusMode::Gaussian:
        k.radius = std::max(cfg.min_radius, gaussian_radius(b.width() / n, b.height() / n, cfg.iou_threshold));
        break;
      case RadiusMode::Fixed:
        k.radius = cfg.fixed_radius;
        break;
      case RadiusMode::None:
        k.radius = 0;
        break;
    }
    splat_gaussian(maps.tl_heat, k.cls, k.tl_x, k.tl_y, k.radius);
    splat_gaussian(maps.br_heat, k.cls, k.br_x, k.br_y, k.radius);

    maps.tl_off.at(0, k.tl_y, k.tl_x) = k.tl_off_x;
    maps.tl_off.at(1, k.tl_y, k.tl_x) = k.tl_off_y;
    maps.br_off.at(0, k.br_y, k.br_x) = k.br_off_x;
    maps.br_off.at(1, k.br_y, k.br_x) = k.br_off_y;
    maps.corners.push_back(k);
  }
  return maps;
}

}  // namespace cornerdet
