#include "cornerdet/decode.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cornerdet/ops.hpp"

namespace cornerdet {
namespace {

void require_maps(const CornerMaps& m, const char* which) {
  const Tensor<float>& h = m.heat;
  if (h.ndim() != 3) throw ShapeError(std::string("decode: ") + which + " heat must be [C,H,W]");
  const Shape emb{1, h.dim(1), h.dim(2)}, off{2, h.dim(1), h.dim(2)};
  if (m.emb.shape() != emb) {
    throw ShapeError(std::string("decode: ") + which + " embedding " + shape_str(m.emb.shape()) + ", expected " +
                     shape_str(emb));
  }
  if (m.off.shape() != off) {
    throw ShapeError(std::string("decode: ") + which + " offset " + shape_str(m.off.shape()) + ", expected " +
                     shape_str(off));
  }
}

bool score_order(const Detection& a, const Detection& b) { return a.score > b.score; }

}  // namespace

Tensor<float> heat_nms(const Tensor<float>& heat) {
  const Tensor<float> pooled = maxpool3x3(heat);
  Tensor<float> out(heat.shape());
  for (std::size_t i = 0; i < heat.numel(); ++i) out[i] = heat[i] >= pooled[i] ? heat[i] : 0.0f;
  return out;
}

std::vector<Corner> top_corners(const Tensor<float>& heat, int k) {
  if (k < 1) throw std::invalid_argument("top_corners: k must be >= 1");
  if (heat.ndim() != 3) throw ShapeError("top_corners: heat must be [C,H,W]");
  const std::size_t c = heat.dim(0), h = heat.dim(1), w = heat.dim(2);
  std::vector<Corner> all;
  all.reserve(heat.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        all.push_back(Corner{static_cast<int>(ch), static_cast<int>(y), static_cast<int>(x), heat.at(ch, y, x)});
      }
    }
  }
  const std::size_t keep = std::min(all.size(), static_cast<std::size_t>(k));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    [](const Corner& a, const Corner& b) {
                      if (a.score != b.score) return a.score > b.score;
                      if (a.cls != b.cls) return a.cls < b.cls;
                      if (a.y != b.y) return a.y < b.y;
                      return a.x < b.x;
                    });
  all.resize(keep);
  return all;
}

std::vector<Detection> pair_and_score(const std::vector<Corner>& tl, const std::vector<Corner>& br,
                                      const CornerMaps& tl_maps, const CornerMaps& br_maps,
                                      const DecodeConfig& cfg) {
  require_maps(tl_maps, "top-left");
  require_maps(br_maps, "bottom-right");
  const double n = cfg.downsample;
  struct Adjusted {
    double x, y, e;
  };
  auto adjust = [n](const Corner& c, const CornerMaps& m) {
    const auto y = static_cast<std::size_t>(c.y), x = static_cast<std::size_t>(c.x);
    return Adjusted{(c.x + m.off.at(0, y, x)) * n, (c.y + m.off.at(1, y, x)) * n, m.emb.at(0, y, x)};
  };
  std::vector<Adjusted> br_adj;
  br_adj.reserve(br.size());
  for (const auto& b : br) br_adj.push_back(adjust(b, br_maps));

  std::vector<Detection> out;
  for (const auto& t : tl) {
    const Adjusted a = adjust(t, tl_maps);
    for (std::size_t j = 0; j < br.size(); ++j) {
      const Adjusted& b = br_adj[j];
      if (br[j].cls != t.cls) continue;
      if (std::abs(a.e - b.e) > cfg.emb_dist_max) continue;
      if (b.x < a.x || b.y < a.y) continue;
      out.push_back(Detection{t.cls, (t.score + br[j].score) / 2.0f, Box{a.x, a.y, b.x, b.y}});
    }
  }
  std::stable_sort(out.begin(), out.end(), score_order);
  return out;
}

std::vector<Detection> soft_nms(std::vector<Detection> dets, double sigma, int max_detections) {
  if (sigma <= 0) throw std::invalid_argument("soft_nms: sigma must be positive");
  // Selected scores never increase, so the first max_detections picks are the
  // final result and the loop can stop there.
  const std::size_t limit = max_detections >= 0 ? static_cast<std::size_t>(max_detections) : dets.size();
  std::vector<Detection> kept;
  kept.reserve(std::min(limit, dets.size()));
  while (!dets.empty() && kept.size() < limit) {
    auto best = std::max_element(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
      return a.score < b.score;
    });
    const Detection top = *best;
    dets.erase(best);
    kept.push_back(top);
    for (auto& d : dets) {
      const double o = iou(top.box, d.box);
      if (o > 0) d.score = static_cast<float>(d.score * std::exp(-o * o / sigma));
    }
  }
  std::stable_sort(kept.begin(), kept.end(), score_order);
  return kept;
}

namespace {

std::vector<Detection> raw_pairs(const CornerMaps& tl, const CornerMaps& br, const DecodeConfig& cfg) {
  require_maps(tl, "top-left");
  require_maps(br, "bottom-right");
  if (tl.heat.shape() != br.heat.shape()) throw ShapeError("decode: top-left and bottom-right heat shapes differ");
  const auto tl_c = top_corners(heat_nms(tl.heat), cfg.top_k);
  const auto br_c = top_corners(heat_nms(br.heat), cfg.top_k);
  return pair_and_score(tl_c, br_c, tl, br, cfg);
}

}  // namespace

std::vector<Detection> decode(const CornerMaps& tl, const CornerMaps& br, const DecodeConfig& cfg) {
  return soft_nms(raw_pairs(tl, br, cfg), cfg.softnms_sigma, cfg.max_detections);
}

std::vector<Detection> decode_flip_fused(const CornerMaps& tl, const CornerMaps& br, const CornerMaps& tl_flip,
                                         const CornerMaps& br_flip, double image_width, const DecodeConfig& cfg) {
  std::vector<Detection> all = raw_pairs(tl, br, cfg);
  for (Detection d : raw_pairs(tl_flip, br_flip, cfg)) {
    d.box = Box{image_width - d.box.x2, d.box.y1, image_width - d.box.x1, d.box.y2};
    all.push_back(d);
  }
  std::stable_sort(all.begin(), all.end(), score_order);
  return soft_nms(std::move(all), cfg.softnms_sigma, cfg.max_detections);
}

CornerMaps image_maps(const HeadTensors& heads, std::size_t b) {
  auto take = [b](const Tensor<float>& t) {
    if (t.ndim() != 4 || b >= t.dim(0)) throw ShapeError("image_maps: expected [B,C,H,W] with b < B");
    return t.slice_batch(b).reshaped(Shape{t.dim(1), t.dim(2), t.dim(3)});
  };
  return CornerMaps{take(heads.heat), take(heads.emb), take(heads.off)};
}

std::string detections_jsonl(const std::string& image_id, const std::vector<Detection>& dets) {
  std::ostringstream os;
  for (const auto& d : dets) {
    const nlohmann::json j{{"image_id", image_id},
                           {"class", d.cls},
                           {"score", d.score},
                           {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}};
    os << j.dump() << '\n';
  }
  return os.str();
}

}  // namespace cornerdet
