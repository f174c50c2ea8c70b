#pragma once

#include <string>
#include <vector>

#include "cornerdet/box.hpp"
#include "cornerdet/model.hpp"
#include "cornerdet/tensor.hpp"

namespace cornerdet {

struct Detection {
  int cls = 0;
  float score = 0;
  Box box;  // input-image pixels
};

struct DecodeConfig {
  int top_k = 100;
  double emb_dist_max = 0.5;
  int max_detections = 100;
  double softnms_sigma = 0.5;
  int downsample = 4;
};

/// One corner candidate on the output grid.
struct Corner {
  int cls = 0;
  int y = 0;
  int x = 0;
  float score = 0;
  bool operator==(const Corner&) const = default;
};

/// Head outputs of one corner type for a single image.
struct CornerMaps {
  Tensor<float> heat;  // [C,H,W]
  Tensor<float> emb;   // [1,H,W]
  Tensor<float> off;   // [2,H,W], channel 0 = x
};

/// Keeps a cell iff it equals the max of its 3x3 neighbourhood; ties all survive.
Tensor<float> heat_nms(const Tensor<float>& heat);

/// Global top-k over classes and positions, ordered by (score desc, class, y, x).
std::vector<Corner> top_corners(const Tensor<float>& heat, int k);

/// All same-class TL/BR pairs with |e_tl - e_br| <= emb_dist_max whose adjusted BR
/// lies weakly below-right of the adjusted TL, sorted by score descending.
std::vector<Detection> pair_and_score(const std::vector<Corner>& tl, const std::vector<Corner>& br,
                                      const CornerMaps& tl_maps, const CornerMaps& br_maps,
                                      const DecodeConfig& cfg);

/// Gaussian soft-NMS: score *= exp(-iou^2 / sigma) against each kept detection.
/// Result sorted by score and truncated to `max_detections`.
std::vector<Detection> soft_nms(std::vector<Detection> dets, double sigma, int max_detections);

/// NMS, top-k, pairing and soft-NMS for one image.
std::vector<Detection> decode(const CornerMaps& tl, const CornerMaps& br, const DecodeConfig& cfg);

/// Pairs from the original and the horizontally flipped image (boxes mirrored
/// back with `image_width`), concatenated, then soft-NMS.
std::vector<Detection> decode_flip_fused(const CornerMaps& tl, const CornerMaps& br, const CornerMaps& tl_flip,
                                         const CornerMaps& br_flip, double image_width, const DecodeConfig& cfg);

/// Slices image `b` out of batched head outputs.
CornerMaps image_maps(const HeadTensors& heads, std::size_t b);

/// One JSON object per line: {"image_id","class","score","box"}.
std::string detections_jsonl(const std::string& image_id, const std::vector<Detection>& dets);

}  // namespace cornerdet
