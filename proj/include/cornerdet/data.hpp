#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cornerdet/box.hpp"
#include "cornerdet/tensor.hpp"

namespace cornerdet {

/// Shape classes drawn by the generator.
enum ShapeClass : int { kRectangle = 0, kCircle = 1, kTriangle = 2 };
inline constexpr int kNumShapeClasses = 3;

/// One image [3,H,W] in [0,1] with its boxes.
struct Sample {
  std::string id;
  Tensor<float> image;
  std::vector<Annotation> annotations;
};

struct DataConfig {
  std::size_t image_size = 64;
  int min_objects = 1;
  int max_objects = 4;
  int min_extent = 10;  // shape bounding-square side, pixels
  int max_extent = 28;
  double noise_amplitude = 0.1;
};

/// Draws one sample: uniform noise background plus non-overlapping shapes.
Sample generate_sample(std::mt19937_64& rng, const DataConfig& cfg, std::string id);

/// `count` samples named <prefix><index>, deterministic in `seed`.
std::vector<Sample> generate_samples(std::size_t count, std::uint64_t seed, const DataConfig& cfg,
                                     const std::string& prefix = "img");

/// Mirror about the vertical axis; box (x1,y1,x2,y2) -> (W-x2, y1, W-x1, y2).
Sample hflip(const Sample& s);

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Writes <id>.tensor, <id>.json per sample plus manifest.json.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

/// Generates `count` samples and writes them; the last round(count * val_fraction)
/// samples form the validation split.
Dataset gen_dataset(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed, const DataConfig& cfg,
                    double val_fraction = 0.1);

void write_sample(const std::filesystem::path& dir, const Sample& s);
Sample read_sample(const std::filesystem::path& dir, const std::string& id);

}  // namespace cornerdet
