#include "cornerdet/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "cornerdet/checkpoint.hpp"

namespace cornerdet {
namespace {

using json = nlohmann::json;

struct Pt {
  double x, y;
};

double edge(const Pt& a, const Pt& b, const Pt& p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); }

bool in_triangle(const std::array<Pt, 3>& t, const Pt& p) {
  const double d0 = edge(t[0], t[1], p), d1 = edge(t[1], t[2], p), d2 = edge(t[2], t[0], p);
  const bool neg = d0 < 0 || d1 < 0 || d2 < 0;
  const bool pos = d0 > 0 || d1 > 0 || d2 > 0;
  return !(neg && pos);
}

bool overlaps(const Box& a, const Box& b, double margin) {
  return a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin;
}

}  // namespace

Sample generate_sample(std::mt19937_64& rng, const DataConfig& cfg, std::string id) {
  const int size = static_cast<int>(cfg.image_size);
  if (cfg.max_extent + 2 > size || cfg.min_extent < 3 || cfg.min_extent > cfg.max_extent) {
    throw std::invalid_argument("generate_sample: shape extents do not fit the image");
  }
  std::uniform_real_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_amplitude));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count_dist(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> class_dist(0, kNumShapeClasses - 1);
  std::uniform_int_distribution<int> extent_dist(cfg.min_extent, cfg.max_extent);

  Sample s{std::move(id), Tensor<float>(Shape{3, cfg.image_size, cfg.image_size}), {}};
  for (auto& v : s.image.data()) v = noise(rng);

  const int wanted = count_dist(rng);
  std::vector<Box> placed;
  for (int obj = 0; obj < wanted; ++obj) {
    const int cls = class_dist(rng);
    int w = extent_dist(rng);
    int h = cls == kCircle ? w : extent_dist(rng);
    // Keep one background pixel between any shape and the border.
    std::uniform_int_distribution<int> xd(1, size - 1 - w), yd(1, size - 1 - h);
    Box frame;
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      const double x = xd(rng), y = yd(rng);
      frame = Box{x, y, x + w, y + h};
      ok = std::none_of(placed.begin(), placed.end(), [&](const Box& b) { return overlaps(frame, b, 2.0); });
    }
    if (!ok) continue;

    std::array<float, 3> color{};
    for (auto& c : color) c = static_cast<float>(0.2 + 0.8 * unit(rng));
    if (*std::max_element(color.begin(), color.end()) < 0.5f) color[static_cast<std::size_t>(class_dist(rng))] = 1.0f;

    std::array<Pt, 3> tri{};
    if (cls == kTriangle) {
      // One vertex sits on the top-right or bottom-left frame corner, so the
      // top-left and bottom-right box corners fall on background.
      const double f = 0.3 + 0.4 * unit(rng), g = 0.3 + 0.4 * unit(rng);
      if (unit(rng) < 0.5) {
        tri = {Pt{frame.x2, frame.y1}, Pt{frame.x1, frame.y1 + g * h}, Pt{frame.x1 + f * w, frame.y2}};
      } else {
        tri = {Pt{frame.x1, frame.y2}, Pt{frame.x1 + f * w, frame.y1}, Pt{frame.x2, frame.y1 + g * h}};
      }
    }
    const double cx = frame.x1 + w / 2.0, cy = frame.y1 + h / 2.0, rad = w / 2.0;

    int min_x = size, min_y = size, max_x = -1, max_y = -1;
    for (int py = static_cast<int>(frame.y1); py < static_cast<int>(frame.y2); ++py) {
      for (int px = static_cast<int>(frame.x1); px < static_cast<int>(frame.x2); ++px) {
        const Pt p{px + 0.5, py + 0.5};
        bool inside = true;
        if (cls == kCircle) {
          inside = (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy) <= rad * rad;
        } else if (cls == kTriangle) {
          inside = in_triangle(tri, p);
        }
        if (!inside) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          s.image.at(ch, static_cast<std::size_t>(py), static_cast<std::size_t>(px)) = color[ch];
        }
        min_x = std::min(min_x, px);
        min_y = std::min(min_y, py);
        max_x = std::max(max_x, px);
        max_y = std::max(max_y, py);
      }
    }
    if (max_x < 0) continue;
    const Box tight{static_cast<double>(min_x), static_cast<double>(min_y), static_cast<double>(max_x + 1),
                    static_cast<double>(max_y + 1)};
    if (tight.area() < 4) continue;
    placed.push_back(frame);
    s.annotations.push_back(Annotation{cls, tight});
  }
  return s;
}

std::vector<Sample> generate_samples(std::size_t count, std::uint64_t seed, const DataConfig& cfg,
                                     const std::string& prefix) {
  if (count < 1) throw std::invalid_argument("generate_samples: count must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    out.push_back(generate_sample(rng, cfg, prefix + buf));
  }
  return out;
}

Sample hflip(const Sample& s) {
  Sample out = s;
  const std::size_t c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out.image.at(ch, y, x) = s.image.at(ch, y, w - 1 - x);
    }
  }
  const double wd = static_cast<double>(w);
  for (auto& a : out.annotations) a.box = Box{wd - a.box.x2, a.box.y1, wd - a.box.x1, a.box.y2};
  return out;
}

void write_sample(const std::filesystem::path& dir, const Sample& s) {
  save_tensor(dir / (s.id + ".tensor"), s.image);
  json boxes = json::array();
  for (const auto& a : s.annotations) {
    boxes.push_back({{"class", a.cls}, {"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}}});
  }
  std::ofstream os(dir / (s.id + ".json"));
  if (!os) throw std::runtime_error("cannot write annotations for " + s.id);
  os << json{{"boxes", boxes}}.dump() << '\n';
}

Sample read_sample(const std::filesystem::path& dir, const std::string& id) {
  Sample s;
  s.id = id;
  s.image = load_tensor(dir / (id + ".tensor"));
  std::ifstream is(dir / (id + ".json"));
  if (!is) throw std::runtime_error("cannot open annotations for " + id);
  const json j = json::parse(is);
  for (const auto& b : j.at("boxes")) {
    const auto& xy = b.at("box");
    if (xy.size() != 4) throw FormatError("annotation box for " + id + " must have 4 numbers");
    s.annotations.push_back(Annotation{b.at("class").get<int>(),
                                       Box{xy[0].get<double>(), xy[1].get<double>(), xy[2].get<double>(),
                                           xy[3].get<double>()}});
  }
  return s;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw std::runtime_error("cannot create dataset directory " + dir.string());
  json entries = json::array();
  for (const auto& s : ds.train) {
    write_sample(dir, s);
    entries.push_back({{"id", s.id}, {"split", "train"}});
  }
  for (const auto& s : ds.val) {
    write_sample(dir, s);
    entries.push_back({{"id", s.id}, {"split", "val"}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
  os << json{{"samples", entries}}.dump(1) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no manifest.json in " + dir.string());
  const json m = json::parse(is);
  Dataset ds;
  for (const auto& e : m.at("samples")) {
    const std::string split = e.at("split").get<std::string>();
    Sample s = read_sample(dir, e.at("id").get<std::string>());
    if (split == "train") {
      ds.train.push_back(std::move(s));
    } else if (split == "val") {
      ds.val.push_back(std::move(s));
    } else {
      throw FormatError("unknown split '" + split + "' in manifest");
    }
  }
  return ds;
}

Dataset gen_dataset(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed, const DataConfig& cfg,
                    double val_fraction) {
  if (count < 1) throw std::invalid_argument("gen_dataset: count must be >= 1");
  if (val_fraction < 0 || val_fraction >= 1) throw std::invalid_argument("gen_dataset: val_fraction must lie in [0, 1)");
  std::vector<Sample> all = generate_samples(count, seed, cfg);
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(count) * val_fraction));
  Dataset ds;
  ds.val.assign(std::make_move_iterator(all.end() - static_cast<std::ptrdiff_t>(n_val)), std::make_move_iterator(all.end()));
  all.resize(count - n_val);
  ds.train = std::move(all);
  write_dataset(dir, ds);
  return ds;
}

}  // namespace cornerdet
