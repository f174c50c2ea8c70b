#include "cornerdet/corner_pool.hpp"

#include <chrono>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cornerdet/ops.hpp"
#include "cornerdet/parallel.hpp"

namespace cornerdet {

std::string to_string(ScanDirection d) {
  switch (d) {
    case ScanDirection::BottomToTop: return "bottom_to_top";
    case ScanDirection::RightToLeft: return "right_to_left";
    case ScanDirection::TopToBottom: return "top_to_bottom";
    case ScanDirection::LeftToRight: return "left_to_right";
  }
  return "unknown";
}

namespace {

template <typename T>
std::pair<std::size_t, std::size_t> plane_dims(const Tensor<T>& t) {
  if (t.ndim() < 2) throw ShapeError("scan_max: input must have rank >= 2, got " + shape_str(t.shape()));
  return {t.dim(t.ndim() - 2), t.dim(t.ndim() - 1)};
}

}  // namespace

template <typename T>
ScanResult<T> scan_max_with_argmax(const Tensor<T>& input, ScanDirection dir) {
  const auto [h, w] = plane_dims(input);
  const std::size_t hw = h * w;
  const std::size_t planes = input.numel() / hw;
  ScanResult<T> res{input, std::vector<std::uint32_t>(input.numel())};
  T* out = res.values.ptr();
  std::uint32_t* arg = res.argmax.data();

  parallel_for(planes, [&](std::size_t p) {
    const std::size_t base = p * hw;
    T* o = out + base;
    std::uint32_t* a = arg + base;
    for (std::size_t i = 0; i < hw; ++i) a[i] = static_cast<std::uint32_t>(base + i);
    // Strict comparison keeps the earlier (origin-side) element on ties.
    switch (dir) {
      case ScanDirection::BottomToTop:
        for (std::size_t y = h - 1; y-- > 0;) {
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t cur = y * w + x, prev = cur + w;
            if (!(o[cur] > o[prev])) { o[cur] = o[prev]; a[cur] = a[prev]; }
          }
        }
        break;
      case ScanDirection::TopToBottom:
        for (std::size_t y = 1; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t cur = y * w + x, prev = cur - w;
            if (!(o[cur] > o[prev])) { o[cur] = o[prev]; a[cur] = a[prev]; }
          }
        }
        break;
      case ScanDirection::RightToLeft:
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = w - 1; x-- > 0;) {
            const std::size_t cur = y * w + x, prev = cur + 1;
            if (!(o[cur] > o[prev])) { o[cur] = o[prev]; a[cur] = a[prev]; }
          }
        }
        break;
      case ScanDirection::LeftToRight:
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 1; x < w; ++x) {
            const std::size_t cur = y * w + x, prev = cur - 1;
            if (!(o[cur] > o[prev])) { o[cur] = o[prev]; a[cur] = a[prev]; }
          }
        }
        break;
    }
  });
  return res;
}

template <typename T>
Tensor<T> scan_max_naive(const Tensor<T>& input, ScanDirection dir) {
  const auto [h, w] = plane_dims(input);
  const std::size_t planes = input.numel() / (h * w);
  Tensor<T> out(input.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = input.ptr() + p * h * w;
    T* dst = out.ptr() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        T m = src[y * w + x];
        switch (dir) {
          case ScanDirection::BottomToTop:
            for (std::size_t k = y; k < h; ++k) m = std::max(m, src[k * w + x]);
            break;
          case ScanDirection::TopToBottom:
            for (std::size_t k = 0; k <= y; ++k) m = std::max(m, src[k * w + x]);
            break;
          case ScanDirection::RightToLeft:
            for (std::size_t k = x; k < w; ++k) m = std::max(m, src[y * w + k]);
            break;
          case ScanDirection::LeftToRight:
            for (std::size_t k = 0; k <= x; ++k) m = std::max(m, src[y * w + k]);
            break;
        }
        dst[y * w + x] = m;
      }
    }
  }
  return out;
}

template <typename T>
Var<T> scan_max(Var<T> input, ScanDirection dir) {
  ScanResult<T> r = scan_max_with_argmax(input.value(), dir);
  const int xi = input.id;
  return input.graph->record("scan_max:" + to_string(dir), {input}, std::move(r.values),
                             [xi, arg = std::move(r.argmax)](Graph<T>& g, int self) {
                               const Tensor<T>& dy = g.grad(self);
                               Tensor<T>& dx = g.grad(xi);
                               for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += dy[i];
                             });
}

namespace {

template <typename T>
void require_pair(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return;
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) {
      throw ShapeError(std::string(op) + ": dimension " + std::to_string(i) + " differs (" +
                       std::to_string(a[i]) + " vs " + std::to_string(b[i]) + ")");
    }
  }
}

template <typename T>
Tensor<T> add_tensors(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

}  // namespace

template <typename T>
Var<T> corner_pool_topleft(Var<T> f_t, Var<T> f_l) {
  require_pair<T>(f_t.shape(), f_l.shape(), "corner_pool_topleft");
  return add(scan_max(f_t, ScanDirection::BottomToTop), scan_max(f_l, ScanDirection::RightToLeft));
}

template <typename T>
Var<T> corner_pool_bottomright(Var<T> f_b, Var<T> f_r) {
  require_pair<T>(f_b.shape(), f_r.shape(), "corner_pool_bottomright");
  return add(scan_max(f_b, ScanDirection::TopToBottom), scan_max(f_r, ScanDirection::LeftToRight));
}

template <typename T>
Tensor<T> corner_pool_topleft(const Tensor<T>& f_t, const Tensor<T>& f_l) {
  require_pair<T>(f_t.shape(), f_l.shape(), "corner_pool_topleft");
  return add_tensors(scan_max(f_t, ScanDirection::BottomToTop), scan_max(f_l, ScanDirection::RightToLeft));
}

template <typename T>
Tensor<T> corner_pool_bottomright(const Tensor<T>& f_b, const Tensor<T>& f_r) {
  require_pair<T>(f_b.shape(), f_r.shape(), "corner_pool_bottomright");
  return add_tensors(scan_max(f_b, ScanDirection::TopToBottom), scan_max(f_r, ScanDirection::LeftToRight));
}

std::vector<BenchRow> bench_pool(const std::vector<std::pair<std::size_t, std::size_t>>& sizes,
                                 int reps, std::size_t channels, std::uint64_t seed) {
  if (sizes.empty()) throw std::invalid_argument("bench_pool: sizes must be nonempty");
  if (reps < 1) throw std::invalid_argument("bench_pool: reps must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.f, 1.f);
  std::vector<BenchRow> rows;
  using clock = std::chrono::steady_clock;
  for (const auto& [h, w] : sizes) {
    Tensor<float> ft(Shape{1, channels, h, w}), fl(Shape{1, channels, h, w});
    for (auto& v : ft.data()) v = dist(rng);
    for (auto& v : fl.data()) v = dist(rng);

    auto naive = [&] {
      Tensor<float> a = scan_max_naive(ft, ScanDirection::BottomToTop);
      Tensor<float> b = scan_max_naive(fl, ScanDirection::RightToLeft);
      return add_tensors(a, b);
    };
    if (!(naive() == corner_pool_topleft(ft, fl))) {
      throw std::logic_error("bench_pool: DP scan disagrees with naive oracle");
    }
    BenchRow row{h, w, channels};
    volatile float sink = 0;
    auto t0 = clock::now();
    for (int r = 0; r < reps; ++r) sink = sink + naive()[0];
    auto t1 = clock::now();
    for (int r = 0; r < reps; ++r) sink = sink + corner_pool_topleft(ft, fl)[0];
    auto t2 = clock::now();
    row.naive_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
    row.scan_ms = std::chrono::duration<double, std::milli>(t2 - t1).count() / reps;
    rows.push_back(row);
  }
  return rows;
}

std::string bench_report_text(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "size" << std::setw(10) << "channels" << std::right
     << std::setw(14) << "naive_ms" << std::setw(14) << "scan_ms" << std::setw(12) << "speedup\n";
  for (const auto& r : rows) {
    std::ostringstream sz;
    sz << r.height << "x" << r.width;
    os << std::left << std::setw(12) << sz.str() << std::setw(10) << r.channels << std::right
       << std::fixed << std::setprecision(3) << std::setw(14) << r.naive_ms << std::setw(14)
       << r.scan_ms << std::setprecision(1) << std::setw(11) << r.speedup() << "x\n";
  }
  return os.str();
}

std::string bench_report_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "height,width,channels,naive_ms,scan_ms,speedup\n";
  for (const auto& r : rows) {
    os << r.height << ',' << r.width << ',' << r.channels << ',' << r.naive_ms << ',' << r.scan_ms
       << ',' << r.speedup() << '\n';
  }
  return os.str();
}

#define CORNERDET_INSTANTIATE_POOL(T)                                                   \
  template ScanResult<T> scan_max_with_argmax(const Tensor<T>&, ScanDirection);         \
  template Tensor<T> scan_max_naive(const Tensor<T>&, ScanDirection);                   \
  template Var<T> scan_max(Var<T>, ScanDirection);                                      \
  template Var<T> corner_pool_topleft(Var<T>, Var<T>);                                  \
  template Var<T> corner_pool_bottomright(Var<T>, Var<T>);                              \
  template Tensor<T> corner_pool_topleft(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> corner_pool_bottomright(const Tensor<T>&, const Tensor<T>&);

CORNERDET_INSTANTIATE_POOL(float)
CORNERDET_INSTANTIATE_POOL(double)

}  // namespace cornerdet
