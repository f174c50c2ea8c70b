#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cornerdet/autodiff.hpp"
#include "cornerdet/tensor.hpp"

namespace cornerdet {

/// Direction a running max travels. `BottomToTop` starts at the last row, so
/// every cell ends up holding the max of itself and everything below it.
enum class ScanDirection { BottomToTop, RightToLeft, TopToBottom, LeftToRight };

std::string to_string(ScanDirection d);

/// Result of a directional scan plus, for each output cell, the flat index of
/// the input element that supplied the max.
template <typename T>
struct ScanResult {
  Tensor<T> values;
  std::vector<std::uint32_t> argmax;
};

/// Running max over the last two axes of a rank >= 2 tensor, single pass.
/// Among tied maxima the element nearest the scan origin wins.
template <typename T>
ScanResult<T> scan_max_with_argmax(const Tensor<T>& input, ScanDirection dir);

template <typename T>
Tensor<T> scan_max(const Tensor<T>& input, ScanDirection dir) {
  return scan_max_with_argmax(input, dir).values;
}

/// Reference scan: for each cell, the max over its whole ray, O(H*W*(H+W)).
template <typename T>
Tensor<T> scan_max_naive(const Tensor<T>& input, ScanDirection dir);

template <typename T>
Var<T> scan_max(Var<T> input, ScanDirection dir);

/// scan(f_t, bottom-to-top) + scan(f_l, right-to-left).
template <typename T>
Var<T> corner_pool_topleft(Var<T> f_t, Var<T> f_l);

/// scan(f_b, top-to-bottom) + scan(f_r, left-to-right).
template <typename T>
Var<T> corner_pool_bottomright(Var<T> f_b, Var<T> f_r);

/// Plain-tensor versions of the two pooling layers.
template <typename T>
Tensor<T> corner_pool_topleft(const Tensor<T>& f_t, const Tensor<T>& f_l);
template <typename T>
Tensor<T> corner_pool_bottomright(const Tensor<T>& f_b, const Tensor<T>& f_r);

struct BenchRow {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  double naive_ms = 0;
  double scan_ms = 0;
  double speedup() const { return scan_ms > 0 ? naive_ms / scan_ms : 0.0; }
};

/// Times the naive oracle against the DP scans (top-left pooling layer) on
/// random 1 x channels x H x W inputs. Outputs are checked equal first.
std::vector<BenchRow> bench_pool(const std::vector<std::pair<std::size_t, std::size_t>>& sizes,
                                 int reps, std::size_t channels = 8, std::uint64_t seed = 1);

std::string bench_report_text(const std::vector<BenchRow>& rows);
std::string bench_report_csv(const std::vector<BenchRow>& rows);

}  // namespace cornerdet
