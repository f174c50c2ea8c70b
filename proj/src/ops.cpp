#include "cornerdet/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>

#include "cornerdet/parallel.hpp"

namespace cornerdet {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
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

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return n * ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + kx is in range.
inline void valid_range(const ConvGeom& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  const long off = static_cast<long>(kx) - g.pad;
  const long s = g.stride;
  long first = off >= 0 ? 0 : (-off + s - 1) / s;
  long last = (static_cast<long>(g.w) - 1 - off) >= 0 ? (static_cast<long>(g.w) - 1 - off) / s + 1 : 0;
  first = std::min<long>(first, static_cast<long>(g.wo));
  last = std::clamp<long>(last, first, static_cast<long>(g.wo));
  lo = static_cast<std::size_t>(first);
  hi = static_cast<std::size_t>(last);
}

// cols is [cin*kh*kw, n*ho*wo] row-major.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t p = g.p();
  parallel_for(g.cin, [&](std::size_t c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        std::size_t lo, hi;
        valid_range(g, kx, lo, hi);
        const long xoff = static_cast<long>(kx) - g.pad;
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* plane = x + (n * g.cin + c) * g.h * g.w;
          T* out = row + n * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
            T* orow = out + oy * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(orow, orow + g.wo, T(0));
              continue;
            }
            const T* irow = plane + static_cast<std::size_t>(iy) * g.w;
            std::fill(orow, orow + lo, T(0));
            if (g.stride == 1) {
              std::copy(irow + (static_cast<long>(lo) + xoff), irow + (static_cast<long>(hi) + xoff), orow + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] = irow[static_cast<long>(ox) * g.stride + xoff];
            }
            std::fill(orow + hi, orow + g.wo, T(0));
          }
        }
      }
    }
  });
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t p = g.p();
  parallel_for(g.cin, [&](std::size_t c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        std::size_t lo, hi;
        valid_range(g, kx, lo, hi);
        const long xoff = static_cast<long>(kx) - g.pad;
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* plane = dx + (n * g.cin + c) * g.h * g.w;
          const T* in = row + n * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            T* drow = plane + static_cast<std::size_t>(iy) * g.w;
            const T* irow = in + oy * g.wo;
            if (g.stride == 1) {
              T* d = drow + xoff;
              for (std::size_t ox = lo; ox < hi; ++ox) d[ox] += irow[ox];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) drow[static_cast<long>(ox) * g.stride + xoff] += irow[ox];
            }
          }
        }
      }
    }
  });
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, int stride, int padding) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& wt = weight.value();
  const Tensor<T>& b = bias.value();
  require_rank(x.shape(), 4, "conv2d", "input");
  require_rank(wt.shape(), 4, "conv2d", "weight");
  require_rank(b.shape(), 1, "conv2d", "bias");
  if (wt.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: weight dimension 1 (Cin=" + std::to_string(wt.dim(1)) +
                     ") does not match input dimension 1 (C=" + std::to_string(x.dim(1)) + ")");
  }
  if (b.dim(0) != wt.dim(0)) {
    throw ShapeError("conv2d: bias dimension 0 (" + std::to_string(b.dim(0)) +
                     ") does not match weight dimension 0 (Cout=" + std::to_string(wt.dim(0)) + ")");
  }
  if (wt.dim(2) % 2 == 0 || wt.dim(3) % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd, got " + shape_str(wt.shape()));
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
  const long hp = static_cast<long>(x.dim(2)) + 2L * padding - static_cast<long>(wt.dim(2));
  const long wp = static_cast<long>(x.dim(3)) + 2L * padding - static_cast<long>(wt.dim(3));
  if (hp < 0) throw ShapeError("conv2d: dimension 2 (H) too small for kernel");
  if (wp < 0) throw ShapeError("conv2d: dimension 3 (W) too small for kernel");

  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), wt.dim(0), wt.dim(2), wt.dim(3),
             static_cast<std::size_t>(hp / stride + 1), static_cast<std::size_t>(wp / stride + 1),
             stride, padding};

  std::vector<T> cols(g.k() * g.p());
  im2col(x.ptr(), g, cols.data());
  RowMat<T> y = ConstRowMap<T>(wt.ptr(), g.cout, g.k()) * ConstRowMap<T>(cols.data(), g.k(), g.p());

  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      const T* src = y.data() + co * g.p() + n * hw;
      T* dst = out.ptr() + (n * g.cout + co) * hw;
      const T bv = b[co];
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
    }
  }

  const int xi = input.id, wi = weight.id, bi = bias.id;
  // The column matrix is kept for the weight gradient when one is needed.
  if (!input.graph->requires_grad(wi)) cols = {};
  return input.graph->record(
      "conv2d", {input, weight, bias}, std::move(out),
      [g, xi, wi, bi, saved = std::move(cols)](Graph<T>& gr, int self) {
        const Tensor<T>& dy = gr.grad(self);
        const std::size_t hw = g.ho * g.wo;
        RowMat<T> dym(g.cout, g.p());
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t co = 0; co < g.cout; ++co) {
            const T* src = dy.ptr() + (n * g.cout + co) * hw;
            std::copy(src, src + hw, dym.data() + co * g.p() + n * hw);
          }
        }
        if (gr.requires_grad(bi)) {
          Tensor<T>& db = gr.grad(bi);
          for (std::size_t co = 0; co < g.cout; ++co) db[co] += dym.row(co).sum();
        }
        const bool need_w = gr.requires_grad(wi);
        const bool need_x = gr.requires_grad(xi);
        if (!need_w && !need_x) return;
        if (need_w) {
          Tensor<T>& dw = gr.grad(wi);
          RowMap<T>(dw.ptr(), g.cout, g.k()).noalias() +=
              dym * ConstRowMap<T>(saved.data(), g.k(), g.p()).transpose();
        }
        if (need_x) {
          std::vector<T> cols(g.k() * g.p());
          RowMap<T> dcols(cols.data(), g.k(), g.p());
          dcols.noalias() = ConstRowMap<T>(gr.value(wi).ptr(), g.cout, g.k()).transpose() * dym;
          col2im_add(cols.data(), g, gr.grad(xi).ptr());
        }
      });
}

template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> plane(const T* p, std::size_t len) {
  return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(len));
}

template <typename T>
Var<T> batchnorm2d(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T>& state,
                   const BatchNormOptions& opts) {
  const Tensor<T>& x = input.value();
  require_rank(x.shape(), 4, "batchnorm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.value().numel() != c || beta.value().numel() != c ||
      state.running_mean.numel() != c || state.running_var.numel() != c) {
    throw ShapeError("batchnorm2d: parameter length does not match dimension 1 (C=" +
                     std::to_string(c) + ")");
  }
  const std::size_t count = n * hw;
  if (opts.train && count < 2) {
    throw std::invalid_argument("batchnorm2d: train mode needs N*H*W >= 2 (variance undefined)");
  }
  const Tensor<T>& gm = gamma.value();
  const Tensor<T>& bt = beta.value();

  std::vector<T> mean(c), inv_std(c);
  if (opts.train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b) {
        s += plane(x.ptr() + (b * c + ch) * hw, hw).template cast<double>().sum();
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0;
      for (std::size_t b = 0; b < n; ++b) {
        ss += (plane(x.ptr() + (b * c + ch) * hw, hw).template cast<double>() - mu).square().sum();
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + opts.eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      state.running_mean[ch] = static_cast<T>((1.0 - opts.momentum) * state.running_mean[ch] + opts.momentum * mu);
      state.running_var[ch] = static_cast<T>((1.0 - opts.momentum) * state.running_var[ch] + opts.momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[ch]) + opts.eps));
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (x[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = xh;
        out[off + i] = gm[ch] * xh + bt[ch];
      }
    }
  }

  const int xi = input.id, gi = gamma.id, bi = beta.id;
  const bool train = opts.train;
  return input.graph->record(
      "batchnorm2d", {input, gamma, beta}, std::move(out),
      [xi, gi, bi, n, c, hw, train, xhat = std::move(xhat), inv_std](Graph<T>& gr, int self) {
        const Tensor<T>& dy = gr.grad(self);
        const Tensor<T>& gmv = gr.value(gi);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            const auto d = plane(dy.ptr() + off, hw).template cast<double>();
            sum_dy[ch] += d.sum();
            sum_dy_xhat[ch] += (d * plane(xhat.ptr() + off, hw).template cast<double>()).sum();
          }
        }
        if (gr.requires_grad(gi)) {
          Tensor<T>& dg = gr.grad(gi);
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(sum_dy_xhat[ch]);
        }
        if (gr.requires_grad(bi)) {
          Tensor<T>& dbt = gr.grad(bi);
          for (std::size_t ch = 0; ch < c; ++ch) dbt[ch] += static_cast<T>(sum_dy[ch]);
        }
        if (!gr.requires_grad(xi)) return;
        Tensor<T>& dx = gr.grad(xi);
        const double cnt = static_cast<double>(n * hw);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            const T k = gmv[ch] * inv_std[ch];
            if (train) {
              const T mdy = static_cast<T>(sum_dy[ch] / cnt);
              const T mdx = static_cast<T>(sum_dy_xhat[ch] / cnt);
              for (std::size_t i = 0; i < hw; ++i) {
                dx[off + i] += k * (dy[off + i] - mdy - xhat[off + i] * mdx);
              }
            } else {
              for (std::size_t i = 0; i < hw; ++i) dx[off + i] += k * dy[off + i];
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  const int xi = x.id;
  return x.graph->record("relu", {x}, std::move(out), [xi](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad(self);
    const Tensor<T>& xv = g.value(xi);
    Tensor<T>& dx = g.grad(xi);
    // Subgradient at exactly zero is zero.
    for (std::size_t i = 0; i < dy.numel(); ++i) {
      if (xv[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const T v = xv[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  const int xi = x.id;
  return x.graph->record("sigmoid", {x}, std::move(out), [xi](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad(self);
    const Tensor<T>& y = g.value(self);
    Tensor<T>& dx = g.grad(xi);
    for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "add");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  const int ai = a.id, bi = b.id;
  return a.graph->record("add", {a, b}, std::move(out), [ai, bi](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad(self);
    for (int id : {ai, bi}) {
      if (!g.requires_grad(id)) continue;
      Tensor<T>& d = g.grad(id);
      for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "mul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
  const int ai = a.id, bi = b.id;
  return a.graph->record("mul", {a, b}, std::move(out), [ai, bi](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad(self);
    const Tensor<T>& av = g.value(ai);
    const Tensor<T>& bv = g.value(bi);
    if (g.requires_grad(ai)) {
      Tensor<T>& d = g.grad(ai);
      for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i] * bv[i];
    }
    if (g.requires_grad(bi)) {
      Tensor<T>& d = g.grad(bi);
      for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * factor;
  const int xi = x.id;
  return x.graph->record("scale", {x}, std::move(out), [xi, factor](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad(self);
    Tensor<T>& dx = g.grad(xi);
    for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * factor;
  });
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 4, "upsample_nearest2x", "input");
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out(Shape{xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.ptr() + p * h * w;
    T* dst = out.ptr() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  const int xi = x.id;
  return x.graph->record("upsample_nearest2x", {x}, std::move(out),
                         [xi, planes, h, w](Graph<T>& g, int self) {
                           const Tensor<T>& dy = g.grad(self);
                           Tensor<T>& dx = g.grad(xi);
                           for (std::size_t p = 0; p < planes; ++p) {
                             const T* src = dy.ptr() + p * 4 * h * w;
                             T* dst = dx.ptr() + p * h * w;
                             for (std::size_t y = 0; y < 2 * h; ++y) {
                               for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                                 dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const int xi = x.id;
  return x.graph->record("sum", {x}, Tensor<T>::scalar(x.value().sum()), [xi](Graph<T>& g, int self) {
    const T d = g.grad(self)[0];
    Tensor<T>& dx = g.grad(xi);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += d;
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: need one weight per term");
  }
  T acc = T(0);
  std::vector<int> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().numel() != 1) throw ShapeError("weighted_sum: terms must be scalar");
    acc += weights[i] * terms[i].value()[0];
    ids.push_back(terms[i].id);
  }
  return terms.front().graph->record("weighted_sum", terms, Tensor<T>::scalar(acc),
                                     [ids, weights](Graph<T>& g, int self) {
                                       const T d = g.grad(self)[0];
                                       for (std::size_t i = 0; i < ids.size(); ++i) {
                                         if (g.requires_grad(ids[i])) g.grad(ids[i])[0] += d * weights[i];
                                       }
                                     });
}

template <typename T>
Tensor<T> maxpool3x3(const Tensor<T>& x) {
  if (x.ndim() < 2) throw ShapeError("maxpool3x3: need at least rank 2");
  const std::size_t h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
  const std::size_t planes = x.numel() / (h * w);
  Tensor<T> out(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * h * w;
    T* dst = out.ptr() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t yy = (y == 0 ? 0 : y - 1); yy <= std::min(h - 1, y + 1); ++yy) {
          for (std::size_t x2 = (xx == 0 ? 0 : xx - 1); x2 <= std::min(w - 1, xx + 1); ++x2) {
            m = std::max(m, src[yy * w + x2]);
          }
        }
        dst[y * w + xx] = m;
      }
    }
  }
  return out;
}

#define CORNERDET_INSTANTIATE_OPS(T)                                                              \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                                       \
  template Var<T> batchnorm2d(Var<T>, Var<T>, Var<T>, BatchNormState<T>&, const BatchNormOptions&); \
  template Var<T> relu(Var<T>);                                                                   \
  template Var<T> sigmoid(Var<T>);                                                                \
  template Var<T> add(Var<T>, Var<T>);                                                            \
  template Var<T> mul(Var<T>, Var<T>);                                                            \
  template Var<T> scale(Var<T>, T);                                                               \
  template Var<T> upsample_nearest2x(Var<T>);                                                     \
  template Var<T> sum(Var<T>);                                                                    \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);                \
  template Tensor<T> maxpool3x3(const Tensor<T>&);

CORNERDET_INSTANTIATE_OPS(float)
CORNERDET_INSTANTIATE_OPS(double)

}  // namespace cornerdet
