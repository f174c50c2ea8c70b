#include "cornerdet/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cornerdet/ops.hpp"

namespace cornerdet {
namespace {

struct Dims {
  std::size_t b, c, h, w;
};

Dims batch_dims(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + ": expected [B,C,H,W] or [C,H,W], got " + shape_str(s));
}

struct Gather {
  int x, y;
};

Gather corner_cell(const CornerIndex& k, CornerType type) {
  return type == CornerType::TopLeft ? Gather{k.tl_x, k.tl_y} : Gather{k.br_x, k.br_y};
}

void check_cell(const Gather& g, const Dims& d, const char* op) {
  if (g.x < 0 || g.y < 0 || static_cast<std::size_t>(g.x) >= d.w || static_cast<std::size_t>(g.y) >= d.h) {
    throw std::out_of_range(std::string(op) + ": corner index out of bounds");
  }
}

template <typename T>
T smooth_l1(T d) {
  const T a = std::abs(d);
  return a < T(1) ? T(0.5) * d * d : a - T(0.5);
}

template <typename T>
T smooth_l1_grad(T d) {
  if (std::abs(d) < T(1)) return d;
  return d > T(0) ? T(1) : T(-1);
}

}  // namespace

template <typename T>
Var<T> det_loss(Var<T> pred_heat, const Tensor<T>& gt_heat, std::span<const int> num_objects,
                const LossConfig& cfg) {
  const Dims d = batch_dims(pred_heat.shape(), "det_loss");
  if (gt_heat.numel() != pred_heat.value().numel()) {
    throw ShapeError("det_loss: ground truth " + shape_str(gt_heat.shape()) + " does not match prediction " +
                     shape_str(pred_heat.shape()));
  }
  if (num_objects.size() != d.b) throw std::invalid_argument("det_loss: need one object count per image");
  for (int n : num_objects) {
    if (n < 1) throw std::invalid_argument("det_loss: every image needs at least one object (N = 0)");
  }
  const T alpha = static_cast<T>(cfg.focal_alpha);
  const T beta = static_cast<T>(cfg.focal_beta);
  const T eps = static_cast<T>(cfg.prob_eps);
  const std::size_t per = d.c * d.h * d.w;
  const Tensor<T>& p = pred_heat.value();

  std::vector<T> scale(d.b);
  double total = 0;
  for (std::size_t b = 0; b < d.b; ++b) {
    scale[b] = T(1) / (static_cast<T>(num_objects[b]) * static_cast<T>(d.b));
    double acc = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const T pi = std::clamp(p[i], eps, T(1) - eps);
      const T y = gt_heat[i];
      if (y == T(1)) {
        acc += std::pow(T(1) - pi, alpha) * std::log(pi);
      } else {
        acc += std::pow(T(1) - y, beta) * std::pow(pi, alpha) * std::log(T(1) - pi);
      }
    }
    total += -acc * scale[b];
  }

  const int pi_id = pred_heat.id;
  return pred_heat.graph->record(
      "det_loss", {pred_heat}, Tensor<T>::scalar(static_cast<T>(total)),
      [pi_id, gt = gt_heat, scale, per, alpha, beta, eps](Graph<T>& g, int self) {
        const T up = g.grad(self)[0];
        const Tensor<T>& p = g.value(pi_id);
        Tensor<T>& dp = g.grad(pi_id);
        for (std::size_t i = 0; i < p.numel(); ++i) {
          if (p[i] < eps || p[i] > T(1) - eps) continue;  // clamped: flat
          const T pi = p[i];
          const T y = gt[i];
          T dl;
          if (y == T(1)) {
            dl = -alpha * std::pow(T(1) - pi, alpha - T(1)) * std::log(pi) + std::pow(T(1) - pi, alpha) / pi;
          } else {
            dl = std::pow(T(1) - y, beta) *
                 (alpha * std::pow(pi, alpha - T(1)) * std::log(T(1) - pi) - std::pow(pi, alpha) / (T(1) - pi));
          }
          dp[i] += -dl * scale[i / per] * up;
        }
      });
}

template <typename T>
Var<T> offset_loss(Var<T> pred_off, std::span<const std::vector<CornerIndex>> corners, CornerType type) {
  const Dims d = batch_dims(pred_off.shape(), "offset_loss");
  if (d.c != 2) throw ShapeError("offset_loss: dimension 1 must be 2 (x, y offsets)");
  if (corners.size() != d.b) throw std::invalid_argument("offset_loss: need one corner list per image");
  const Tensor<T>& off = pred_off.value();
  const std::size_t plane = d.h * d.w;

  struct Term {
    std::size_t ix, iy;
    T dx, dy, scale;
  };
  std::vector<Term> terms;
  double total = 0;
  for (std::size_t b = 0; b < d.b; ++b) {
    if (corners[b].empty()) throw std::invalid_argument("offset_loss: empty corner list");
    const T s = T(1) / (static_cast<T>(corners[b].size()) * static_cast<T>(d.b));
    for (const auto& k : corners[b]) {
      const Gather cell = corner_cell(k, type);
      check_cell(cell, d, "offset_loss");
      const std::size_t pos = static_cast<std::size_t>(cell.y) * d.w + static_cast<std::size_t>(cell.x);
      const std::size_t ix = (b * 2 + 0) * plane + pos;
      const std::size_t iy = (b * 2 + 1) * plane + pos;
      const T tx = type == CornerType::TopLeft ? k.tl_off_x : k.br_off_x;
      const T ty = type == CornerType::TopLeft ? k.tl_off_y : k.br_off_y;
      const T dx = off[ix] - tx, dy = off[iy] - ty;
      total += (smooth_l1(dx) + smooth_l1(dy)) * s;
      terms.push_back({ix, iy, dx, dy, s});
    }
  }
  const int oi = pred_off.id;
  return pred_off.graph->record("offset_loss", {pred_off}, Tensor<T>::scalar(static_cast<T>(total)),
                                [oi, terms = std::move(terms)](Graph<T>& g, int self) {
                                  const T up = g.grad(self)[0];
                                  Tensor<T>& dg = g.grad(oi);
                                  for (const auto& t : terms) {
                                    dg[t.ix] += smooth_l1_grad(t.dx) * t.scale * up;
                                    dg[t.iy] += smooth_l1_grad(t.dy) * t.scale * up;
                                  }
                                });
}

template <typename T>
std::pair<Var<T>, Var<T>> pull_push_loss(Var<T> tl_emb, Var<T> br_emb,
                                         std::span<const std::vector<CornerIndex>> corners,
                                         const LossConfig& cfg) {
  const Dims d = batch_dims(tl_emb.shape(), "pull_push_loss");
  if (tl_emb.shape() != br_emb.shape()) throw ShapeError("pull_push_loss: embedding shapes differ");
  if (d.c != 1) throw ShapeError("pull_push_loss: dimension 1 must be 1 (scalar embeddings)");
  if (corners.size() != d.b) throw std::invalid_argument("pull_push_loss: need one corner list per image");
  const Tensor<T>& et = tl_emb.value();
  const Tensor<T>& eb = br_emb.value();
  const T delta = static_cast<T>(cfg.delta);

  struct Obj {
    std::size_t it, ib;
  };
  std::vector<std::vector<Obj>> objs(d.b);
  double pull = 0, push = 0;
  for (std::size_t b = 0; b < d.b; ++b) {
    if (corners[b].empty()) throw std::invalid_argument("pull_push_loss: N must be >= 1");
    for (const auto& k : corners[b]) {
      const Gather t = corner_cell(k, CornerType::TopLeft);
      const Gather r = corner_cell(k, CornerType::BottomRight);
      check_cell(t, d, "pull_push_loss");
      check_cell(r, d, "pull_push_loss");
      objs[b].push_back({b * d.h * d.w + static_cast<std::size_t>(t.y) * d.w + static_cast<std::size_t>(t.x),
                         b * d.h * d.w + static_cast<std::size_t>(r.y) * d.w + static_cast<std::size_t>(r.x)});
    }
    const auto& o = objs[b];
    const double n = static_cast<double>(o.size());
    double pb = 0;
    std::vector<double> mean(o.size());
    for (std::size_t k = 0; k < o.size(); ++k) {
      const double a = et[o[k].it], c = eb[o[k].ib];
      mean[k] = (a + c) / 2;
      pb += (a - mean[k]) * (a - mean[k]) + (c - mean[k]) * (c - mean[k]);
    }
    pull += pb / n / static_cast<double>(d.b);
    if (o.size() > 1) {
      double qb = 0;
      for (std::size_t k = 0; k < o.size(); ++k) {
        for (std::size_t j = 0; j < o.size(); ++j) {
          if (j != k) qb += std::max(0.0, static_cast<double>(delta) - std::abs(mean[k] - mean[j]));
        }
      }
      push += qb / (n * (n - 1)) / static_cast<double>(d.b);
    }
  }

  Graph<T>& graph = *tl_emb.graph;
  const int ti = tl_emb.id, bi = br_emb.id;
  const T nb = static_cast<T>(d.b);
  Var<T> pull_var = graph.record(
      "pull_loss", {tl_emb, br_emb}, Tensor<T>::scalar(static_cast<T>(pull)),
      [ti, bi, objs, nb](Graph<T>& g, int self) {
        const T up = g.grad(self)[0];
        const Tensor<T>& et = g.value(ti);
        const Tensor<T>& eb = g.value(bi);
        Tensor<T>& dt = g.grad(ti);
        Tensor<T>& db = g.grad(bi);
        for (const auto& o : objs) {
          const T s = up / (static_cast<T>(o.size()) * nb);
          // (a - e)^2 + (b - e)^2 with e = (a + b) / 2 equals (a - b)^2 / 2.
          for (const auto& k : o) {
            const T diff = et[k.it] - eb[k.ib];
            dt[k.it] += diff * s;
            db[k.ib] -= diff * s;
          }
        }
      });
  Var<T> push_var = graph.record(
      "push_loss", {tl_emb, br_emb}, Tensor<T>::scalar(static_cast<T>(push)),
      [ti, bi, objs, nb, delta](Graph<T>& g, int self) {
        const T up = g.grad(self)[0];
        const Tensor<T>& et = g.value(ti);
        const Tensor<T>& eb = g.value(bi);
        Tensor<T>& dt = g.grad(ti);
        Tensor<T>& db = g.grad(bi);
        for (const auto& o : objs) {
          if (o.size() < 2) continue;
          const T n = static_cast<T>(o.size());
          const T s = up / (n * (n - T(1)) * nb);
          std::vector<T> mean(o.size()), dmean(o.size(), T(0));
          for (std::size_t k = 0; k < o.size(); ++k) mean[k] = (et[o[k].it] + eb[o[k].ib]) / T(2);
          for (std::size_t k = 0; k < o.size(); ++k) {
            for (std::size_t j = 0; j < o.size(); ++j) {
              if (j == k) continue;
              const T diff = mean[k] - mean[j];
              if (delta - std::abs(diff) <= T(0)) continue;
              const T sg = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
              dmean[k] -= sg * s;
              dmean[j] += sg * s;
            }
          }
          for (std::size_t k = 0; k < o.size(); ++k) {
            dt[o[k].it] += dmean[k] / T(2);
            db[o[k].ib] += dmean[k] / T(2);
          }
        }
      });
  return {pull_var, push_var};
}

double total_loss(const LossParts& parts, const LossConfig& cfg) {
  const std::pair<const char*, double> named[] = {
      {"det", parts.det}, {"pull", parts.pull}, {"push", parts.push}, {"off", parts.off}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("total_loss: non-finite ") + name + " loss");
  }
  return parts.det + cfg.pull_weight * parts.pull + cfg.push_weight * parts.push + cfg.offset_weight * parts.off;
}

template <typename T>
Var<T> total_loss(Var<T> det, Var<T> pull, Var<T> push, Var<T> off, const LossConfig& cfg) {
  total_loss(LossParts{det.value()[0], pull.value()[0], push.value()[0], off.value()[0]}, cfg);
  return weighted_sum<T>({det, pull, push, off},
                         {T(1), static_cast<T>(cfg.pull_weight), static_cast<T>(cfg.push_weight),
                          static_cast<T>(cfg.offset_weight)});
}

#define CORNERDET_INSTANTIATE_LOSSES(T)                                                                   \
  template Var<T> det_loss(Var<T>, const Tensor<T>&, std::span<const int>, const LossConfig&);            \
  template Var<T> offset_loss(Var<T>, std::span<const std::vector<CornerIndex>>, CornerType);             \
  template std::pair<Var<T>, Var<T>> pull_push_loss(Var<T>, Var<T>, std::span<const std::vector<CornerIndex>>, \
                                                    const LossConfig&);                                   \
  template Var<T> total_loss(Var<T>, Var<T>, Var<T>, Var<T>, const LossConfig&);

CORNERDET_INSTANTIATE_LOSSES(float)
CORNERDET_INSTANTIATE_LOSSES(double)

}  // namespace cornerdet
