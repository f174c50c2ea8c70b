#pragma once

#include <span>
#include <utility>
#include <vector>

#include "cornerdet/autodiff.hpp"
#include "cornerdet/targets.hpp"

namespace cornerdet {

/// Loss hyper-parameters. The focal exponents and the term weights are
/// separate knobs even though both pairs are often written alpha/beta.
struct LossConfig {
  double focal_alpha = 2;
  double focal_beta = 4;
  double delta = 1;          // push margin
  double pull_weight = 0.1;
  double push_weight = 0.1;
  double offset_weight = 1;
  double prob_eps = 1e-6;    // probabilities clamped to [eps, 1-eps] before logs
};

enum class CornerType { TopLeft, BottomRight };

/// Focal-style detection loss with Gaussian penalty reduction.
/// `pred_heat` holds sigmoid outputs, [B,C,H,W] (or [C,H,W] for one image);
/// `gt_heat` has the same shape. Each image's sum is divided by its object
/// count, then images are averaged.
template <typename T>
Var<T> det_loss(Var<T> pred_heat, const Tensor<T>& gt_heat, std::span<const int> num_objects,
                const LossConfig& cfg);

/// Smooth-L1 between predicted offsets [B,2,H,W] and the targets, gathered at
/// ground-truth corner cells only. `corners[b]` lists image b's objects.
template <typename T>
Var<T> offset_loss(Var<T> pred_off, std::span<const std::vector<CornerIndex>> corners, CornerType type);

/// Pull and push losses over 1-d embeddings [B,1,H,W] gathered at the
/// ground-truth corners. Push sums ordered pairs and divides by N(N-1); it is 0 when N = 1.
template <typename T>
std::pair<Var<T>, Var<T>> pull_push_loss(Var<T> tl_emb, Var<T> br_emb,
                                         std::span<const std::vector<CornerIndex>> corners,
                                         const LossConfig& cfg);

struct LossParts {
  double det = 0;
  double pull = 0;
  double push = 0;
  double off = 0;
};

/// det + pull_weight*pull + push_weight*push + offset_weight*off.
/// Throws if any part is not finite, naming it.
double total_loss(const LossParts& parts, const LossConfig& cfg);

/// Graph version of total_loss over scalar nodes.
template <typename T>
Var<T> total_loss(Var<T> det, Var<T> pull, Var<T> push, Var<T> off, const LossConfig& cfg);

}  // namespace cornerdet
