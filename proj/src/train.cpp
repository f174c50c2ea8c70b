#include "cornerdet/train.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cornerdet {

TargetConfig targets_for_model(const ModelConfig& model, TargetConfig base) {
  base.downsample = model.downsample;
  base.num_classes = model.num_classes;
  base.out_height = model.output_size();
  base.out_width = model.output_size();
  return base;
}

template <typename T>
LossGraph<T> model_loss(Graph<T>& g, Model<T>& model, const Tensor<T>& images,
                        const std::vector<TargetMaps>& targets, const LossConfig& cfg, bool train) {
  if (targets.size() != images.dim(0)) throw std::invalid_argument("model_loss: need one target set per image");
  std::vector<Tensor<T>> tl_items, br_items;
  std::vector<std::vector<CornerIndex>> corners;
  std::vector<int> counts;
  for (const auto& t : targets) {
    tl_items.push_back(t.tl_heat.template cast<T>());
    br_items.push_back(t.br_heat.template cast<T>());
    corners.push_back(t.corners);
    counts.push_back(static_cast<int>(t.corners.size()));
  }
  const Tensor<T> gt_tl = stack_batch<T>(tl_items);
  const Tensor<T> gt_br = stack_batch<T>(br_items);

  const auto outs = model.forward(g, g.constant(images), train);
  LossGraph<T> res;
  std::vector<Var<T>> stack_losses;
  for (const auto& o : outs) {
    Var<T> det = add(det_loss(o.tl.heat, gt_tl, counts, cfg), det_loss(o.br.heat, gt_br, counts, cfg));
    auto [pull, push] = pull_push_loss(o.tl.emb, o.br.emb, corners, cfg);
    Var<T> off = add(offset_loss(o.tl.off, corners, CornerType::TopLeft),
                     offset_loss(o.br.off, corners, CornerType::BottomRight));
    res.parts.det += det.value()[0];
    res.parts.pull += pull.value()[0];
    res.parts.push += push.value()[0];
    res.parts.off += off.value()[0];
    stack_losses.push_back(total_loss(det, pull, push, off, cfg));
  }
  res.total = stack_losses.size() == 1 ? stack_losses.front()
                                       : weighted_sum(stack_losses, std::vector<T>(stack_losses.size(), T(1)));
  return res;
}

template <typename T>
StepLog train_step(Model<T>& model, const std::vector<Sample>& batch, const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const TargetConfig tcfg = targets_for_model(model.config(), cfg.targets);
  std::vector<TargetMaps> targets;
  std::vector<Tensor<T>> images;
  for (const auto& s : batch) {
    if (s.annotations.empty()) throw std::invalid_argument("train_step: image " + s.id + " has no objects");
    targets.push_back(make_targets(s.annotations, tcfg));
    images.push_back(s.image.template cast<T>());
  }
  model.zero_grad();
  Graph<T> g;
  LossGraph<T> lg = model_loss(g, model, stack_batch<T>(images), targets, cfg.loss, true);
  const double total = lg.total.value()[0];
  if (!std::isfinite(total)) {
    std::string ids;
    for (std::size_t i = 0; i < batch.size(); ++i) ids += (i ? "," : "") + std::to_string(i) + ":" + batch[i].id;
    throw std::runtime_error("non-finite loss (det=" + std::to_string(lg.parts.det) + " pull=" +
                             std::to_string(lg.parts.pull) + " push=" + std::to_string(lg.parts.push) +
                             " off=" + std::to_string(lg.parts.off) + ") for batch [" + ids + "]");
  }
  g.backward(lg.total);
  const auto params = model.parameters();
  adam_step<T>(params, cfg.adam);
  return StepLog{lg.parts, total};
}

Trainer::Trainer(Model<float>& model, const std::vector<Sample>& data, TrainConfig cfg)
    : model_(model), data_(data), cfg_(std::move(cfg)), rng_(cfg_.seed), order_(data.size()) {
  if (data_.empty()) throw std::invalid_argument("Trainer: empty training set");
  if (cfg_.batch_size < 1) throw std::invalid_argument("Trainer: batch_size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::vector<Sample> Trainer::next_batch() {
  std::vector<Sample> batch;
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < cfg_.batch_size; ++i) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const Sample& s = data_[order_[cursor_++]];
    batch.push_back(cfg_.flip_augment && coin(rng_) ? hflip(s) : s);
  }
  return batch;
}

StepLog Trainer::step() {
  StepLog log = train_step(model_, next_batch(), cfg_);
  ++steps_;
  return log;
}

void Trainer::run(int iterations, const std::function<void(int, const StepLog&)>& on_step) {
  for (int i = 0; i < iterations; ++i) {
    const StepLog log = step();
    if (on_step) on_step(steps_, log);
  }
}

template LossGraph<float> model_loss(Graph<float>&, Model<float>&, const Tensor<float>&,
                                     const std::vector<TargetMaps>&, const LossConfig&, bool);
template LossGraph<double> model_loss(Graph<double>&, Model<double>&, const Tensor<double>&,
                                      const std::vector<TargetMaps>&, const LossConfig&, bool);
template StepLog train_step(Model<float>&, const std::vector<Sample>&, const TrainConfig&);
template StepLog train_step(Model<double>&, const std::vector<Sample>&, const TrainConfig&);

}  // namespace cornerdet
