#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "cornerdet/autodiff.hpp"
#include "cornerdet/checkpoint.hpp"
#include "cornerdet/ops.hpp"

namespace cornerdet {

/// Miniature hourglass detector dimensions.
struct ModelConfig {
  std::size_t input_size = 64;        // square input, pixels
  std::size_t in_channels = 3;
  int downsample = 4;                 // stem reduction; fixed by the architecture
  int hg_depth = 2;                   // stride-2 stages inside each hourglass
  std::vector<int> channels{32, 48, 64};  // one entry per hourglass resolution (hg_depth + 1)
  int residuals = 1;                  // residual modules per stage
  int stacks = 1;                     // >1 adds intermediate supervision
  int num_classes = 3;
  double heat_prior = 0.1;            // initial heatmap probability
  bool corner_pool = true;            // false: pooled branch replaced by a plain sum

  std::size_t output_size() const { return input_size / static_cast<std::size_t>(downsample); }
  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
};

/// Head outputs for one corner type.
template <typename T>
struct CornerHeads {
  Var<T> heat;  // [B,C,H,W] after sigmoid
  Var<T> emb;   // [B,1,H,W]
  Var<T> off;   // [B,2,H,W]
};

template <typename T>
struct StackOutput {
  CornerHeads<T> tl;
  CornerHeads<T> br;
};

/// Plain tensors for inference.
struct HeadTensors {
  Tensor<float> heat;
  Tensor<float> emb;
  Tensor<float> off;
};

struct Predictions {
  HeadTensors tl;
  HeadTensors br;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  /// One output per stack; the last entry is the final prediction.
  std::vector<StackOutput<T>> forward(Graph<T>& g, Var<T> images, bool train);

  /// Final-stack predictions in eval mode (running batch-norm statistics).
  Predictions predict(const Tensor<float>& images);

  std::vector<Parameter<T>*> parameters();
  std::size_t parameter_count() const;
  void zero_grad();

  /// Parameters and batch-norm running statistics, keyed by name.
  TensorArchive state() const;
  void load_state(const TensorArchive& archive);

  const ModelConfig& config() const { return cfg_; }

 private:
  struct Conv {
    Parameter<T>* weight;
    Parameter<T>* bias;
    int stride;
    int pad;
  };
  struct ConvBn {
    Conv conv;
    Parameter<T>* gamma;
    Parameter<T>* beta;
    BatchNormState<T>* stats;
  };
  struct Residual {
    ConvBn a;
    ConvBn b;
    bool has_skip;
    ConvBn skip;
  };
  struct Level {
    std::vector<Residual> up;
    std::vector<Residual> down;
    std::vector<Residual> back;
  };
  struct Hourglass {
    std::vector<Level> levels;
    std::vector<Residual> middle;
  };
  struct Head {
    Conv hidden;
    Conv out;
  };
  struct PredictionModule {
    ConvBn branch1;
    ConvBn branch2;
    ConvBn pooled;
    ConvBn shortcut;
    ConvBn post;
    Head heat;
    Head emb;
    Head off;
  };
  struct Stack {
    Hourglass hg;
    ConvBn cnv;
    PredictionModule tl;
    PredictionModule br;
    // Merge into the next stack; unused on the last stack.
    ConvBn inter_proj;
    ConvBn cnv_proj;
    Residual inter_res;
  };

  Parameter<T>* make_param(const std::string& name, Shape shape, double bound);
  Conv make_conv(const std::string& name, int cin, int cout, int k, int stride, double weight_scale = 1.0);
  ConvBn make_convbn(const std::string& name, int cin, int cout, int k, int stride);
  Residual make_residual(const std::string& name, int cin, int cout, int stride);
  Head make_head(const std::string& name, int cin, int cout, double bias_value, bool set_bias);
  PredictionModule make_prediction(const std::string& name, int c);

  Var<T> run(Graph<T>& g, Var<T> x, const Conv& c);
  Var<T> run(Graph<T>& g, Var<T> x, const ConvBn& c, bool relu_after, bool train);
  Var<T> run(Graph<T>& g, Var<T> x, const Residual& r, bool train);
  Var<T> run_hourglass(Graph<T>& g, Var<T> x, const Hourglass& hg, std::size_t level, bool train);
  CornerHeads<T> run_prediction(Graph<T>& g, Var<T> x, const PredictionModule& p, bool top_left, bool train);

  ModelConfig cfg_;
  std::mt19937_64 rng_;
  std::deque<Parameter<T>> params_;
  std::deque<std::pair<std::string, BatchNormState<T>>> bn_states_;
  ConvBn stem_conv_;
  Residual stem_res_;
  std::vector<Stack> stacks_;
};

}  // namespace cornerdet
