#include "cornerdet/model.hpp"

#include <cmath>
#include <stdexcept>

#include "cornerdet/corner_pool.hpp"

namespace cornerdet {

void ModelConfig::validate() const {
  if (downsample != 4) throw std::invalid_argument("model: downsample must be 4 (stride-2 conv + stride-2 residual)");
  if (hg_depth < 1) throw std::invalid_argument("model: hg_depth must be >= 1");
  if (channels.size() != static_cast<std::size_t>(hg_depth) + 1) {
    throw std::invalid_argument("model: channels needs hg_depth + 1 = " + std::to_string(hg_depth + 1) +
                                " entries, got " + std::to_string(channels.size()));
  }
  for (int c : channels) {
    if (c < 1) throw std::invalid_argument("model: channel counts must be positive");
  }
  if (residuals < 1) throw std::invalid_argument("model: residuals must be >= 1");
  if (stacks < 1) throw std::invalid_argument("model: stacks must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("model: num_classes must be >= 1");
  if (in_channels < 1) throw std::invalid_argument("model: in_channels must be >= 1");
  if (!(heat_prior > 0 && heat_prior < 1)) throw std::invalid_argument("model: heat_prior must lie in (0, 1)");
  const std::size_t unit = static_cast<std::size_t>(downsample) << hg_depth;
  if (input_size == 0 || input_size % unit != 0) {
    throw std::invalid_argument("model: input size " + std::to_string(input_size) + " is not divisible by n*2^depth = " +
                                std::to_string(unit));
  }
}

template <typename T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed) {
  cfg_.validate();
  const int c0 = cfg_.channels[0];
  stem_conv_ = make_convbn("stem.conv", static_cast<int>(cfg_.in_channels), c0, 3, 2);
  stem_res_ = make_residual("stem.res", c0, c0, 2);

  for (int s = 0; s < cfg_.stacks; ++s) {
    const std::string p = "stack" + std::to_string(s) + ".";
    Stack st;
    for (int l = 0; l < cfg_.hg_depth; ++l) {
      const std::string lp = p + "hg.l" + std::to_string(l) + ".";
      const int cur = cfg_.channels[static_cast<std::size_t>(l)];
      const int nxt = cfg_.channels[static_cast<std::size_t>(l) + 1];
      Level lv;
      for (int r = 0; r < cfg_.residuals; ++r) lv.up.push_back(make_residual(lp + "up" + std::to_string(r), cur, cur, 1));
      lv.down.push_back(make_residual(lp + "down0", cur, nxt, 2));
      for (int r = 1; r < cfg_.residuals; ++r) lv.down.push_back(make_residual(lp + "down" + std::to_string(r), nxt, nxt, 1));
      for (int r = 0; r + 1 < cfg_.residuals; ++r) lv.back.push_back(make_residual(lp + "back" + std::to_string(r), nxt, nxt, 1));
      lv.back.push_back(make_residual(lp + "back" + std::to_string(cfg_.residuals - 1), nxt, cur, 1));
      st.hg.levels.push_back(std::move(lv));
    }
    const int deepest = cfg_.channels.back();
    for (int r = 0; r < cfg_.residuals; ++r) {
      st.hg.middle.push_back(make_residual(p + "hg.mid" + std::to_string(r), deepest, deepest, 1));
    }
    st.cnv = make_convbn(p + "cnv", c0, c0, 3, 1);
    st.tl = make_prediction(p + "tl", c0);
    st.br = make_prediction(p + "br", c0);
    if (s + 1 < cfg_.stacks) {
      st.inter_proj = make_convbn(p + "inter_proj", c0, c0, 1, 1);
      st.cnv_proj = make_convbn(p + "cnv_proj", c0, c0, 1, 1);
      st.inter_res = make_residual(p + "inter_res", c0, c0, 1);
    }
    stacks_.push_back(std::move(st));
  }
}

template <typename T>
Parameter<T>* Model<T>::make_param(const std::string& name, Shape shape, double bound) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(bound > 0 ? dist(rng_) : 0.0);
  params_.emplace_back(name, std::move(t));
  return &params_.back();
}

template <typename T>
typename Model<T>::Conv Model<T>::make_conv(const std::string& name, int cin, int cout, int k, int stride,
                                            double weight_scale) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  Conv c;
  c.weight = make_param(name + ".weight", Shape{static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                                                static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                        bound * weight_scale);
  c.bias = make_param(name + ".bias", Shape{static_cast<std::size_t>(cout)}, bound);
  c.stride = stride;
  c.pad = k / 2;
  return c;
}

template <typename T>
typename Model<T>::ConvBn Model<T>::make_convbn(const std::string& name, int cin, int cout, int k, int stride) {
  ConvBn cb;
  cb.conv = make_conv(name + ".conv", cin, cout, k, stride);
  params_.emplace_back(name + ".bn.gamma", Tensor<T>(Shape{static_cast<std::size_t>(cout)}, T(1)));
  cb.gamma = &params_.back();
  params_.emplace_back(name + ".bn.beta", Tensor<T>(Shape{static_cast<std::size_t>(cout)}, T(0)));
  cb.beta = &params_.back();
  bn_states_.emplace_back(name + ".bn", BatchNormState<T>(static_cast<std::size_t>(cout)));
  cb.stats = &bn_states_.back().second;
  return cb;
}

template <typename T>
typename Model<T>::Residual Model<T>::make_residual(const std::string& name, int cin, int cout, int stride) {
  Residual r;
  r.a = make_convbn(name + ".a", cin, cout, 3, stride);
  r.b = make_convbn(name + ".b", cout, cout, 3, 1);
  r.has_skip = stride != 1 || cin != cout;
  if (r.has_skip) r.skip = make_convbn(name + ".skip", cin, cout, 1, stride);
  return r;
}

template <typename T>
typename Model<T>::Head Model<T>::make_head(const std::string& name, int cin, int cout, double bias_value,
                                            bool set_bias) {
  Head h;
  h.hidden = make_conv(name + ".hidden", cin, cin, 3, 1);
  // Small output projection so the initial prediction is dominated by the bias.
  h.out = make_conv(name + ".out", cin, cout, 1, 1, 0.1);
  if (set_bias) h.out.bias->value.fill(static_cast<T>(bias_value));
  return h;
}

template <typename T>
typename Model<T>::PredictionModule Model<T>::make_prediction(const std::string& name, int c) {
  PredictionModule p;
  p.branch1 = make_convbn(name + ".branch1", c, c, 3, 1);
  p.branch2 = make_convbn(name + ".branch2", c, c, 3, 1);
  p.pooled = make_convbn(name + ".pooled", c, c, 3, 1);
  p.shortcut = make_convbn(name + ".shortcut", c, c, 1, 1);
  p.post = make_convbn(name + ".post", c, c, 3, 1);
  const double prior_bias = -std::log((1.0 - cfg_.heat_prior) / cfg_.heat_prior);
  p.heat = make_head(name + ".heat", c, cfg_.num_classes, prior_bias, true);
  p.emb = make_head(name + ".emb", c, 1, 0.0, false);
  p.off = make_head(name + ".off", c, 2, 0.0, false);
  return p;
}

template <typename T>
Var<T> Model<T>::run(Graph<T>& g, Var<T> x, const Conv& c) {
  return conv2d(x, g.param(*c.weight), g.param(*c.bias), c.stride, c.pad);
}

template <typename T>
Var<T> Model<T>::run(Graph<T>& g, Var<T> x, const ConvBn& c, bool relu_after, bool train) {
  Var<T> y = run(g, x, c.conv);
  y = batchnorm2d(y, g.param(*c.gamma), g.param(*c.beta), *c.stats, BatchNormOptions{train, 0.1, 1e-5});
  return relu_after ? relu(y) : y;
}

template <typename T>
Var<T> Model<T>::run(Graph<T>& g, Var<T> x, const Residual& r, bool train) {
  Var<T> y = run(g, x, r.a, true, train);
  y = run(g, y, r.b, false, train);
  Var<T> s = r.has_skip ? run(g, x, r.skip, false, train) : x;
  return relu(add(y, s));
}

template <typename T>
Var<T> Model<T>::run_hourglass(Graph<T>& g, Var<T> x, const Hourglass& hg, std::size_t level, bool train) {
  const Level& lv = hg.levels[level];
  Var<T> up = x;
  for (const auto& r : lv.up) up = run(g, up, r, train);
  Var<T> low = x;
  for (const auto& r : lv.down) low = run(g, low, r, train);
  if (level + 1 < hg.levels.size()) {
    low = run_hourglass(g, low, hg, level + 1, train);
  } else {
    for (const auto& r : hg.middle) low = run(g, low, r, train);
  }
  for (const auto& r : lv.back) low = run(g, low, r, train);
  return add(up, upsample_nearest2x(low));
}

template <typename T>
CornerHeads<T> Model<T>::run_prediction(Graph<T>& g, Var<T> x, const PredictionModule& p, bool top_left, bool train) {
  Var<T> a = run(g, x, p.branch1, true, train);
  Var<T> b = run(g, x, p.branch2, true, train);
  Var<T> pooled;
  if (!cfg_.corner_pool) {
    pooled = add(a, b);
  } else if (top_left) {
    pooled = corner_pool_topleft(a, b);
  } else {
    pooled = corner_pool_bottomright(a, b);
  }
  Var<T> y = run(g, pooled, p.pooled, false, train);
  Var<T> s = run(g, x, p.shortcut, false, train);
  y = relu(add(y, s));
  y = run(g, y, p.post, true, train);

  auto head = [&](const Head& h) { return run(g, relu(run(g, y, h.hidden)), h.out); };
  return CornerHeads<T>{sigmoid(head(p.heat)), head(p.emb), head(p.off)};
}

template <typename T>
std::vector<StackOutput<T>> Model<T>::forward(Graph<T>& g, Var<T> images, bool train) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.input_size || s[3] != cfg_.input_size) {
    throw ShapeError("model: expected input [N," + std::to_string(cfg_.in_channels) + "," +
                     std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) + "], got " +
                     shape_str(s));
  }
  Var<T> x = run(g, images, stem_conv_, true, train);
  x = run(g, x, stem_res_, train);

  std::vector<StackOutput<T>> outs;
  for (std::size_t i = 0; i < stacks_.size(); ++i) {
    const Stack& st = stacks_[i];
    Var<T> hg = run_hourglass(g, x, st.hg, 0, train);
    Var<T> cnv = run(g, hg, st.cnv, true, train);
    outs.push_back({run_prediction(g, cnv, st.tl, true, train), run_prediction(g, cnv, st.br, false, train)});
    if (i + 1 < stacks_.size()) {
      // Features, not predictions, are carried into the next stack.
      Var<T> merged = relu(add(run(g, x, st.inter_proj, false, train), run(g, cnv, st.cnv_proj, false, train)));
      x = run(g, merged, st.inter_res, train);
    }
  }
  return outs;
}

template <typename T>
Predictions Model<T>::predict(const Tensor<float>& images) {
  Graph<T> g(false);
  Var<T> in = g.constant(images.template cast<T>());
  const auto outs = forward(g, in, false);
  const auto& last = outs.back();
  auto tf = [](Var<T> v) { return v.value().template cast<float>(); };
  return Predictions{{tf(last.tl.heat), tf(last.tl.emb), tf(last.tl.off)},
                     {tf(last.br.heat), tf(last.br.emb), tf(last.br.off)}};
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
TensorArchive Model<T>::state() const {
  TensorArchive a;
  for (const auto& p : params_) a.emplace(p.name, p.value.template cast<float>());
  for (const auto& [name, st] : bn_states_) {
    a.emplace(name + ".running_mean", st.running_mean.template cast<float>());
    a.emplace(name + ".running_var", st.running_var.template cast<float>());
  }
  return a;
}

template <typename T>
void Model<T>::load_state(const TensorArchive& archive) {
  auto fetch = [&](const std::string& name, Tensor<T>& dst) {
    auto it = archive.find(name);
    if (it == archive.end()) throw FormatError("checkpoint is missing " + name);
    if (it->second.shape() != dst.shape()) {
      throw FormatError("checkpoint entry " + name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                        shape_str(dst.shape()));
    }
    dst = it->second.template cast<T>();
  };
  for (auto& p : params_) fetch(p.name, p.value);
  for (auto& [name, st] : bn_states_) {
    fetch(name + ".running_mean", st.running_mean);
    fetch(name + ".running_var", st.running_var);
  }
}

template class Model<float>;
template class Model<double>;

}  // namespace cornerdet
