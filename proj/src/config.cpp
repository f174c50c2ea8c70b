#include "cornerdet/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>

namespace cornerdet {
namespace {

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot use '" + value + "' (" + expected + ")");
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "expected a number");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "expected an integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "expected true or false");
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string fmt(long long v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

// Field builders over an accessor returning a reference into RunConfig.
template <typename Acc>
Field real(const char* key, Acc acc) {
  return Field{key, [acc, key](RunConfig& c, const std::string& v) { acc(c) = to_double(key, v); },
               [acc](const RunConfig& c) { return fmt(static_cast<double>(acc(c))); }};
}

template <typename Acc>
Field integer(const char* key, Acc acc) {
  return Field{key,
               [acc, key](RunConfig& c, const std::string& v) {
                 using Target = std::remove_reference_t<decltype(acc(c))>;
                 const long long x = to_int(key, v);
                 if constexpr (std::is_unsigned_v<Target>) {
                   if (x < 0) bad_value(key, v, "must not be negative");
                 }
                 acc(c) = static_cast<Target>(x);
               },
               [acc](const RunConfig& c) { return fmt(static_cast<long long>(acc(c))); }};
}

template <typename Acc>
Field boolean(const char* key, Acc acc) {
  return Field{key, [acc, key](RunConfig& c, const std::string& v) { acc(c) = to_bool(key, v); },
               [acc](const RunConfig& c) { return fmt(static_cast<bool>(acc(c))); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      // losses
      real("focal_alpha", [](auto& c) -> auto& { return c.train.loss.focal_alpha; }),
      real("focal_beta", [](auto& c) -> auto& { return c.train.loss.focal_beta; }),
      real("delta", [](auto& c) -> auto& { return c.train.loss.delta; }),
      real("pull_weight", [](auto& c) -> auto& { return c.train.loss.pull_weight; }),
      real("push_weight", [](auto& c) -> auto& { return c.train.loss.push_weight; }),
      real("offset_weight", [](auto& c) -> auto& { return c.train.loss.offset_weight; }),
      real("prob_eps", [](auto& c) -> auto& { return c.train.loss.prob_eps; }),
      // targets
      real("t", [](auto& c) -> auto& { return c.train.targets.iou_threshold; }),
      integer("n", [](auto& c) -> auto& { return c.model.downsample; }),
      integer("min_radius", [](auto& c) -> auto& { return c.train.targets.min_radius; }),
      Field{"radius_mode",
            [](RunConfig& c, const std::string& v) {
              try {
                c.train.targets.radius_mode = parse_radius_mode(v, &c.train.targets.fixed_radius);
              } catch (const std::exception& e) {
                throw ConfigError(std::string("config key 'radius_mode': ") + e.what());
              }
            },
            [](const RunConfig& c) {
              const auto& t = c.train.targets;
              return t.radius_mode == RadiusMode::Fixed ? "fixed:" + fmt(t.fixed_radius) : to_string(t.radius_mode);
            }},
      // decode
      integer("top_k", [](auto& c) -> auto& { return c.decode.top_k; }),
      real("emb_dist_max", [](auto& c) -> auto& { return c.decode.emb_dist_max; }),
      integer("max_detections", [](auto& c) -> auto& { return c.decode.max_detections; }),
      real("softnms_sigma", [](auto& c) -> auto& { return c.decode.softnms_sigma; }),
      // optimisation
      real("lr", [](auto& c) -> auto& { return c.train.adam.lr; }),
      real("beta1", [](auto& c) -> auto& { return c.train.adam.beta1; }),
      real("beta2", [](auto& c) -> auto& { return c.train.adam.beta2; }),
      real("adam_eps", [](auto& c) -> auto& { return c.train.adam.eps; }),
      integer("batch_size", [](auto& c) -> auto& { return c.train.batch_size; }),
      integer("iterations", [](auto& c) -> auto& { return c.train.iterations; }),
      boolean("flip_augment", [](auto& c) -> auto& { return c.train.flip_augment; }),
      integer("seed", [](auto& c) -> auto& { return c.train.seed; }),
      integer("log_interval", [](auto& c) -> auto& { return c.log_interval; }),
      integer("checkpoint_interval", [](auto& c) -> auto& { return c.checkpoint_interval; }),
      // model
      integer("input_size", [](auto& c) -> auto& { return c.model.input_size; }),
      integer("hg_depth", [](auto& c) -> auto& { return c.model.hg_depth; }),
      Field{"channels",
            [](RunConfig& c, const std::string& v) {
              std::vector<int> out;
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_int("channels", trim(item))));
              if (out.empty()) bad_value("channels", v, "expected a comma-separated list");
              c.model.channels = std::move(out);
            },
            [](const RunConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.model.channels.size(); ++i) {
                s += (i ? "," : "") + std::to_string(c.model.channels[i]);
              }
              return s;
            }},
      integer("residuals", [](auto& c) -> auto& { return c.model.residuals; }),
      integer("stacks", [](auto& c) -> auto& { return c.model.stacks; }),
      integer("num_classes", [](auto& c) -> auto& { return c.model.num_classes; }),
      real("heat_prior", [](auto& c) -> auto& { return c.model.heat_prior; }),
      boolean("corner_pool", [](auto& c) -> auto& { return c.model.corner_pool; }),
      // evaluation
      real("small_area", [](auto& c) -> auto& { return c.eval.small_area; }),
      real("large_area", [](auto& c) -> auto& { return c.eval.large_area; }),
  };
  return f;
}

void validate(RunConfig& c) {
  // Settings that several modules share follow the model.
  c.train.targets.downsample = c.model.downsample;
  c.decode.downsample = c.model.downsample;
  c.train.targets.num_classes = c.model.num_classes;
  c.eval.num_classes = c.model.num_classes;
  try {
    c.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto& l = c.train.loss;
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  need(l.pull_weight >= 0 && l.push_weight >= 0 && l.offset_weight >= 0, "loss weights must be >= 0");
  need(l.prob_eps > 0 && l.prob_eps < 0.5, "prob_eps must lie in (0, 0.5)");
  need(l.delta >= 0, "delta must be >= 0");
  need(c.train.targets.iou_threshold > 0 && c.train.targets.iou_threshold <= 1, "t must lie in (0, 1]");
  need(c.train.targets.min_radius >= 0, "min_radius must be >= 0");
  need(c.decode.top_k >= 1 && c.decode.max_detections >= 1, "top_k and max_detections must be >= 1");
  need(c.decode.emb_dist_max > 0 && c.decode.softnms_sigma > 0, "emb_dist_max and softnms_sigma must be positive");
  need(c.train.adam.lr > 0 && c.train.adam.eps > 0, "lr and adam_eps must be positive");
  need(c.train.adam.beta1 >= 0 && c.train.adam.beta1 < 1 && c.train.adam.beta2 >= 0 && c.train.adam.beta2 < 1,
       "beta1 and beta2 must lie in [0, 1)");
  need(c.train.batch_size >= 1 && c.train.iterations >= 0, "batch_size must be >= 1 and iterations >= 0");
  need(c.log_interval >= 1 && c.checkpoint_interval >= 1, "log_interval and checkpoint_interval must be >= 1");
  need(c.eval.small_area > 0 && c.eval.large_area >= c.eval.small_area, "need 0 < small_area <= large_area");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": missing key");
    const auto& fs = fields();
    const auto it = std::find_if(fs.begin(), fs.end(), [&](const Field& f) { return key == f.key; });
    if (it == fs.end()) throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(lineno));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    if (value.empty()) throw ConfigError("config key '" + key + "' has no value");
    it->set(cfg, value);
  }
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(cfg) << '\n';
  return os.str();
}

}  // namespace cornerdet
