#include "cornerdet/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "cornerdet/checkpoint.hpp"
#include "cornerdet/config.hpp"
#include "cornerdet/corner_pool.hpp"
#include "cornerdet/data.hpp"
#include "cornerdet/decode.hpp"
#include "cornerdet/eval.hpp"
#include "cornerdet/gradcheck.hpp"
#include "cornerdet/parallel.hpp"
#include "cornerdet/train.hpp"

namespace cornerdet {
namespace {

namespace fs = std::filesystem;

// Problems caused by the user's input rather than by the program.
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw UserError("cannot write " + path.string());
  os << text;
}

Dataset load_dataset(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw UserError("no dataset (manifest.json) in " + dir);
  return read_dataset(dir);
}

fs::path config_sidecar(const fs::path& ckpt) { return fs::path(ckpt.string() + ".config"); }

// The config stored next to a checkpoint wins over --config, then defaults.
RunConfig config_for_checkpoint(const fs::path& ckpt, const std::string& explicit_config) {
  if (!explicit_config.empty()) return load_config(explicit_config);
  if (fs::exists(config_sidecar(ckpt))) return load_config(config_sidecar(ckpt));
  return RunConfig{};
}

Model<float> load_model(const fs::path& ckpt, const RunConfig& cfg) {
  if (!fs::exists(ckpt)) throw UserError("checkpoint not found: " + ckpt.string());
  Model<float> model(cfg.model, cfg.train.seed);
  const TensorArchive archive = load_archive(ckpt);
  try {
    model.load_state(archive);
  } catch (const std::invalid_argument& e) {
    throw UserError("checkpoint " + ckpt.string() + " does not fit the model config: " + e.what());
  }
  return model;
}

std::vector<std::pair<std::size_t, std::size_t>> parse_sizes(const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v < 1) throw UserError("--sizes: '" + item + "' is not a positive integer");
    out.emplace_back(static_cast<std::size_t>(v), static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UserError("--sizes: need at least one size");
  return out;
}

std::string format_parts(const StepLog& l) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "total %.5f det %.5f pull %.5f push %.5f off %.5f", l.total, l.parts.det,
                l.parts.pull, l.parts.push, l.parts.off);
  return buf;
}

int run_gen_data(const std::string& out, std::size_t count, std::uint64_t seed, double val_fraction) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw UserError("cannot create output directory " + out);
  const Dataset ds = gen_dataset(out, count, seed, DataConfig{}, val_fraction);
  std::cout << "wrote " << ds.train.size() << " train and " << ds.val.size() << " val samples to " << out << '\n';
  return 0;
}

int run_train(const std::string& config_path, const std::string& data, const std::string& out, int iterations) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
  if (iterations >= 0) cfg.train.iterations = iterations;
  const Dataset ds = load_dataset(data);
  std::vector<Sample> train;
  for (const auto& s : ds.train) {
    if (!s.annotations.empty()) train.push_back(s);
  }
  if (train.empty()) throw UserError("no training images with objects in " + data);
  if (train.front().image.dim(1) != cfg.model.input_size) {
    throw UserError("images are " + std::to_string(train.front().image.dim(1)) + " px but input_size is " +
                    std::to_string(cfg.model.input_size));
  }

  const fs::path ckpt(out);
  write_text(config_sidecar(ckpt), dump_config(cfg));
  Model<float> model(cfg.model, cfg.train.seed);
  Trainer trainer(model, train, cfg.train);
  std::cout << "training " << model.parameter_count() << " parameters on " << train.size() << " images for "
            << cfg.train.iterations << " steps\n";
  const auto t0 = std::chrono::steady_clock::now();
  trainer.run(cfg.train.iterations, [&](int step, const StepLog& log) {
    const int done = step + 1;
    if (done % cfg.log_interval == 0 || done == cfg.train.iterations) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "step " << done << ' ' << format_parts(log) << " (" << static_cast<int>(secs) << " s)"
                << std::endl;
    }
    if (done % cfg.checkpoint_interval == 0) save_archive(ckpt, model.state());
  });
  save_archive(ckpt, model.state());
  std::cout << "saved " << ckpt.string() << '\n';
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& config_path, const std::string& data,
             const std::string& oracle, bool oracle_embeddings, bool flip_fusion, const std::string& split,
             const std::string& out) {
  const RunConfig cfg = config_for_checkpoint(ckpt, config_path);
  DetectOptions opts;
  try {
    opts.oracle = parse_oracle_mode(oracle);
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
  opts.oracle_embeddings = oracle_embeddings;
  opts.flip_fusion = flip_fusion;

  const Dataset ds = load_dataset(data);
  std::vector<Sample> samples;
  if (split == "val" || split == "all") samples.insert(samples.end(), ds.val.begin(), ds.val.end());
  if (split == "train" || split == "all") samples.insert(samples.end(), ds.train.begin(), ds.train.end());
  if (samples.empty()) throw UserError("no '" + split + "' samples in " + data);

  Model<float> model = load_model(ckpt, cfg);
  const TargetConfig tcfg = targets_for_model(cfg.model, cfg.train.targets);
  const auto dets = detect(model, samples, cfg.decode, tcfg, opts);
  std::vector<std::vector<Annotation>> gts;
  for (const auto& s : samples) gts.push_back(s.annotations);
  const ApTable table = average_precision(dets, gts, cfg.eval);

  std::cout << "oracle " << to_string(opts.oracle) << (flip_fusion ? ", flip fusion" : "")
            << (oracle_embeddings ? ", oracle embeddings" : "") << ", " << samples.size() << " images\n"
            << ap_report_text(table);
  if (!out.empty()) {
    const fs::path dir(out);
    write_text(dir / "metrics.csv", ap_report_csv(table, to_string(opts.oracle)));
    write_text(dir / "pr_curve.csv", pr_curve_csv(table));
    write_text(dir / "metrics.txt", ap_report_text(table));
    write_text(dir / "effective.config", dump_config(cfg));
    std::ostringstream jsonl;
    for (std::size_t i = 0; i < samples.size(); ++i) jsonl << detections_jsonl(samples[i].id, dets[i]);
    write_text(dir / "detections.jsonl", jsonl.str());
  }
  return 0;
}

int run_decode(const std::string& ckpt, const std::string& config_path, const std::string& image,
               const std::string& out, bool flip_fusion) {
  const RunConfig cfg = config_for_checkpoint(ckpt, config_path);
  if (!fs::exists(image)) throw UserError("image not found: " + image);
  Sample s{fs::path(image).stem().string(), load_tensor(image), {}};
  if (s.image.ndim() != 3 || s.image.dim(0) != cfg.model.in_channels || s.image.dim(1) != cfg.model.input_size ||
      s.image.dim(2) != cfg.model.input_size) {
    throw UserError("image " + image + " has shape " + shape_str(s.image.shape()) + ", model expects [" +
                    std::to_string(cfg.model.in_channels) + "," + std::to_string(cfg.model.input_size) + "," +
                    std::to_string(cfg.model.input_size) + "]");
  }
  Model<float> model = load_model(ckpt, cfg);
  DetectOptions opts;
  opts.flip_fusion = flip_fusion;
  const auto dets = detect(model, {s}, cfg.decode, targets_for_model(cfg.model, cfg.train.targets), opts);
  write_text(out, detections_jsonl(s.id, dets.front()));
  write_text(fs::path(out).parent_path() / "effective.config", dump_config(cfg));
  std::cout << "wrote " << dets.front().size() << " detections to " << out << '\n';
  return 0;
}

int run_grad_check(const std::string& op, int trials, std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  try {
    results = run_gradient_suite(op, trials, seed);
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
  std::cout << gradient_report(results);
  for (const auto& r : results) {
    if (!r.passed()) return 2;
  }
  return 0;
}

int run_bench(const std::string& sizes, int reps, std::size_t channels, const std::string& out) {
  if (reps < 1) throw UserError("--reps must be >= 1");
  const auto rows = bench_pool(parse_sizes(sizes), reps, channels);
  std::cout << bench_report_text(rows) << '\n' << bench_report_csv(rows);
  if (!out.empty()) {
    write_text(fs::path(out) / "bench_pool.csv", bench_report_csv(rows));
    write_text(fs::path(out) / "bench_pool.txt", bench_report_text(rows));
  }
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Corner-keypoint object detector: data, training, evaluation, decoding and checks"};
  app.require_subcommand(1);
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("--threads", threads, "worker threads for kernels; 1 is deterministic")
      ->check(CLI::PositiveNumber);

  std::string out, data, config, ckpt, image, oracle = "none", split = "val", op, sizes = "64,128,256";
  std::size_t count = 1000, channels = 8;
  std::uint64_t seed = 1;
  double val_fraction = 0.1;
  int reps = 5, trials = 20, iterations = -1;
  bool flip_fusion = false, oracle_embeddings = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  gen->add_option("--out", out, "dataset directory")->required();
  gen->add_option("--count", count, "number of images")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--val-fraction", val_fraction, "share of images put in the val split")
      ->check(CLI::Range(0.0, 0.99));

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config, "flat key = value config file");
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "checkpoint path; the effective config goes to <out>.config")->required();
  train->add_option("--iterations", iterations, "override the configured iteration count")
      ->check(CLI::NonNegativeNumber);

  auto* eval = app.add_subcommand("eval", "evaluate AP on a dataset split");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--config", config, "config (default: <ckpt>.config)");
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--oracle", oracle, "none, gt_heat or gt_heat_off");
  eval->add_flag("--oracle-embeddings", oracle_embeddings, "replace embeddings at ground-truth corners");
  eval->add_flag("--flip-fusion", flip_fusion, "fuse detections from the horizontally flipped image");
  eval->add_option("--split", split, "val, train or all")->check(CLI::IsMember({"val", "train", "all"}));
  eval->add_option("--out", out, "directory for metrics, PR curves and detections");

  auto* dec = app.add_subcommand("decode", "detect objects in one image tensor");
  dec->add_option("--ckpt", ckpt, "checkpoint")->required();
  dec->add_option("--config", config, "config (default: <ckpt>.config)");
  dec->add_option("--image", image, "image tensor file (CNTF, [3,H,W])")->required();
  dec->add_option("--out", out, "output JSON lines file")->required();
  dec->add_flag("--flip-fusion", flip_fusion, "fuse detections from the horizontally flipped image");

  auto* grad = app.add_subcommand("grad-check", "compare gradients with central finite differences");
  grad->add_option("--op", op, "single op to check (default: all)");
  grad->add_option("--trials", trials, "random trials per op")->check(CLI::PositiveNumber);
  grad->add_option("--seed", seed, "seed");

  auto* bench = app.add_subcommand("bench-pool", "time corner pooling against the naive oracle");
  bench->add_option("--sizes", sizes, "comma-separated square sizes");
  bench->add_option("--reps", reps, "repetitions per size");
  bench->add_option("--channels", channels, "channels per map")->check(CLI::PositiveNumber);
  bench->add_option("--out", out, "directory for the report files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    set_num_threads(threads);
    if (*gen) return run_gen_data(out, count, seed, val_fraction);
    if (*train) return run_train(config, data, out, iterations);
    if (*eval) return run_eval(ckpt, config, data, oracle, oracle_embeddings, flip_fusion, split, out);
    if (*dec) return run_decode(ckpt, config, image, out, flip_fusion);
    if (*grad) return run_grad_check(op, trials, seed);
    if (*bench) return run_bench(sizes, reps, channels, out);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

}  // namespace cornerdet
