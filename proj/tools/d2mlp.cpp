// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver: synth, train, eval, predict, gradcheck.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "d2mlp/checkpoint.hpp"
#include "d2mlp/config.hpp"
#include "d2mlp/data.hpp"
#include "d2mlp/parallel.hpp"
#include "d2mlp/training.hpp"
#include "d2mlp/verification.hpp"

namespace fs = std::filesystem;
using namespace d2mlp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitUsage = 2;

/// Thrown for bad arguments or inputs; maps to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

int cmd_synth(const fs::path& out, std::size_t count, std::size_t size, std::size_t classes, std::uint64_t seed) {
  if (size == 0 || size % kSpatialDivisor) {
    throw UsageError("--size must be divisible by 32 (got " + std::to_string(size) + ")");
  }
  if (count < 1) throw UsageError("--count must be at least 1");
  if (classes < 2 || classes > 255) throw UsageError("--classes must be in [2, 255]");
  const SampleBatch batch = synth_generate(seed, count, size, classes);
  write_dataset(out, batch, DatasetMeta{count, size, classes, seed});
  std::cerr << "wrote " << count << " samples to " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const fs::path& config_path) {
  require_file(config_path, "config");
  const RunConfig rc = load_run_config(config_path);
  rc.validate();
  std::cout << to_flat_json(rc).dump(2) << std::endl;
  if (rc.paths.dataset.empty()) throw UsageError("paths.dataset is not set");
  require_dir(rc.paths.dataset, "dataset");
  DatasetMeta meta;
  const SampleBatch data = read_dataset(rc.paths.dataset, &meta);
  if (meta.num_classes != rc.network.num_classes) {
    throw UsageError("dataset has " + std::to_string(meta.num_classes) + " classes but network.num_classes is " +
                     std::to_string(rc.network.num_classes));
  }
  if (meta.size != rc.network.image_height || meta.size != rc.network.image_width) {
    throw UsageError("dataset images are " + std::to_string(meta.size) + "x" + std::to_string(meta.size) +
                     " but the network expects " + std::to_string(rc.network.image_height) + "x" +
                     std::to_string(rc.network.image_width));
  }
  fs::create_directories(rc.paths.output_dir);
  const TrainResult res = train_loop(rc.network, rc.train, data, [](const HistoryRow& r) {
    if (!r.train_dice) return;
    std::fprintf(stderr, "step %zu lr %.6g loss %.6f train_dice %.4f\n", r.step, r.lr, r.loss, *r.train_dice);
  });
  save_checkpoint(rc.paths.checkpoint_path(), res.net);
  std::ofstream hist(rc.paths.history_path(), std::ios::binary | std::ios::trunc);
  write_history_csv(hist, res.history);
  if (!hist) throw FormatError("cannot write " + rc.paths.history_path().string());
  std::cerr << "checkpoint " << rc.paths.checkpoint_path().string() << "\n";
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir) {
  require_file(checkpoint, "checkpoint");
  require_dir(data_dir, "dataset");
  NetworkParams<float> net = load_checkpoint(checkpoint);
  const DatasetMeta meta = read_dataset_meta(data_dir);
  if (meta.num_classes != net.config.num_classes) {
    throw UsageError("checkpoint predicts " + std::to_string(net.config.num_classes) + " classes but the dataset has " +
                     std::to_string(meta.num_classes));
  }
  if (meta.size != net.config.image_height || meta.size != net.config.image_width) {
    throw UsageError("checkpoint expects " + std::to_string(net.config.image_height) + "x" +
                     std::to_string(net.config.image_width) + " images, dataset has " + std::to_string(meta.size));
  }
  const SampleBatch data = read_dataset(data_dir);
  std::cout << to_json(evaluate(net, data, meta.num_classes)).dump(2) << std::endl;
  return kExitOk;
}

int cmd_predict(const fs::path& checkpoint, const fs::path& input, const fs::path& output) {
  require_file(checkpoint, "checkpoint");
  require_file(input, "input");
  NetworkParams<float> net = load_checkpoint(checkpoint);
  Tensor<float> img = load_d2t_as<float>(input);
  const NetworkConfig& cfg = net.config;
  const Shape& s = img.shape();
  const bool ok = (s.size() == 2 && cfg.in_channels == 1) || (s.size() == 3 && s[0] == cfg.in_channels);
  if (!ok) throw UsageError("input must be (H, W) or (" + std::to_string(cfg.in_channels) + ", H, W), got " + to_string(s));
  const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
  if (H % kSpatialDivisor || W % kSpatialDivisor) {
    throw UsageError("input height and width must be divisible by 32, got " + to_string(s));
  }
  if (H != cfg.image_height || W != cfg.image_width) {
    throw UsageError("checkpoint expects " + std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width) +
                     " inputs, got " + to_string(s));
  }
  const LabelMap pred = argmax_classes(predict_logits(net, img.reshaped({1, cfg.in_channels, H, W})));
  save_d2t(output, pred.reshaped({H, W}));
  return kExitOk;
}

int cmd_gradcheck(const std::string& target, std::uint64_t seed) {
  bool all_ok = true;
  for (const auto& t : gradcheck_targets()) {
    if (target != "all" && target != t) continue;
    for (const auto& c : run_gradcheck(t, seed)) {
      const bool ok = c.passed();
      all_ok = all_ok && ok;
      std::printf("%-8s %-34s max_rel_error %.3e  probes %6zu  %s\n", c.target.c_str(), c.name.c_str(),
                  c.result.max_rel_error, c.result.probes, ok ? "ok" : "FAIL");
    }
  }
  std::printf("%s (tolerance %.0e)\n", all_ok ? "PASS" : "FAIL", kGradcheckTolerance);
  return all_ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"D2-MLP segmentation network: data, training, evaluation and verification"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  bool corrupt = false;
  app.add_option("--threads", threads, "Intra-op worker threads")->default_val(1)->check(CLI::PositiveNumber);
  app.add_flag("--corrupt-backward", corrupt, "Test hook: perturb one backward rule")->group("");

  std::string out_dir, cfg_path, ckpt, data_dir, input, output, target = "all";
  std::size_t count = 8, size = 64, classes = 2;
  std::uint64_t seed = 0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic segmentation dataset");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--count", count, "Number of samples")->default_val(8);
  synth->add_option("--size", size, "Square image extent (multiple of 32)")->default_val(64);
  synth->add_option("--classes", classes, "Number of classes including background")->default_val(2);
  synth->add_option("--seed", seed, "Generator seed")->default_val(0);

  auto* train = app.add_subcommand("train", "Train from a flat JSON run config");
  train->add_option("--config", cfg_path, "Run config file")->required();

  auto* eval = app.add_subcommand("eval", "Report Dice, 95HD and MSD as JSON");
  eval->add_option("--checkpoint", ckpt, "Checkpoint (.d2c)")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();

  auto* predict = app.add_subcommand("predict", "Write an argmax label map");
  predict->add_option("--checkpoint", ckpt, "Checkpoint (.d2c)")->required();
  predict->add_option("--input", input, "Image tensor (.d2t, f32)")->required();
  predict->add_option("--output", output, "Label map (.d2t, u8)")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks in f64");
  grad->add_option("--target", target, "Suite to run")
      ->check(CLI::IsMember({"ops", "ddm", "block", "network", "all"}))
      ->default_val("all");
  grad->add_option("--seed", seed, "Seed for inputs and probes")->default_val(0);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  set_thread_count(threads);
  if (corrupt) fault::gelu_backward_scale() = 1.01;

  try {
    if (*synth) return cmd_synth(out_dir, count, size, classes, seed);
    if (*train) return cmd_train(cfg_path);
    if (*eval) return cmd_eval(ckpt, data_dir);
    if (*predict) return cmd_predict(ckpt, input, output);
    if (*grad) return cmd_gradcheck(target, seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVerify;
  }
  return kExitUsage;
}
