// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include "d2mlp/checkpoint.hpp"
#include "d2mlp/data.hpp"
#include "d2mlp/ddm.hpp"
#include "d2mlp/metrics.hpp"
#include "d2mlp/network.hpp"
#include "d2mlp/training.hpp"
#include "d2mlp/verification.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace d2mlp;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetSeconds = 300;
constexpr double kNormTol = 1e-6;
constexpr double kMeanTol = 1e-6;
constexpr double kMetricTol = 1e-9;
constexpr double kCeTol = 1e-9;
constexpr double kDiceTol = 1e-6;
constexpr double kOverfitDice = 0.95;
constexpr double kBaselineMargin = 0.02;
constexpr double kOverfitBudgetSeconds = 900;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome ac1_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name, failed;
  for (const auto& target : gradcheck_targets()) {
    for (const auto& c : run_gradcheck(target, 0)) {
      if (c.result.max_rel_error >= worst) {
        worst = c.result.max_rel_error;
        worst_name = c.target + "/" + c.name;
      }
      if (!c.passed(kGradTol)) failed += " " + c.target + "/" + c.name;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = failed.empty() && secs < kGradBudgetSeconds;
  std::string d = fmt("max rel error %.3e at %s, %.1f s (limit %.0e, %.0f s)", worst, worst_name.c_str(), secs, kGradTol,
                      kGradBudgetSeconds);
  if (!failed.empty()) d += "; failing:" + failed;
  return {ok, d};
}

Outcome ac2_fold() {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t N = 1 + rng.below(4);
    const std::size_t C = N * (1 + rng.below(4)), H = 1 + rng.below(8), W = 1 + rng.below(8);
    Tensor<float> x({C, H, W});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
    Tape<float> tape;
    const auto v = tape.leaf(x);
    const auto fw = fold_width(v, N), fh = fold_height(v, N);
    if (fw.value() != testing::fold_width_oracle(x, N) || fh.value() != testing::fold_height_oracle(x, N)) {
      return {false, fmt("index map mismatch at trial %d (C=%zu N=%zu H=%zu W=%zu)", trial, C, N, H, W)};
    }
    if (unfold_width(fw, W).value() != x || unfold_height(fh, H).value() != x) {
      return {false, fmt("unfold is not a bitwise inverse at trial %d", trial)};
    }
  }
  return {true, "1000 random (C,N,H,W): index map matches loop oracle, unfold inverts bitwise"};
}

Outcome ac3_dynamic_mixing() {
  const DDMDims dims{8, 2, 6, 6, 2, 4};
  Manifest m;
  manifest::ddm(m, "p", dims);
  double score_dev = 0, weight_dev = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ParamStore<double> store = verify::jittered_params(m, seed);
    Tape<double> tape;
    Binder<double> b(tape, store);
    Rng rng(seed, 3);
    const auto t = ddm_forward_traced(tape.leaf(verify::random_tensor(rng, {2, 8, 6, 6}, -2, 2)), bind_ddm(b, "p", dims));
    for (const auto* s : {&t.spatial.score_h, &t.spatial.score_w}) {
      for (std::size_t n = 0; n < 2; ++n) {
        double total = 0;
        for (std::size_t i = 0; i < 36; ++i) total += s->value()[n * 36 + i];
        score_dev = std::max(score_dev, std::abs(total - 1));
      }
    }
    const auto& w = t.channel.weights.value();
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 8; ++c)
        weight_dev = std::max(weight_dev, std::abs(w.at({n, 0, c}) + w.at({n, 1, c}) + w.at({n, 2, c}) - 1));
  }
  ParamStore<double> store = materialize<double>(m, 0);
  Tape<double> tape;
  Binder<double> b(tape, store);
  Rng rng(4);
  const auto t = ddm_forward_traced(tape.leaf(verify::random_tensor(rng, {2, 8, 6, 6})), bind_ddm(b, "p", dims));
  const bool identity = t.spatial.xh_star.value() == t.xh.value() && t.spatial.xw_star.value() == t.xw.value();
  double mean_dev = 0;
  const auto& out = t.channel.out.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mean = (t.xh.value()[i] + t.xw.value()[i] + t.xc.value()[i]) / 3.0;
    mean_dev = std::max(mean_dev, std::abs(out[i] - mean));
  }
  const bool ok = score_dev < kNormTol && weight_dev < kNormTol && identity && mean_dev < kMeanTol;
  return {ok, fmt("score sum dev %.2e, weight sum dev %.2e, zero-init identity %s, mean dev %.2e", score_dev,
                  weight_dev, identity ? "bitwise" : "NO", mean_dev)};
}

Outcome ac4_shapes() {
  NetworkConfig cfg;
  cfg.base_channels = 48;
  cfg.image_height = cfg.image_width = 512;
  const auto plan = plan_stages(cfg);
  const std::vector<StageShape> want{{"enc0", 48, 256, 256},
                                     {"enc1", 96, 128, 128},
                                     {"enc2", 192, 64, 64},
                                     {"enc3", 384, 32, 32},
                                     {"bottleneck", 768, 16, 16}};
  std::string got;
  for (const auto& w : want) {
    bool found = false;
    for (const auto& s : plan) {
      if (s.name != w.name) continue;
      found = s == w;
      got += fmt(" %zu@%zu", s.channels, s.height);
    }
    if (!found) return {false, "stage " + w.name + " extents differ:" + got};
  }
  std::string sweep;
  for (std::size_t N : {2, 4, 8, 16}) {
    NetworkConfig c = cfg;
    c.patch_count = N;
    c.validate();
    const Manifest m = network_manifest(c);
    std::set<std::string> names;
    for (const auto& p : m) {
      if (!names.insert(p.name).second) return {false, "duplicate parameter " + p.name};
      if (p.shape.empty() || shape_numel(p.shape) == 0) return {false, "empty parameter " + p.name};
    }
    sweep += fmt(" N=%zu:%.1fM params", N, double(param_count(c)) / 1e6);
  }
  return {true, "512x512 C=48:" + got + ";" + sweep};
}

Outcome ac5_overfit() {
  NetworkConfig cfg;
  cfg.base_channels = 8;
  cfg.patch_count = 2;
  cfg.num_classes = 2;
  cfg.image_height = cfg.image_width = 64;
  cfg.deep_supervision = true;
  TrainConfig tc;
  tc.max_steps = 500;
  tc.batch_size = 4;
  tc.lr0 = 0.001;
  tc.seed = 7;
  tc.eval_every = 0;
  const SampleBatch data = synth_generate(7, 8, 64, 2);
  const auto t0 = std::chrono::steady_clock::now();
  auto final_dice = [&](Variant v) {
    NetworkConfig c = cfg;
    c.variant = v;
    return *train_loop(c, tc, data).history.back().train_dice;
  };
  const double ddm = final_dice(Variant::ddm);
  const double basic = final_dice(Variant::basic_mixer);
  const double secs = seconds_since(t0);
  const bool ok = ddm >= kOverfitDice && basic <= ddm + kBaselineMargin && secs < kOverfitBudgetSeconds;
  return {ok, fmt("ddm train Dice %.4f (need >= %.2f), basic_mixer %.4f (need <= ddm + %.2f), %.0f s", ddm,
                  kOverfitDice, basic, kBaselineMargin, secs)};
}

Outcome ac6_metrics() {
  Rng rng(6);
  double worst = 0;
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Mask a = testing::random_mask(rng, 16, 16), b = testing::random_mask(rng, 16, 16);
    std::size_t inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      inter += a[i] && b[i];
      sa += a[i];
      sb += b[i];
    }
    const double dice_oracle = sa + sb == 0 ? 1.0 : 2.0 * double(inter) / double(sa + sb);
    worst = std::max(worst, std::abs(dice_score(a, b) - dice_oracle));
    const auto s = surface_metrics(a, b);
    const auto o = testing::brute_surface(a, b);
    if (s.valid != o.valid) return {false, fmt("validity differs at trial %d", trial)};
    if (!o.valid) continue;
    ++checked;
    worst = std::max({worst, std::abs(s.hd95 - o.hd95), std::abs(s.msd - o.msd)});
  }
  // Degenerate cases, exact.
  Mask same({16, 16}), left({16, 16}), right({16, 16});
  for (std::size_t y = 3; y < 9; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      same[y * 16 + x + 4] = 1;
      left[y * 16 + x] = 1;
      right[y * 16 + x + 11] = 1;
    }
  const auto id = surface_metrics(same, same);
  const auto dj = surface_metrics(left, right);
  const auto dj_oracle = testing::brute_surface(left, right);
  const bool exact = dice_score(same, same) == 1.0 && id.hd95 == 0.0 && id.msd == 0.0 &&
                     dice_score(left, right) == 0.0 && dj.hd95 == dj_oracle.hd95 && dj.msd == dj_oracle.msd;
  const bool ok = worst <= kMetricTol && exact && checked > 0;
  return {ok, fmt("max |metric - oracle| %.2e over 100 pairs (%d with surfaces); degenerate cases %s", worst, checked,
                  exact ? "exact" : "INEXACT")};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + D2MLP_CLI_PATH + "\" " + args + " >\"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Outcome ac7_determinism() {
  const fs::path dir = fs::temp_directory_path() / "d2mlp_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  if (run_cli("synth --out " + (dir / "data").string() + " --count 8 --size 64 --seed 7", dir / "synth.log") != 0) {
    return {false, "synth failed"};
  }
  std::string chk[2], hist[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path out = dir / ("run" + std::to_string(r));
    const fs::path cfg = dir / ("run" + std::to_string(r) + ".json");
    std::ofstream(cfg) << R"({"network.base_channels": 8, "network.patch_count": 2, "network.image_height": 64,)"
                       << R"( "network.image_width": 64, "train.max_steps": 12, "train.batch_size": 4,)"
                       << R"( "train.seed": 7, "train.eval_every": 4, "paths.dataset": ")" << (dir / "data").string()
                       << R"(", "paths.output_dir": ")" << out.string() << R"("})";
    if (run_cli("--threads 1 train --config " + cfg.string(), dir / "train.log") != 0) {
      return {false, "train run " + std::to_string(r) + " failed"};
    }
    chk[r] = slurp(out / "model.d2c");
    hist[r] = slurp(out / "history.csv");
  }
  fs::remove_all(dir);
  const bool ok = !chk[0].empty() && chk[0] == chk[1] && !hist[0].empty() && hist[0] == hist[1];
  return {ok, fmt("checkpoints %zu bytes %s, history %zu bytes %s", chk[0].size(),
                  chk[0] == chk[1] ? "identical" : "DIFFER", hist[0].size(), hist[0] == hist[1] ? "identical" : "DIFFER")};
}

Outcome ac8_losses() {
  double ce_dev = 0;
  for (std::size_t K : {2, 3, 5, 10}) {
    Tape<double> tape;
    const auto logits = tape.constant(Tensor<double>({2, K, 8, 8}, 0.37));
    LabelMap labels({2, 8, 8});
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % K);
    ce_dev = std::max(ce_dev, std::abs(ce_loss(logits, labels).value()[0] - std::log(double(K))));
  }
  Tape<double> tape;
  const auto logits = tape.constant(Tensor<double>({1, 2, 16, 16}, 0.0));
  LabelMap labels({1, 16, 16});
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 128 ? 1 : 0;
  const double dice = dice_loss(logits, labels, 1e-5).value()[0];
  const double dice_dev = std::abs(dice - 1.0 / 3.0);
  const bool ok = ce_dev <= kCeTol && dice_dev <= kDiceTol;
  return {ok, fmt("uniform CE - ln K %.2e (K = 2,3,5,10); balanced-uniform Dice loss %.9f (|dev from 1/3| %.2e)", ce_dev,
                  dice, dice_dev)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks{
      {"AC1 gradient correctness", ac1_gradients}, {"AC2 fold/unfold oracle", ac2_fold},
      {"AC3 dynamic mixing", ac3_dynamic_mixing},  {"AC4 shape schedule", ac4_shapes},
      {"AC5 overfit", ac5_overfit},                {"AC6 metrics oracle", ac6_metrics},
      {"AC7 determinism", ac7_determinism},        {"AC8 loss checks", ac8_losses},
  };
  int failures = 0;
  for (const auto& [name, fn] : checks) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", int(checks.size()) - failures, checks.size());
  return failures ? 1 : 0;
}
