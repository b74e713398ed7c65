// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "d2mlp/data.hpp"
#include "d2mlp/metrics.hpp"
#include "d2mlp/network.hpp"
#include "d2mlp/ops.hpp"
#include "d2mlp/rng.hpp"

namespace d2mlp {

/// Soft Dice denominators: sum(p^2) + sum(g^2), or sum(p) + sum(g).
enum class DiceDenominator { squared, linear };

inline std::string to_string(DiceDenominator d) { return d == DiceDenominator::squared ? "squared" : "linear"; }

inline DiceDenominator parse_dice_denominator(const std::string& s) {
  if (s == "squared") return DiceDenominator::squared;
  if (s == "linear") return DiceDenominator::linear;
  throw ConfigError("unknown dice denominator '" + s + "' (expected squared or linear)");
}

struct TrainConfig {
  double lr0 = 0.001;
  std::size_t max_steps = 500;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  double dice_eps = 1e-5;
  DiceDenominator dice_denominator = DiceDenominator::squared;
  /// Train-set Dice is logged every this many steps and at the last step; 0 logs only the last.
  std::size_t eval_every = 50;

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
    if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be nonnegative");
    if (!(poly_power > 0)) throw ConfigError("poly_power must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(dice_eps >= 0)) throw ConfigError("dice_eps must be nonnegative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr0", c.lr0},
                     {"max_steps", c.max_steps},
                     {"poly_power", c.poly_power},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"dice_eps", c.dice_eps},
                     {"dice_denominator", to_string(c.dice_denominator)},
                     {"eval_every", c.eval_every}};
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace detail {

struct LossGeometry {
  std::size_t batch, classes, hw;
};

template <class T>
LossGeometry loss_geometry(const Var<T>& logits, const LabelMap& labels, const char* what) {
  const Shape& s = logits.shape();
  if (s.size() != 4) throw ShapeError(std::string(what) + ": logits must be (B, K, H, W), got " + to_string(s));
  if (labels.shape() != Shape{s[0], s[2], s[3]}) {
    throw ShapeError(std::string(what) + ": labels " + to_string(labels.shape()) + " do not match logits " +
                     to_string(s));
  }
  validate_labels(labels, s[1]);
  return {s[0], s[1], s[2] * s[3]};
}

/// Channel softmax of (B, K, H, W) logits, computed in double.
template <class T>
std::vector<double> class_probabilities(const Tensor<T>& logits, const LossGeometry& g) {
  std::vector<double> p(logits.size());
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t i = 0; i < g.hw; ++i) {
      const std::size_t base = n * g.classes * g.hw + i;
      double mx = logits[base];
      for (std::size_t k = 1; k < g.classes; ++k) mx = std::max(mx, static_cast<double>(logits[base + k * g.hw]));
      double z = 0;
      for (std::size_t k = 0; k < g.classes; ++k) {
        p[base + k * g.hw] = std::exp(static_cast<double>(logits[base + k * g.hw]) - mx);
        z += p[base + k * g.hw];
      }
      for (std::size_t k = 0; k < g.classes; ++k) p[base + k * g.hw] /= z;
    }
  }
  return p;
}

}  // namespace detail

/// Mean over pixels of -log softmax(logits)[label], via log-sum-exp.
template <class T>
Var<T> ce_loss(const Var<T>& logits, const LabelMap& labels) {
  const auto g = detail::loss_geometry(logits, labels, "ce_loss");
  const Tensor<T>& x = logits.value();
  const double count = static_cast<double>(g.batch * g.hw);
  double total = 0;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t i = 0; i < g.hw; ++i) {
      const std::size_t base = n * g.classes * g.hw + i;
      double mx = x[base];
      for (std::size_t k = 1; k < g.classes; ++k) mx = std::max(mx, static_cast<double>(x[base + k * g.hw]));
      double z = 0;
      for (std::size_t k = 0; k < g.classes; ++k) z += std::exp(static_cast<double>(x[base + k * g.hw]) - mx);
      total += mx + std::log(z) - static_cast<double>(x[base + labels[n * g.hw + i] * g.hw]);
    }
  }
  return logits.tape().record(
      Tensor<T>::scalar(static_cast<T>(total / count)), {logits}, [logits, labels, g, count](Tape<T>& tape, const Tensor<T>& go) {
        const std::vector<double> p = detail::class_probabilities(logits.value(), g);
        T* d = tape.grad_buffer(logits).raw();
        const double s = static_cast<double>(go[0]) / count;
        for (std::size_t n = 0; n < g.batch; ++n) {
          for (std::size_t i = 0; i < g.hw; ++i) {
            const std::size_t lbl = labels[n * g.hw + i];
            for (std::size_t k = 0; k < g.classes; ++k) {
              const std::size_t idx = (n * g.classes + k) * g.hw + i;
              d[idx] += static_cast<T>(s * (p[idx] - (k == lbl ? 1.0 : 0.0)));
            }
          }
        }
      });
}

/// Soft Dice on channel-softmax probabilities, averaged over classes and samples:
/// 1 - mean_{n,k} (2 sum p g + eps) / (D_{n,k} + eps).
template <class T>
Var<T> dice_loss(const Var<T>& logits, const LabelMap& labels, double eps,
                 DiceDenominator denom = DiceDenominator::squared) {
  const auto g = detail::loss_geometry(logits, labels, "dice_loss");
  const std::vector<double> p = detail::class_probabilities(logits.value(), g);
  const std::size_t terms = g.batch * g.classes;
  std::vector<double> inter(terms, 0), den(terms, 0);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t k = 0; k < g.classes; ++k) {
      const std::size_t t = n * g.classes + k;
      for (std::size_t i = 0; i < g.hw; ++i) {
        const double pk = p[t * g.hw + i];
        const double gk = labels[n * g.hw + i] == k ? 1.0 : 0.0;
        inter[t] += pk * gk;
        den[t] += (denom == DiceDenominator::squared ? pk * pk : pk) + gk;
      }
    }
  }
  double score = 0;
  for (std::size_t t = 0; t < terms; ++t) score += (2 * inter[t] + eps) / (den[t] + eps);
  const double loss = 1.0 - score / static_cast<double>(terms);
  return logits.tape().record(Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                              [logits, labels, g, p, inter, den, eps, denom, terms](Tape<T>& tape, const Tensor<T>& go) {
                                T* d = tape.grad_buffer(logits).raw();
                                const double s = -static_cast<double>(go[0]) / static_cast<double>(terms);
                                std::vector<double> dp(g.classes);
                                for (std::size_t n = 0; n < g.batch; ++n) {
                                  for (std::size_t i = 0; i < g.hw; ++i) {
                                    double dot = 0;
                                    for (std::size_t k = 0; k < g.classes; ++k) {
                                      const std::size_t t = n * g.classes + k;
                                      const double pk = p[t * g.hw + i];
                                      const double gk = labels[n * g.hw + i] == k ? 1.0 : 0.0;
                                      const double D = den[t] + eps;
                                      const double dD = denom == DiceDenominator::squared ? 2 * pk : 1.0;
                                      dp[k] = s * (2 * gk * D - (2 * inter[t] + eps) * dD) / (D * D);
                                      dot += dp[k] * pk;
                                    }
                                    for (std::size_t k = 0; k < g.classes; ++k) {
                                      const std::size_t idx = (n * g.classes + k) * g.hw + i;
                                      d[idx] += static_cast<T>(p[idx] * (dp[k] - dot));
                                    }
                                  }
                                }
                              });
}

/// Nearest-neighbour label downsampling by an integer factor: out[y][x] = in[y*f][x*f].
inline LabelMap downsample_labels(const LabelMap& labels, std::size_t factor) {
  const Shape& s = labels.shape();
  if (factor == 0 || s[1] % factor || s[2] % factor) throw ShapeError("downsample_labels: indivisible extent");
  const std::size_t H = s[1] / factor, W = s[2] / factor;
  LabelMap out({s[0], H, W});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) out[(n * H + y) * W + x] = labels[(n * s[1] + y * factor) * s[2] + x * factor];
    }
  }
  return out;
}

template <class T>
Var<T> dice_ce(const Var<T>& logits, const LabelMap& labels, const TrainConfig& cfg) {
  return add(dice_loss(logits, labels, cfg.dice_eps, cfg.dice_denominator), ce_loss(logits, labels));
}

/// Dice + CE on the main head; with auxiliary heads, the weighted mean over
/// heads using kDeepSupervisionWeights.
template <class T>
Var<T> combined_loss(const Var<T>& logits, const std::vector<Var<T>>& aux, const LabelMap& labels,
                     const TrainConfig& cfg) {
  Var<T> total = dice_ce(logits, labels, cfg);
  if (aux.empty()) return total;
  if (aux.size() + 1 > kDeepSupervisionWeights.size()) throw ConfigError("combined_loss: too many auxiliary heads");
  total = scale(total, static_cast<T>(kDeepSupervisionWeights[0]));
  double wsum = kDeepSupervisionWeights[0];
  const std::size_t H = labels.shape()[1];
  for (std::size_t a = 0; a < aux.size(); ++a) {
    const std::size_t h = aux[a].shape()[2];
    if (h == 0 || H % h) throw ShapeError("combined_loss: auxiliary map does not divide the label map");
    const LabelMap lbl = downsample_labels(labels, H / h);
    total = add(total, scale(dice_ce(aux[a], lbl, cfg), static_cast<T>(kDeepSupervisionWeights[a + 1])));
    wsum += kDeepSupervisionWeights[a + 1];
  }
  return scale(total, static_cast<T>(1.0 / wsum));
}

template <class T>
Var<T> combined_loss(const ForwardResult<T>& r, const LabelMap& labels, const TrainConfig& cfg) {
  return combined_loss(r.logits, r.aux, labels, cfg);
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// lr0 * (1 - t/T)^power
inline double poly_lr(std::size_t step, const TrainConfig& cfg) {
  if (step >= cfg.max_steps) return 0.0;
  return cfg.lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(cfg.max_steps), cfg.poly_power);
}

template <class T>
struct OptState {
  /// One velocity per store entry (empty for buffers).
  std::vector<Tensor<T>> velocity;
  std::size_t step = 0;

  static OptState init(const ParamStore<T>& store) {
    OptState s;
    for (const auto& e : store.entries()) {
      s.velocity.push_back(e.trainable ? Tensor<T>::zeros(e.value.shape()) : Tensor<T>{});
    }
    return s;
  }
};

/// v <- momentum v + g + wd p;  p <- p - lr v.  grads[i] aligns with
/// store.entries()[i]; nullptr means a zero gradient.
template <class T>
void sgd_step(ParamStore<T>& store, const std::vector<const Tensor<T>*>& grads, OptState<T>& opt, double lr,
              double momentum, double weight_decay = 0.0) {
  auto& entries = store.entries();
  if (grads.size() != entries.size() || opt.velocity.size() != entries.size()) {
    throw ShapeError("sgd_step: gradient/velocity lists do not match the parameter store");
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (!entries[k].trainable) continue;
    Tensor<T>& p = entries[k].value;
    Tensor<T>& v = opt.velocity[k];
    const Tensor<T>* g = grads[k];
    if (g && g->shape() != p.shape()) throw ShapeError("sgd_step: gradient shape mismatch for " + entries[k].name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      T vi = mu * v[i] + (g ? (*g)[i] : T(0));
      if (weight_decay != 0.0) vi += wd * p[i];
      v[i] = vi;
      p[i] -= step * vi;
    }
  }
  ++opt.step;
}

/// Gradients of every store entry after backward(); unbound or unreachable entries map to nullptr.
template <class T>
std::vector<const Tensor<T>*> collect_grads(const Tape<T>& tape, const Binder<T>& binder, const ParamStore<T>& store) {
  std::vector<const Tensor<T>*> out;
  const auto& names = binder.bound_names();
  for (const auto& e : store.entries()) {
    const Tensor<T>* g = nullptr;
    if (e.trainable && std::find(names.begin(), names.end(), e.name) != names.end()) g = tape.grad(binder.var(e.name));
    out.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation and the training loop
// ---------------------------------------------------------------------------

/// Eval-mode argmax predictions for every sample, in chunks of `chunk`.
inline LabelMap predict_labels(NetworkParams<float>& net, const SampleBatch& data, std::size_t chunk = 4) {
  const std::size_t B = data.count(), H = data.height(), W = data.width();
  LabelMap out({B, H, W});
  for (std::size_t start = 0; start < B; start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, B - start));
    std::iota(idx.begin(), idx.end(), start);
    const LabelMap pred = argmax_classes(predict_logits(net, gather(data, idx).images));
    std::copy_n(pred.raw(), pred.size(), out.raw() + start * H * W);
  }
  return out;
}

inline MetricReport evaluate(NetworkParams<float>& net, const SampleBatch& data, std::size_t num_classes) {
  if (num_classes != net.config.num_classes) {
    throw ConfigError("evaluate: data has " + std::to_string(num_classes) + " classes, network predicts " +
                      std::to_string(net.config.num_classes));
  }
  validate_labels(data.labels, num_classes);
  return evaluate_predictions(predict_labels(net, data), data.labels, num_classes);
}

struct HistoryRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> train_dice;
};

inline void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& rows) {
  os << "step,lr,loss,train_dice\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,", r.step, r.lr, r.loss);
    os << buf;
    if (r.train_dice) {
      std::snprintf(buf, sizeof buf, "%.9g", *r.train_dice);
      os << buf;
    }
    os << "\n";
  }
}

/// Endless stream of sample indices: a fresh seeded permutation per epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::uint64_t seed) : rng_(seed, 0x62617463), order_(count), pos_(count) {}

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
    pos_ = 0;
  }

  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

struct TrainResult {
  NetworkParams<float> net;
  std::vector<HistoryRow> history;
};

using StepCallback = std::function<void(const HistoryRow&)>;

/// Deterministic in (configs, data): initialization, data order and updates all derive from train.seed.
inline TrainResult train_loop(const NetworkConfig& net_cfg, const TrainConfig& cfg, const SampleBatch& data,
                              const StepCallback& on_step = {}) {
  net_cfg.validate();
  cfg.validate();
  if (data.count() == 0) throw ConfigError("train_loop: dataset is empty");
  validate_labels(data.labels, net_cfg.num_classes);
  if (data.height() != net_cfg.image_height || data.width() != net_cfg.image_width) {
    throw ShapeError("train_loop: dataset samples are " + std::to_string(data.height()) + "x" +
                     std::to_string(data.width()) + " but the network expects " +
                     std::to_string(net_cfg.image_height) + "x" + std::to_string(net_cfg.image_width));
  }
  TrainResult res{build_network<float>(net_cfg, cfg.seed), {}};
  OptState<float> opt = OptState<float>::init(res.net.store);
  BatchSampler sampler(data.count(), cfg.seed);
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    const SampleBatch batch = gather(data, sampler.next(cfg.batch_size));
    const double lr = poly_lr(step, cfg);
    HistoryRow row{step, lr, 0, std::nullopt};
    {
      Tape<float> tape;
      Binder<float> binder(tape, res.net.store);
      const ForwardResult<float> fr = forward(binder, net_cfg, tape.constant(batch.images), BNMode::train);
      const Var<float> loss = combined_loss(fr, batch.labels, cfg);
      row.loss = loss.value()[0];
      if (!std::isfinite(row.loss)) throw NumericError("training diverged at step " + std::to_string(step));
      tape.backward(loss);
      sgd_step(res.net.store, collect_grads(tape, binder, res.net.store), opt, lr, cfg.momentum, cfg.weight_decay);
    }
    const bool last = step + 1 == cfg.max_steps;
    if (last || (cfg.eval_every && (step + 1) % cfg.eval_every == 0)) {
      row.train_dice = evaluate(res.net, data, net_cfg.num_classes).mean_dice;
    }
    res.history.push_back(row);
    if (on_step) on_step(row);
  }
  return res;
}

}  // namespace d2mlp
