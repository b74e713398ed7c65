// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "d2mlp/d2t.hpp"
#include "d2mlp/rng.hpp"
#include "d2mlp/tensor.hpp"

namespace d2mlp {

/// images: (B, 1, H, W) in [0, 1]; labels: (B, H, W) class ids.
struct SampleBatch {
  Tensor<float> images;
  LabelMap labels;

  std::size_t count() const { return labels.empty() ? 0 : labels.shape()[0]; }
  std::size_t height() const { return labels.shape()[1]; }
  std::size_t width() const { return labels.shape()[2]; }
};

struct DatasetMeta {
  std::size_t count = 0;
  std::size_t size = 0;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;
};

inline constexpr double kSynthNoiseSigma = 0.05;

/// Mean intensity of class k: background 0.2, foreground spread up to 0.8.
inline double synth_intensity(std::size_t k, std::size_t num_classes) {
  return 0.2 + 0.6 * static_cast<double>(k) / static_cast<double>(num_classes - 1);
}

namespace detail {

struct Box {
  long y0, x0, y1, x1;  // inclusive
  bool overlaps(const Box& o, long margin) const {
    return !(y1 + margin < o.y0 || o.y1 + margin < y0 || x1 + margin < o.x0 || o.x1 + margin < x0);
  }
};

/// Places one ellipse or rectangle per foreground class, all mutually
/// separated by at least one background pixel and clear of the image border.
inline void synth_one(Rng& rng, std::size_t size, std::size_t num_classes, float* image, std::uint8_t* labels) {
  const double S = static_cast<double>(size);
  const double fg = static_cast<double>(num_classes - 1);
  double lo = 0.10 * S / std::sqrt(fg), hi = 0.22 * S / std::sqrt(fg);
  std::fill_n(labels, size * size, std::uint8_t{0});
  std::vector<Box> placed;
  for (std::size_t k = 1; k < num_classes; ++k) {
    bool done = false;
    for (int round = 0; !done; ++round) {
      for (int attempt = 0; attempt < 200 && !done; ++attempt) {
        const bool ellipse = rng.below(2) == 0;
        const double ry = rng.uniform(lo, hi), rx = rng.uniform(lo, hi);
        const double cy = rng.uniform(ry + 1.0, S - ry - 1.0);
        const double cx = rng.uniform(rx + 1.0, S - rx - 1.0);
        const Box box{static_cast<long>(std::floor(cy - ry)), static_cast<long>(std::floor(cx - rx)),
                      static_cast<long>(std::ceil(cy + ry)), static_cast<long>(std::ceil(cx + rx))};
        if (std::any_of(placed.begin(), placed.end(), [&](const Box& b) { return box.overlaps(b, 1); })) continue;
        std::size_t painted = 0;
        for (long y = std::max(0L, box.y0); y <= std::min<long>(static_cast<long>(size) - 1, box.y1); ++y) {
          for (long x = std::max(0L, box.x0); x <= std::min<long>(static_cast<long>(size) - 1, box.x1); ++x) {
            const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
            const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
            const bool in = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
            if (in) {
              labels[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] = static_cast<std::uint8_t>(k);
              ++painted;
            }
          }
        }
        if (painted == 0) continue;
        placed.push_back(box);
        done = true;
      }
      if (!done) {
        lo *= 0.8;
        hi *= 0.8;
        if (hi < 1.0) throw Error("synth_generate: cannot place non-overlapping shapes");
      }
    }
  }
  for (std::size_t i = 0; i < size * size; ++i) {
    const double v = synth_intensity(labels[i], num_classes) + kSynthNoiseSigma * rng.normal();
    image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

}  // namespace detail

/// Deterministic in (seed, sample index): a longer run extends a shorter one.
inline SampleBatch synth_generate(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t num_classes) {
  if (count < 1) throw ConfigError("synth_generate: count must be at least 1");
  if (size == 0 || size % 32 != 0) {
    throw ShapeError("synth_generate: size must be divisible by 32, got " + std::to_string(size));
  }
  if (num_classes < 2 || num_classes > 255) throw ConfigError("synth_generate: num_classes must be in [2, 255]");
  SampleBatch b{Tensor<float>({count, 1, size, size}), LabelMap({count, size, size})};
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed, i + 1);
    detail::synth_one(rng, size, num_classes, b.images.raw() + i * size * size, b.labels.raw() + i * size * size);
  }
  return b;
}

/// Copies the listed samples into a new batch.
inline SampleBatch gather(const SampleBatch& src, const std::vector<std::size_t>& idx) {
  const std::size_t H = src.height(), W = src.width(), C = src.images.shape()[1];
  SampleBatch out{Tensor<float>({idx.size(), C, H, W}), LabelMap({idx.size(), H, W})};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src.images.raw() + idx[i] * C * H * W, C * H * W, out.images.raw() + i * C * H * W);
    std::copy_n(src.labels.raw() + idx[i] * H * W, H * W, out.labels.raw() + i * H * W);
  }
  return out;
}

inline void validate_labels(const LabelMap& labels, std::size_t num_classes) {
  for (std::uint8_t v : labels.data()) {
    if (v >= num_classes) {
      throw ConfigError("label id " + std::to_string(v) + " is outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// On-disk layout: img_%04d.d2t (1 x H x W f32), lbl_%04d.d2t (H x W u8), meta.json
// ---------------------------------------------------------------------------

inline std::string sample_file(const char* stem, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.d2t", stem, i);
  return buf;
}

inline nlohmann::json to_json(const DatasetMeta& m) {
  return {{"count", m.count}, {"size", m.size}, {"num_classes", m.num_classes}, {"seed", m.seed}};
}

inline void write_dataset(const std::filesystem::path& dir, const SampleBatch& batch, const DatasetMeta& meta) {
  std::filesystem::create_directories(dir);
  const std::size_t H = batch.height(), W = batch.width();
  for (std::size_t i = 0; i < batch.count(); ++i) {
    Tensor<float> img({1, H, W});
    std::copy_n(batch.images.raw() + i * H * W, H * W, img.raw());
    LabelMap lbl({H, W});
    std::copy_n(batch.labels.raw() + i * H * W, H * W, lbl.raw());
    save_d2t(dir / sample_file("img", i), img);
    save_d2t(dir / sample_file("lbl", i), lbl);
  }
  std::ofstream os(dir / "meta.json", std::ios::binary | std::ios::trunc);
  os << to_json(meta).dump(2) << "\n";
  if (!os) throw FormatError("cannot write meta.json in " + dir.string());
}

inline DatasetMeta read_dataset_meta(const std::filesystem::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) throw FormatError("dataset " + dir.string() + " has no readable meta.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("meta.json: " + std::string(e.what()));
  }
  DatasetMeta m;
  try {
    m.count = j.at("count").get<std::size_t>();
    m.size = j.at("size").get<std::size_t>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("meta.json: " + std::string(e.what()));
  }
  if (m.count == 0) throw FormatError("dataset " + dir.string() + " is empty");
  return m;
}

inline SampleBatch read_dataset(const std::filesystem::path& dir, DatasetMeta* meta_out = nullptr) {
  const DatasetMeta meta = read_dataset_meta(dir);
  const std::size_t S = meta.size;
  SampleBatch b{Tensor<float>({meta.count, 1, S, S}), LabelMap({meta.count, S, S})};
  for (std::size_t i = 0; i < meta.count; ++i) {
    const auto img = load_d2t_as<float>(dir / sample_file("img", i));
    const auto lbl = load_d2t_as<std::uint8_t>(dir / sample_file("lbl", i));
    if (img.shape() != Shape{1, S, S} || lbl.shape() != Shape{S, S}) {
      throw FormatError("sample " + std::to_string(i) + " does not match the dataset size " + std::to_string(S));
    }
    std::copy_n(img.raw(), S * S, b.images.raw() + i * S * S);
    std::copy_n(lbl.raw(), S * S, b.labels.raw() + i * S * S);
  }
  validate_labels(b.labels, meta.num_classes);
  if (meta_out) *meta_out = meta;
  return b;
}

}  // namespace d2mlp
