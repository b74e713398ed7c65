// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "d2mlp/network.hpp"
#include "d2mlp/training.hpp"

namespace d2mlp {

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    if (k == "lr0") d.lr0 = v.get<double>();
    else if (k == "max_steps") d.max_steps = v.get<std::size_t>();
    else if (k == "poly_power") d.poly_power = v.get<double>();
    else if (k == "momentum") d.momentum = v.get<double>();
    else if (k == "weight_decay") d.weight_decay = v.get<double>();
    else if (k == "batch_size") d.batch_size = v.get<std::size_t>();
    else if (k == "seed") d.seed = v.get<std::uint64_t>();
    else if (k == "dice_eps") d.dice_eps = v.get<double>();
    else if (k == "dice_denominator") d.dice_denominator = parse_dice_denominator(v.get<std::string>());
    else if (k == "eval_every") d.eval_every = v.get<std::size_t>();
    else throw ConfigError("unknown train config key '" + k + "'");
  }
  c = d;
}

struct RunPaths {
  std::string dataset;
  /// Relative paths resolve against output_dir.
  std::string checkpoint = "model.d2c";
  std::string output_dir = "run";

  std::filesystem::path checkpoint_path() const {
    const std::filesystem::path p(checkpoint);
    return p.is_absolute() ? p : std::filesystem::path(output_dir) / p;
  }
  std::filesystem::path history_path() const { return std::filesystem::path(output_dir) / "history.csv"; }
};

/// Flat JSON object with "network.*", "train.*" and "paths.*" keys.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  RunPaths paths;

  void validate() const {
    network.validate();
    train.validate();
  }
};

/// Every key, defaults included, in flat dotted form.
inline nlohmann::json to_flat_json(const RunConfig& rc) {
  nlohmann::json out = nlohmann::json::object();
  const nlohmann::json net = rc.network, train = rc.train;
  for (const auto& [k, v] : net.items()) out["network." + k] = v;
  for (const auto& [k, v] : train.items()) out["train." + k] = v;
  out["paths.dataset"] = rc.paths.dataset;
  out["paths.checkpoint"] = rc.paths.checkpoint;
  out["paths.output_dir"] = rc.paths.output_dir;
  return out;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  nlohmann::json net = nlohmann::json::object(), train = nlohmann::json::object();
  RunConfig rc;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      const auto dot = key.find('.');
      const std::string group = dot == std::string::npos ? key : key.substr(0, dot);
      const std::string field = dot == std::string::npos ? "" : key.substr(dot + 1);
      if (group == "network" && !field.empty()) net[field] = it.value();
      else if (group == "train" && !field.empty()) train[field] = it.value();
      else if (key == "paths.dataset") rc.paths.dataset = it.value().get<std::string>();
      else if (key == "paths.checkpoint") rc.paths.checkpoint = it.value().get<std::string>();
      else if (key == "paths.output_dir") rc.paths.output_dir = it.value().get<std::string>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
    rc.network = net.get<NetworkConfig>();
    rc.train = train.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace d2mlp
