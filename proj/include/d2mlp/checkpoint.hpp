// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "d2mlp/d2t.hpp"
#include "d2mlp/network.hpp"

namespace d2mlp {

// .d2c layout, all integers little-endian:
//   "D2C\0" | u32 version | u32 json length | config JSON (sorted keys)
//   | u32 tensor count | { u16 name length | name | .d2t record } * count

inline constexpr std::array<char, 4> kCheckpointMagic = {'D', '2', 'C', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string canonical_config_json(const NetworkConfig& cfg) { return nlohmann::json(cfg).dump(); }

inline void write_checkpoint(std::ostream& os, const NetworkParams<float>& net) {
  const std::string cfg = canonical_config_json(net.config);
  io::write_bytes(os, kCheckpointMagic.data(), kCheckpointMagic.size());
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.size()));
  io::write_bytes(os, cfg.data(), cfg.size());
  const auto& entries = net.store.entries();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > UINT16_MAX) throw FormatError("parameter name too long: " + e.name);
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    io::write_bytes(os, e.name.data(), e.name.size());
    write_d2t(os, e.value);
  }
  if (!os) throw FormatError("checkpoint write failed");
}

/// Reads a checkpoint and checks every tensor against the manifest implied by its config.
inline NetworkParams<float> read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw FormatError("not a .d2c checkpoint (bad magic)");
  }
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = io::read_le<std::uint32_t>(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw FormatError("checkpoint config truncated");
  NetworkConfig cfg;
  try {
    cfg = nlohmann::json::parse(text).get<NetworkConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint config: " + std::string(e.what()));
  }
  cfg.validate();
  const Manifest manifest = network_manifest(cfg);
  ParamStore<float> loaded;
  const auto count = io::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto n = io::read_le<std::uint16_t>(is);
    std::string name(n, '\0');
    if (!is.read(name.data(), n)) throw FormatError("checkpoint tensor name truncated");
    loaded.add(name, read_d2t_as<float>(is));
  }
  validate_against(loaded, manifest);
  ParamStore<float> store;
  for (const auto& spec : manifest) store.add(spec.name, loaded.at(spec.name), spec.trainable);
  return {cfg, std::move(store)};
}

inline void save_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& net) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, net);
}

inline NetworkParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace d2mlp
