// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "d2mlp/rng.hpp"
#include "d2mlp/tape.hpp"
#include "d2mlp/tensor.hpp"

namespace d2mlp {

enum class Init { he_uniform, zeros, ones };

/// One named tensor of a model. Buffers (trainable == false) hold running
/// statistics and never receive gradients.
struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::zeros;
  std::size_t fan_in = 1;
  bool trainable = true;
};

using Manifest = std::vector<ParamSpec>;

inline std::size_t manifest_numel(const Manifest& m, bool trainable_only = true) {
  std::size_t n = 0;
  for (const auto& p : m) {
    if (!trainable_only || p.trainable) n += shape_numel(p.shape);
  }
  return n;
}

template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  void add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value), trainable});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second];
  }

  Tensor<T>& at(const std::string& name) { return entry(name).value; }
  const Tensor<T>& at(const std::string& name) const { return entry(name).value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Number of trainable scalars.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.value.size();
    }
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Allocates and initializes every tensor of a manifest, in manifest order,
/// from one seeded stream. He-uniform draws from U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <class T>
ParamStore<T> materialize(const Manifest& manifest, std::uint64_t seed) {
  Rng rng(seed, 0x7061726d);
  ParamStore<T> store;
  for (const auto& spec : manifest) {
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case Init::zeros:
        break;
      case Init::ones:
        t.fill(T(1));
        break;
      case Init::he_uniform: {
        const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
    store.add(spec.name, std::move(t), spec.trainable);
  }
  return store;
}

/// Checks that a store holds exactly the manifest's names and shapes.
template <class T>
void validate_against(const ParamStore<T>& store, const Manifest& manifest) {
  if (store.entries().size() != manifest.size()) {
    throw FormatError("parameter count mismatch: expected " + std::to_string(manifest.size()) + " tensors, found " +
                      std::to_string(store.entries().size()));
  }
  for (const auto& spec : manifest) {
    if (!store.contains(spec.name)) throw FormatError("missing parameter " + spec.name);
    const auto& e = store.entry(spec.name);
    if (e.value.shape() != spec.shape) {
      throw FormatError("parameter " + spec.name + " has shape " + to_string(e.value.shape()) + ", expected " +
                        to_string(spec.shape));
    }
  }
}

/// Exposes store tensors as tape leaves, binding each name at most once.
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParamStore<T>& store, bool requires_grad = true)
      : tape_(tape), store_(store), requires_grad_(requires_grad) {}

  Tape<T>& tape() { return tape_; }
  ParamStore<T>& store() { return store_; }

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto& e = store_.entry(name);
    Var<T> v = tape_.leaf(e.value, requires_grad_ && e.trainable);
    bound_.emplace(name, v);
    order_.push_back(name);
    return v;
  }

  /// Pre-binds a name to an existing variable (used by gradcheck to route perturbed inputs).
  void bind(const std::string& name, Var<T> v) {
    if (bound_.count(name)) throw ConfigError("parameter already bound: " + name);
    bound_.emplace(name, v);
    order_.push_back(name);
  }

  Tensor<T>& buffer(const std::string& name) { return store_.at(name); }

  const std::vector<std::string>& bound_names() const { return order_; }
  Var<T> var(const std::string& name) const { return bound_.at(name); }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  bool requires_grad_;
  std::unordered_map<std::string, Var<T>> bound_;
  std::vector<std::string> order_;
};

}  // namespace d2mlp
