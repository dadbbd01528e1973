#pragma once

#include "scenectx/diffcore/tensor.hpp"

#include <cstring>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace scenectx::diff {

template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  bool frozen = false;
};

/// Ordered collection of named parameters. Names are unique; insertion order
/// is preserved so that serialization and iteration are deterministic.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Mat<T> value, bool frozen = false) {
    if (index_.count(name) != 0) {
      throw std::invalid_argument("duplicate parameter name: " + name);
    }
    index_.emplace(name, params_.size());
    params_.push_back(Parameter<T>{std::move(name), std::move(value), frozen});
    return params_.back();
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  const Parameter<T>& at(std::string_view name) const { return params_.at(lookup(name)); }
  Parameter<T>& at(std::string_view name) { return params_.at(lookup(name)); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }

  /// Total scalar count, optionally restricted to names starting with prefix.
  std::size_t scalar_count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (std::string_view(p.name).substr(0, prefix.size()) == prefix) {
        n += static_cast<std::size_t>(p.value.size());
      }
    }
    return n;
  }

  void set_frozen(std::string_view prefix, bool frozen) {
    for (auto& p : params_) {
      if (std::string_view(p.name).substr(0, prefix.size()) == prefix) p.frozen = frozen;
    }
  }

  /// Copies every parameter of other into this set (names must not clash).
  void merge(const ParameterSet& other) {
    for (const auto& p : other) add(p.name, p.value, p.frozen);
  }

  ParameterSet subset(std::string_view prefix) const {
    ParameterSet out;
    for (const auto& p : params_) {
      if (std::string_view(p.name).substr(0, prefix.size()) == prefix) out.add(p.name, p.value, p.frozen);
    }
    return out;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.frozen);
    return out;
  }

  /// Bitwise equality of names, shapes, values and freeze flags.
  bool identical(const ParameterSet& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& a = params_[i];
      const auto& b = other.params_[i];
      if (a.name != b.name || a.frozen != b.frozen || a.value.rows() != b.value.rows() ||
          a.value.cols() != b.value.cols()) {
        return false;
      }
      if (a.value.size() > 0 &&
          std::memcmp(a.value.data(), b.value.data(), sizeof(T) * static_cast<std::size_t>(a.value.size())) != 0) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t lookup(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
    return it->second;
  }

  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ModelState = ParameterSet<float>;

/// Deterministic initializers. All draw from the supplied engine in row-major
/// order so that a fixed seed gives bit-identical parameters.
MatF normal_init(Index rows, Index cols, float stddev, std::mt19937_64& rng);
MatF xavier_init(Index rows, Index cols, std::mt19937_64& rng);

}  // namespace scenectx::diff
