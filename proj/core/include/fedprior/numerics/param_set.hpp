#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedprior/numerics/tensor.hpp"

namespace fedprior {

/// Named parameter tensors, iterated in lexicographic path order.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  ParamSet() = default;

  /// Inserts a new entry; throws ContractError on a duplicate path.
  void add(const std::string& path, Tensor value);
  /// Inserts or replaces.
  void set(const std::string& path, Tensor value) { entries_[path] = std::move(value); }

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t num_values() const;

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }

  std::vector<std::string> paths() const;

  /// Same path set and identical dims per path.
  bool shape_compatible(const ParamSet& other) const;

  /// Zero tensors with the same paths and dims.
  ParamSet zeros_like() const;

  /// Concatenated values in path order.
  std::vector<double> flatten() const;
  /// Inverse of flatten() against this set's layout.
  ParamSet unflatten(const std::vector<double>& flat) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  Map entries_;
};

bool bit_equal(const ParamSet& a, const ParamSet& b);

}  // namespace fedprior
