#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "driftcast/common.hpp"

namespace driftcast {

struct LayoutEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Immutable map from tensor names to slices of one flat value array.
class ParamLayout {
 public:
  ParamLayout() = default;

  void add(std::string name, std::vector<std::size_t> shape) {
    std::size_t size = 1;
    for (std::size_t d : shape) size *= d;
    entries_.push_back({std::move(name), std::move(shape), total_, size});
    total_ += size;
  }

  std::size_t total_size() const { return total_; }
  std::size_t entry_count() const { return entries_.size(); }
  const LayoutEntry& entry(std::size_t i) const { return entries_[i]; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    throw ContractError("ParamLayout: no entry named '" + std::string(name) + "'");
  }

  bool operator==(const ParamLayout& o) const {
    if (total_ != o.total_ || entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name != o.entries_[i].name || entries_[i].shape != o.entries_[i].shape)
        return false;
    return true;
  }

 private:
  std::vector<LayoutEntry> entries_;
  std::size_t total_ = 0;
};

using ParamLayoutPtr = std::shared_ptr<const ParamLayout>;

inline bool same_layout(const ParamLayoutPtr& a, const ParamLayoutPtr& b) {
  return a == b || (a && b && *a == *b);
}

// Flat 64-bit float parameter vector plus its layout. All arithmetic is
// elementwise and layout-preserving.
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(ParamLayoutPtr layout)
      : layout_(std::move(layout)), values_(layout_ ? layout_->total_size() : 0, 0.0) {}

  ParamVector(ParamLayoutPtr layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (!layout_ || values_.size() != layout_->total_size())
      throw ContractError("ParamVector: values length does not match layout size");
  }

  const ParamLayoutPtr& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<double> slice(std::size_t entry_index) {
    const auto& e = layout_->entry(entry_index);
    return {values_.data() + e.offset, e.size};
  }
  std::span<const double> slice(std::size_t entry_index) const {
    const auto& e = layout_->entry(entry_index);
    return {values_.data() + e.offset, e.size};
  }

 private:
  ParamLayoutPtr layout_;
  std::vector<double> values_;
};

// Gradients share the layout of the vector they differentiate.
using GradVector = ParamVector;

inline void check_compatible(const ParamVector& a, const ParamVector& b) {
  if (!same_layout(a.layout(), b.layout()))
    throw ContractError("ParamVector: incompatible layouts");
}

inline ParamVector add(const ParamVector& a, const ParamVector& b) {
  check_compatible(a, b);
  ParamVector out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline ParamVector sub(const ParamVector& a, const ParamVector& b) {
  check_compatible(a, b);
  ParamVector out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline ParamVector scale(const ParamVector& a, double c) {
  ParamVector out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return out;
}

// a += c * b, in place.
inline void axpy(ParamVector& a, double c, const ParamVector& b) {
  check_compatible(a, b);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += c * b[i];
}

inline double l2_norm_sq(const ParamVector& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
  return s;
}

inline double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  check_compatible(a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace driftcast
