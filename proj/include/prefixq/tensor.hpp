#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prefixq/rng.hpp"

namespace prefixq {

// All arrays in the project are dense row-major 2-D blocks of doubles.
// Token sequences are rows; a single token or row vector is 1×d.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  bool operator==(const Shape&) const = default;
};

inline Shape shape_of(const Matrix& m) { return {m.rows(), m.cols()}; }

std::string to_string(Shape s);

bool all_finite(const Matrix& m);

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0);
Matrix random_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo, double hi);

// Name-ordered collection of arrays with immutable shapes. Used both for
// trainable parameters and for the gradients that mirror them.
class NamedTensors {
 public:
  using Storage = std::map<std::string, Matrix>;
  using const_iterator = Storage::const_iterator;

  // Throws on duplicate names or non-finite entries.
  void add(const std::string& name, Matrix value);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Matrix& at(const std::string& name) const;

  // Overwrites the entry; shape must match the existing one.
  void assign(const std::string& name, const Matrix& value);
  // Mutable access for in-place updates; caller keeps the shape fixed.
  Matrix& mutable_at(const std::string& name);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t scalar_count() const;

  const_iterator begin() const { return entries_.begin(); }
  const_iterator end() const { return entries_.end(); }

  std::vector<std::string> names() const;

  // Same key set and shapes as `other`.
  bool same_layout(const NamedTensors& other) const;

  NamedTensors zeros_like() const;

  // Entries whose names start with `prefix`.
  NamedTensors subset(const std::string& prefix) const;
  void merge(const NamedTensors& other);

  bool operator==(const NamedTensors& other) const;

 private:
  Storage entries_;
};

using ParamSet = NamedTensors;
using GradSet = NamedTensors;

}  // namespace prefixq
