#include "prefixq/tensor.hpp"

#include "prefixq/errors.hpp"

namespace prefixq {

std::string to_string(Shape s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

Matrix random_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo, double hi) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

void NamedTensors::add(const std::string& name, Matrix value) {
  if (contains(name)) throw InvalidArgument("duplicate tensor name '" + name + "'");
  if (!value.allFinite()) throw NonFinite("tensor '" + name + "' has non-finite entries");
  entries_.emplace(name, std::move(value));
}

const Matrix& NamedTensors::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InvalidArgument("unknown tensor name '" + name + "'");
  return it->second;
}

void NamedTensors::assign(const std::string& name, const Matrix& value) {
  Matrix& slot = mutable_at(name);
  if (shape_of(slot) != shape_of(value)) {
    throw ShapeMismatch("tensor '" + name + "' is " + to_string(shape_of(slot)) + ", got " +
                        to_string(shape_of(value)));
  }
  slot = value;
}

Matrix& NamedTensors::mutable_at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InvalidArgument("unknown tensor name '" + name + "'");
  return it->second;
}

std::size_t NamedTensors::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : entries_) n += static_cast<std::size_t>(m.size());
  return n;
}

std::vector<std::string> NamedTensors::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

bool NamedTensors::same_layout(const NamedTensors& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || shape_of(a->second) != shape_of(b->second)) return false;
  }
  return true;
}

NamedTensors NamedTensors::zeros_like() const {
  NamedTensors out;
  for (const auto& [name, m] : entries_) out.entries_.emplace(name, Matrix::Zero(m.rows(), m.cols()));
  return out;
}

NamedTensors NamedTensors::subset(const std::string& prefix) const {
  NamedTensors out;
  for (const auto& [name, m] : entries_) {
    if (name.rfind(prefix, 0) == 0) out.entries_.emplace(name, m);
  }
  return out;
}

void NamedTensors::merge(const NamedTensors& other) {
  for (const auto& [name, m] : other.entries_) add(name, m);
}

bool NamedTensors::operator==(const NamedTensors& other) const {
  if (!same_layout(other)) return false;
  auto b = other.entries_.begin();
  for (auto a = entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->second != b->second) return false;
  }
  return true;
}

}  // namespace prefixq
