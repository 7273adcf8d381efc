#include "mic/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace mic {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ContractError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ContractError("axis " + std::to_string(axis) + " out of range for " +
                        shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ContractError("cannot reshape " + shape_str(shape_) + " to " +
                        shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::require_rank(std::size_t expected, const char* what) const {
  if (rank() != expected) {
    throw ContractError(std::string(what) + ": expected rank " +
                        std::to_string(expected) + ", got shape " +
                        shape_str(shape_));
  }
}

SequenceMask::SequenceMask(std::size_t batch, std::size_t length,
                           std::vector<std::uint8_t> flags)
    : batch_(batch), length_(length), flags_(std::move(flags)), counts_(batch, 0) {
  if (flags_.size() != batch * length) {
    throw ContractError("mask flags length does not match (batch, tokens)");
  }
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t l = 0; l < length; ++l) {
      const auto f = flags_[i * length + l];
      if (f > 1) throw ContractError("mask flags must be 0 or 1");
      counts_[i] += f;
    }
  }
}

SequenceMask SequenceMask::full(std::size_t batch, std::size_t length) {
  return SequenceMask(batch, length,
                      std::vector<std::uint8_t>(batch * length, 1));
}

SequenceMask SequenceMask::from_lengths(const std::vector<std::size_t>& lengths,
                                        std::size_t length) {
  std::vector<std::uint8_t> flags(lengths.size() * length, 0);
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] > length) {
      throw ContractError("sequence length exceeds mask width");
    }
    for (std::size_t l = 0; l < lengths[i]; ++l) flags[i * length + l] = 1;
  }
  return SequenceMask(lengths.size(), length, std::move(flags));
}

void SequenceMask::require_nonempty() const {
  for (std::size_t i = 0; i < batch_; ++i) {
    if (counts_[i] == 0) {
      throw DegenerateSequence("sequence " + std::to_string(i) +
                               " has no active tokens");
    }
  }
}

void SequenceMask::require_matches(const Tensor& h) const {
  if (h.rank() != 3 || h.dim(0) != batch_ || h.dim(1) != length_) {
    throw ContractError("mask (" + std::to_string(batch_) + "," +
                        std::to_string(length_) +
                        ") does not match hidden states " +
                        shape_str(h.shape()));
  }
}

Tensor SequenceMask::as_tensor() const {
  Tensor t({batch_, length_, 1});
  for (std::size_t k = 0; k < flags_.size(); ++k) t[k] = flags_[k];
  return t;
}

EpsilonPolicy::EpsilonPolicy(double eps) : eps_(eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    throw ConfigError("eps must be a finite positive number");
  }
}

}  // namespace mic
