#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mic/error.hpp"

namespace mic {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major real tensor of rank 0..4.
///
/// Hidden states are rank 3 (batch, tokens, features); pooled embeddings,
/// correlation and kernel matrices are rank 2; scalars are rank 0.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& vec() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  /// Throws ContractError unless rank equals `expected`.
  void require_rank(std::size_t expected, const char* what) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Binary (batch, tokens) mask of active positions with per-row counts.
class SequenceMask {
 public:
  SequenceMask() = default;
  SequenceMask(std::size_t batch, std::size_t length,
               std::vector<std::uint8_t> flags);

  static SequenceMask full(std::size_t batch, std::size_t length);
  static SequenceMask from_lengths(const std::vector<std::size_t>& lengths,
                                   std::size_t length);

  std::size_t batch() const noexcept { return batch_; }
  std::size_t length() const noexcept { return length_; }
  bool active(std::size_t i, std::size_t l) const {
    return flags_[i * length_ + l] != 0;
  }
  double weight(std::size_t i, std::size_t l) const {
    return flags_[i * length_ + l] ? 1.0 : 0.0;
  }
  std::size_t count(std::size_t i) const { return counts_[i]; }
  const std::vector<std::uint8_t>& flags() const noexcept { return flags_; }

  /// Throws DegenerateSequence if any row has no active token.
  void require_nonempty() const;
  /// Throws ContractError unless the mask matches a (batch, tokens, *) tensor.
  void require_matches(const Tensor& h) const;

  /// Mask as a (batch, tokens, 1) tensor of 0/1 values for broadcasting.
  Tensor as_tensor() const;

  friend bool operator==(const SequenceMask&, const SequenceMask&) = default;

 private:
  std::size_t batch_ = 0;
  std::size_t length_ = 0;
  std::vector<std::uint8_t> flags_;
  std::vector<std::size_t> counts_;
};

/// Small positive constant guarding divisions and logs.
class EpsilonPolicy {
 public:
  static constexpr double kDefault = 1e-5;

  EpsilonPolicy() = default;
  explicit EpsilonPolicy(double eps);

  double value() const noexcept { return eps_; }

 private:
  double eps_ = kDefault;
};

}  // namespace mic
