#pragma once

#include <utility>
#include <vector>

#include "mic/tensor.hpp"

namespace mic {

/// Splits the feature axis of a (B, L, D) tensor at `d` into a prefix of
/// width d and a residual of width D - d. Requires 0 < d < D.
std::pair<Tensor, Tensor> split_prefix_residual(const Tensor& h, std::size_t d);

/// Concatenates two tensors along their last axis.
Tensor concat_features(const Tensor& a, const Tensor& b);

/// Copies feature columns [begin, end) of a rank-2 or rank-3 tensor.
Tensor slice_features(const Tensor& t, std::size_t begin, std::size_t end);

struct MaskedMoments {
  Tensor means;  // (B, D)
  Tensor vars;   // (B, D), population normalization over active tokens
};

/// Per-sequence mean and variance over active tokens.
MaskedMoments masked_moments(const Tensor& h, const SequenceMask& m);

/// Per-sequence masked standard deviation, sqrt of masked_moments().vars.
Tensor masked_std(const Tensor& h, const SequenceMask& m);

/// M * (h - mu) / (sigma + eps). Masked-out positions are exactly zero.
Tensor masked_standardize(const Tensor& h, const SequenceMask& m,
                          EpsilonPolicy eps = {});

/// Mean over active tokens, (B, L, D) -> (B, D).
Tensor masked_mean_pool(const Tensor& h, const SequenceMask& m);

struct RowNormalized {
  Tensor rows;
  /// Rows whose norm fell below eps; they were divided by eps instead.
  std::vector<std::size_t> degenerate;
};

/// Scales every row to unit L2 norm, flooring the norm at eps.
RowNormalized row_normalize(const Tensor& z, EpsilonPolicy eps = {});

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace mic
