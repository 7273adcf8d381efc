#pragma once

#include <cstddef>
#include <vector>

#include "mic/autograd.hpp"
#include "mic/tensor.hpp"

/// Two-view InfoNCE and its nested (Matryoshka) average over truncation dims.
namespace mic::contrastive {

struct ContrastiveConfig {
  double temperature = 0.05;
  /// Strictly increasing truncation sizes; the last equals the full width.
  std::vector<std::size_t> dims;
  EpsilonPolicy eps;

  void validate(std::size_t d_full) const;
};

/// Pooled embeddings of one batch under two dropout draws; row i of both
/// views is the same input.
struct ViewPair {
  Tensor z_a;
  Tensor z_b;

  void validate() const;
};

/// First m columns of z. Requires 0 < m <= width.
Tensor truncate(const Tensor& z, std::size_t m);

/// -(1/B) sum_i [s_ii/tau - logsumexp_j s_ij/tau] with cosine similarities
/// s_ij between row i of z_a and row j of z_b. Rows with norm below eps use
/// an eps-floored norm and are appended to `flagged` when given.
double info_nce(const Tensor& z_a, const Tensor& z_b, double temperature,
                EpsilonPolicy eps = {}, std::vector<std::size_t>* flagged = nullptr);

struct MrlLoss {
  double loss = 0.0;
  std::vector<double> per_dim;
};

/// Uniform average of info_nce over every truncation in cfg.dims.
MrlLoss mrl_loss(const ViewPair& pair, const ContrastiveConfig& cfg);

struct MrlVars {
  ag::Var loss;
  std::vector<ag::Var> per_dim;
};

ag::Var truncate(const ag::Var& z, std::size_t m);
ag::Var info_nce(const ag::Var& z_a, const ag::Var& z_b, double temperature,
                 EpsilonPolicy eps);
MrlVars mrl_loss(const ag::Var& z_a, const ag::Var& z_b, const ContrastiveConfig& cfg);

}  // namespace mic::contrastive
