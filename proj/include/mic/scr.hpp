#pragma once

#include <cstddef>

#include "mic/autograd.hpp"
#include "mic/tensor.hpp"

/// Soft collapse regularization: thresholded cross-correlation between the
/// standardized prefix and residual token features, plus a variance floor on
/// the raw subspace scales.
namespace mic::scr {

struct ScrConfig {
  double tau_corr = 0.1;
  double lambda_var = 0.1;
  EpsilonPolicy eps;

  /// Throws ConfigError on tau_corr outside [0,1] or negative lambda_var.
  void validate() const;
};

/// d x d_res token-wise cross-correlation matrix.
struct CrossCorrelation {
  Tensor c;
  std::size_t d = 0;
  std::size_t d_res = 0;
};

struct ScrTerms {
  double corr = 0.0;
  double var = 0.0;
  double total = 0.0;
};

CrossCorrelation cross_correlation(const Tensor& h, const SequenceMask& m,
                                   std::size_t d, const ScrConfig& cfg);

/// Mean over entries of max(0, |C_uv| - tau_corr)^2.
double corr_penalty(const CrossCorrelation& c, const ScrConfig& cfg);
double corr_penalty(const Tensor& c, const ScrConfig& cfg);

/// max(0, 1 - s_pre) + 0.5 * max(0, 1 - s_res), where s is the mean over
/// sequences and dimensions of the masked per-sequence standard deviation of
/// the raw subspace.
double variance_floor(const Tensor& h, const SequenceMask& m, std::size_t d);

/// corr + lambda_var * var.
ScrTerms scr_loss(const Tensor& h, const SequenceMask& m, std::size_t d,
                  const ScrConfig& cfg);

// Differentiable forms; same contracts as above.
struct ScrVars {
  ag::Var corr;
  ag::Var var;
  ag::Var total;
};

ag::Var cross_correlation(const ag::Var& h, const SequenceMask& m, std::size_t d,
                          const ScrConfig& cfg);
ag::Var corr_penalty(const ag::Var& c, const ScrConfig& cfg);
ag::Var variance_floor(const ag::Var& h, const SequenceMask& m, std::size_t d);
ScrVars scr_loss(const ag::Var& h, const SequenceMask& m, std::size_t d,
                 const ScrConfig& cfg);

}  // namespace mic::scr
