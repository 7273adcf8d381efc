#pragma once

#include "mic/autograd.hpp"
#include "mic/tensor.hpp"

/// Spectral isotropy regularization on pooled prefix embeddings.
namespace mic::sir {

struct SirConfig {
  /// Kernel bandwidth scale; the potential is exp(-2t(1 - cos)).
  double t = 2.0;
  EpsilonPolicy eps;

  void validate() const;
};

/// Pooled prefix embeddings and their row-normalized copy.
struct PooledPrefix {
  Tensor z;
  Tensor z_hat;
};

PooledPrefix pooled_prefix(const Tensor& h, const SequenceMask& m, std::size_t d,
                           EpsilonPolicy eps = {});

struct SirTerms {
  double cv = 0.0;
  double unif = 0.0;
  double total = 0.0;
};

/// Population per-dimension variance over the batch, shape (d). Needs B >= 2.
Tensor dim_variances(const Tensor& z);

/// std(v) / (mean(v) + eps) over the per-dimension variances v.
double cv_loss(const Tensor& z, EpsilonPolicy eps = {});

/// log of the mean off-diagonal RBF potential plus eps. Rows must be unit norm.
double uniformity_loss(const Tensor& z_hat, const SirConfig& cfg = {});

/// (cv + unif) / 2, with z row-normalized internally for the uniformity term.
SirTerms sir_loss(const Tensor& z, const SirConfig& cfg = {});

struct SirVars {
  ag::Var cv;
  ag::Var unif;
  ag::Var total;
};

ag::Var dim_variances(const ag::Var& z);
ag::Var cv_loss(const ag::Var& z, EpsilonPolicy eps);
ag::Var uniformity_loss(const ag::Var& z_hat, const SirConfig& cfg);
SirVars sir_loss(const ag::Var& z, const SirConfig& cfg);

}  // namespace mic::sir
