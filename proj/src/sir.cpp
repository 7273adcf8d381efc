#include "mic/sir.hpp"

#include <cmath>
#include <string>

#include "mic/tensor_ops.hpp"

namespace mic::sir {

namespace {

void require_batch(const Tensor& z, const char* what) {
  z.require_rank(2, what);
  if (z.dim(0) < 2) {
    throw InsufficientBatch(std::string(what) + " needs at least 2 rows, got " +
                            std::to_string(z.dim(0)));
  }
  if (z.dim(1) < 1) throw InvalidDimension(std::string(what) + " needs d >= 1");
}

}  // namespace

void SirConfig::validate() const {
  if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("sir.t must be > 0");
}

PooledPrefix pooled_prefix(const Tensor& h, const SequenceMask& m, std::size_t d,
                           EpsilonPolicy eps) {
  h.require_rank(3, "pooled_prefix");
  if (d == 0 || d > h.dim(2)) {
    throw InvalidDimension("prefix dimension " + std::to_string(d) + " invalid for width " +
                           std::to_string(h.dim(2)));
  }
  Tensor z = slice_features(masked_mean_pool(h, m), 0, d);
  Tensor z_hat = row_normalize(z, eps).rows;
  return {std::move(z), std::move(z_hat)};
}

ag::Var dim_variances(const ag::Var& z) {
  require_batch(z.value(), "dim_variances");
  const ag::Var centered = z - ag::mean_axis(z, 0, true);
  return ag::mean_axis(ag::square(centered), 0, false);
}

ag::Var cv_loss(const ag::Var& z, EpsilonPolicy eps) {
  const ag::Var v = dim_variances(z);
  const ag::Var v_bar = ag::mean(v);
  const ag::Var spread = ag::sqrt(ag::mean(ag::square(v - v_bar)));
  return spread / (v_bar + eps.value());
}

ag::Var uniformity_loss(const ag::Var& z_hat, const SirConfig& cfg) {
  require_batch(z_hat.value(), "uniformity_loss");
  const double b = static_cast<double>(z_hat.shape()[0]);
  const ag::Var sim = ag::matmul(z_hat, ag::permute(z_hat, {1, 0}));
  const ag::Var kernel = ag::exp(ag::affine(sim, 2.0 * cfg.t, -2.0 * cfg.t));
  const ag::Var off_diag = ag::sum(kernel) - ag::sum(ag::diag(kernel));
  return ag::log(off_diag / (b * (b - 1.0)) + cfg.eps.value());
}

SirVars sir_loss(const ag::Var& z, const SirConfig& cfg) {
  SirVars out;
  out.cv = cv_loss(z, cfg.eps);
  out.unif = uniformity_loss(ag::row_normalize(z, cfg.eps), cfg);
  out.total = 0.5 * (out.cv + out.unif);
  return out;
}

Tensor dim_variances(const Tensor& z) {
  ag::Tape tape;
  return dim_variances(tape.constant(z)).value();
}

double cv_loss(const Tensor& z, EpsilonPolicy eps) {
  ag::Tape tape;
  return cv_loss(tape.constant(z), eps).item();
}

double uniformity_loss(const Tensor& z_hat, const SirConfig& cfg) {
  ag::Tape tape;
  return uniformity_loss(tape.constant(z_hat), cfg).item();
}

SirTerms sir_loss(const Tensor& z, const SirConfig& cfg) {
  ag::Tape tape;
  const SirVars v = sir_loss(tape.constant(z), cfg);
  return {v.cv.item(), v.unif.item(), v.total.item()};
}

}  // namespace mic::sir
