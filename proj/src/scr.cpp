#include "mic/scr.hpp"

#include <cmath>
#include <string>

namespace mic::scr {

namespace {

void require_split(const ag::Var& h, const SequenceMask& m, std::size_t d) {
  h.value().require_rank(3, "scr hidden states");
  m.require_matches(h.value());
  m.require_nonempty();
  const std::size_t full = h.shape()[2];
  if (d == 0 || d >= full) {
    throw InvalidDimension("split dimension " + std::to_string(d) +
                           " must satisfy 0 < d < " + std::to_string(full));
  }
}

}  // namespace

void ScrConfig::validate() const {
  if (!(tau_corr >= 0.0 && tau_corr <= 1.0)) {
    throw ConfigError("scr.tau_corr must lie in [0, 1]");
  }
  if (!(lambda_var >= 0.0) || !std::isfinite(lambda_var)) {
    throw ConfigError("scr.lambda_var must be >= 0");
  }
}

ag::Var cross_correlation(const ag::Var& h, const SequenceMask& m, std::size_t d,
                          const ScrConfig& cfg) {
  require_split(h, m, d);
  const std::size_t full = h.shape()[2];
  const ag::Var pre = ag::masked_standardize(ag::slice_last(h, 0, d), m, cfg.eps);
  const ag::Var res = ag::masked_standardize(ag::slice_last(h, d, full), m, cfg.eps);
  return ag::token_cross_correlation(pre, res, m);
}

ag::Var corr_penalty(const ag::Var& c, const ScrConfig& cfg) {
  return ag::mean(ag::hinge_sq(c, cfg.tau_corr));
}

ag::Var variance_floor(const ag::Var& h, const SequenceMask& m, std::size_t d) {
  require_split(h, m, d);
  const std::size_t full = h.shape()[2];
  const ag::Var s_pre = ag::mean(ag::masked_std(ag::slice_last(h, 0, d), m));
  const ag::Var s_res = ag::mean(ag::masked_std(ag::slice_last(h, d, full), m));
  return ag::relu(1.0 - s_pre) + 0.5 * ag::relu(1.0 - s_res);
}

ScrVars scr_loss(const ag::Var& h, const SequenceMask& m, std::size_t d,
                 const ScrConfig& cfg) {
  ScrVars out;
  out.corr = corr_penalty(cross_correlation(h, m, d, cfg), cfg);
  out.var = variance_floor(h, m, d);
  out.total = out.corr + cfg.lambda_var * out.var;
  return out;
}

CrossCorrelation cross_correlation(const Tensor& h, const SequenceMask& m,
                                   std::size_t d, const ScrConfig& cfg) {
  ag::Tape tape;
  const ag::Var c = cross_correlation(tape.constant(h), m, d, cfg);
  return {c.value(), d, h.dim(2) - d};
}

double corr_penalty(const Tensor& c, const ScrConfig& cfg) {
  c.require_rank(2, "corr_penalty");
  ag::Tape tape;
  return corr_penalty(tape.constant(c), cfg).item();
}

double corr_penalty(const CrossCorrelation& c, const ScrConfig& cfg) {
  return corr_penalty(c.c, cfg);
}

double variance_floor(const Tensor& h, const SequenceMask& m, std::size_t d) {
  ag::Tape tape;
  return variance_floor(tape.constant(h), m, d).item();
}

ScrTerms scr_loss(const Tensor& h, const SequenceMask& m, std::size_t d,
                  const ScrConfig& cfg) {
  ag::Tape tape;
  const ScrVars v = scr_loss(tape.constant(h), m, d, cfg);
  return {v.corr.item(), v.var.item(), v.total.item()};
}

}  // namespace mic::scr
