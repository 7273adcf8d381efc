#include "mic/contrastive.hpp"

#include <cmath>
#include <string>

#include "mic/tensor_ops.hpp"

namespace mic::contrastive {

void ContrastiveConfig::validate(std::size_t d_full) const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("contrastive.temperature must be > 0");
  }
  if (dims.empty()) throw ConfigError("contrastive.dims must not be empty");
  for (std::size_t k = 0; k < dims.size(); ++k) {
    if (dims[k] == 0) throw ConfigError("contrastive.dims entries must be > 0");
    if (k > 0 && dims[k] <= dims[k - 1]) {
      throw ConfigError("contrastive.dims must be strictly increasing");
    }
  }
  if (dims.back() != d_full) {
    throw ConfigError("contrastive.dims must end at the full width " +
                      std::to_string(d_full));
  }
}

void ViewPair::validate() const {
  z_a.require_rank(2, "view a");
  z_b.require_rank(2, "view b");
  if (z_a.shape() != z_b.shape()) {
    throw ContractError("view shapes differ: " + shape_str(z_a.shape()) + " vs " +
                        shape_str(z_b.shape()));
  }
  if (z_a.dim(0) == 0) throw InsufficientBatch("empty view pair");
}

Tensor truncate(const Tensor& z, std::size_t m) {
  z.require_rank(2, "truncate");
  if (m == 0 || m > z.dim(1)) {
    throw InvalidDimension("truncation " + std::to_string(m) + " invalid for width " +
                           std::to_string(z.dim(1)));
  }
  return slice_features(z, 0, m);
}

ag::Var truncate(const ag::Var& z, std::size_t m) {
  const Shape& s = z.shape();
  if (s.size() != 2 || m == 0 || m > s[1]) {
    throw InvalidDimension("truncation " + std::to_string(m) + " invalid for shape " +
                           shape_str(s));
  }
  if (m == s[1]) return z;
  return ag::slice_last(z, 0, m);
}

ag::Var info_nce(const ag::Var& z_a, const ag::Var& z_b, double temperature,
                 EpsilonPolicy eps) {
  ViewPair{z_a.value(), z_b.value()}.validate();
  const ag::Var a = ag::row_normalize(z_a, eps);
  const ag::Var b = ag::row_normalize(z_b, eps);
  const ag::Var logits = ag::matmul(a, ag::permute(b, {1, 0})) / temperature;
  return ag::mean(ag::logsumexp_last(logits) - ag::diag(logits));
}

MrlVars mrl_loss(const ag::Var& z_a, const ag::Var& z_b, const ContrastiveConfig& cfg) {
  cfg.validate(z_a.shape().at(1));
  MrlVars out;
  ag::Var total;
  for (std::size_t m : cfg.dims) {
    ag::Var term = info_nce(truncate(z_a, m), truncate(z_b, m), cfg.temperature, cfg.eps);
    total = total.valid() ? total + term : term;
    out.per_dim.push_back(term);
  }
  out.loss = total / static_cast<double>(cfg.dims.size());
  return out;
}

double info_nce(const Tensor& z_a, const Tensor& z_b, double temperature,
                EpsilonPolicy eps, std::vector<std::size_t>* flagged) {
  if (flagged) {
    for (std::size_t r : row_normalize(z_a, eps).degenerate) flagged->push_back(r);
    for (std::size_t r : row_normalize(z_b, eps).degenerate) flagged->push_back(r);
  }
  ag::Tape tape;
  return info_nce(tape.constant(z_a), tape.constant(z_b), temperature, eps).item();
}

MrlLoss mrl_loss(const ViewPair& pair, const ContrastiveConfig& cfg) {
  pair.validate();
  ag::Tape tape;
  const MrlVars v = mrl_loss(tape.constant(pair.z_a), tape.constant(pair.z_b), cfg);
  MrlLoss out;
  out.loss = v.loss.item();
  for (const auto& t : v.per_dim) out.per_dim.push_back(t.item());
  return out;
}

}  // namespace mic::contrastive
