#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mic/autograd.hpp"

namespace mic {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates whose relative error exceeds this (and are not kinks) fail.
  double tolerance = 1e-4;
  /// 0 checks every coordinate; otherwise a seeded sample of this size per
  /// parameter tensor.
  std::size_t max_coords_per_param = 0;
  std::uint64_t sample_seed = 0;
  /// Forwarded to Tape::inject_fault on the differentiated tape.
  std::string fault_op;
};

struct ParamCheck {
  std::string name;
  std::size_t total_coords = 0;
  std::vector<std::size_t> checked;  // coordinates evaluated
  std::vector<std::size_t> kinks;    // excluded as nondifferentiable points
  /// Excluded because |g_ad - g_fd(h)| <= 2 |g_fd(h) - g_fd(2h)|, i.e. the
  /// gradient is below what differences at this step can resolve.
  std::vector<std::size_t> unresolved;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_coord = 0;
};

struct GradCheckReport {
  std::string label;
  double step = 0.0;
  double tolerance = 0.0;
  double loss = 0.0;
  std::vector<ParamCheck> params;

  double max_rel_error() const;
  bool passed() const { return max_rel_error() < tolerance; }
  /// Name of the parameter with the largest relative error.
  std::string worst_param() const;
  nlohmann::json to_json() const;
};

/// Builds a scalar loss on `tape` from leaf vars in the order given.
using LossBuilder =
    std::function<ag::Var(ag::Tape& tape, const std::vector<ag::Var>& params)>;

/// Compares reverse-mode gradients with central differences
/// (f(p+h) - f(p-h)) / 2h. Relative error is |g_ad - g_fd| divided by
/// max(|g_ad|, |g_fd|, 1e-8). Coordinates that fail and show a one-sided
/// slope or curvature jump are recorded as kinks instead of failures; those
/// whose error is within the spread of the h and 2h estimates are recorded as
/// unresolved.
/// Throws DeterminismError if two baseline evaluations disagree.
GradCheckReport finite_diff_check(const std::string& label,
                                  const LossBuilder& loss,
                                  const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& options = {});

}  // namespace mic
