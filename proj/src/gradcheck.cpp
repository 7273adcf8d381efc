#include "mic/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace mic {

namespace {

double evaluate(const LossBuilder& loss, const std::vector<NamedTensor>& params) {
  ag::Tape tape;
  std::vector<ag::Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.constant(p.value));
  return loss(tape, vars).item();
}

std::vector<std::size_t> pick_coords(std::size_t total, std::size_t limit,
                                     std::uint64_t seed) {
  std::vector<std::size_t> coords(total);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (limit == 0 || limit >= total) return coords;
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(limit);
  std::sort(coords.begin(), coords.end());
  return coords;
}

}  // namespace

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_rel_error);
  return worst;
}

std::string GradCheckReport::worst_param() const {
  const ParamCheck* worst = nullptr;
  for (const auto& p : params) {
    if (!worst || p.max_rel_error > worst->max_rel_error) worst = &p;
  }
  return worst ? worst->name : std::string();
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j;
  j["label"] = label;
  j["step"] = step;
  j["tolerance"] = tolerance;
  j["loss"] = loss;
  j["max_rel_error"] = max_rel_error();
  j["passed"] = passed();
  auto& arr = j["params"] = nlohmann::json::array();
  for (const auto& p : params) {
    arr.push_back({{"name", p.name},
                   {"total_coords", p.total_coords},
                   {"checked_coords", p.checked},
                   {"kink_coords", p.kinks},
                   {"unresolved_coords", p.unresolved},
                   {"max_rel_error", p.max_rel_error},
                   {"max_abs_error", p.max_abs_error},
                   {"worst_coord", p.worst_coord}});
  }
  return j;
}

GradCheckReport finite_diff_check(const std::string& label,
                                  const LossBuilder& loss,
                                  const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ContractError("finite-difference step must be > 0");

  ag::Tape tape;
  if (!options.fault_op.empty()) tape.inject_fault(options.fault_op);
  std::vector<ag::Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.leaf(p.value, p.name));
  const ag::Var root = loss(tape, leaves);
  tape.backward(root);

  const double f0 = root.item();
  const double again = evaluate(loss, params);
  if (f0 != again) {
    throw DeterminismError("loss '" + label + "' is not deterministic: " +
                           std::to_string(f0) + " vs " + std::to_string(again));
  }

  GradCheckReport report;
  report.label = label;
  report.step = options.step;
  report.tolerance = options.tolerance;
  report.loss = f0;

  const double h = options.step;
  constexpr double kMachEps = std::numeric_limits<double>::epsilon();
  std::vector<NamedTensor> work = params;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor analytic = leaves[pi].grad();
    ParamCheck check;
    check.name = params[pi].name;
    check.total_coords = params[pi].value.numel();
    check.checked = pick_coords(check.total_coords, options.max_coords_per_param,
                                options.sample_seed + pi);
    for (std::size_t c : check.checked) {
      const double orig = params[pi].value[c];
      auto at = [&](double offset) {
        work[pi].value[c] = orig + offset;
        const double v = evaluate(loss, work);
        work[pi].value[c] = orig;
        return v;
      };
      const double fp = at(h);
      const double fm = at(-h);
      const double numeric = (fp - fm) / (2.0 * h);
      const double ga = analytic[c];
      const double abs_err = std::abs(ga - numeric);
      const double rel_err =
          abs_err / std::max({std::abs(ga), std::abs(numeric), 1e-8});

      if (rel_err >= options.tolerance) {
        const double fp2 = at(2.0 * h);
        const double fm2 = at(-2.0 * h);
        const double scale = std::max({std::abs(f0), std::abs(fp2), std::abs(fm2), 1.0});
        const double d1p = (fp - f0) / h, d1m = (f0 - fm) / h;
        const double d2p = (fp2 - 2.0 * fp + f0) / (h * h);
        const double d2m = (f0 - 2.0 * fm + fm2) / (h * h);
        const double noise1 = 64.0 * kMachEps * scale / h;
        const double noise2 = 64.0 * kMachEps * scale / (h * h);
        const bool curvature_jump =
            std::abs(d2p - d2m) > 0.5 * std::max(std::abs(d2p), std::abs(d2m)) + noise2;
        const bool slope_jump =
            std::abs((d1p - d1m) - 0.5 * h * (d2p + d2m)) >
            1e-3 * std::max(std::abs(d1p), std::abs(d1m)) + noise1;
        if (curvature_jump || slope_jump) {
          check.kinks.push_back(c);
          continue;
        }
        // The two central estimates disagree by at least as much as the
        // analytic value does: the coordinate is below difference resolution.
        const double numeric2 = (fp2 - fm2) / (4.0 * h);
        if (abs_err <= 2.0 * std::abs(numeric - numeric2)) {
          check.unresolved.push_back(c);
          continue;
        }
      }
      if (rel_err > check.max_rel_error) {
        check.max_rel_error = rel_err;
        check.worst_coord = c;
      }
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
    }
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace mic
