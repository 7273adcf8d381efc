#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mic/gradcheck.hpp"

/// Finite-difference certification of every loss and of the full objective.
namespace mic::cert {

enum class Scope { Losses, End2End, All };

/// "losses", "end2end" or "all"; throws ConfigError otherwise.
Scope parse_scope(std::string_view name);

struct SuiteOptions {
  GradCheckOptions check;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  /// Coordinates sampled per encoder parameter in the end-to-end check.
  std::size_t end2end_coords_per_param = 12;
};

struct SuiteReport {
  std::vector<GradCheckReport> checks;

  bool passed() const;
  /// Check with the largest relative error; checks must be non-empty.
  const GradCheckReport& worst() const;
  nlohmann::json to_json() const;
};

/// Labels of the individual loss checks, in run order.
std::vector<std::string> loss_labels();

/// One check per loss on random inputs drawn from `seed`.
std::vector<GradCheckReport> loss_checks(std::uint64_t seed, const GradCheckOptions& options);

/// L_total through the 4-layer toy encoder with dropout, w.r.t. every
/// encoder parameter tensor.
GradCheckReport end_to_end_check(std::uint64_t seed, const GradCheckOptions& options,
                                 std::size_t coords_per_param);

SuiteReport run_suite(Scope scope, const SuiteOptions& options = {});

}  // namespace mic::cert
