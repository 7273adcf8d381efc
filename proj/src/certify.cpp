#include "mic/certify.hpp"

#include <algorithm>
#include <random>

#include "mic/contrastive.hpp"
#include "mic/encoder.hpp"
#include "mic/error.hpp"
#include "mic/rng.hpp"
#include "mic/scr.hpp"
#include "mic/sir.hpp"
#include "mic/trainer.hpp"

namespace mic::cert {

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = normal(rng);
  return t;
}

SequenceMask random_mask(std::size_t batch, std::size_t length, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(2, length);
  std::vector<std::size_t> lengths(batch);
  for (auto& l : lengths) l = len(rng);
  lengths.front() = length;
  return SequenceMask::from_lengths(lengths, length);
}

}  // namespace

Scope parse_scope(std::string_view name) {
  if (name == "losses") return Scope::Losses;
  if (name == "end2end") return Scope::End2End;
  if (name == "all") return Scope::All;
  throw ConfigError("unknown gradcheck scope '" + std::string(name) +
                    "' (expected losses, end2end or all)");
}

bool SuiteReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed(); });
}

const GradCheckReport& SuiteReport::worst() const {
  if (checks.empty()) throw ContractError("empty gradcheck suite");
  return *std::max_element(checks.begin(), checks.end(), [](const auto& a, const auto& b) {
    return a.max_rel_error() < b.max_rel_error();
  });
}

nlohmann::json SuiteReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  nlohmann::json per_loss = nlohmann::json::object();
  for (const auto& c : checks) {
    list.push_back(c.to_json());
    const double prev = per_loss.value(c.label, 0.0);
    per_loss[c.label] = std::max(prev, c.max_rel_error());
  }
  nlohmann::json out = {{"passed", passed()}, {"max_rel_error_by_loss", per_loss}, {"checks", list}};
  if (!checks.empty()) {
    out["worst"] = {{"label", worst().label},
                    {"param", worst().worst_param()},
                    {"max_rel_error", worst().max_rel_error()}};
  }
  return out;
}

std::vector<std::string> loss_labels() {
  return {"scr.corr_penalty", "scr.variance_floor", "scr.total",
          "sir.cv_loss",      "sir.uniformity_loss", "sir.total",
          "contrastive.info_nce", "contrastive.mrl_loss"};
}

std::vector<GradCheckReport> loss_checks(std::uint64_t seed, const GradCheckOptions& options) {
  std::mt19937_64 rng(derive_seed(seed, "gradcheck-inputs"));
  const std::size_t batch = 3, length = 5, d_full = 8, d = 3;
  const SequenceMask mask = random_mask(batch, length, rng);
  const Tensor h = random_tensor({batch, length, d_full}, rng, 1.0);
  const Tensor h_small = random_tensor({batch, length, d_full}, rng, 0.6);
  const Tensor z = random_tensor({5, 6}, rng, 1.0);
  const Tensor za = random_tensor({4, 6}, rng, 1.0);
  const Tensor zb = random_tensor({4, 6}, rng, 1.0);

  const scr::ScrConfig scr_cfg;
  const sir::SirConfig sir_cfg;
  contrastive::ContrastiveConfig mrl_cfg{0.05, {2, 4, 6}, {}};

  std::vector<GradCheckReport> out;
  auto check = [&](const std::string& label, const LossBuilder& fn,
                   const std::vector<NamedTensor>& params) {
    out.push_back(finite_diff_check(label, fn, params, options));
  };

  check("scr.corr_penalty",
        [&](ag::Tape&, const std::vector<ag::Var>& p) {
          return scr::corr_penalty(scr::cross_correlation(p[0], mask, d, scr_cfg), scr_cfg);
        },
        {{"h", h}});
  check("scr.variance_floor",
        [&](ag::Tape&, const std::vector<ag::Var>& p) {
          return scr::variance_floor(p[0], mask, d);
        },
        {{"h", h_small}});
  check("scr.total",
        [&](ag::Tape&, const std::vector<ag::Var>& p) {
          return scr::scr_loss(p[0], mask, d, scr_cfg).total;
        },
        {{"h", h_small}});
  check("sir.cv_loss",
        [&](ag::Tape&, const std::vector<ag::Var>& p) { return sir::cv_loss(p[0], sir_cfg.eps); },
        {{"z", z}});
  check("sir.uniformity_loss",
        [&](ag::Tape&, const std::vector<ag::Var>& p) {
          return sir::uniformity_loss(ag::row_normalize(p[0], sir_cfg.eps), sir_cfg);
        },
        {{"z", z}});
  check("sir.total",
        [&](ag::Tape&, const std::vector<ag::Var>& p) { return sir::sir_loss(p[0], sir_cfg).total; },
        {{"z", z}});
  check("contrastive.info_nce",
        [&](ag::Tape&, const std::vector<ag::Var>& p) {
          return contrastive::info_nce(p[0], p[1], mrl_cfg.temperature, mrl_cfg.eps);
        },
        {{"z_a", za}, {"z_b", zb}});
  check("contrastive.mrl_loss",
        [&](ag::Tape&, const std::vector<ag::Var>& p) {
          return contrastive::mrl_loss(p[0], p[1], mrl_cfg).loss;
        },
        {{"z_a", za}, {"z_b", zb}});
  return out;
}

GradCheckReport end_to_end_check(std::uint64_t seed, const GradCheckOptions& options,
                                 std::size_t coords_per_param) {
  train::TrainConfig cfg = train::preset("mic");
  cfg.seed = seed;
  cfg.encoder.vocab_size = 24;
  cfg.encoder.d_full = 16;
  cfg.encoder.n_layers = 4;
  cfg.encoder.n_heads = 2;
  cfg.encoder.ff_multiplier = 2;
  cfg.encoder.max_len = 6;
  cfg.contrastive.dims = {4, 8, 16};
  cfg.sync_eps();
  cfg.validate();
  const Encoder enc(cfg.encoder);

  std::mt19937_64 rng(derive_seed(seed, "gradcheck-batch"));
  std::uniform_int_distribution<std::int32_t> token(1, static_cast<std::int32_t>(cfg.encoder.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> len(2, cfg.encoder.max_len);
  std::vector<std::vector<std::int32_t>> seqs(4);
  for (auto& s : seqs) {
    s.resize(len(rng));
    for (auto& t : s) t = token(rng);
  }
  const TokenBatch batch = TokenBatch::from_sequences(seqs, cfg.encoder.max_len);

  GradCheckOptions opts = options;
  opts.max_coords_per_param = coords_per_param;
  opts.sample_seed = derive_seed(seed, "gradcheck-coords");
  GradCheckReport r = finite_diff_check(
      "end2end.l_total",
      [&](ag::Tape& tape, const std::vector<ag::Var>& p) {
        return train::total_loss(tape, p, enc, batch, cfg, 0).total;
      },
      enc.params(), opts);
  return r;
}

SuiteReport run_suite(Scope scope, const SuiteOptions& options) {
  SuiteReport report;
  for (std::uint64_t seed : options.seeds) {
    if (scope != Scope::End2End) {
      for (auto& c : loss_checks(seed, options.check)) report.checks.push_back(std::move(c));
    }
    if (scope != Scope::Losses) {
      report.checks.push_back(
          end_to_end_check(seed, options.check, options.end2end_coords_per_param));
    }
  }
  return report;
}

}  // namespace mic::cert
