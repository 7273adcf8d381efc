// Acceptance gates. Prints one [PASS]/[FAIL] line per criterion and exits
// nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <numeric>
#include <random>
#include <sstream>

#include "mic/certify.hpp"
#include "mic/cli.hpp"
#include "mic/contrastive.hpp"
#include "mic/corpus.hpp"
#include "mic/diagnostics.hpp"
#include "mic/eval.hpp"
#include "mic/scr.hpp"
#include "mic/sir.hpp"
#include "mic/tensor_ops.hpp"
#include "mic/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mic;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

/// Counts oracle mismatches and remembers the worst relative gap.
struct Tally {
  std::size_t checks = 0;
  std::size_t failures = 0;
  double worst = 0.0;

  void add(double got, double ref, double rel) {
    ++checks;
    const double scale = std::max(std::abs(got), std::abs(ref));
    if (scale > 1e-13) worst = std::max(worst, std::abs(got - ref) / scale);
    if (!oracle::rel_close(got, ref, rel)) ++failures;
  }
};

std::vector<std::vector<std::int32_t>> tokenize_all(const std::vector<std::string>& text,
                                                     std::size_t vocab) {
  std::vector<std::vector<std::int32_t>> out;
  out.reserve(text.size());
  for (const auto& s : text) out.push_back(tokenize(s, vocab));
  return out;
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  constexpr double kRel = 1e-10;
  constexpr int kReps = 20;
  const double eps = EpsilonPolicy::kDefault;
  std::mt19937_64 rng(101);
  std::map<std::string, Tally> tallies;

  for (int rep = 0; rep < kReps; ++rep) {
    const std::size_t B = 1 + rep % 4;
    const std::size_t L = 1 + rep % 5;
    const std::size_t D = 2 + rep % 7;
    const std::size_t d = 1 + rep % (D - 1);
    const Tensor h = oracle::random_tensor({B, L, D}, rng, 1.5);
    const SequenceMask m = oracle::random_mask(B, L, rng);

    const MaskedMoments mom = masked_moments(h, m);
    const oracle::Moments ref = oracle::masked_moments(h, m);
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t j = 0; j < D; ++j) {
        tallies["masked_moments"].add(mom.means.at(i, j), ref.mean[i][j], kRel);
        tallies["masked_moments"].add(mom.vars.at(i, j), ref.var[i][j], kRel);
      }
    }

    const Tensor x = masked_standardize(h, m);
    const Tensor xr = oracle::standardize(h, m, 0, D, eps);
    for (std::size_t k = 0; k < x.numel(); ++k) tallies["masked_standardize"].add(x[k], xr[k], kRel);

    const scr::ScrConfig scfg;
    const auto c = scr::cross_correlation(h, m, d, scfg);
    const oracle::Matrix cr = oracle::cross_correlation(h, m, d, eps);
    for (std::size_t u = 0; u < d; ++u) {
      for (std::size_t v = 0; v < D - d; ++v) tallies["cross_correlation"].add(c.c.at(u, v), cr[u][v], kRel);
    }

    // Widen C so a good share of entries lands above the threshold.
    Tensor cw = c.c;
    for (double& v : cw.vec()) v *= 3.0;
    oracle::Matrix cwm(d, std::vector<double>(D - d));
    for (std::size_t u = 0; u < d; ++u) {
      for (std::size_t v = 0; v < D - d; ++v) cwm[u][v] = cw.at(u, v);
    }
    tallies["corr_penalty"].add(scr::corr_penalty(cw, scfg), oracle::corr_penalty(cwm, scfg.tau_corr), kRel);

    tallies["variance_floor"].add(scr::variance_floor(h, m, d), oracle::variance_floor(h, m, d), kRel);

    const std::size_t Bz = 2 + rep % 3;
    const Tensor z = oracle::random_tensor({Bz, D}, rng, 1.2);
    tallies["cv_loss"].add(sir::cv_loss(z), oracle::cv_loss(z, eps), kRel);

    const Tensor zhat = oracle::normalize_rows(z, eps);
    tallies["uniformity_loss"].add(sir::uniformity_loss(zhat, {}), oracle::uniformity(zhat, 2.0, eps), kRel);

    const Tensor za = oracle::random_tensor({B, D}, rng);
    const Tensor zb = oracle::random_tensor({B, D}, rng);
    tallies["info_nce"].add(contrastive::info_nce(za, zb, 0.05), oracle::info_nce(za, zb, D, 0.05, eps), kRel);

    std::vector<std::size_t> dims;
    for (std::size_t k = 1; k < D; k *= 2) dims.push_back(k);
    dims.push_back(D);
    const contrastive::ContrastiveConfig ccfg{0.05, dims, {}};
    tallies["mrl_loss"].add(contrastive::mrl_loss({za, zb}, ccfg).loss, oracle::mrl(za, zb, dims, 0.05, eps), kRel);
  }

  Outcome o;
  std::size_t total = 0;
  double worst = 0.0;
  for (const auto& [name, t] : tallies) {
    total += t.checks;
    worst = std::max(worst, t.worst);
    if (t.failures > 0) {
      o.pass = false;
      o.detail += name + " " + std::to_string(t.failures) + " mismatches; ";
    }
  }
  const double secs = seconds_since(t0);
  if (tallies.size() != 9) o.pass = false;
  if (secs >= 10.0) o.pass = false;
  o.detail += std::to_string(tallies.size()) + " functions x " + std::to_string(kReps) + " instances, " +
              std::to_string(total) + " values, worst rel gap " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s";
  return o;
}

Outcome gradient_certification() {
  const auto t0 = Clock::now();
  cert::SuiteOptions so;
  so.seeds = {0, 1, 2};
  const cert::SuiteReport r = cert::run_suite(cert::Scope::All, so);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = r.passed() && secs < 120.0;
  const auto j = r.to_json();
  double worst = 0.0;
  for (const auto& [label, v] : j["max_rel_error_by_loss"].items()) worst = std::max(worst, v.get<double>());
  o.detail = std::to_string(j["checks"].size()) + " checks, max rel error " + fmt(worst, 3) + ", " +
             fmt(secs, 3) + " s";
  if (!r.passed()) o.detail += ", worst " + j["worst"]["label"].get<std::string>();
  return o;
}

Outcome analytic_anchors() {
  Outcome o;
  const scr::ScrConfig scfg;
  const double corr = scr::corr_penalty(Tensor::matrix(1, 1, {1.0}), scfg);
  if (std::abs(corr - 0.81) > 1e-12) o.pass = false;

  const double floor = scr::variance_floor(Tensor({2, 3, 4}, 0.7), SequenceMask::full(2, 3), 2);
  if (floor != 1.5) o.pass = false;

  const Tensor same = Tensor::matrix(2, 3, {0.6, 0.0, 0.8, 0.6, 0.0, 0.8});
  const double unif = sir::uniformity_loss(same, {});
  if (std::abs(unif - std::log(1.0 + EpsilonPolicy::kDefault)) > 1e-12) o.pass = false;

  const double nce = contrastive::info_nce(Tensor::matrix(1, 3, {1, 2, 3}), Tensor::matrix(1, 3, {-1, 0, 2}), 0.05);
  if (nce != 0.0) o.pass = false;

  o.detail = "corr " + fmt(corr, 17) + ", floor " + fmt(floor, 17) + ", unif " + fmt(unif, 17) + ", nce " +
             fmt(nce, 17);
  return o;
}

Outcome hinge_deadzone() {
  const scr::ScrConfig cfg;
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> inside(-cfg.tau_corr, cfg.tau_corr);
  std::uniform_real_distribution<double> outside(cfg.tau_corr + 0.05, 0.95);
  std::bernoulli_distribution coin(0.5);
  std::size_t changed = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t rows = 1 + rep % 4, cols = 1 + (rep / 4) % 6;
    Tensor c({rows, cols});
    std::vector<std::size_t> band;
    for (std::size_t k = 0; k < c.numel(); ++k) {
      if (coin(rng)) {
        c[k] = inside(rng);
        band.push_back(k);
      } else {
        c[k] = coin(rng) ? outside(rng) : -outside(rng);
      }
    }
    const double base = scr::corr_penalty(c, cfg);
    Tensor p = c;
    for (std::size_t k : band) p[k] = inside(rng);
    if (scr::corr_penalty(p, cfg) != base) ++changed;
  }
  return {changed == 0, "1000 perturbations, " + std::to_string(changed) + " changed the penalty"};
}

// ---------------------------------------------------------------------------

struct SeedMetrics {
  double pooled_mass = 0.0;
  double token_mass = 0.0;
  double cv8 = 0.0;
  double unif8 = 0.0;
  double acc_small = 0.0;
  double acc_full = 0.0;
};

struct TrendRuns {
  std::vector<SeedMetrics> mrl, mic;
  std::vector<train::LossBreakdown> mic_log;
  double gamma = 0.0;
  double seconds = 0.0;
};

SeedMetrics measure(const Encoder& enc, const std::vector<std::vector<std::int32_t>>& seqs,
                    const std::vector<data::TextPair>& pairs, const train::TrainConfig& cfg) {
  SeedMetrics s;
  const Tensor emb = diag::embed_sequences(enc, seqs);
  s.cv8 = diag::variance_profile(emb, {8}).prefix_cv(8);
  s.unif8 = diag::uniformity_report(emb, {8}, cfg.sir, 0).rows[0].unif;

  std::size_t maps = 0;
  for (std::size_t l : cfg.layers.aligned_layers) {
    const diag::LayerStates st = diag::layer_states(enc, seqs, l);
    const Tensor pooled = masked_mean_pool(st.h, st.mask);
    for (std::size_t d : cfg.contrastive.dims) {
      if (d >= cfg.encoder.d_full) continue;
      s.pooled_mass += diag::cross_corr_map(pooled, d, cfg.scr.tau_corr).mass_above;
      s.token_mass += diag::cross_corr_map(st.h, st.mask, d, cfg.scr.tau_corr).mass_above;
      ++maps;
    }
  }
  s.pooled_mass /= static_cast<double>(maps);
  s.token_mass /= static_cast<double>(maps);

  const std::size_t small = cfg.contrastive.dims.front();
  const eval::EvalReport pe = eval::pair_eval(enc, pairs, {small, cfg.encoder.d_full});
  s.acc_small = pe.rows[0].value;
  s.acc_full = pe.rows[1].value;
  return s;
}

TrendRuns trend_runs() {
  const auto t0 = Clock::now();
  testutil::TempDir dir("acceptance-trend");
  data::write_file(dir / "clusters.tsv", data::generate_corpus(data::CorpusKind::Clusters, 320, 7));
  data::write_file(dir / "pairs.tsv", data::generate_corpus(data::CorpusKind::Pairs, 1000, 11));
  const auto pairs = data::read_pairs(dir / "pairs.tsv");

  TrendRuns runs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const char* name : {"mrl", "mic"}) {
      train::TrainConfig cfg = train::preset(name);
      cfg.seed = seed;
      cfg.sync_eps();
      const auto seqs = tokenize_all(data::read_sentences(dir / "clusters.tsv"), cfg.encoder.vocab_size);
      train::RunOptions ro;
      ro.out_dir = dir / (std::string(name) + std::to_string(seed));
      const train::RunResult r = train::run(cfg, seqs, ro);
      const SeedMetrics m = measure(r.state.encoder, seqs, pairs, cfg);
      if (std::string(name) == "mrl") {
        runs.mrl.push_back(m);
      } else {
        runs.mic.push_back(m);
        if (seed == 0) {
          runs.mic_log = train::read_metrics(ro.out_dir / "metrics.ndjson");
          runs.gamma = cfg.gamma;
        }
      }
    }
  }
  runs.seconds = seconds_since(t0);
  return runs;
}

Outcome trend_reproduction(const TrendRuns& runs) {
  int mass = 0, cv = 0, unif = 0, token = 0;
  for (std::size_t s = 0; s < runs.mic.size(); ++s) {
    mass += runs.mic[s].pooled_mass < runs.mrl[s].pooled_mass;
    cv += runs.mic[s].cv8 < runs.mrl[s].cv8;
    unif += runs.mic[s].unif8 < runs.mrl[s].unif8;
    token += runs.mic[s].token_mass < runs.mrl[s].token_mass;
  }
  Outcome o;
  o.pass = mass >= 4 && cv >= 4 && unif >= 4 && runs.seconds < 600.0;
  o.detail = "mic better in: corr mass " + std::to_string(mass) + "/5, cv@8 " + std::to_string(cv) +
             "/5, unif@8 " + std::to_string(unif) + "/5 (token-level mass " + std::to_string(token) +
             "/5, not gated); 10 runs in " + fmt(runs.seconds, 3) + " s";
  return o;
}

Outcome downstream_direction(const TrendRuns& runs) {
  int wins = 0, close = 0;
  std::string accs;
  for (std::size_t s = 0; s < runs.mic.size(); ++s) {
    wins += runs.mic[s].acc_small >= runs.mrl[s].acc_small;
    close += std::abs(runs.mic[s].acc_full - runs.mrl[s].acc_full) <= 0.05;
    accs += " " + fmt(runs.mic[s].acc_small, 3) + "/" + fmt(runs.mrl[s].acc_small, 3) + " (full " +
            fmt(runs.mic[s].acc_full, 3) + "/" + fmt(runs.mrl[s].acc_full, 3) + ")";
  }
  Outcome o;
  o.pass = wins >= 3 && close == static_cast<int>(runs.mic.size());
  o.detail = "acc@4 mic>=mrl " + std::to_string(wins) + "/5, full-dim within 0.05 " + std::to_string(close) +
             "/5; mic/mrl acc@4:" + accs;
  return o;
}

Outcome recomposition(const TrendRuns& runs) {
  Outcome o;
  double worst_total = 0.0, worst_align = 0.0;
  for (const train::LossBreakdown& b : runs.mic_log) {
    worst_total = std::max(worst_total, std::abs(b.l_total - (b.l_mrl + b.gamma * b.l_align)));
    double sum = 0.0;
    for (const auto& e : b.align) sum += e.scr + e.sir;
    if (b.align.empty()) {
      o.pass = false;
      continue;
    }
    worst_align = std::max(worst_align, std::abs(b.l_align - sum / static_cast<double>(b.align.size())));
    double mrl = 0.0;
    for (double v : b.infonce) mrl += v;
    worst_total = std::max(worst_total, std::abs(b.l_mrl - mrl / static_cast<double>(b.infonce.size())));
    if (b.gamma != runs.gamma) o.pass = false;
  }
  if (runs.mic_log.empty() || worst_total > 1e-10 || worst_align > 1e-10) o.pass = false;
  o.detail = std::to_string(runs.mic_log.size()) + " steps, max |total gap| " + fmt(worst_total, 3) +
             ", max |align gap| " + fmt(worst_align, 3);
  return o;
}

Outcome determinism() {
  testutil::TempDir dir("acceptance-det");
  auto run = [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    return cli::run(args, out, err);
  };
  const std::string corpus = (dir / "c.tsv").string();
  const std::string sts = (dir / "sts.tsv").string();
  Outcome o;
  if (run({"gen-corpus", "--kind", "clusters", "--size", "96", "--seed", "3", "--out", corpus}) != 0 ||
      run({"gen-corpus", "--kind", "sts-graded", "--size", "60", "--seed", "4", "--out", sts}) != 0) {
    return {false, "corpus generation failed"};
  }
  for (const char* r : {"r1", "r2"}) {
    if (run({"train", "--preset", "mic", "--epochs", "2", "--corpus", corpus, "--out", (dir / r).string()}) != 0) {
      return {false, "train failed"};
    }
  }
  for (const char* e : {"e1", "e2"}) {
    if (run({"eval", "--task", "sts", "--checkpoint", (dir / "r1").string(), "--data", sts, "--out",
             (dir / e).string()}) != 0) {
      return {false, "eval failed"};
    }
  }
  const bool metrics = data::read_file(dir / "r1" / "metrics.ndjson") == data::read_file(dir / "r2" / "metrics.ndjson");
  const bool ckpt = data::read_file(dir / "r1" / "checkpoint.json") == data::read_file(dir / "r2" / "checkpoint.json");
  const bool csv = data::read_file(dir / "e1" / "sts_report.csv") == data::read_file(dir / "e2" / "sts_report.csv");
  const bool json = data::read_file(dir / "e1" / "sts_report.json") == data::read_file(dir / "e2" / "sts_report.json");
  o.pass = metrics && ckpt && csv && json;
  o.detail = std::string("metrics ") + (metrics ? "identical" : "DIFFER") + ", checkpoint " +
             (ckpt ? "identical" : "DIFFER") + ", eval csv " + (csv ? "identical" : "DIFFER") + ", eval json " +
             (json ? "identical" : "DIFFER");
  return o;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(909);
  std::size_t rho_bad = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rep % 40;
    std::vector<double> x(n), y(n);
    std::iota(x.begin(), x.end(), 0.0);
    std::iota(y.begin(), y.end(), 0.0);
    std::shuffle(x.begin(), x.end(), rng);
    std::shuffle(y.begin(), y.end(), rng);
    if (eval::spearman(x, y) != oracle::spearman_no_ties(x, y)) ++rho_bad;
  }
  std::size_t thr_bad = 0, thr_runs = 0;
  std::uniform_int_distribution<int> grid(-6, 6);
  std::normal_distribution<double> gauss;
  std::bernoulli_distribution coin(0.5);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rep % 49;
    std::vector<double> sims(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      sims[i] = rep % 2 ? grid(rng) / 6.0 : gauss(rng);
      labels[i] = coin(rng);
    }
    const eval::ThresholdResult got = eval::best_threshold(sims, labels);
    const oracle::Threshold ref = oracle::brute_threshold(sims, labels);
    ++thr_runs;
    if (got.accuracy != ref.accuracy || got.threshold != ref.t) ++thr_bad;
  }
  return {rho_bad == 0 && thr_bad == 0,
          "spearman 100 permutations, " + std::to_string(rho_bad) + " mismatches; threshold " +
              std::to_string(thr_runs) + " sets (N<=50), " + std::to_string(thr_bad) + " mismatches"};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << id << ". " << name << ": " << o.detail << std::endl;
  };

  report(1, "oracle equivalence", oracle_equivalence);
  report(2, "gradient certification", gradient_certification);
  report(3, "analytic anchors", analytic_anchors);
  report(4, "hinge deadzone", hinge_deadzone);

  std::optional<TrendRuns> runs;
  std::string trend_error;
  try {
    runs = trend_runs();
  } catch (const std::exception& e) {
    trend_error = e.what();
  }
  auto with_runs = [&](Outcome (*fn)(const TrendRuns&)) {
    return [&, fn]() -> Outcome {
      if (!runs) return {false, "training failed: " + trend_error};
      return fn(*runs);
    };
  };
  report(5, "trend reproduction", with_runs(trend_reproduction));
  report(6, "downstream direction", with_runs(downstream_direction));
  report(7, "recomposition invariant", with_runs(recomposition));
  report(8, "determinism", determinism);
  report(9, "evaluation-metric oracles", metric_oracles);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
