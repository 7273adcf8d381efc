#include <doctest.h>

#include <cmath>
#include <random>

#include "mic/autograd.hpp"
#include "mic/certify.hpp"
#include "mic/gradcheck.hpp"
#include "mic/scr.hpp"
#include "mic/sir.hpp"
#include "oracles.hpp"

using namespace mic;

namespace {

double max_rel(const GradCheckReport& r) { return r.max_rel_error(); }

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("sum gives ones") {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor::matrix(2, 3, {1, -2, 3, 4, 5, -6}));
  tape.backward(ag::sum(x));
  CHECK(x.grad() == Tensor({2, 3}, 1.0));
}

TEST_CASE("half squared norm gives x") {
  ag::Tape tape;
  const Tensor v = Tensor::matrix(1, 4, {0.5, -1.5, 2, 3});
  const ag::Var x = tape.leaf(v);
  tape.backward(0.5 * ag::sum(ag::square(x)));
  CHECK(x.grad() == v);
}

TEST_CASE("fan-out accumulates additively") {
  std::mt19937_64 rng(1);
  const Tensor v = oracle::random_tensor({3, 4}, rng);
  auto f = [](const ag::Var& x) { return ag::sum(ag::exp(x) * x); };
  ag::Tape t1;
  const ag::Var x1 = t1.leaf(v);
  t1.backward(f(x1));
  ag::Tape t2;
  const ag::Var x2 = t2.leaf(v);
  t2.backward(f(x2) + f(x2));
  for (std::size_t k = 0; k < v.numel(); ++k) {
    CHECK(oracle::rel_close(x2.grad()[k], 2.0 * x1.grad()[k], 1e-14));
  }
}

TEST_CASE("non-scalar root is a contract error") {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor({2, 2}, 1.0));
  CHECK_THROWS_AS(tape.backward(ag::exp(x)), ContractError);
}

TEST_CASE("unregistered op is a hard error") {
  ag::Tape tape;
  const ag::Var x = tape.leaf(Tensor({2}, 1.0));
  const ag::Var y = tape.record("mystery", Tensor({2}, 3.0), {x}, {});
  CHECK_THROWS_AS(tape.backward(ag::sum(y)), UnregisteredOp);
}

TEST_CASE("constants receive no gradient") {
  ag::Tape tape;
  const ag::Var c = tape.constant(Tensor({2}, 2.0));
  const ag::Var x = tape.leaf(Tensor({2}, 3.0));
  tape.backward(ag::sum(c * x));
  CHECK(!c.requires_grad());
  CHECK(x.grad() == Tensor({2}, 2.0));
}

TEST_CASE("quadratic loss is exact to roundoff") {
  std::mt19937_64 rng(2);
  const Tensor a = oracle::random_tensor({4, 4}, rng);
  const GradCheckReport r = finite_diff_check(
      "quadratic",
      [&](ag::Tape& tape, const std::vector<ag::Var>& p) {
        const ag::Var y = ag::matmul(tape.constant(a), p[0]);
        return ag::sum(ag::square(y)) + ag::sum(p[0]);
      },
      {{"x", oracle::random_tensor({4, 2}, rng)}});
  CHECK(max_rel(r) < 1e-7);
  CHECK(r.passed());
}

TEST_CASE("uniformity gradient on a random batch") {
  std::mt19937_64 rng(3);
  const GradCheckReport r = finite_diff_check(
      "unif",
      [](ag::Tape&, const std::vector<ag::Var>& p) {
        return sir::uniformity_loss(ag::row_normalize(p[0], EpsilonPolicy()), sir::SirConfig{});
      },
      {{"z", oracle::random_tensor({5, 8}, rng)}});
  CHECK(max_rel(r) < 1e-4);
  CHECK(r.params[0].checked.size() == 40);
}

TEST_CASE("scr gradient on a random (2,3,8) input") {
  std::mt19937_64 rng(4);
  const SequenceMask m = SequenceMask::from_lengths({3, 2}, 3);
  const GradCheckReport r = finite_diff_check(
      "scr",
      [&](ag::Tape&, const std::vector<ag::Var>& p) {
        return scr::scr_loss(p[0], m, 3, scr::ScrConfig{}).total;
      },
      {{"h", oracle::random_tensor({2, 3, 8}, rng, 0.6)}});
  CHECK(max_rel(r) < 1e-4);
}

TEST_CASE("hinge boundary coordinate is flagged as a kink") {
  const Tensor c = Tensor::matrix(2, 2, {0.1, 0.5, -0.3, 0.02});
  const GradCheckReport r = finite_diff_check(
      "corr",
      [](ag::Tape&, const std::vector<ag::Var>& p) {
        return scr::corr_penalty(p[0], scr::ScrConfig{});
      },
      {{"c", c}});
  REQUIRE(r.params.size() == 1);
  CHECK(r.params[0].kinks == std::vector<std::size_t>{0});
  CHECK(r.passed());
}

TEST_CASE("non-deterministic loss is detected") {
  int calls = 0;
  CHECK_THROWS_AS(finite_diff_check(
                      "flaky",
                      [&](ag::Tape&, const std::vector<ag::Var>& p) {
                        return ag::sum(p[0]) + static_cast<double>(calls++);
                      },
                      {{"x", Tensor({2}, 1.0)}}),
                  DeterminismError);
}

TEST_CASE("every primitive matches finite differences") {
  std::mt19937_64 rng(5);
  const Tensor h = oracle::random_tensor({2, 4, 6}, rng);
  const Tensor pos = [&] {
    Tensor t = oracle::random_tensor({3, 4}, rng);
    for (double& v : t.vec()) v = 0.5 + std::abs(v);
    return t;
  }();
  const SequenceMask m = SequenceMask::from_lengths({4, 3}, 4);
  const Tensor w = oracle::random_tensor({6, 6}, rng);
  const Tensor table = oracle::random_tensor({5, 3}, rng);
  const Tensor perm_weights = oracle::random_tensor({2, 2, 4}, rng);

  struct Case {
    const char* name;
    Tensor input;
    std::function<ag::Var(ag::Tape&, const ag::Var&)> fn;
  };
  const std::vector<Case> cases{
      {"exp", pos, [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::exp(x)); }},
      {"log", pos, [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::log(x)); }},
      {"sqrt", pos, [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::sqrt(x)); }},
      {"div", pos, [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::div(x, x * x + 1.0)); }},
      {"gelu", h, [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::square(ag::gelu(x))); }},
      {"softmax", h,
       [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::square(ag::softmax_last(x))); }},
      {"logsumexp", h,
       [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::square(ag::logsumexp_last(x))); }},
      {"permute", h,
       [&](ag::Tape& t, const ag::Var& x) {
         const ag::Var p = ag::slice_first(ag::permute(x, {2, 0, 1}), 1, 3);
         return ag::sum(ag::square(p) * t.constant(perm_weights));
       }},
      {"bmm", h,
       [](ag::Tape&, const ag::Var& x) {
         return ag::sum(ag::square(ag::bmm(x, ag::permute(x, {0, 2, 1}))));
       }},
      {"matmul", h,
       [&](ag::Tape& t, const ag::Var& x) {
         return ag::sum(ag::square(ag::matmul(ag::reshape(x, {8, 6}), t.constant(w))));
       }},
      {"reductions", h,
       [](ag::Tape&, const ag::Var& x) {
         return ag::sum(ag::square(ag::mean_axis(x, 1, true) - ag::sum_axis(x, 2, true))) +
                ag::mean(ag::square(ag::slice_last(x, 1, 4)));
       }},
      {"diag", pos,
       [](ag::Tape&, const ag::Var& x) {
         return ag::sum(ag::square(ag::diag(ag::matmul(x, ag::permute(x, {1, 0})))));
       }},
      {"gather", table,
       [](ag::Tape&, const ag::Var& x) {
         return ag::sum(ag::square(ag::gather_rows(x, {1, 4, 1, 0}, {2, 2})));
       }},
      {"masked_pool", h,
       [&](ag::Tape&, const ag::Var& x) { return ag::sum(ag::square(ag::masked_mean_pool(x, m))); }},
      {"masked_std", h,
       [&](ag::Tape&, const ag::Var& x) { return ag::sum(ag::masked_std(x, m)); }},
      {"masked_standardize", h,
       [&](ag::Tape&, const ag::Var& x) {
         return ag::sum(ag::exp(ag::masked_standardize(x, m, EpsilonPolicy()) * 0.3));
       }},
      {"token_cross_correlation", h,
       [&](ag::Tape&, const ag::Var& x) {
         return ag::sum(ag::square(
             ag::token_cross_correlation(ag::slice_last(x, 0, 2), ag::slice_last(x, 2, 6), m)));
       }},
      {"row_normalize", pos,
       [](ag::Tape&, const ag::Var& x) {
         return ag::sum(ag::exp(ag::row_normalize(x, EpsilonPolicy())));
       }},
      {"affine", pos,
       [](ag::Tape&, const ag::Var& x) { return ag::sum(ag::square(ag::affine(x, -2.0, 0.5) - x)); }},
  };
  for (const Case& c : cases) {
    const GradCheckReport r = finite_diff_check(
        c.name, [&](ag::Tape& t, const std::vector<ag::Var>& p) { return c.fn(t, p[0]); },
        {{"x", c.input}});
    CAPTURE(c.name);
    CHECK(max_rel(r) < 1e-6);
  }
}

TEST_CASE("loss suite passes for every seed") {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto checks = cert::loss_checks(seed, {});
    REQUIRE(checks.size() == cert::loss_labels().size());
    for (std::size_t k = 0; k < checks.size(); ++k) {
      CAPTURE(checks[k].label);
      CHECK(checks[k].label == cert::loss_labels()[k]);
      CHECK(checks[k].passed());
    }
  }
}

TEST_CASE("corrupted backward fails the suite") {
  for (const char* op : {"masked_std", "hinge_sq", "logsumexp_last", "exp"}) {
    GradCheckOptions opts;
    opts.fault_op = op;
    cert::SuiteOptions so;
    so.check = opts;
    so.seeds = {0};
    const cert::SuiteReport r = cert::run_suite(cert::Scope::Losses, so);
    CAPTURE(op);
    CHECK_FALSE(r.passed());
  }
}

TEST_CASE("suite report json carries per-loss errors") {
  cert::SuiteOptions so;
  so.seeds = {0};
  const nlohmann::json j = cert::run_suite(cert::Scope::Losses, so).to_json();
  CHECK(j["passed"].get<bool>());
  for (const auto& label : cert::loss_labels()) {
    CHECK(j["max_rel_error_by_loss"].contains(label));
    CHECK(j["max_rel_error_by_loss"][label].get<double>() < 1e-4);
  }
  CHECK(j.contains("worst"));
}

TEST_CASE("scope names") {
  CHECK(cert::parse_scope("losses") == cert::Scope::Losses);
  CHECK(cert::parse_scope("end2end") == cert::Scope::End2End);
  CHECK(cert::parse_scope("all") == cert::Scope::All);
  CHECK_THROWS_AS(cert::parse_scope("some"), ConfigError);
}

}  // TEST_SUITE
