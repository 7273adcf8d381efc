#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mic/corpus.hpp"
#include "mic/eval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mic;

TEST_SUITE("eval-suite") {

TEST_CASE("spearman basics") {
  const std::vector<double> x{1, 2, 3, 4};
  CHECK(eval::spearman(x, x) == 1.0);
  CHECK(eval::spearman(x, {4, 3, 2, 1}) == -1.0);
  CHECK(eval::spearman(x, {1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(eval::spearman(x, {1, 3, 2, 4}) == oracle::spearman_no_ties(x, {1, 3, 2, 4}));
  CHECK_THROWS_AS(eval::spearman(x, {1, 1, 1, 1}), UndefinedCorrelation);
  CHECK_THROWS_AS(eval::spearman(x, {1, 2}), ContractError);
  CHECK_THROWS_AS(eval::spearman({1}, {1}), ContractError);
}

TEST_CASE("average ranks share ties") {
  CHECK(eval::average_ranks({10, 20, 10, 5}) == std::vector<double>{2.5, 4, 2.5, 1});
}

TEST_CASE("spearman matches the permutation oracle exactly") {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rep % 30;
    std::vector<double> x(n), y(n);
    std::iota(x.begin(), x.end(), 0.0);
    std::iota(y.begin(), y.end(), 0.0);
    std::shuffle(x.begin(), x.end(), rng);
    std::shuffle(y.begin(), y.end(), rng);
    CHECK(eval::spearman(x, y) == oracle::spearman_no_ties(x, y));
  }
}

TEST_CASE("spearman with ties matches the counted-rank oracle") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> small(0, 4);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> x(12), y(12);
    for (auto& v : x) v = small(rng);
    for (auto& v : y) v = small(rng);
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) continue;
    if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) continue;
    CHECK(oracle::rel_close(eval::spearman(x, y), oracle::spearman_counted(x, y), 1e-12));
  }
}

TEST_CASE("threshold sweep matches brute force") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> grid(-5, 5);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rep % 49;
    std::vector<double> sims(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grid values force ties.
      sims[i] = rep % 2 ? grid(rng) / 5.0 : std::normal_distribution<double>()(rng);
      labels[i] = coin(rng);
    }
    const eval::ThresholdResult got = eval::best_threshold(sims, labels);
    const oracle::Threshold ref = oracle::brute_threshold(sims, labels);
    CHECK(got.accuracy == ref.accuracy);
    CHECK(got.threshold == ref.t);
  }
}

TEST_CASE("separable pairs reach full accuracy") {
  const eval::ThresholdResult r = eval::best_threshold({0.9, 0.1, 0.8, 0.2}, {1, 0, 1, 0});
  CHECK(r.accuracy == 1.0);
  CHECK(r.threshold == doctest::Approx(0.5));
}

TEST_CASE("random labels stay near chance") {
  std::mt19937_64 rng(4);
  const std::size_t N = 1000;
  Tensor a({N, 4}), b({N, 4});
  std::normal_distribution<double> g;
  for (double& v : a.vec()) v = g(rng);
  for (double& v : b.vec()) v = g(rng);
  std::vector<int> labels(N);
  for (std::size_t i = 0; i < N; ++i) labels[i] = static_cast<int>(i % 2);
  std::shuffle(labels.begin(), labels.end(), rng);
  const eval::EvalReport r = eval::pair_eval(a, b, labels, {4});
  CHECK(r.rows[0].value < 0.6);
  CHECK_THROWS(eval::pair_eval(a, b, std::vector<int>(N, 1), {4}));
}

TEST_CASE("sts self consistency and null") {
  std::mt19937_64 rng(5);
  const std::size_t N = 300;
  const Tensor a = oracle::random_tensor({N, 8}, rng);
  const Tensor b = oracle::random_tensor({N, 8}, rng);
  const std::vector<double> gold = eval::row_cosines(a, b, 8);
  const eval::EvalReport r = eval::sts_eval(a, b, gold, {2, 4, 8});
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[2].value == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> shuffled = gold;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(std::abs(eval::sts_eval(a, b, shuffled, {8}).rows[0].value) < 0.15);
}

TEST_CASE("sts at full width ignores positive rescaling") {
  std::mt19937_64 rng(6);
  const Tensor a = oracle::random_tensor({40, 6}, rng);
  const Tensor b = oracle::random_tensor({40, 6}, rng);
  std::vector<double> gold(40);
  for (auto& g : gold) g = std::uniform_real_distribution<double>(0, 5)(rng);
  Tensor sa = a, sb = b;
  for (double& v : sa.vec()) v *= 3.5;
  for (double& v : sb.vec()) v *= 0.25;
  CHECK(eval::sts_eval(a, b, gold, {6}).rows[0].value == eval::sts_eval(sa, sb, gold, {6}).rows[0].value);
}

TEST_CASE("constant predictions are flagged") {
  const Tensor a = Tensor::matrix(3, 2, {1, 0, 1, 0, 1, 0});
  const eval::EvalReport r = eval::sts_eval(a, a, {1, 2, 3}, {2});
  CHECK(r.rows[0].flagged);
  CHECK(std::isnan(r.rows[0].value));
  CHECK(r.to_csv().find("nan") != std::string::npos);
  CHECK(r.to_json()["rows"][0]["value"].is_null());
}

TEST_CASE("probe separable and shuffled") {
  std::mt19937_64 rng(7);
  const std::size_t N = 1000;
  Tensor e({N, 4});
  std::vector<int> labels(N);
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < N; ++i) {
    labels[i] = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < 4; ++j) e.at(i, j) = g(rng) * 0.3 + (labels[i] ? 2.0 : -2.0);
  }
  CHECK(eval::probe_eval(e, labels, {4}, 0).rows[0].value >= 0.99);

  std::vector<int> four(N);
  for (std::size_t i = 0; i < N; ++i) four[i] = static_cast<int>(i % 4);
  std::shuffle(four.begin(), four.end(), rng);
  const double f1 = eval::probe_eval(e, four, {4}, 0).rows[0].value;
  CHECK(std::abs(f1 - 0.25) <= 0.1);
}

TEST_CASE("probe needs every class in training") {
  const Tensor e = Tensor::matrix(4, 1, {0, 1, 2, 3});
  eval::Split split{{0, 1, 2}, {3}};
  CHECK_THROWS(eval::probe_eval(e, {0, 0, 0, 1}, {1}, 0, {}, split));
}

TEST_CASE("seeded split") {
  const eval::Split s = eval::seeded_split(10, 0.2, 3);
  CHECK(s.test.size() == 2);
  CHECK(s.train.size() == 8);
  CHECK(eval::seeded_split(10, 0.2, 3).test == s.test);
}

TEST_CASE("macro f1") {
  CHECK(eval::macro_f1({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  CHECK(eval::macro_f1({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(0.5));
  CHECK(eval::macro_f1({0, 1}, {2, 2}) == 0.0);
}

TEST_CASE("report shapes and determinism through the encoder") {
  EncoderConfig cfg;
  cfg.vocab_size = 50;
  cfg.d_full = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_len = 16;
  const Encoder enc(cfg);
  testutil::TempDir dir("eval");
  data::write_file(dir / "sts.tsv", data::generate_corpus(data::CorpusKind::StsGraded, 40, 2));
  const auto sts = data::read_pairs(dir / "sts.tsv");
  const eval::EvalReport r = eval::sts_eval(enc, sts, {2, 4, 8});
  CHECK(r.rows.size() == 3);
  CHECK(r.metric == "spearman");
  CHECK(eval::sts_eval(enc, sts, {2, 4, 8}).to_csv() == r.to_csv());
  CHECK(r.to_csv().rfind("dim,spearman\n", 0) == 0);
}

}  // TEST_SUITE
