#include <doctest.h>

#include <cmath>
#include <random>

#include "mic/contrastive.hpp"
#include "oracles.hpp"

using namespace mic;

TEST_SUITE("contrastive-loss") {

TEST_CASE("truncate") {
  const Tensor z = Tensor::matrix(1, 4, {1, 2, 3, 4});
  CHECK(contrastive::truncate(z, 2) == Tensor::matrix(1, 2, {1, 2}));
  CHECK(contrastive::truncate(z, 4) == z);
  CHECK_THROWS_AS(contrastive::truncate(z, 0), InvalidDimension);
  CHECK_THROWS_AS(contrastive::truncate(z, 5), InvalidDimension);

  std::mt19937_64 rng(1);
  const Tensor r = oracle::random_tensor({3, 8}, rng);
  for (std::size_t m2 = 1; m2 <= 8; ++m2) {
    for (std::size_t m1 = 1; m1 <= m2; ++m1) {
      CHECK(contrastive::truncate(contrastive::truncate(r, m2), m1) == contrastive::truncate(r, m1));
    }
  }
}

TEST_CASE("info nce of a single row is exactly zero") {
  std::mt19937_64 rng(2);
  const Tensor a = oracle::random_tensor({1, 5}, rng);
  const Tensor b = oracle::random_tensor({1, 5}, rng);
  CHECK(contrastive::info_nce(a, b, 0.05) == 0.0);
  const contrastive::ContrastiveConfig cfg{0.05, {2, 5}, {}};
  CHECK(contrastive::mrl_loss({a, b}, cfg).loss == 0.0);
}

TEST_CASE("orthogonal positive pairs") {
  const Tensor z = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const double expected = std::log(std::exp(20.0) + 1.0) - 20.0;
  CHECK(contrastive::info_nce(z, z, 0.05) == doctest::Approx(expected).epsilon(1e-6));
  CHECK(contrastive::info_nce(z, z, 0.05) == doctest::Approx(2.06e-9).epsilon(1e-2));
}

TEST_CASE("info nce matches the softmax oracle") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t B = 1 + rep % 4;
    const Tensor a = oracle::random_tensor({B, 6}, rng);
    const Tensor b = oracle::random_tensor({B, 6}, rng);
    CHECK(oracle::rel_close(contrastive::info_nce(a, b, 0.05), oracle::info_nce(a, b, 6, 0.05, 1e-5), 1e-10));
  }
}

TEST_CASE("mrl loss matches per-dim recomputation") {
  std::mt19937_64 rng(4);
  const contrastive::ContrastiveConfig cfg{0.05, {2, 4, 8}, {}};
  const Tensor a = oracle::random_tensor({4, 8}, rng);
  const Tensor b = oracle::random_tensor({4, 8}, rng);
  const contrastive::MrlLoss l = contrastive::mrl_loss({a, b}, cfg);
  REQUIRE(l.per_dim.size() == 3);
  double sum = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t m = cfg.dims[k];
    const double direct =
        contrastive::info_nce(contrastive::truncate(a, m), contrastive::truncate(b, m), 0.05);
    CHECK(l.per_dim[k] == direct);
    sum += direct;
  }
  CHECK(std::abs(l.loss - sum / 3.0) <= 1e-12);
  CHECK(oracle::rel_close(l.loss, oracle::mrl(a, b, cfg.dims, 0.05, 1e-5), 1e-10));
}

TEST_CASE("mrl with only the full width equals info nce") {
  std::mt19937_64 rng(5);
  const Tensor a = oracle::random_tensor({4, 6}, rng);
  const Tensor b = oracle::random_tensor({4, 6}, rng);
  const contrastive::ContrastiveConfig cfg{0.05, {6}, {}};
  CHECK(contrastive::mrl_loss({a, b}, cfg).loss == contrastive::info_nce(a, b, 0.05));
}

TEST_CASE("info nce invariant to row rescaling and joint permutation") {
  std::mt19937_64 rng(6);
  const Tensor a = oracle::random_tensor({5, 4}, rng);
  const Tensor b = oracle::random_tensor({5, 4}, rng);
  const double base = contrastive::info_nce(a, b, 0.05);
  Tensor sa = a, pa({5, 4}), pb({5, 4});
  const std::vector<std::size_t> order{3, 1, 4, 0, 2};
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      sa.at(i, j) *= 0.5 + static_cast<double>(i);
      pa.at(i, j) = a.at(order[i], j);
      pb.at(i, j) = b.at(order[i], j);
    }
  }
  CHECK(oracle::rel_close(contrastive::info_nce(sa, b, 0.05), base, 1e-12));
  CHECK(oracle::rel_close(contrastive::info_nce(pa, pb, 0.05), base, 1e-12));
}

TEST_CASE("log-sum-exp stays finite at small temperature") {
  const Tensor a = Tensor::matrix(3, 2, {1, 0, -1, 0, 0, 1});
  const Tensor b = Tensor::matrix(3, 2, {-1, 0, 1, 0, 0, -1});
  const double l = contrastive::info_nce(a, b, 0.01);
  CHECK(std::isfinite(l));
  // Row 0 and row 1 each put all mass on a negative at distance 2/tau.
  CHECK(l > 100.0);
}

TEST_CASE("zero rows use a floored norm and are flagged") {
  const Tensor a = Tensor::matrix(2, 2, {0, 0, 1, 0});
  const Tensor b = Tensor::matrix(2, 2, {1, 0, 0, 1});
  std::vector<std::size_t> flagged;
  const double l = contrastive::info_nce(a, b, 0.05, {}, &flagged);
  CHECK(std::isfinite(l));
  CHECK(flagged.size() == 1);
}

TEST_CASE("differentiable forms agree with the value forms") {
  std::mt19937_64 rng(7);
  const contrastive::ContrastiveConfig cfg{0.05, {2, 4, 6}, {}};
  const Tensor a = oracle::random_tensor({4, 6}, rng);
  const Tensor b = oracle::random_tensor({4, 6}, rng);
  ag::Tape tape;
  const contrastive::MrlVars v = contrastive::mrl_loss(tape.leaf(a), tape.leaf(b), cfg);
  const contrastive::MrlLoss l = contrastive::mrl_loss({a, b}, cfg);
  CHECK(oracle::rel_close(v.loss.item(), l.loss, 1e-12));
  for (std::size_t k = 0; k < 3; ++k) CHECK(oracle::rel_close(v.per_dim[k].item(), l.per_dim[k], 1e-12));
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS((contrastive::ContrastiveConfig{0.0, {4, 8}, {}}.validate(8)), ConfigError);
  CHECK_THROWS_AS((contrastive::ContrastiveConfig{0.05, {8, 4}, {}}.validate(8)), ConfigError);
  CHECK_THROWS_AS((contrastive::ContrastiveConfig{0.05, {4}, {}}.validate(8)), ConfigError);
  CHECK_NOTHROW((contrastive::ContrastiveConfig{0.05, {4, 8}, {}}.validate(8)));
  CHECK_THROWS_AS((contrastive::ViewPair{Tensor({2, 3}), Tensor({3, 3})}.validate()), ContractError);
}

}  // TEST_SUITE
