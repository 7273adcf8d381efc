#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mic/corpus.hpp"
#include "mic/encoder.hpp"
#include "mic/tensor.hpp"

/// Downstream metrics over nested embedding prefixes.
namespace mic::eval {

/// 1-based ranks; tied values share the average of their positions.
std::vector<double> average_ranks(const std::vector<double>& xs);

/// Pearson correlation of average ranks. Throws UndefinedCorrelation when
/// either list is constant and ContractError on a length mismatch or n < 2.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

/// Cosine similarity of row i of a and row i of b over the first d columns.
std::vector<double> row_cosines(const Tensor& a, const Tensor& b, std::size_t d,
                                EpsilonPolicy eps = {});

struct ThresholdResult {
  double threshold = 0.0;
  double accuracy = 0.0;
};

/// Best accuracy of the rule "label 1 iff sim > t" over t in {-inf, midpoints
/// of consecutive distinct sorted sims, +inf}. Ties go to the smallest t.
ThresholdResult best_threshold(const std::vector<double>& sims, const std::vector<int>& labels);

/// Macro-averaged F1 over the union of gold and predicted classes.
double macro_f1(const std::vector<int>& gold, const std::vector<int>& pred);

struct EvalRow {
  std::size_t dim = 0;
  double value = 0.0;
  /// Set when the metric is undefined for this row; value is then NaN.
  bool flagged = false;
  std::string note;
  /// Task-specific extras, e.g. the chosen threshold.
  std::optional<double> threshold;
};

struct EvalReport {
  std::string task;
  std::string metric;
  std::uint64_t seed = 0;
  std::size_t n_examples = 0;
  std::vector<EvalRow> rows;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

struct ProbeConfig {
  std::size_t epochs = 200;
  double lr = 0.1;
  double l2 = 1e-4;
  double test_fraction = 0.2;
};

/// Explicit train/test row indices for the probe.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle of [0, n) with the first round(n * test_fraction) as test.
Split seeded_split(std::size_t n, double test_fraction, std::uint64_t seed);

// Embedding-level evaluations. All require every dim in [1, d_full].

EvalReport sts_eval(const Tensor& emb_a, const Tensor& emb_b, const std::vector<double>& gold,
                    const std::vector<std::size_t>& dims);

EvalReport pair_eval(const Tensor& emb_a, const Tensor& emb_b, const std::vector<int>& labels,
                     const std::vector<std::size_t>& dims);

/// Multinomial logistic regression on features standardized with training
/// statistics, zero-initialized and trained by full-batch gradient descent.
EvalReport probe_eval(const Tensor& emb, const std::vector<int>& labels,
                      const std::vector<std::size_t>& dims, std::uint64_t seed,
                      const ProbeConfig& cfg = {}, const std::optional<Split>& split = {});

// Encoder-level evaluations; the encoder runs in eval mode.

EvalReport sts_eval(const Encoder& enc, const std::vector<data::TextPair>& data,
                    const std::vector<std::size_t>& dims);
EvalReport pair_eval(const Encoder& enc, const std::vector<data::TextPair>& data,
                     const std::vector<std::size_t>& dims);
EvalReport probe_eval(const Encoder& enc, const std::vector<data::LabeledText>& data,
                      const std::vector<std::size_t>& dims, std::uint64_t seed,
                      const ProbeConfig& cfg = {});

/// Eval-mode pooled embeddings of raw texts.
Tensor embed_texts(const Encoder& enc, const std::vector<std::string>& texts);

std::vector<std::string> task_names();

}  // namespace mic::eval
