#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mic/encoder.hpp"
#include "mic/sir.hpp"
#include "mic/tensor.hpp"

/// Read-only geometric analyses of embedding matrices and hidden states.
namespace mic::diag {

struct VarianceProfile {
  std::vector<double> variances;    // one per dimension
  std::vector<std::size_t> boundaries;  // nested dims, each <= variances.size()

  /// Coefficient of variation of the first d variances: std / (mean + eps).
  double prefix_cv(std::size_t d, EpsilonPolicy eps = {}) const;
};

/// Population per-dimension variance of an (N, d_full) matrix. N >= 2.
VarianceProfile variance_profile(const Tensor& emb, const std::vector<std::size_t>& dims);

struct CorrMap {
  Tensor c;  // (d, d_full - d)
  std::size_t d = 0;
  double tau = 0.0;
  double mean_abs = 0.0;
  /// Fraction of entries with |C_uv| > tau.
  double frac_above = 0.0;
  /// Mean over entries of max(0, |C_uv| - tau).
  double mass_above = 0.0;
};

/// Corpus-level map for pooled (N, d_full) embeddings: every column is
/// standardized over the N rows.
CorrMap cross_corr_map(const Tensor& emb, std::size_t d, double tau, EpsilonPolicy eps = {});

/// Token-level map for (B, L, d_full) states, identical to the SCR matrix.
CorrMap cross_corr_map(const Tensor& h, const SequenceMask& m, std::size_t d, double tau,
                       EpsilonPolicy eps = {});

CorrMap summarize_corr(Tensor c, std::size_t d, double tau);

struct CovariancePartition {
  std::size_t d = 0;
  Tensor sigma;  // (D, D)
  Tensor pre;    // (d, d)
  Tensor cross;  // (d, D - d)
  Tensor res;    // (D - d, D - d)
  double pre_eig_min = 0.0;
  double pre_eig_max = 0.0;
  double pre_fro = 0.0;
  double cross_fro = 0.0;
  double res_fro = 0.0;

  /// The block matrix [[pre, cross], [cross^T, res]].
  Tensor assemble() const;
};

/// Population covariance of an (N, D) matrix. N >= 2.
Tensor covariance(const Tensor& emb);

/// Covariance split at column d, 0 < d < D, with the eigenvalue range of the
/// prefix block.
CovariancePartition covariance_partition(const Tensor& emb, std::size_t d);

struct UniformityRow {
  std::size_t dim = 0;
  double unif = 0.0;
  double cv = 0.0;
};

struct UniformityReport {
  std::vector<UniformityRow> rows;
  std::size_t n_total = 0;
  std::size_t n_used = 0;
  bool subsampled = false;
  std::uint64_t subsample_seed = 0;
  std::vector<std::size_t> used_rows;  // sorted row indices actually used
};

inline constexpr std::size_t kUniformityMaxRows = 2048;

/// sir_loss terms of each truncated prefix. Corpora above max_rows use a
/// seeded subsample of max_rows rows.
UniformityReport uniformity_report(const Tensor& emb, const std::vector<std::size_t>& dims,
                                   const sir::SirConfig& cfg, std::uint64_t seed,
                                   std::size_t max_rows = kUniformityMaxRows);

/// Rows of `emb` listed in `rows`.
Tensor select_rows(const Tensor& emb, const std::vector<std::size_t>& rows);

// Encoder-backed extraction.

/// Eval-mode pooled embeddings, (N, d_full). Batched; parallel up to MIC_THREADS.
Tensor embed_sequences(const Encoder& enc, const std::vector<std::vector<std::int32_t>>& seqs,
                       std::size_t batch_size = 64);

/// Eval-mode hidden states of `layer` for all sequences as one padded batch.
struct LayerStates {
  Tensor h;  // (N, L, d_full)
  SequenceMask mask;
};
LayerStates layer_states(const Encoder& enc, const std::vector<std::vector<std::int32_t>>& seqs,
                         std::size_t layer);

// Embedding files: "N,d" header line then one CSV row per embedding, or a
// one-line JSON header {"n","d","dtype":"f32"|"f64"} followed by raw
// little-endian values.

Tensor read_embeddings(const std::filesystem::path& path);
void write_embeddings_csv(const std::filesystem::path& path, const Tensor& emb);
void write_embeddings_binary(const std::filesystem::path& path, const Tensor& emb,
                             const std::string& dtype = "f64");

// CSV exports. Values are written with 17 significant digits so they load
// back bit-exactly.

std::string profile_csv(const VarianceProfile& p);
std::string heatmap_csv(const CorrMap& m);
VarianceProfile parse_profile_csv(const std::string& text);
Tensor parse_heatmap_csv(const std::string& text);

nlohmann::json to_json(const VarianceProfile& p);
nlohmann::json to_json(const CorrMap& m);
nlohmann::json to_json(const CovariancePartition& c);
nlohmann::json to_json(const UniformityReport& r);

}  // namespace mic::diag
