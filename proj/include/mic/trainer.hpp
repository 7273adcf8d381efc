#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mic/autograd.hpp"
#include "mic/contrastive.hpp"
#include "mic/encoder.hpp"
#include "mic/scr.hpp"
#include "mic/sir.hpp"

namespace mic::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
};

/// Which dropout view's hidden states feed the alignment regularizers.
enum class AlignView { A, Both };

struct TrainConfig {
  std::string preset = "mic";
  EncoderConfig encoder;
  std::size_t epochs = 5;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double gamma = 0.6;
  bool use_scr = true;
  bool use_sir = true;
  AlignView align_view = AlignView::A;
  /// (layer, dim) pairs left out of the alignment average.
  std::vector<std::pair<std::size_t, std::size_t>> excluded_pairs;
  double eps = EpsilonPolicy::kDefault;
  scr::ScrConfig scr;
  sir::SirConfig sir;
  contrastive::ContrastiveConfig contrastive{0.05, {4, 8, 16, 32}, {}};
  LayerSelection layers;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
  std::string schedule = "cosine";

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  /// Propagates `eps` into the loss configs.
  void sync_eps();
  nlohmann::json to_json() const;
  /// Starts from the preset named by j["preset"] (default "mic") and applies
  /// the remaining fields as overrides.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Presets: "mic", "mrl" (gamma 0), "scr-only", "sir-only", and "backbone"
/// (mic with the large-backbone learning rate and sequence length).
TrainConfig preset(std::string_view name);
std::vector<std::string> preset_names();

/// Cosine decay from base_lr at step 0 to 0 at step total-1.
double cosine_lr(double base_lr, std::size_t step, std::size_t total);

struct AlignEntry {
  std::string view = "a";
  std::size_t layer = 0;
  std::size_t dim = 0;
  bool scr_applied = false;
  bool sir_applied = false;
  double corr = 0.0;
  double var = 0.0;
  double scr = 0.0;
  double cv = 0.0;
  double unif = 0.0;
  double sir = 0.0;
};

struct LossBreakdown {
  std::size_t step = 0;
  double lr = 0.0;
  double gamma = 0.0;
  std::vector<std::size_t> dims;
  std::vector<double> infonce;  // one per dim
  double l_mrl = 0.0;
  std::vector<AlignEntry> align;
  double l_align = 0.0;
  double l_total = 0.0;

  nlohmann::json to_json() const;
  static LossBreakdown from_json(const nlohmann::json& j);
};

struct AlignResult {
  ag::Var loss;
  std::vector<AlignEntry> entries;
  /// Per-entry component vars, parallel to `entries`, for NaN reporting.
  std::vector<std::vector<std::pair<std::string, ag::Var>>> parts;
};

/// Mean over selected (layer, dim) pairs of SCR + SIR on the given traced
/// layers. SCR is skipped for dim == d_full (empty residual). Batch >= 2.
AlignResult align_loss(const std::vector<ag::Var>& layers, const SequenceMask& mask,
                       const TrainConfig& cfg, std::string_view view = "a");

/// Graph of one training objective evaluation.
struct TotalLoss {
  ag::Var total;
  contrastive::MrlVars mrl;
  AlignResult align;
  TracedForward view_a;
  TracedForward view_b;
};

/// Two dropout views of `batch` through `weights` (one var per encoder
/// parameter), L_MRL over the pooled pair and gamma * L_align on top. Dropout
/// seeds are derived from (cfg.seed, step).
TotalLoss total_loss(ag::Tape& tape, const std::vector<ag::Var>& weights, const Encoder& enc,
                     const TokenBatch& batch, const TrainConfig& cfg, std::size_t step);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

struct TrainState {
  Encoder encoder;
  AdamState adam;
  std::size_t step = 0;
  std::size_t total_steps = 0;

  explicit TrainState(Encoder enc, std::size_t total = 0);
};

/// One two-view forward, L_total = L_MRL + gamma * L_align, backward and an
/// AdamW update at the current cosine learning rate. Throws NonFiniteError
/// naming the offending component before any weight changes.
LossBreakdown train_step(TrainState& state, const TokenBatch& batch,
                         const TrainConfig& cfg);

/// Example indices of batch `index` in epoch `epoch`. A trailing batch of one
/// borrows the first example of the epoch order so every batch has >= 2 rows.
std::vector<std::size_t> batch_indices(std::size_t corpus_size, std::size_t batch_size,
                                       std::uint64_t seed, std::size_t epoch,
                                       std::size_t index);

std::size_t steps_per_epoch(std::size_t corpus_size, std::size_t batch_size);

struct RunOptions {
  std::filesystem::path out_dir;
  /// Directory of an earlier run to continue from.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this global step count (the schedule still spans the run).
  std::optional<std::size_t> stop_at_step;
  /// Recorded in the manifest.
  std::string corpus_path;
  std::string corpus_hash;
};

struct RunResult {
  TrainState state;
  std::vector<LossBreakdown> log;
};

/// Trains on tokenized sentences and writes checkpoint.json, metrics.ndjson
/// and manifest.json under out_dir. The manifest is written before step 0.
RunResult run(const TrainConfig& cfg, const std::vector<std::vector<std::int32_t>>& corpus,
              const RunOptions& options);

nlohmann::json checkpoint_to_json(const TrainState& state, const TrainConfig& cfg);
/// Restores config and full optimizer state from a checkpoint document.
std::pair<TrainConfig, TrainState> checkpoint_from_json(const nlohmann::json& j);
/// Loads just the encoder from a checkpoint file or run directory.
Encoder load_encoder(const std::filesystem::path& path);

std::vector<LossBreakdown> read_metrics(const std::filesystem::path& path);

/// Version string embedded in manifests.
std::string_view build_id();

}  // namespace mic::train
