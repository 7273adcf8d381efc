#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mic/autograd.hpp"
#include "mic/gradcheck.hpp"
#include "mic/tensor.hpp"

namespace mic {

/// Shape and regularization settings of the toy pre-norm transformer.
struct EncoderConfig {
  std::size_t vocab_size = 1000;
  std::size_t d_full = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ff_multiplier = 4;
  double dropout_rate = 0.1;
  std::size_t max_len = 32;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

/// Encoder layers whose hidden states receive the alignment regularizers.
struct LayerSelection {
  std::vector<std::size_t> aligned_layers{1, 2};

  /// Indices must be distinct and < n_layers; non-empty when `required`.
  void validate(std::size_t n_layers, bool required) const;
};

/// Token id 0 is reserved for padding.
inline constexpr std::int32_t kPadToken = 0;

/// Whitespace tokenizer. Words of the form `w<id>` with id in [1, vocab)
/// map to that id; every other word is hashed into [1, vocab).
std::vector<std::int32_t> tokenize(std::string_view text, std::size_t vocab_size);

/// Right-padded (batch, tokens) id matrix with its mask.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  SequenceMask mask;

  /// Pads to the longest sequence, truncating each to max_len tokens.
  static TokenBatch from_sequences(const std::vector<std::vector<std::int32_t>>& seqs,
                                   std::size_t max_len);
};

/// Post-block hidden states of every layer and the pooled last layer.
struct ForwardTrace {
  std::vector<Tensor> layers;  // n_layers x (B, L, d_full)
  Tensor pooled;               // (B, d_full)
  SequenceMask mask;
};

struct TracedForward {
  std::vector<ag::Var> layers;
  ag::Var pooled;
};

class Encoder {
 public:
  /// Random initialization from cfg.seed.
  explicit Encoder(EncoderConfig cfg);
  /// Restores weights; throws ConfigError on a missing or mis-shaped tensor.
  Encoder(EncoderConfig cfg, std::vector<NamedTensor> params);

  const EncoderConfig& config() const noexcept { return cfg_; }
  const std::vector<NamedTensor>& params() const noexcept { return params_; }
  std::vector<NamedTensor>& params() noexcept { return params_; }

  /// Differentiable forward over `weights`, one var per params() entry in
  /// the same order. Deterministic in (weights, batch, dropout_seed, train).
  TracedForward forward(ag::Tape& tape, const std::vector<ag::Var>& weights,
                        const TokenBatch& batch, std::uint64_t dropout_seed,
                        bool train) const;

  /// Value-only forward with the stored weights.
  ForwardTrace forward(const TokenBatch& batch, std::uint64_t dropout_seed,
                       bool train) const;

  /// Two dropout draws over identical inputs. Requires seed_a != seed_b.
  std::pair<ForwardTrace, ForwardTrace> two_view_forward(const TokenBatch& batch,
                                                         std::uint64_t seed_a,
                                                         std::uint64_t seed_b) const;

  /// Eval-mode pooled embeddings, (B, d_full).
  Tensor embed(const TokenBatch& batch) const;

  nlohmann::json to_json() const;
  static Encoder from_json(const nlohmann::json& j);

 private:
  void build_index();
  std::size_t index(const std::string& name) const;

  EncoderConfig cfg_;
  std::vector<NamedTensor> params_;
  std::map<std::string, std::size_t> index_;
};

/// Expected parameter names and shapes for a config, in storage order.
std::vector<std::pair<std::string, Shape>> encoder_param_layout(const EncoderConfig& cfg);

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

}  // namespace mic
