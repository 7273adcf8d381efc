#include "mic/encoder.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "json_util.hpp"
#include "mic/rng.hpp"
#include "mic/tensor_ops.hpp"

namespace mic {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskedScore = -1e9;

std::string layer_key(std::size_t layer, const char* leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("encoder.vocab_size must be >= 2");
  if (d_full == 0) throw ConfigError("encoder.d_full must be > 0");
  if (n_heads == 0 || d_full % n_heads != 0) {
    throw ConfigError("encoder.d_full must be divisible by encoder.n_heads");
  }
  if (n_layers < 2) throw ConfigError("encoder.n_layers must be >= 2");
  if (ff_multiplier == 0) throw ConfigError("encoder.ff_multiplier must be > 0");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("encoder.dropout_rate must lie in [0, 1)");
  }
  if (max_len == 0) throw ConfigError("encoder.max_len must be > 0");
}

void LayerSelection::validate(std::size_t n_layers, bool required) const {
  if (required && aligned_layers.empty()) {
    throw ConfigError("layers.aligned_layers must be non-empty when gamma > 0");
  }
  for (std::size_t k = 0; k < aligned_layers.size(); ++k) {
    if (aligned_layers[k] >= n_layers) {
      throw ConfigError("layers.aligned_layers[" + std::to_string(k) + "] = " +
                        std::to_string(aligned_layers[k]) + " is not < n_layers");
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (aligned_layers[j] == aligned_layers[k]) {
        throw ConfigError("layers.aligned_layers contains duplicates");
      }
    }
  }
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_full", d_full},
          {"n_layers", n_layers},     {"n_heads", n_heads},
          {"ff_multiplier", ff_multiplier}, {"dropout_rate", dropout_rate},
          {"max_len", max_len},       {"seed", seed}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  const std::string p = "encoder";
  detail::read_field(j, "vocab_size", c.vocab_size, p);
  detail::read_field(j, "d_full", c.d_full, p);
  detail::read_field(j, "n_layers", c.n_layers, p);
  detail::read_field(j, "n_heads", c.n_heads, p);
  detail::read_field(j, "ff_multiplier", c.ff_multiplier, p);
  detail::read_field(j, "dropout_rate", c.dropout_rate, p);
  detail::read_field(j, "max_len", c.max_len, p);
  detail::read_field(j, "seed", c.seed, p);
  c.validate();
  return c;
}

std::vector<std::int32_t> tokenize(std::string_view text, std::size_t vocab_size) {
  std::vector<std::int32_t> out;
  std::istringstream is{std::string(text)};
  std::string word;
  const std::uint64_t buckets = vocab_size - 1;
  while (is >> word) {
    if (word.size() > 1 && word[0] == 'w' &&
        word.find_first_not_of("0123456789", 1) == std::string::npos &&
        word.size() < 12) {
      const unsigned long long id = std::stoull(word.substr(1));
      if (id >= 1 && id < vocab_size) {
        out.push_back(static_cast<std::int32_t>(id));
        continue;
      }
    }
    out.push_back(static_cast<std::int32_t>(1 + fnv1a64(word) % buckets));
  }
  return out;
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<std::int32_t>>& seqs,
                                      std::size_t max_len) {
  TokenBatch b;
  b.batch = seqs.size();
  std::vector<std::size_t> lengths;
  for (const auto& s : seqs) {
    lengths.push_back(std::min(s.size(), max_len));
    b.length = std::max(b.length, lengths.back());
  }
  b.length = std::max<std::size_t>(b.length, 1);
  b.ids.assign(b.batch * b.length, kPadToken);
  for (std::size_t i = 0; i < b.batch; ++i) {
    for (std::size_t l = 0; l < lengths[i]; ++l) b.ids[i * b.length + l] = seqs[i][l];
  }
  b.mask = SequenceMask::from_lengths(lengths, b.length);
  return b;
}

std::vector<std::pair<std::string, Shape>> encoder_param_layout(const EncoderConfig& cfg) {
  const std::size_t d = cfg.d_full, ff = cfg.ff_multiplier * cfg.d_full;
  std::vector<std::pair<std::string, Shape>> layout;
  layout.emplace_back("tok_emb", Shape{cfg.vocab_size, d});
  layout.emplace_back("pos_emb", Shape{cfg.max_len, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    layout.emplace_back(layer_key(l, "ln1.gain"), Shape{d});
    layout.emplace_back(layer_key(l, "ln1.bias"), Shape{d});
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      layout.emplace_back(layer_key(l, w), Shape{d, d});
      // Keys carry no bias.
      if (std::string_view(w) != "attn.wk") layout.emplace_back(layer_key(l, w) + ".bias", Shape{d});
    }
    layout.emplace_back(layer_key(l, "ln2.gain"), Shape{d});
    layout.emplace_back(layer_key(l, "ln2.bias"), Shape{d});
    layout.emplace_back(layer_key(l, "ff.w1"), Shape{d, ff});
    layout.emplace_back(layer_key(l, "ff.w1.bias"), Shape{ff});
    layout.emplace_back(layer_key(l, "ff.w2"), Shape{ff, d});
    layout.emplace_back(layer_key(l, "ff.w2.bias"), Shape{d});
  }
  return layout;
}

Encoder::Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(derive_seed(cfg_.seed, "encoder-init"));
  for (auto& [name, shape] : encoder_param_layout(cfg_)) {
    Tensor t(shape);
    double bound = 0.0;
    double fill = 0.0;
    if (name == "tok_emb") {
      bound = std::sqrt(3.0);  // unit variance
    } else if (name == "pos_emb") {
      bound = 0.2;
    } else if (name.ends_with(".gain")) {
      fill = 1.0;
    } else if (!name.ends_with(".bias")) {
      bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    }
    if (bound > 0.0) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : t.vec()) v = dist(rng);
    } else {
      for (double& v : t.vec()) v = fill;
    }
    params_.push_back({name, std::move(t)});
  }
  build_index();
}

Encoder::Encoder(EncoderConfig cfg, std::vector<NamedTensor> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const auto layout = encoder_param_layout(cfg_);
  if (layout.size() != params_.size()) {
    throw ConfigError("checkpoint has " + std::to_string(params_.size()) +
                      " tensors, config expects " + std::to_string(layout.size()));
  }
  for (std::size_t k = 0; k < layout.size(); ++k) {
    if (params_[k].name != layout[k].first) {
      throw ConfigError("checkpoint tensor " + std::to_string(k) + " is '" +
                        params_[k].name + "', expected '" + layout[k].first + "'");
    }
    if (params_[k].value.shape() != layout[k].second) {
      throw ConfigError("checkpoint tensor '" + params_[k].name + "' has shape " +
                        shape_str(params_[k].value.shape()) + ", expected " +
                        shape_str(layout[k].second));
    }
  }
  build_index();
}

void Encoder::build_index() {
  index_.clear();
  for (std::size_t k = 0; k < params_.size(); ++k) index_[params_[k].name] = k;
}

std::size_t Encoder::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown encoder parameter " + name);
  return it->second;
}

TracedForward Encoder::forward(ag::Tape& tape, const std::vector<ag::Var>& weights,
                               const TokenBatch& batch, std::uint64_t dropout_seed,
                               bool train) const {
  if (weights.size() != params_.size()) {
    throw ContractError("forward: expected " + std::to_string(params_.size()) +
                        " weight vars");
  }
  const std::size_t B = batch.batch, L = batch.length, d = cfg_.d_full;
  const std::size_t H = cfg_.n_heads, dh = d / H;
  if (L > cfg_.max_len) {
    throw ContractError("batch length " + std::to_string(L) + " exceeds max_len " +
                        std::to_string(cfg_.max_len));
  }
  if (B == 0) throw InsufficientBatch("empty token batch");
  batch.mask.require_nonempty();
  auto w = [&](const std::string& name) -> const ag::Var& { return weights[index(name)]; };

  std::mt19937_64 rng(derive_seed(dropout_seed, "dropout"));
  const bool use_dropout = train && cfg_.dropout_rate > 0.0;
  auto dropout = [&](const ag::Var& x) {
    if (!use_dropout) return x;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - cfg_.dropout_rate);
    Tensor m(x.shape());
    for (double& v : m.vec()) v = uni(rng) < cfg_.dropout_rate ? 0.0 : keep_scale;
    return x * tape.constant(std::move(m));
  };
  auto linear = [&](const ag::Var& x2d, const std::string& name, bool bias = true) {
    const ag::Var y = ag::matmul(x2d, w(name));
    return bias ? y + w(name + ".bias") : y;
  };
  auto layer_norm = [&](const ag::Var& x, const std::string& prefix) {
    const ag::Var centered = x - ag::mean_axis(x, 2, true);
    const ag::Var var = ag::mean_axis(ag::square(centered), 2, true);
    const ag::Var normed = centered / ag::sqrt(var + kLayerNormEps);
    return normed * w(prefix + ".gain") + w(prefix + ".bias");
  };

  Tensor score_mask({B, 1, 1, L});
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      score_mask[i * L + l] = batch.mask.active(i, l) ? 0.0 : kMaskedScore;
    }
  }
  const ag::Var mask_var = tape.constant(std::move(score_mask));

  ag::Var x = ag::gather_rows(w("tok_emb"), batch.ids, {B, L}) +
              ag::reshape(ag::slice_first(w("pos_emb"), 0, L), {1, L, d});
  x = dropout(x);

  TracedForward out;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t layer = 0; layer < cfg_.n_layers; ++layer) {
    const ag::Var a = ag::reshape(layer_norm(x, layer_key(layer, "ln1")), {B * L, d});
    auto heads = [&](const char* proj, bool bias = true) {
      return ag::reshape(linear(a, layer_key(layer, proj), bias), {B, L, H, dh});
    };
    const ag::Var q = ag::reshape(ag::permute(heads("attn.wq"), {0, 2, 1, 3}), {B * H, L, dh});
    const ag::Var kt = ag::reshape(ag::permute(heads("attn.wk", false), {0, 2, 3, 1}), {B * H, dh, L});
    const ag::Var v = ag::reshape(ag::permute(heads("attn.wv"), {0, 2, 1, 3}), {B * H, L, dh});
    const ag::Var scores =
        ag::reshape(ag::bmm(q, kt) * score_scale, {B, H, L, L}) + mask_var;
    const ag::Var probs = ag::reshape(ag::softmax_last(scores), {B * H, L, L});
    const ag::Var ctx = ag::reshape(
        ag::permute(ag::reshape(ag::bmm(probs, v), {B, H, L, dh}), {0, 2, 1, 3}),
        {B * L, d});
    x = x + dropout(ag::reshape(linear(ctx, layer_key(layer, "attn.wo")), {B, L, d}));

    const ag::Var f = ag::reshape(layer_norm(x, layer_key(layer, "ln2")), {B * L, d});
    const ag::Var hidden = ag::gelu(linear(f, layer_key(layer, "ff.w1")));
    x = x + dropout(ag::reshape(linear(hidden, layer_key(layer, "ff.w2")), {B, L, d}));
    out.layers.push_back(x);
  }
  out.pooled = ag::masked_mean_pool(x, batch.mask);
  return out;
}

ForwardTrace Encoder::forward(const TokenBatch& batch, std::uint64_t dropout_seed,
                              bool train) const {
  ag::Tape tape;
  std::vector<ag::Var> weights;
  weights.reserve(params_.size());
  for (const auto& p : params_) weights.push_back(tape.constant(p.value));
  const TracedForward traced = forward(tape, weights, batch, dropout_seed, train);
  ForwardTrace trace;
  for (const auto& layer : traced.layers) trace.layers.push_back(layer.value());
  trace.pooled = traced.pooled.value();
  trace.mask = batch.mask;
  return trace;
}

std::pair<ForwardTrace, ForwardTrace> Encoder::two_view_forward(const TokenBatch& batch,
                                                                std::uint64_t seed_a,
                                                                std::uint64_t seed_b) const {
  if (seed_a == seed_b) throw ContractError("two_view_forward needs distinct seeds");
  return {forward(batch, seed_a, true), forward(batch, seed_b, true)};
}

Tensor Encoder::embed(const TokenBatch& batch) const {
  return forward(batch, 0, false).pooled;
}

nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", t.vec()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  try {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed tensor: ") + e.what());
  }
}

nlohmann::json Encoder::to_json() const {
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& p : params_) {
    nlohmann::json t = tensor_to_json(p.value);
    t["name"] = p.name;
    weights.push_back(std::move(t));
  }
  return {{"config", cfg_.to_json()}, {"weights", std::move(weights)}};
}

Encoder Encoder::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("config") || !j.contains("weights")) {
    throw ConfigError("encoder checkpoint needs 'config' and 'weights'");
  }
  EncoderConfig cfg = EncoderConfig::from_json(j.at("config"));
  std::vector<NamedTensor> params;
  for (const auto& w : j.at("weights")) {
    params.push_back({w.value("name", std::string()), tensor_from_json(w)});
  }
  return Encoder(std::move(cfg), std::move(params));
}

}  // namespace mic
