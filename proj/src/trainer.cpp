#include "mic/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json_util.hpp"
#include "mic/corpus.hpp"
#include "mic/rng.hpp"

namespace mic::train {

namespace {

const std::set<std::string> kTopLevelKeys = {
    "preset",     "encoder", "epochs",     "lr",       "batch_size",
    "gamma",      "use_scr", "use_sir",    "align_view", "excluded_pairs",
    "eps",        "scr",     "sir",        "contrastive", "layers",
    "seed",       "optimizer", "schedule"};

std::string entry_label(const AlignEntry& e, const char* part) {
  return std::string(part) + "@view=" + e.view + ",layer=" + std::to_string(e.layer) +
         ",d=" + std::to_string(e.dim);
}

void require_finite(double v, const std::string& component) {
  if (!std::isfinite(v)) {
    throw NonFiniteError(component, "non-finite value in " + component);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  encoder.validate();
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite value >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be >= 0");
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
  scr.validate();
  sir.validate();
  contrastive.validate(encoder.d_full);
  layers.validate(encoder.n_layers, gamma > 0.0);
  if (schedule != "cosine") throw ConfigError("schedule must be \"cosine\"");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) {
    throw ConfigError("optimizer.beta1 must lie in [0, 1)");
  }
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer.beta2 must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps must be > 0");
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (!(optimizer.clip_norm >= 0.0)) throw ConfigError("optimizer.clip_norm must be >= 0");
  for (const auto& [layer, dim] : excluded_pairs) {
    if (layer >= encoder.n_layers) throw ConfigError("excluded_pairs: layer out of range");
    if (std::find(contrastive.dims.begin(), contrastive.dims.end(), dim) ==
        contrastive.dims.end()) {
      throw ConfigError("excluded_pairs: dim " + std::to_string(dim) + " not in contrastive.dims");
    }
  }
}

void TrainConfig::sync_eps() {
  const EpsilonPolicy policy(eps);
  scr.eps = policy;
  sir.eps = policy;
  contrastive.eps = policy;
  encoder.seed = seed;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [l, d] : excluded_pairs) pairs.push_back({l, d});
  return {
      {"preset", preset},
      {"encoder", encoder.to_json()},
      {"epochs", epochs},
      {"lr", lr},
      {"batch_size", batch_size},
      {"gamma", gamma},
      {"use_scr", use_scr},
      {"use_sir", use_sir},
      {"align_view", align_view == AlignView::A ? "a" : "both"},
      {"excluded_pairs", pairs},
      {"eps", eps},
      {"scr", {{"tau_corr", scr.tau_corr}, {"lambda_var", scr.lambda_var}}},
      {"sir", {{"t", sir.t}}},
      {"contrastive", {{"temperature", contrastive.temperature}, {"dims", contrastive.dims}}},
      {"layers", {{"aligned_layers", layers.aligned_layers}}},
      {"seed", seed},
      {"optimizer",
       {{"beta1", optimizer.beta1},
        {"beta2", optimizer.beta2},
        {"eps", optimizer.eps},
        {"weight_decay", optimizer.weight_decay},
        {"clip_norm", optimizer.clip_norm}}},
      {"schedule", schedule}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kTopLevelKeys.contains(key)) throw ConfigError("config: unknown field '" + key + "'");
  }
  std::string name = "mic";
  detail::read_field(j, "preset", name, "config");
  TrainConfig c = mic::train::preset(name);
  const std::string p = "config";
  if (j.contains("encoder")) {
    nlohmann::json merged = c.encoder.to_json();
    if (!j["encoder"].is_object()) throw ConfigError("config.encoder: expected an object");
    for (const auto& [k, v] : j["encoder"].items()) {
      if (!merged.contains(k)) throw ConfigError("config.encoder: unknown field '" + k + "'");
      merged[k] = v;
    }
    c.encoder = EncoderConfig::from_json(merged);
  }
  detail::read_field(j, "epochs", c.epochs, p);
  detail::read_field(j, "lr", c.lr, p);
  detail::read_field(j, "batch_size", c.batch_size, p);
  detail::read_field(j, "gamma", c.gamma, p);
  detail::read_field(j, "use_scr", c.use_scr, p);
  detail::read_field(j, "use_sir", c.use_sir, p);
  std::string view = c.align_view == AlignView::A ? "a" : "both";
  detail::read_field(j, "align_view", view, p);
  if (view == "a") {
    c.align_view = AlignView::A;
  } else if (view == "both") {
    c.align_view = AlignView::Both;
  } else {
    throw ConfigError("config.align_view must be \"a\" or \"both\"");
  }
  if (j.contains("excluded_pairs")) {
    std::vector<std::vector<std::size_t>> raw;
    detail::read_field(j, "excluded_pairs", raw, p);
    c.excluded_pairs.clear();
    for (const auto& pair : raw) {
      if (pair.size() != 2) throw ConfigError("config.excluded_pairs: entries are [layer, dim]");
      c.excluded_pairs.emplace_back(pair[0], pair[1]);
    }
  }
  detail::read_field(j, "eps", c.eps, p);
  if (j.contains("scr")) {
    detail::read_field(j["scr"], "tau_corr", c.scr.tau_corr, p + ".scr");
    detail::read_field(j["scr"], "lambda_var", c.scr.lambda_var, p + ".scr");
  }
  if (j.contains("sir")) detail::read_field(j["sir"], "t", c.sir.t, p + ".sir");
  if (j.contains("contrastive")) {
    detail::read_field(j["contrastive"], "temperature", c.contrastive.temperature,
                       p + ".contrastive");
    detail::read_field(j["contrastive"], "dims", c.contrastive.dims, p + ".contrastive");
  }
  if (j.contains("layers")) {
    detail::read_field(j["layers"], "aligned_layers", c.layers.aligned_layers, p + ".layers");
  }
  detail::read_field(j, "seed", c.seed, p);
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    detail::read_field(o, "beta1", c.optimizer.beta1, p + ".optimizer");
    detail::read_field(o, "beta2", c.optimizer.beta2, p + ".optimizer");
    detail::read_field(o, "eps", c.optimizer.eps, p + ".optimizer");
    detail::read_field(o, "weight_decay", c.optimizer.weight_decay, p + ".optimizer");
    detail::read_field(o, "clip_norm", c.optimizer.clip_norm, p + ".optimizer");
  }
  detail::read_field(j, "schedule", c.schedule, p);
  if (!(c.eps > 0.0)) throw ConfigError("config.eps must be > 0");
  c.sync_eps();
  c.validate();
  return c;
}

TrainConfig preset(std::string_view name) {
  TrainConfig c;
  c.preset = std::string(name);
  if (name == "mic") {
  } else if (name == "mrl") {
    c.gamma = 0.0;
  } else if (name == "scr-only") {
    c.use_sir = false;
  } else if (name == "sir-only") {
    c.use_scr = false;
  } else if (name == "backbone") {
    c.lr = 2e-5;
    c.encoder.max_len = 256;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + std::string(name) + "' (known: " + known + ")");
  }
  c.sync_eps();
  return c;
}

std::vector<std::string> preset_names() {
  return {"mic", "mrl", "scr-only", "sir-only", "backbone"};
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total) {
  if (total <= 1) return base_lr;
  const double progress =
      static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Breakdown

nlohmann::json LossBreakdown::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : align) {
    entries.push_back({{"view", e.view},
                       {"layer", e.layer},
                       {"dim", e.dim},
                       {"scr_applied", e.scr_applied},
                       {"sir_applied", e.sir_applied},
                       {"corr", e.corr},
                       {"var", e.var},
                       {"scr", e.scr},
                       {"cv", e.cv},
                       {"unif", e.unif},
                       {"sir", e.sir}});
  }
  return {{"step", step},       {"lr", lr},         {"gamma", gamma},
          {"dims", dims},       {"infonce", infonce}, {"l_mrl", l_mrl},
          {"align", entries},   {"l_align", l_align}, {"l_total", l_total}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  LossBreakdown b;
  try {
    b.step = j.at("step").get<std::size_t>();
    b.lr = j.at("lr").get<double>();
    b.gamma = j.at("gamma").get<double>();
    b.dims = j.at("dims").get<std::vector<std::size_t>>();
    b.infonce = j.at("infonce").get<std::vector<double>>();
    b.l_mrl = j.at("l_mrl").get<double>();
    b.l_align = j.at("l_align").get<double>();
    b.l_total = j.at("l_total").get<double>();
    for (const auto& e : j.at("align")) {
      AlignEntry a;
      a.view = e.at("view").get<std::string>();
      a.layer = e.at("layer").get<std::size_t>();
      a.dim = e.at("dim").get<std::size_t>();
      a.scr_applied = e.at("scr_applied").get<bool>();
      a.sir_applied = e.at("sir_applied").get<bool>();
      a.corr = e.at("corr").get<double>();
      a.var = e.at("var").get<double>();
      a.scr = e.at("scr").get<double>();
      a.cv = e.at("cv").get<double>();
      a.unif = e.at("unif").get<double>();
      a.sir = e.at("sir").get<double>();
      b.align.push_back(a);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed metrics record: ") + e.what());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Loss assembly

AlignResult align_loss(const std::vector<ag::Var>& layers, const SequenceMask& mask,
                       const TrainConfig& cfg, std::string_view view) {
  if (mask.batch() < 2) {
    throw InsufficientBatch("alignment losses need a batch of at least 2, got " +
                            std::to_string(mask.batch()));
  }
  if (layers.empty()) throw ContractError("align_loss: no traced layers");
  ag::Tape& tape = layers.front().tape();
  const std::size_t d_full = layers.front().shape().at(2);

  AlignResult out;
  std::vector<ag::Var> totals;
  for (std::size_t layer : cfg.layers.aligned_layers) {
    if (layer >= layers.size()) {
      throw ContractError("aligned layer " + std::to_string(layer) + " missing from trace");
    }
    const ag::Var& h = layers[layer];
    ag::Var pooled;
    for (std::size_t d : cfg.contrastive.dims) {
      if (std::find(cfg.excluded_pairs.begin(), cfg.excluded_pairs.end(),
                    std::pair{layer, d}) != cfg.excluded_pairs.end()) {
        continue;
      }
      AlignEntry entry;
      entry.view = std::string(view);
      entry.layer = layer;
      entry.dim = d;
      std::vector<std::pair<std::string, ag::Var>> parts;
      ag::Var total;
      if (cfg.use_scr && d < d_full) {
        const scr::ScrVars s = scr::scr_loss(h, mask, d, cfg.scr);
        entry.scr_applied = true;
        parts.emplace_back("scr.corr", s.corr);
        parts.emplace_back("scr.var", s.var);
        total = s.total;
      }
      if (cfg.use_sir) {
        if (!pooled.valid()) pooled = ag::masked_mean_pool(h, mask);
        const sir::SirVars s = sir::sir_loss(contrastive::truncate(pooled, d), cfg.sir);
        entry.sir_applied = true;
        parts.emplace_back("sir.cv", s.cv);
        parts.emplace_back("sir.unif", s.unif);
        total = total.valid() ? total + s.total : s.total;
      }
      if (!total.valid()) total = tape.constant(Tensor::scalar(0.0));
      totals.push_back(total);
      out.entries.push_back(entry);
      out.parts.push_back(std::move(parts));
    }
  }
  if (totals.empty()) {
    out.loss = tape.constant(Tensor::scalar(0.0));
    return out;
  }
  ag::Var acc = totals.front();
  for (std::size_t k = 1; k < totals.size(); ++k) acc = acc + totals[k];
  out.loss = acc / static_cast<double>(totals.size());
  return out;
}

namespace {

void fill_entry_values(AlignResult& r) {
  for (std::size_t k = 0; k < r.entries.size(); ++k) {
    AlignEntry& e = r.entries[k];
    for (const auto& [name, var] : r.parts[k]) {
      const double v = var.item();
      if (name == "scr.corr") e.corr = v;
      if (name == "scr.var") e.var = v;
      if (name == "sir.cv") e.cv = v;
      if (name == "sir.unif") e.unif = v;
    }
  }
}

}  // namespace

TotalLoss total_loss(ag::Tape& tape, const std::vector<ag::Var>& weights, const Encoder& enc,
                     const TokenBatch& batch, const TrainConfig& cfg, std::size_t step) {
  if (batch.batch < 2) {
    throw InsufficientBatch("training needs a batch of at least 2, got " +
                            std::to_string(batch.batch));
  }
  TotalLoss out;
  out.view_a = enc.forward(tape, weights, batch, derive_seed(cfg.seed, "dropout-a", step), true);
  out.view_b = enc.forward(tape, weights, batch, derive_seed(cfg.seed, "dropout-b", step), true);
  out.mrl = contrastive::mrl_loss(out.view_a.pooled, out.view_b.pooled, cfg.contrastive);
  out.align = align_loss(out.view_a.layers, batch.mask, cfg, "a");
  if (cfg.align_view == AlignView::Both) {
    AlignResult other = align_loss(out.view_b.layers, batch.mask, cfg, "b");
    out.align.loss = 0.5 * (out.align.loss + other.loss);
    for (std::size_t k = 0; k < other.entries.size(); ++k) {
      out.align.entries.push_back(other.entries[k]);
      out.align.parts.push_back(other.parts[k]);
    }
  }
  out.total = out.mrl.loss + cfg.gamma * out.align.loss;
  return out;
}

TrainState::TrainState(Encoder enc, std::size_t total)
    : encoder(std::move(enc)), total_steps(total) {
  for (const auto& p : encoder.params()) {
    adam.m.emplace_back(p.value.shape());
    adam.v.emplace_back(p.value.shape());
  }
}

LossBreakdown train_step(TrainState& state, const TokenBatch& batch, const TrainConfig& cfg) {
  if (batch.batch < 2) {
    throw InsufficientBatch("train_step needs a batch of at least 2, got " +
                            std::to_string(batch.batch));
  }
  Encoder& enc = state.encoder;
  const double lr = cosine_lr(cfg.lr, state.step, state.total_steps);

  ag::Tape tape;
  std::vector<ag::Var> weights;
  for (const auto& p : enc.params()) weights.push_back(tape.leaf(p.value, p.name));

  TotalLoss graph = total_loss(tape, weights, enc, batch, cfg, state.step);
  const contrastive::MrlVars& mrl = graph.mrl;
  AlignResult& align = graph.align;
  const ag::Var& total = graph.total;

  LossBreakdown log;
  log.step = state.step;
  log.lr = lr;
  log.gamma = cfg.gamma;
  log.dims = cfg.contrastive.dims;
  for (std::size_t k = 0; k < mrl.per_dim.size(); ++k) {
    log.infonce.push_back(mrl.per_dim[k].item());
    require_finite(log.infonce.back(), "infonce@d=" + std::to_string(log.dims[k]));
  }
  fill_entry_values(align);
  for (std::size_t k = 0; k < align.entries.size(); ++k) {
    for (const auto& [name, var] : align.parts[k]) {
      require_finite(var.item(), entry_label(align.entries[k], name.c_str()));
    }
  }
  // Entry totals mirror the graph: scr = corr + lambda*var, sir = (cv+unif)/2.
  for (auto& e : align.entries) {
    e.scr = e.scr_applied ? e.corr + cfg.scr.lambda_var * e.var : 0.0;
    e.sir = e.sir_applied ? 0.5 * (e.cv + e.unif) : 0.0;
  }
  log.align = std::move(align.entries);
  log.l_mrl = mrl.loss.item();
  log.l_align = align.loss.item();
  log.l_total = total.item();
  require_finite(log.l_mrl, "l_mrl");
  require_finite(log.l_align, "l_align");
  require_finite(log.l_total, "l_total");

  tape.backward(total);

  std::vector<Tensor> grads;
  grads.reserve(weights.size());
  double norm_sq = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    grads.push_back(weights[k].grad());
    for (double g : grads.back().data()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError("gradient:" + enc.params()[k].name,
                             "non-finite gradient for " + enc.params()[k].name);
      }
      norm_sq += g * g;
    }
  }
  double clip_scale = 1.0;
  if (cfg.optimizer.clip_norm > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > cfg.optimizer.clip_norm) clip_scale = cfg.optimizer.clip_norm / norm;
  }

  const AdamWConfig& o = cfg.optimizer;
  const double t = static_cast<double>(state.step + 1);
  const double bias1 = 1.0 - std::pow(o.beta1, t);
  const double bias2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto& p = enc.params()[k].value.vec();
    auto& m = state.adam.m[k].vec();
    auto& v = state.adam.v[k].vec();
    const auto& g = grads[k].vec();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip_scale;
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      const double update = (m[i] / bias1) / (std::sqrt(v[i] / bias2) + o.eps);
      p[i] -= lr * (update + o.weight_decay * p[i]);
    }
  }
  ++state.step;
  return log;
}

// ---------------------------------------------------------------------------
// Runs

std::size_t steps_per_epoch(std::size_t corpus_size, std::size_t batch_size) {
  return (corpus_size + batch_size - 1) / batch_size;
}

std::vector<std::size_t> batch_indices(std::size_t corpus_size, std::size_t batch_size,
                                       std::uint64_t seed, std::size_t epoch,
                                       std::size_t index) {
  if (corpus_size < 2) throw InsufficientBatch("corpus needs at least 2 sentences");
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, "shuffle", epoch));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t begin = index * batch_size;
  if (begin >= corpus_size) throw ContractError("batch index past the end of the epoch");
  const std::size_t end = std::min(corpus_size, begin + batch_size);
  std::vector<std::size_t> out(order.begin() + static_cast<std::ptrdiff_t>(begin),
                               order.begin() + static_cast<std::ptrdiff_t>(end));
  if (out.size() < 2) out.push_back(order.front());
  return out;
}

nlohmann::json checkpoint_to_json(const TrainState& state, const TrainConfig& cfg) {
  nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
  for (const auto& t : state.adam.m) m.push_back(tensor_to_json(t));
  for (const auto& t : state.adam.v) v.push_back(tensor_to_json(t));
  return {{"format", "mic-checkpoint"},
          {"version", 1},
          {"train_config", cfg.to_json()},
          {"encoder", state.encoder.to_json()},
          {"optimizer",
           {{"step", state.step}, {"total_steps", state.total_steps}, {"m", m}, {"v", v}}}};
}

std::pair<TrainConfig, TrainState> checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "mic-checkpoint") {
    throw ConfigError("not a mic checkpoint");
  }
  if (j.value("version", 0) != 1) throw ConfigError("unsupported checkpoint version");
  TrainConfig cfg = TrainConfig::from_json(j.at("train_config"));
  TrainState state(Encoder::from_json(j.at("encoder")));
  const auto& o = j.at("optimizer");
  state.step = o.at("step").get<std::size_t>();
  state.total_steps = o.at("total_steps").get<std::size_t>();
  const auto& ms = o.at("m");
  const auto& vs = o.at("v");
  if (ms.size() != state.adam.m.size() || vs.size() != state.adam.v.size()) {
    throw ConfigError("checkpoint optimizer state does not match the encoder");
  }
  for (std::size_t k = 0; k < ms.size(); ++k) {
    state.adam.m[k] = tensor_from_json(ms[k]);
    state.adam.v[k] = tensor_from_json(vs[k]);
    if (state.adam.m[k].shape() != state.encoder.params()[k].value.shape() ||
        state.adam.v[k].shape() != state.encoder.params()[k].value.shape()) {
      throw ConfigError("checkpoint optimizer moment shape mismatch");
    }
  }
  return {std::move(cfg), std::move(state)};
}

Encoder load_encoder(const std::filesystem::path& path) {
  std::filesystem::path file = path;
  if (std::filesystem::is_directory(file)) file /= "checkpoint.json";
  if (!std::filesystem::exists(file)) throw ParseError("checkpoint not found: " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(data::read_file(file));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
  if (j.contains("encoder")) return Encoder::from_json(j.at("encoder"));
  return Encoder::from_json(j);
}

std::vector<LossBreakdown> read_metrics(const std::filesystem::path& path) {
  std::istringstream in(data::read_file(path));
  std::vector<LossBreakdown> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(LossBreakdown::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string_view build_id() { return "mic-0.1.0"; }

RunResult run(const TrainConfig& requested,
              const std::vector<std::vector<std::int32_t>>& corpus,
              const RunOptions& options) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  namespace fs = std::filesystem;

  TrainConfig cfg = requested;
  std::optional<TrainState> resumed;
  std::vector<std::string> previous_metrics;
  if (options.resume_from) {
    const fs::path ckpt = *options.resume_from / "checkpoint.json";
    auto [ckpt_cfg, ckpt_state] =
        checkpoint_from_json(nlohmann::json::parse(data::read_file(ckpt)));
    cfg = std::move(ckpt_cfg);
    resumed.emplace(std::move(ckpt_state));
    const fs::path old_metrics = *options.resume_from / "metrics.ndjson";
    if (fs::exists(old_metrics)) {
      std::istringstream in(data::read_file(old_metrics));
      std::string line;
      while (std::getline(in, line)) {
        if (!line.empty()) previous_metrics.push_back(line);
      }
    }
  }
  cfg.validate();

  const std::size_t spe = steps_per_epoch(corpus.size(), cfg.batch_size);
  const std::size_t total = cfg.epochs * spe;
  TrainState state = resumed ? std::move(*resumed) : TrainState(Encoder(cfg.encoder), total);
  if (resumed && state.total_steps != total) {
    throw ConfigError("resumed run expects " + std::to_string(state.total_steps) +
                      " steps but this corpus gives " + std::to_string(total));
  }
  if (previous_metrics.size() > state.step) previous_metrics.resize(state.step);

  fs::create_directories(options.out_dir);
  nlohmann::json manifest = {
      {"build", build_id()},
      {"preset", cfg.preset},
      {"config", cfg.to_json()},
      {"seeds",
       {{"run", cfg.seed},
        {"encoder_init", derive_seed(cfg.encoder.seed, "encoder-init")},
        {"shuffle_epoch0", derive_seed(cfg.seed, "shuffle", 0)},
        {"dropout_a_step0", derive_seed(cfg.seed, "dropout-a", 0)},
        {"dropout_b_step0", derive_seed(cfg.seed, "dropout-b", 0)}}},
      {"inputs",
       {{"corpus", {{"path", options.corpus_path}, {"fnv1a64", options.corpus_hash},
                    {"sentences", corpus.size()}}},
        {"resume_from", options.resume_from ? options.resume_from->string() : ""}}},
      {"outputs",
       {{"checkpoint", (options.out_dir / "checkpoint.json").string()},
        {"metrics", (options.out_dir / "metrics.ndjson").string()},
        {"manifest", (options.out_dir / "manifest.json").string()}}},
      {"start_step", state.step},
      {"total_steps", total},
      {"steps_per_epoch", spe}};
  data::write_file(options.out_dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream metrics(options.out_dir / "metrics.ndjson", std::ios::trunc);
  for (const auto& line : previous_metrics) metrics << line << '\n';

  RunResult result{std::move(state), {}};
  TrainState& st = result.state;
  const std::size_t stop = std::min(total, options.stop_at_step.value_or(total));
  while (st.step < stop) {
    const std::size_t epoch = st.step / spe;
    const auto idx = batch_indices(corpus.size(), cfg.batch_size, cfg.seed, epoch, st.step % spe);
    std::vector<std::vector<std::int32_t>> seqs;
    seqs.reserve(idx.size());
    for (std::size_t i : idx) seqs.push_back(corpus[i]);
    const TokenBatch batch = TokenBatch::from_sequences(seqs, cfg.encoder.max_len);
    LossBreakdown log = train_step(st, batch, cfg);
    metrics << log.to_json().dump() << '\n';
    metrics.flush();
    result.log.push_back(std::move(log));
  }
  data::write_file(options.out_dir / "checkpoint.json", checkpoint_to_json(st, cfg).dump() + "\n");
  return result;
}

}  // namespace mic::train
