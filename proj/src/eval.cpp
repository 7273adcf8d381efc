#include "mic/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "mic/diagnostics.hpp"
#include "mic/error.hpp"
#include "mic/rng.hpp"

namespace mic::eval {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void require_dims(const std::vector<std::size_t>& dims, std::size_t d_full, const char* what) {
  if (dims.empty()) throw InvalidDimension(std::string(what) + ": no dims requested");
  for (std::size_t d : dims) {
    if (d == 0 || d > d_full) {
      throw InvalidDimension(std::string(what) + ": dim " + std::to_string(d) +
                             " outside [1, " + std::to_string(d_full) + "]");
    }
  }
}

void require_pair(const Tensor& a, const Tensor& b, std::size_t n, const char* what) {
  a.require_rank(2, what);
  b.require_rank(2, what);
  if (a.shape() != b.shape() || a.dim(0) != n) {
    throw ContractError(std::string(what) + ": embeddings " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()) + " do not match " + std::to_string(n) + " labels");
  }
  if (n == 0) throw ContractError(std::string(what) + ": empty dataset");
}

bool is_constant(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace

std::vector<double> average_ranks(const std::vector<double>& xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t k = 0;
  while (k < order.size()) {
    std::size_t end = k + 1;
    while (end < order.size() && xs[order[end]] == xs[order[k]]) ++end;
    const double avg = 0.5 * static_cast<double>(k + 1 + end);
    for (std::size_t i = k; i < end; ++i) ranks[order[i]] = avg;
    k = end;
  }
  return ranks;
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ContractError("spearman: lists differ in length");
  if (xs.size() < 2) throw ContractError("spearman: need at least 2 values");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) {
      throw NonFiniteError("spearman", "spearman: non-finite input");
    }
  }
  if (is_constant(xs) || is_constant(ys)) {
    throw UndefinedCorrelation("spearman: correlation undefined for a constant list");
  }
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  const auto n = static_cast<double>(xs.size());
  const bool ties = std::set<double>(xs.begin(), xs.end()).size() != xs.size() ||
                    std::set<double>(ys.begin(), ys.end()).size() != ys.size();
  if (!ties) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  }
  const double mean = 0.5 * (n + 1.0);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> row_cosines(const Tensor& a, const Tensor& b, std::size_t d,
                                EpsilonPolicy eps) {
  a.require_rank(2, "row_cosines");
  b.require_rank(2, "row_cosines");
  if (a.shape() != b.shape()) throw ContractError("row_cosines: shape mismatch");
  if (d == 0 || d > a.dim(1)) throw InvalidDimension("row_cosines: bad prefix dim");
  std::vector<double> out(a.dim(0));
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      ab += a.at(i, j) * b.at(i, j);
      aa += a.at(i, j) * a.at(i, j);
      bb += b.at(i, j) * b.at(i, j);
    }
    out[i] = ab / (std::max(std::sqrt(aa), eps.value()) * std::max(std::sqrt(bb), eps.value()));
  }
  return out;
}

ThresholdResult best_threshold(const std::vector<double>& sims, const std::vector<int>& labels) {
  if (sims.size() != labels.size() || sims.empty()) {
    throw ContractError("best_threshold: need equally many sims and labels, at least one");
  }
  std::vector<std::size_t> order(sims.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return sims[a] < sims[b]; });
  const auto n = static_cast<double>(sims.size());
  // At t = -inf every example is predicted positive.
  long correct = std::count(labels.begin(), labels.end(), 1);
  ThresholdResult best{-std::numeric_limits<double>::infinity(), static_cast<double>(correct) / n};
  long best_correct = correct;
  std::size_t k = 0;
  while (k < order.size()) {
    std::size_t end = k;
    while (end < order.size() && sims[order[end]] == sims[order[k]]) {
      correct += labels[order[end]] == 1 ? -1 : 1;
      ++end;
    }
    const double t = end < order.size() ? 0.5 * (sims[order[k]] + sims[order[end]])
                                        : std::numeric_limits<double>::infinity();
    if (correct > best_correct) {
      best_correct = correct;
      best = {t, static_cast<double>(correct) / n};
    }
    k = end;
  }
  return best;
}

double macro_f1(const std::vector<int>& gold, const std::vector<int>& pred) {
  if (gold.size() != pred.size() || gold.empty()) {
    throw ContractError("macro_f1: need equally many gold and predicted labels");
  }
  std::set<int> classes(gold.begin(), gold.end());
  classes.insert(pred.begin(), pred.end());
  double total = 0.0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (pred[i] == c && gold[i] == c) tp += 1;
      if (pred[i] == c && gold[i] != c) fp += 1;
      if (pred[i] != c && gold[i] == c) fn += 1;
    }
    total += tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return total / static_cast<double>(classes.size());
}

std::string EvalReport::to_csv() const {
  std::string out = "dim," + metric + "\n";
  for (const auto& r : rows) out += std::to_string(r.dim) + "," + fmt(r.value) + "\n";
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row = {{"dim", r.dim}, {"flagged", r.flagged}};
    row["value"] = r.flagged ? nlohmann::json(nullptr) : nlohmann::json(r.value);
    if (!r.note.empty()) row["note"] = r.note;
    if (r.threshold) {
      row["threshold"] = std::isfinite(*r.threshold) ? nlohmann::json(*r.threshold)
                                                     : nlohmann::json(fmt(*r.threshold));
    }
    rs.push_back(row);
  }
  return {{"task", task}, {"metric", metric}, {"seed", seed},
          {"n_examples", n_examples}, {"rows", rs}};
}

Split seeded_split(std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("probe test_fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, "probe-split"));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  Split s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

EvalReport sts_eval(const Tensor& emb_a, const Tensor& emb_b, const std::vector<double>& gold,
                    const std::vector<std::size_t>& dims) {
  require_pair(emb_a, emb_b, gold.size(), "sts_eval");
  require_dims(dims, emb_a.dim(1), "sts_eval");
  EvalReport r{"sts", "spearman", 0, gold.size(), {}};
  for (std::size_t d : dims) {
    EvalRow row{d, 0.0, false, "", std::nullopt};
    try {
      row.value = spearman(row_cosines(emb_a, emb_b, d), gold);
    } catch (const UndefinedCorrelation& e) {
      row.flagged = true;
      row.value = std::numeric_limits<double>::quiet_NaN();
      row.note = e.what();
    }
    r.rows.push_back(row);
  }
  return r;
}

EvalReport pair_eval(const Tensor& emb_a, const Tensor& emb_b, const std::vector<int>& labels,
                     const std::vector<std::size_t>& dims) {
  require_pair(emb_a, emb_b, labels.size(), "pair_eval");
  require_dims(dims, emb_a.dim(1), "pair_eval");
  bool pos = false, neg = false;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ContractError("pair_eval: labels must be 0 or 1");
    (l == 1 ? pos : neg) = true;
  }
  if (!pos || !neg) throw ContractError("pair_eval: both classes must be present");
  EvalReport r{"pairs", "accuracy", 0, labels.size(), {}};
  for (std::size_t d : dims) {
    const ThresholdResult t = best_threshold(row_cosines(emb_a, emb_b, d), labels);
    r.rows.push_back({d, t.accuracy, false, "", t.threshold});
  }
  return r;
}

EvalReport probe_eval(const Tensor& emb, const std::vector<int>& labels,
                      const std::vector<std::size_t>& dims, std::uint64_t seed,
                      const ProbeConfig& cfg, const std::optional<Split>& given) {
  emb.require_rank(2, "probe_eval");
  if (emb.dim(0) != labels.size()) throw ContractError("probe_eval: label count mismatch");
  require_dims(dims, emb.dim(1), "probe_eval");
  std::map<int, std::size_t> class_index;
  for (int l : labels) class_index.emplace(l, 0);
  if (class_index.size() < 2) throw ContractError("probe_eval: need at least 2 classes");
  std::size_t next = 0;
  for (auto& [_, idx] : class_index) idx = next++;
  const std::size_t k_classes = class_index.size();

  const Split split = given ? *given : seeded_split(labels.size(), cfg.test_fraction, seed);
  if (split.train.empty() || split.test.empty()) {
    throw ContractError("probe_eval: train and test splits must be non-empty");
  }
  std::set<int> train_classes;
  for (std::size_t i : split.train) train_classes.insert(labels.at(i));
  for (const auto& [label, _] : class_index) {
    if (!train_classes.contains(label)) {
      throw ContractError("probe_eval: class " + std::to_string(label) +
                          " absent from the training split");
    }
  }

  EvalReport r{"probe", "macro_f1", seed, labels.size(), {}};
  const EpsilonPolicy eps;
  for (std::size_t d : dims) {
    const std::size_t n_tr = split.train.size();
    std::vector<double> mean(d, 0.0), scale(d, 0.0);
    for (std::size_t i : split.train) {
      for (std::size_t j = 0; j < d; ++j) mean[j] += emb.at(i, j);
    }
    for (double& m : mean) m /= static_cast<double>(n_tr);
    for (std::size_t i : split.train) {
      for (std::size_t j = 0; j < d; ++j) scale[j] += std::pow(emb.at(i, j) - mean[j], 2);
    }
    for (double& s : scale) s = std::sqrt(s / static_cast<double>(n_tr)) + eps.value();
    auto feature = [&](std::size_t i, std::size_t j) { return (emb.at(i, j) - mean[j]) / scale[j]; };

    std::vector<double> w(d * k_classes, 0.0), b(k_classes, 0.0);
    std::vector<double> gw(w.size()), gb(k_classes), p(k_classes);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t i : split.train) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k_classes; ++c) {
          p[c] = b[c];
          for (std::size_t j = 0; j < d; ++j) p[c] += feature(i, j) * w[j * k_classes + c];
          mx = std::max(mx, p[c]);
        }
        double z = 0.0;
        for (double& v : p) z += (v = std::exp(v - mx));
        const std::size_t y = class_index.at(labels[i]);
        for (std::size_t c = 0; c < k_classes; ++c) {
          const double g = p[c] / z - (c == y ? 1.0 : 0.0);
          gb[c] += g;
          for (std::size_t j = 0; j < d; ++j) gw[j * k_classes + c] += g * feature(i, j);
        }
      }
      for (std::size_t q = 0; q < w.size(); ++q) {
        w[q] -= cfg.lr * (gw[q] / static_cast<double>(n_tr) + cfg.l2 * w[q]);
      }
      for (std::size_t c = 0; c < k_classes; ++c) b[c] -= cfg.lr * gb[c] / static_cast<double>(n_tr);
    }

    std::vector<int> gold, pred;
    for (std::size_t i : split.test) {
      std::size_t arg = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k_classes; ++c) {
        double v = b[c];
        for (std::size_t j = 0; j < d; ++j) v += feature(i, j) * w[j * k_classes + c];
        if (v > best) {
          best = v;
          arg = c;
        }
      }
      gold.push_back(static_cast<int>(class_index.at(labels[i])));
      pred.push_back(static_cast<int>(arg));
    }
    r.rows.push_back({d, macro_f1(gold, pred), false, "", std::nullopt});
  }
  return r;
}

Tensor embed_texts(const Encoder& enc, const std::vector<std::string>& texts) {
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(tokenize(t, enc.config().vocab_size));
  return diag::embed_sequences(enc, seqs);
}

namespace {

std::pair<Tensor, Tensor> embed_pairs(const Encoder& enc, const std::vector<data::TextPair>& data) {
  if (data.empty()) throw ContractError("evaluation dataset is empty");
  std::vector<std::string> a, b;
  for (const auto& p : data) {
    a.push_back(p.a);
    b.push_back(p.b);
  }
  return {embed_texts(enc, a), embed_texts(enc, b)};
}

}  // namespace

EvalReport sts_eval(const Encoder& enc, const std::vector<data::TextPair>& data,
                    const std::vector<std::size_t>& dims) {
  const auto [ea, eb] = embed_pairs(enc, data);
  std::vector<double> gold;
  for (const auto& p : data) {
    if (!std::isfinite(p.score)) throw ContractError("sts_eval: non-finite gold score");
    gold.push_back(p.score);
  }
  return sts_eval(ea, eb, gold, dims);
}

EvalReport pair_eval(const Encoder& enc, const std::vector<data::TextPair>& data,
                     const std::vector<std::size_t>& dims) {
  const auto [ea, eb] = embed_pairs(enc, data);
  std::vector<int> labels;
  for (const auto& p : data) {
    if (p.score != 0.0 && p.score != 1.0) throw ContractError("pair_eval: labels must be 0 or 1");
    labels.push_back(static_cast<int>(p.score));
  }
  return pair_eval(ea, eb, labels, dims);
}

EvalReport probe_eval(const Encoder& enc, const std::vector<data::LabeledText>& data,
                      const std::vector<std::size_t>& dims, std::uint64_t seed,
                      const ProbeConfig& cfg) {
  if (data.empty()) throw ContractError("probe dataset is empty");
  std::vector<std::string> texts;
  std::vector<int> labels;
  for (const auto& x : data) {
    texts.push_back(x.text);
    labels.push_back(x.label);
  }
  return probe_eval(embed_texts(enc, texts), labels, dims, seed, cfg);
}

std::vector<std::string> task_names() { return {"sts", "pairs", "probe"}; }

}  // namespace mic::eval
