#include "mic/diagnostics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "mic/corpus.hpp"
#include "mic/error.hpp"
#include "mic/parallel.hpp"
#include "mic/rng.hpp"
#include "mic/scr.hpp"
#include "mic/tensor_ops.hpp"

namespace mic::diag {

namespace {

void require_matrix(const Tensor& emb, std::size_t min_rows, const char* what) {
  emb.require_rank(2, what);
  if (emb.dim(0) < min_rows) {
    throw InsufficientBatch(std::string(what) + ": need at least " + std::to_string(min_rows) +
                            " rows, got " + std::to_string(emb.dim(0)));
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw ParseError("line " + std::to_string(line) + ": expected a number, got '" + s + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) return out;
    start = pos + 1;
  }
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Variance profile

double VarianceProfile::prefix_cv(std::size_t d, EpsilonPolicy eps) const {
  if (d == 0 || d > variances.size()) {
    throw InvalidDimension("prefix_cv: d=" + std::to_string(d) + " outside [1, " +
                           std::to_string(variances.size()) + "]");
  }
  const double mean = std::accumulate(variances.begin(), variances.begin() + d, 0.0) /
                      static_cast<double>(d);
  double ss = 0.0;
  for (std::size_t j = 0; j < d; ++j) ss += (variances[j] - mean) * (variances[j] - mean);
  return std::sqrt(ss / static_cast<double>(d)) / (mean + eps.value());
}

VarianceProfile variance_profile(const Tensor& emb, const std::vector<std::size_t>& dims) {
  require_matrix(emb, 2, "variance_profile");
  const std::size_t n = emb.dim(0), dfull = emb.dim(1);
  for (std::size_t d : dims) {
    if (d == 0 || d > dfull) {
      throw InvalidDimension("variance_profile: boundary " + std::to_string(d) +
                             " outside [1, " + std::to_string(dfull) + "]");
    }
  }
  VarianceProfile p;
  p.boundaries = dims;
  p.variances.assign(dfull, 0.0);
  for (std::size_t j = 0; j < dfull; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += emb.at(i, j);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (emb.at(i, j) - mean) * (emb.at(i, j) - mean);
    p.variances[j] = ss / static_cast<double>(n);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Cross-correlation

CorrMap summarize_corr(Tensor c, std::size_t d, double tau) {
  CorrMap m;
  m.d = d;
  m.tau = tau;
  const double count = static_cast<double>(c.numel());
  for (double v : c.data()) {
    const double a = std::abs(v);
    m.mean_abs += a;
    if (a > tau) {
      m.frac_above += 1.0;
      m.mass_above += a - tau;
    }
  }
  if (count > 0) {
    m.mean_abs /= count;
    m.frac_above /= count;
    m.mass_above /= count;
  }
  m.c = std::move(c);
  return m;
}

CorrMap cross_corr_map(const Tensor& emb, std::size_t d, double tau, EpsilonPolicy eps) {
  require_matrix(emb, 1, "cross_corr_map");
  const Tensor as_sequence = emb.reshaped({1, emb.dim(0), emb.dim(1)});
  return cross_corr_map(as_sequence, SequenceMask::full(1, emb.dim(0)), d, tau, eps);
}

CorrMap cross_corr_map(const Tensor& h, const SequenceMask& m, std::size_t d, double tau,
                       EpsilonPolicy eps) {
  scr::ScrConfig cfg;
  cfg.tau_corr = tau;
  cfg.eps = eps;
  cfg.validate();
  return summarize_corr(scr::cross_correlation(h, m, d, cfg).c, d, tau);
}

// ---------------------------------------------------------------------------
// Covariance

Tensor covariance(const Tensor& emb) {
  require_matrix(emb, 2, "covariance");
  const std::size_t n = emb.dim(0), dd = emb.dim(1);
  std::vector<double> mean(dd, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dd; ++j) mean[j] += emb.at(i, j);
  }
  for (double& v : mean) v /= static_cast<double>(n);
  Tensor sigma({dd, dd});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < dd; ++a) {
      const double xa = emb.at(i, a) - mean[a];
      for (std::size_t b = a; b < dd; ++b) sigma.at(a, b) += xa * (emb.at(i, b) - mean[b]);
    }
  }
  for (std::size_t a = 0; a < dd; ++a) {
    for (std::size_t b = a; b < dd; ++b) {
      sigma.at(a, b) /= static_cast<double>(n);
      sigma.at(b, a) = sigma.at(a, b);
    }
  }
  return sigma;
}

Tensor CovariancePartition::assemble() const {
  const std::size_t dd = pre.dim(0) + res.dim(0);
  Tensor out({dd, dd});
  for (std::size_t a = 0; a < dd; ++a) {
    for (std::size_t b = 0; b < dd; ++b) {
      if (a < d && b < d) {
        out.at(a, b) = pre.at(a, b);
      } else if (a < d) {
        out.at(a, b) = cross.at(a, b - d);
      } else if (b < d) {
        out.at(a, b) = cross.at(b, a - d);
      } else {
        out.at(a, b) = res.at(a - d, b - d);
      }
    }
  }
  return out;
}

CovariancePartition covariance_partition(const Tensor& emb, std::size_t d) {
  require_matrix(emb, 2, "covariance_partition");
  const std::size_t dd = emb.dim(1);
  if (d == 0 || d >= dd) {
    throw InvalidDimension("covariance_partition: need 0 < d < " + std::to_string(dd) +
                           ", got " + std::to_string(d));
  }
  CovariancePartition p;
  p.d = d;
  p.sigma = covariance(emb);
  p.pre = Tensor({d, d});
  p.cross = Tensor({d, dd - d});
  p.res = Tensor({dd - d, dd - d});
  for (std::size_t a = 0; a < dd; ++a) {
    for (std::size_t b = 0; b < dd; ++b) {
      const double v = p.sigma.at(a, b);
      if (a < d && b < d) p.pre.at(a, b) = v;
      if (a < d && b >= d) p.cross.at(a, b - d) = v;
      if (a >= d && b >= d) p.res.at(a - d, b - d) = v;
    }
  }
  auto fro = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
  };
  p.pre_fro = fro(p.pre);
  p.cross_fro = fro(p.cross);
  p.res_fro = fro(p.res);

  Eigen::MatrixXd pre(d, d);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) pre(a, b) = p.pre.at(a, b);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(pre, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw NonFiniteError("covariance_partition", "eigenvalue iteration did not converge");
  }
  p.pre_eig_min = solver.eigenvalues().minCoeff();
  p.pre_eig_max = solver.eigenvalues().maxCoeff();
  return p;
}

// ---------------------------------------------------------------------------
// Uniformity

Tensor select_rows(const Tensor& emb, const std::vector<std::size_t>& rows) {
  emb.require_rank(2, "select_rows");
  const std::size_t dd = emb.dim(1);
  Tensor out({rows.size(), dd});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= emb.dim(0)) throw InvalidDimension("select_rows: row out of range");
    for (std::size_t j = 0; j < dd; ++j) out.at(k, j) = emb.at(rows[k], j);
  }
  return out;
}

UniformityReport uniformity_report(const Tensor& emb, const std::vector<std::size_t>& dims,
                                   const sir::SirConfig& cfg, std::uint64_t seed,
                                   std::size_t max_rows) {
  require_matrix(emb, 2, "uniformity_report");
  if (max_rows < 2) throw ConfigError("uniformity_report: max_rows must be >= 2");
  const std::size_t n = emb.dim(0);
  UniformityReport r;
  r.n_total = n;
  r.subsample_seed = derive_seed(seed, "uniformity-subsample");
  r.used_rows.resize(n);
  std::iota(r.used_rows.begin(), r.used_rows.end(), std::size_t{0});
  if (n > max_rows) {
    std::mt19937_64 rng(r.subsample_seed);
    std::shuffle(r.used_rows.begin(), r.used_rows.end(), rng);
    r.used_rows.resize(max_rows);
    std::sort(r.used_rows.begin(), r.used_rows.end());
    r.subsampled = true;
  }
  r.n_used = r.used_rows.size();
  const Tensor sample = r.subsampled ? select_rows(emb, r.used_rows) : emb;
  for (std::size_t d : dims) {
    if (d == 0 || d > emb.dim(1)) {
      throw InvalidDimension("uniformity_report: dim " + std::to_string(d) + " outside [1, " +
                             std::to_string(emb.dim(1)) + "]");
    }
    const sir::SirTerms t = sir::sir_loss(slice_features(sample, 0, d), cfg);
    r.rows.push_back({d, t.unif, t.cv});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Extraction

Tensor embed_sequences(const Encoder& enc, const std::vector<std::vector<std::int32_t>>& seqs,
                       std::size_t batch_size) {
  if (seqs.empty()) throw ConfigError("embed_sequences: no sequences");
  if (batch_size == 0) throw ConfigError("embed_sequences: batch_size must be > 0");
  const std::size_t dd = enc.config().d_full;
  const std::size_t chunks = (seqs.size() + batch_size - 1) / batch_size;
  Tensor out({seqs.size(), dd});
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = c * batch_size;
    const std::size_t end = std::min(seqs.size(), begin + batch_size);
    std::vector<std::vector<std::int32_t>> part(seqs.begin() + static_cast<std::ptrdiff_t>(begin),
                                                seqs.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor pooled = enc.embed(TokenBatch::from_sequences(part, enc.config().max_len));
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t j = 0; j < dd; ++j) out.at(i, j) = pooled.at(i - begin, j);
    }
  });
  return out;
}

LayerStates layer_states(const Encoder& enc, const std::vector<std::vector<std::int32_t>>& seqs,
                         std::size_t layer) {
  if (layer >= enc.config().n_layers) {
    throw InvalidDimension("layer " + std::to_string(layer) + " out of range");
  }
  const TokenBatch batch = TokenBatch::from_sequences(seqs, enc.config().max_len);
  ForwardTrace trace = enc.forward(batch, 0, false);
  return {std::move(trace.layers[layer]), batch.mask};
}

// ---------------------------------------------------------------------------
// Embedding files

Tensor read_embeddings(const std::filesystem::path& path) {
  const std::string bytes = data::read_file(path);
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw ParseError(path.string() + ": missing header line");
  std::string header = bytes.substr(0, nl);
  if (!header.empty() && header.back() == '\r') header.pop_back();

  if (!header.empty() && header.front() == '{') {
    nlohmann::json h;
    try {
      h = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ":1: bad JSON header: " + e.what());
    }
    std::size_t n = 0, d = 0;
    std::string dtype;
    try {
      n = h.at("n").get<std::size_t>();
      d = h.at("d").get<std::size_t>();
      dtype = h.at("dtype").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":1: header needs n, d, dtype: " + e.what());
    }
    if (dtype != "f32" && dtype != "f64") {
      throw ParseError(path.string() + ":1: dtype must be f32 or f64");
    }
    if constexpr (std::endian::native != std::endian::little) {
      throw ParseError("binary embedding files require a little-endian host");
    }
    const std::size_t width = dtype == "f32" ? 4 : 8;
    const std::size_t payload = bytes.size() - nl - 1;
    if (payload != n * d * width) {
      throw ParseError(path.string() + ": expected " + std::to_string(n * d * width) +
                       " payload bytes, found " + std::to_string(payload));
    }
    Tensor out({n, d});
    const char* src = bytes.data() + nl + 1;
    for (std::size_t k = 0; k < n * d; ++k) {
      if (width == 4) {
        float f;
        std::memcpy(&f, src + k * 4, 4);
        out[k] = f;
      } else {
        std::memcpy(&out[k], src + k * 8, 8);
      }
    }
    return out;
  }

  const auto lines = lines_of(bytes);
  const auto dims = split(lines[0], ',');
  if (dims.size() != 2) throw ParseError(path.string() + ":1: header must be 'N,d'");
  const double nd = parse_double(dims[0], 1), dd = parse_double(dims[1], 1);
  if (nd < 0 || dd < 1 || nd != std::floor(nd) || dd != std::floor(dd)) {
    throw ParseError(path.string() + ":1: N and d must be non-negative integers");
  }
  const auto n = static_cast<std::size_t>(nd), d = static_cast<std::size_t>(dd);
  Tensor out({n, d});
  std::size_t row = 0;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    if (lines[k].empty()) continue;
    if (row >= n) throw ParseError(path.string() + ":" + std::to_string(k + 1) + ": extra row");
    const auto fields = split(lines[k], ',');
    if (fields.size() != d) {
      throw ParseError(path.string() + ":" + std::to_string(k + 1) + ": expected " +
                       std::to_string(d) + " values, got " + std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      try {
        out.at(row, j) = parse_double(fields[j], k + 1);
      } catch (const ParseError& e) {
        throw ParseError(path.string() + ":" + e.what());
      }
    }
    ++row;
  }
  if (row != n) {
    throw ParseError(path.string() + ": header says " + std::to_string(n) + " rows, found " +
                     std::to_string(row));
  }
  return out;
}

void write_embeddings_csv(const std::filesystem::path& path, const Tensor& emb) {
  emb.require_rank(2, "write_embeddings_csv");
  std::string out = std::to_string(emb.dim(0)) + "," + std::to_string(emb.dim(1)) + "\n";
  for (std::size_t i = 0; i < emb.dim(0); ++i) {
    for (std::size_t j = 0; j < emb.dim(1); ++j) {
      if (j) out += ',';
      out += fmt(emb.at(i, j));
    }
    out += '\n';
  }
  data::write_file(path, out);
}

void write_embeddings_binary(const std::filesystem::path& path, const Tensor& emb,
                             const std::string& dtype) {
  emb.require_rank(2, "write_embeddings_binary");
  if (dtype != "f32" && dtype != "f64") throw ConfigError("dtype must be f32 or f64");
  if constexpr (std::endian::native != std::endian::little) {
    throw ConfigError("binary embedding files require a little-endian host");
  }
  const nlohmann::json header = {{"n", emb.dim(0)}, {"d", emb.dim(1)}, {"dtype", dtype}};
  std::string out = header.dump() + "\n";
  for (double v : emb.data()) {
    if (dtype == "f32") {
      const float f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), 4);
    } else {
      out.append(reinterpret_cast<const char*>(&v), 8);
    }
  }
  data::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Exports

std::string profile_csv(const VarianceProfile& p) {
  std::string out = "dim,variance,boundary\n";
  for (std::size_t j = 0; j < p.variances.size(); ++j) {
    const bool boundary =
        std::find(p.boundaries.begin(), p.boundaries.end(), j + 1) != p.boundaries.end();
    out += std::to_string(j) + "," + fmt(p.variances[j]) + "," + (boundary ? "1" : "0") + "\n";
  }
  return out;
}

std::string heatmap_csv(const CorrMap& m) {
  std::string out = "u,v,value\n";
  for (std::size_t u = 0; u < m.c.dim(0); ++u) {
    for (std::size_t v = 0; v < m.c.dim(1); ++v) {
      out += std::to_string(u) + "," + std::to_string(v) + "," + fmt(m.c.at(u, v)) + "\n";
    }
  }
  return out;
}

VarianceProfile parse_profile_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != "dim,variance,boundary") {
    throw ParseError("profile csv: bad header");
  }
  VarianceProfile p;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    if (lines[k].empty()) continue;
    const auto f = split(lines[k], ',');
    if (f.size() != 3) throw ParseError("line " + std::to_string(k + 1) + ": expected 3 fields");
    p.variances.push_back(parse_double(f[1], k + 1));
    if (f[2] == "1") p.boundaries.push_back(p.variances.size());
  }
  return p;
}

Tensor parse_heatmap_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != "u,v,value") throw ParseError("heatmap csv: bad header");
  std::vector<std::array<double, 3>> cells;
  std::size_t rows = 0, cols = 0;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    if (lines[k].empty()) continue;
    const auto f = split(lines[k], ',');
    if (f.size() != 3) throw ParseError("line " + std::to_string(k + 1) + ": expected 3 fields");
    const double u = parse_double(f[0], k + 1), v = parse_double(f[1], k + 1);
    cells.push_back({u, v, parse_double(f[2], k + 1)});
    rows = std::max(rows, static_cast<std::size_t>(u) + 1);
    cols = std::max(cols, static_cast<std::size_t>(v) + 1);
  }
  Tensor c({rows, cols});
  for (const auto& cell : cells) {
    c.at(static_cast<std::size_t>(cell[0]), static_cast<std::size_t>(cell[1])) = cell[2];
  }
  return c;
}

nlohmann::json to_json(const VarianceProfile& p) {
  nlohmann::json cv = nlohmann::json::object();
  for (std::size_t d : p.boundaries) cv[std::to_string(d)] = p.prefix_cv(d);
  return {{"variances", p.variances}, {"boundaries", p.boundaries}, {"prefix_cv", cv}};
}

nlohmann::json to_json(const CorrMap& m) {
  return {{"d", m.d},
          {"d_res", m.c.rank() == 2 ? m.c.dim(1) : 0},
          {"tau", m.tau},
          {"mean_abs", m.mean_abs},
          {"frac_above", m.frac_above},
          {"mass_above", m.mass_above}};
}

nlohmann::json to_json(const CovariancePartition& c) {
  return {{"d", c.d},
          {"pre_eig_min", c.pre_eig_min},
          {"pre_eig_max", c.pre_eig_max},
          {"pre_fro", c.pre_fro},
          {"cross_fro", c.cross_fro},
          {"res_fro", c.res_fro}};
}

nlohmann::json to_json(const UniformityReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"dim", row.dim}, {"unif", row.unif}, {"cv", row.cv}});
  }
  return {{"rows", rows},
          {"n_total", r.n_total},
          {"n_used", r.n_used},
          {"subsampled", r.subsampled},
          {"subsample_seed", r.subsample_seed}};
}

}  // namespace mic::diag
