#include "mic/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "mic/error.hpp"
#include "mic/rng.hpp"

namespace mic::data {

namespace {

class SentenceSampler {
 public:
  SentenceSampler(const GeneratorOptions& o, std::mt19937_64& rng) : o_(o), rng_(rng) {
    const std::size_t topic_end = 1 + o_.classes * o_.topic_words;
    if (o_.classes == 0 || o_.topic_words == 0 || topic_end >= o_.vocab_size) {
      throw ConfigError("generator: classes * topic_words must fit inside the vocabulary");
    }
    if (o_.min_len == 0 || o_.min_len > o_.max_len) {
      throw ConfigError("generator: need 0 < min_len <= max_len");
    }
    common_begin_ = topic_end;
  }

  std::size_t random_class() {
    return std::uniform_int_distribution<std::size_t>(0, o_.classes - 1)(rng_);
  }

  std::size_t random_length() {
    return std::uniform_int_distribution<std::size_t>(o_.min_len, o_.max_len)(rng_);
  }

  std::size_t token(std::size_t cls) {
    std::bernoulli_distribution topical(o_.topic_prob);
    if (topical(rng_)) {
      return 1 + cls * o_.topic_words +
             std::uniform_int_distribution<std::size_t>(0, o_.topic_words - 1)(rng_);
    }
    return std::uniform_int_distribution<std::size_t>(common_begin_, o_.vocab_size - 1)(rng_);
  }

  std::vector<std::size_t> sentence(std::size_t cls, std::size_t len) {
    std::vector<std::size_t> out(len);
    for (auto& t : out) t = token(cls);
    return out;
  }

 private:
  const GeneratorOptions& o_;
  std::mt19937_64& rng_;
  std::size_t common_begin_ = 0;
};

std::string render(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (k) out += ' ';
    out += 'w';
    out += std::to_string(ids[k]);
  }
  return out;
}

std::string format_score(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

double parse_number(const std::string& field, const std::filesystem::path& path,
                    std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(field, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != field.size()) {
    throw ParseError(path.string() + ":" + std::to_string(line) +
                     ": expected a number, got '" + field + "'");
  }
  return v;
}

}  // namespace

CorpusKind parse_corpus_kind(std::string_view name) {
  if (name == "clusters") return CorpusKind::Clusters;
  if (name == "sts-graded") return CorpusKind::StsGraded;
  if (name == "pairs") return CorpusKind::Pairs;
  throw ConfigError("unknown corpus kind '" + std::string(name) +
                    "' (expected clusters, sts-graded or pairs)");
}

std::string generate_corpus(CorpusKind kind, std::size_t size, std::uint64_t seed,
                            const GeneratorOptions& options) {
  if (size == 0) throw ConfigError("corpus size must be > 0");
  std::mt19937_64 rng(derive_seed(seed, "corpus"));
  SentenceSampler sampler(options, rng);
  std::string out;
  for (std::size_t n = 0; n < size; ++n) {
    switch (kind) {
      case CorpusKind::Clusters: {
        const std::size_t cls = sampler.random_class();
        out += render(sampler.sentence(cls, sampler.random_length())) + '\t' +
               std::to_string(cls) + '\n';
        break;
      }
      case CorpusKind::StsGraded: {
        const std::size_t cls = sampler.random_class();
        const std::size_t len = options.max_len;
        const auto base = sampler.sentence(cls, len);
        const std::size_t keep = std::uniform_int_distribution<std::size_t>(0, len)(rng);
        std::vector<std::size_t> positions(len);
        for (std::size_t k = 0; k < len; ++k) positions[k] = k;
        std::shuffle(positions.begin(), positions.end(), rng);
        auto other = base;
        const std::size_t other_cls = sampler.random_class();
        for (std::size_t k = keep; k < len; ++k) {
          std::size_t replacement = sampler.token(other_cls);
          while (replacement == base[positions[k]]) replacement = sampler.token(other_cls);
          other[positions[k]] = replacement;
        }
        const double score = 5.0 * static_cast<double>(keep) / static_cast<double>(len);
        out += render(base) + '\t' + render(other) + '\t' + format_score(score) + '\n';
        break;
      }
      case CorpusKind::Pairs: {
        const bool same = std::bernoulli_distribution(0.5)(rng);
        const std::size_t a = sampler.random_class();
        std::size_t b = a;
        if (!same && options.classes > 1) {
          while (b == a) b = sampler.random_class();
        }
        out += render(sampler.sentence(a, sampler.random_length())) + '\t' +
               render(sampler.sentence(b, sampler.random_length())) + '\t' +
               (a == b ? "1" : "0") + '\n';
        break;
      }
    }
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::vector<std::vector<std::string>> read_tsv(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

std::vector<LabeledText> read_labeled(const std::filesystem::path& path) {
  std::vector<LabeledText> out;
  const auto rows = read_tsv(path);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].size() == 1 && rows[k][0].empty()) continue;
    if (rows[k].size() != 2) {
      throw ParseError(path.string() + ":" + std::to_string(k + 1) +
                       ": expected 2 fields (text, label), got " +
                       std::to_string(rows[k].size()));
    }
    const double label = parse_number(rows[k][1], path, k + 1);
    if (label < 0 || label != static_cast<int>(label)) {
      throw ParseError(path.string() + ":" + std::to_string(k + 1) +
                       ": label must be a non-negative integer");
    }
    out.push_back({rows[k][0], static_cast<int>(label)});
  }
  return out;
}

std::vector<TextPair> read_pairs(const std::filesystem::path& path) {
  std::vector<TextPair> out;
  const auto rows = read_tsv(path);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].size() == 1 && rows[k][0].empty()) continue;
    if (rows[k].size() != 3) {
      throw ParseError(path.string() + ":" + std::to_string(k + 1) +
                       ": expected 3 fields (text_a, text_b, score), got " +
                       std::to_string(rows[k].size()));
    }
    out.push_back({rows[k][0], rows[k][1], parse_number(rows[k][2], path, k + 1)});
  }
  return out;
}

std::vector<std::string> read_sentences(const std::filesystem::path& path) {
  std::vector<std::string> out;
  const auto rows = read_tsv(path);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() > 3) {
      throw ParseError(path.string() + ":" + std::to_string(k + 1) +
                       ": expected at most 3 fields, got " + std::to_string(r.size()));
    }
    out.push_back(r[0]);
    if (r.size() == 3) out.push_back(r[1]);
  }
  return out;
}

}  // namespace mic::data
