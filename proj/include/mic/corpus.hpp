#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

/// TSV dataset schema and synthetic generators.
///
/// Files are UTF-8, one example per line, tab separated:
///   text [TAB] label                     labeled sentences (classification)
///   text_a [TAB] text_b [TAB] score      graded similarity pairs
///   text_a [TAB] text_b [TAB] 0|1        binary pairs
namespace mic::data {

struct LabeledText {
  std::string text;
  int label = 0;
};

struct TextPair {
  std::string a;
  std::string b;
  double score = 0.0;  // gold similarity or 0/1 label
};

enum class CorpusKind { Clusters, StsGraded, Pairs };

/// Parses "clusters", "sts-graded" or "pairs"; throws ConfigError otherwise.
CorpusKind parse_corpus_kind(std::string_view name);

struct GeneratorOptions {
  std::size_t classes = 8;
  std::size_t vocab_size = 1000;
  std::size_t topic_words = 40;
  double topic_prob = 0.6;
  std::size_t min_len = 6;
  std::size_t max_len = 12;
};

/// Deterministic synthetic dataset in the TSV schema for `kind`.
/// Cluster sentences draw tokens from a class-specific topic vocabulary with
/// probability topic_prob and from a shared pool otherwise. Graded pairs keep
/// k of n tokens of a base sentence and score 5k/n. Binary pairs are labeled 1
/// iff both sentences come from the same class.
std::string generate_corpus(CorpusKind kind, std::size_t size, std::uint64_t seed,
                            const GeneratorOptions& options = {});

/// Raw TSV rows with field-count checking. Empty lines are skipped.
std::vector<std::vector<std::string>> read_tsv(const std::filesystem::path& path);

std::vector<LabeledText> read_labeled(const std::filesystem::path& path);
std::vector<TextPair> read_pairs(const std::filesystem::path& path);

/// Every sentence in a file of any schema; pair files are flattened.
std::vector<std::string> read_sentences(const std::filesystem::path& path);

/// Reads the whole file as bytes.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace mic::data
