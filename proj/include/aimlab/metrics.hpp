#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace aimlab {

using Sentence = std::vector<std::string>;
using TextCorpus = std::vector<Sentence>;

// Corpus-wide n-gram frequency table. Counting is over every sentence in the
// evaluated set at once, not per sentence, because the reported diversity
// numbers only make sense at that scale.
struct NGramTable {
  int n = 1;
  int64_t total = 0;                                // all n-gram occurrences
  std::unordered_map<std::string, int64_t> counts;  // tokens joined by '\x1f'

  static NGramTable build(const TextCorpus& corpus, int n);
};

// unique n-grams / total n-grams across the whole corpus
double dist_n(const TextCorpus& corpus, int n);

// natural-log entropy of the empirical n-gram distribution
double ent_n(const TextCorpus& corpus, int n);

// Corpus-level BLEU-4 against one reference per hypothesis. Orders 2 through
// 4 get add-one smoothing; a zero unigram overlap short-circuits to 0.
double bleu(const TextCorpus& hypotheses, const TextCorpus& references);

// Mean per-pair ROUGE-L F1 (longest common subsequence).
double rouge_l(const TextCorpus& hypotheses, const TextCorpus& references);

struct EmbeddingTable {
  int dim = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;

  // File format: one "word v1 ... vd" entry per line; an optional first line
  // of two integers ("count dim") is detected and skipped.
  static EmbeddingTable load(const std::string& path);
  void validate() const;  // uniform dimension, at least one entry
};

enum class EmbeddingMode { kGreedy, kAverage, kExtreme };

// greedy: per-word max-cosine alignment, run both directions and averaged;
// average: cosine between sentence mean vectors;
// extreme: cosine between vectors of per-dimension largest-magnitude values.
// Words missing from the table are skipped; a sentence with nothing left is
// an error rather than a silent zero.
double embedding_metric(EmbeddingMode mode, const TextCorpus& hypotheses,
                        const TextCorpus& references, const EmbeddingTable& table);

struct MetricsConfig {
  bool bleu = true;
  bool rouge_l = true;
  bool distinct = true;  // dist_1, dist_2
  bool entropy = true;   // ent_4
  bool embedding = false;
  std::string embedding_file;  // consulted when embedding is set
};

struct MetricsReport {
  int64_t n_pairs = 0;
  std::optional<double> bleu, rouge_l;
  std::optional<double> greedy, average, extreme;
  std::optional<double> dist_1, dist_2, ent_4;
  MetricsConfig config;

  std::string to_json() const;  // stable field order, round-trippable
  static MetricsReport from_json(const std::string& text);
};

bool operator==(const MetricsConfig& a, const MetricsConfig& b);
bool operator==(const MetricsReport& a, const MetricsReport& b);

// Runs whatever the config selects. The table argument backs the embedding
// modes; passing nullptr with embedding selected loads config.embedding_file.
MetricsReport build_report(const TextCorpus& generations, const TextCorpus& references,
                           const MetricsConfig& config,
                           const EmbeddingTable* table = nullptr);

}  // namespace aimlab
