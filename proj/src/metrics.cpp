#include "aimlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace aimlab {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string join_gram(const Sentence& s, size_t start, int n) {
  std::string key;
  for (int i = 0; i < n; ++i) {
    if (i) key.push_back('\x1f');
    key += s[start + i];
  }
  return key;
}

void check_paired(const TextCorpus& hyps, const TextCorpus& refs, const char* who) {
  if (hyps.empty()) fail(std::string(who) + ": empty corpus");
  if (hyps.size() != refs.size())
    fail(std::string(who) + ": hypothesis and reference counts differ");
}

size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// in-table vectors for one sentence, OOV skipped
std::vector<const std::vector<double>*> sentence_vectors(const Sentence& s,
                                                         const EmbeddingTable& table) {
  std::vector<const std::vector<double>*> out;
  for (const auto& w : s) {
    auto it = table.vectors.find(w);
    if (it != table.vectors.end()) out.push_back(&it->second);
  }
  if (out.empty()) fail("embedding_metric: sentence has no in-table words");
  return out;
}

std::vector<double> mean_vector(const std::vector<const std::vector<double>*>& vs, int dim) {
  std::vector<double> m(dim, 0.0);
  for (const auto* v : vs)
    for (int i = 0; i < dim; ++i) m[i] += (*v)[i];
  for (double& x : m) x /= static_cast<double>(vs.size());
  return m;
}

std::vector<double> extreme_vector(const std::vector<const std::vector<double>*>& vs,
                                   int dim) {
  std::vector<double> m(dim, 0.0);
  for (const auto* v : vs)
    for (int i = 0; i < dim; ++i)
      if (std::abs((*v)[i]) > std::abs(m[i])) m[i] = (*v)[i];
  return m;
}

double greedy_one_way(const std::vector<const std::vector<double>*>& from,
                      const std::vector<const std::vector<double>*>& to) {
  double total = 0.0;
  for (const auto* f : from) {
    double best = -1.0;
    for (const auto* t : to) best = std::max(best, cosine(*f, *t));
    total += best;
  }
  return total / static_cast<double>(from.size());
}
}  // namespace

NGramTable NGramTable::build(const TextCorpus& corpus, int n) {
  if (n < 1) fail("n-gram order must be at least 1");
  NGramTable table;
  table.n = n;
  for (const auto& s : corpus) {
    if (static_cast<int>(s.size()) < n) continue;
    for (size_t i = 0; i + n <= s.size(); ++i) {
      ++table.counts[join_gram(s, i, n)];
      ++table.total;
    }
  }
  return table;
}

double dist_n(const TextCorpus& corpus, int n) {
  auto table = NGramTable::build(corpus, n);
  if (table.total == 0) fail("dist_n: corpus has no n-grams of order " + std::to_string(n));
  return static_cast<double>(table.counts.size()) / static_cast<double>(table.total);
}

double ent_n(const TextCorpus& corpus, int n) {
  auto table = NGramTable::build(corpus, n);
  if (table.total == 0) fail("ent_n: corpus has no n-grams of order " + std::to_string(n));
  double h = 0.0;
  double total = static_cast<double>(table.total);
  for (const auto& [gram, count] : table.counts) {
    double p = static_cast<double>(count) / total;
    h -= p * std::log(p);
  }
  return h;
}

double bleu(const TextCorpus& hypotheses, const TextCorpus& references) {
  check_paired(hypotheses, references, "bleu");
  constexpr int kMaxOrder = 4;
  int64_t matches[kMaxOrder] = {0, 0, 0, 0};
  int64_t totals[kMaxOrder] = {0, 0, 0, 0};
  int64_t hyp_len = 0, ref_len = 0;

  for (size_t p = 0; p < hypotheses.size(); ++p) {
    const auto& hyp = hypotheses[p];
    const auto& ref = references[p];
    hyp_len += hyp.size();
    ref_len += ref.size();
    for (int n = 1; n <= kMaxOrder; ++n) {
      if (static_cast<int>(hyp.size()) < n) continue;
      std::unordered_map<std::string, int64_t> ref_counts;
      if (static_cast<int>(ref.size()) >= n)
        for (size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[join_gram(ref, i, n)];
      std::unordered_map<std::string, int64_t> hyp_counts;
      for (size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[join_gram(hyp, i, n)];
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
        totals[n - 1] += count;
      }
    }
  }

  if (hyp_len == 0) return 0.0;
  if (matches[0] == 0) return 0.0;  // no unigram overlap anywhere

  double log_precision = 0.0;
  for (int n = 1; n <= kMaxOrder; ++n) {
    double m = static_cast<double>(matches[n - 1]);
    double t = static_cast<double>(totals[n - 1]);
    if (n > 1) {  // add-one smoothing on the higher orders
      m += 1.0;
      t += 1.0;
    }
    log_precision += std::log(m / t) / kMaxOrder;
  }
  double bp = hyp_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / hyp_len);
  return bp * std::exp(log_precision);
}

double rouge_l(const TextCorpus& hypotheses, const TextCorpus& references) {
  check_paired(hypotheses, references, "rouge_l");
  double total = 0.0;
  for (size_t p = 0; p < hypotheses.size(); ++p) {
    const auto& hyp = hypotheses[p];
    const auto& ref = references[p];
    if (hyp.empty() || ref.empty()) continue;  // F1 is 0, contributes nothing
    double lcs = static_cast<double>(lcs_length(hyp, ref));
    if (lcs == 0.0) continue;
    double precision = lcs / hyp.size();
    double recall = lcs / ref.size();
    total += 2.0 * precision * recall / (precision + recall);
  }
  return total / static_cast<double>(hypotheses.size());
}

EmbeddingTable EmbeddingTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("embedding table: cannot open " + path);
  EmbeddingTable table;
  std::string line;
  bool first = true;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::vector<std::string> parts;
    std::string tok;
    while (fields >> tok) parts.push_back(tok);
    if (first) {
      first = false;
      // "count dim" header: exactly two integer fields
      if (parts.size() == 2) {
        char* end1 = nullptr;
        char* end2 = nullptr;
        (void)std::strtol(parts[0].c_str(), &end1, 10);
        (void)std::strtol(parts[1].c_str(), &end2, 10);
        if (*end1 == '\0' && *end2 == '\0') continue;
      }
    }
    if (parts.size() < 2)
      fail("embedding table: line " + std::to_string(line_no) + " has no vector");
    std::vector<double> vec;
    vec.reserve(parts.size() - 1);
    for (size_t i = 1; i < parts.size(); ++i) {
      try {
        vec.push_back(std::stod(parts[i]));
      } catch (const std::exception&) {
        fail("embedding table: line " + std::to_string(line_no) + " has a bad number");
      }
    }
    if (table.dim == 0)
      table.dim = static_cast<int>(vec.size());
    else if (static_cast<int>(vec.size()) != table.dim)
      fail("embedding table: line " + std::to_string(line_no) + " dimension mismatch");
    table.vectors[parts[0]] = std::move(vec);
  }
  table.validate();
  return table;
}

void EmbeddingTable::validate() const {
  if (vectors.empty()) fail("embedding table: no entries");
  if (dim < 1) fail("embedding table: dimension not set");
  for (const auto& [word, vec] : vectors)
    if (static_cast<int>(vec.size()) != dim)
      fail("embedding table: entry '" + word + "' has the wrong dimension");
}

double embedding_metric(EmbeddingMode mode, const TextCorpus& hypotheses,
                        const TextCorpus& references, const EmbeddingTable& table) {
  check_paired(hypotheses, references, "embedding_metric");
  table.validate();
  double total = 0.0;
  for (size_t p = 0; p < hypotheses.size(); ++p) {
    auto hv = sentence_vectors(hypotheses[p], table);
    auto rv = sentence_vectors(references[p], table);
    switch (mode) {
      case EmbeddingMode::kGreedy:
        total += 0.5 * (greedy_one_way(hv, rv) + greedy_one_way(rv, hv));
        break;
      case EmbeddingMode::kAverage:
        total += cosine(mean_vector(hv, table.dim), mean_vector(rv, table.dim));
        break;
      case EmbeddingMode::kExtreme:
        total += cosine(extreme_vector(hv, table.dim), extreme_vector(rv, table.dim));
        break;
    }
  }
  return total / static_cast<double>(hypotheses.size());
}

namespace {
using nlohmann::json;

void put_optional(json& j, const char* key, const std::optional<double>& v) {
  if (v) j[key] = *v;
}

std::optional<double> get_optional(const json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  return j.at(key).get<double>();
}
}  // namespace

std::string MetricsReport::to_json() const {
  json j;
  j["n_pairs"] = n_pairs;
  put_optional(j, "bleu", bleu);
  put_optional(j, "rouge_l", rouge_l);
  put_optional(j, "greedy", greedy);
  put_optional(j, "average", average);
  put_optional(j, "extreme", extreme);
  put_optional(j, "dist_1", dist_1);
  put_optional(j, "dist_2", dist_2);
  put_optional(j, "ent_4", ent_4);
  j["config"] = {{"bleu", config.bleu},
                 {"rouge_l", config.rouge_l},
                 {"distinct", config.distinct},
                 {"entropy", config.entropy},
                 {"embedding", config.embedding},
                 {"embedding_file", config.embedding_file}};
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  json j = json::parse(text);
  MetricsReport r;
  r.n_pairs = j.at("n_pairs").get<int64_t>();
  r.bleu = get_optional(j, "bleu");
  r.rouge_l = get_optional(j, "rouge_l");
  r.greedy = get_optional(j, "greedy");
  r.average = get_optional(j, "average");
  r.extreme = get_optional(j, "extreme");
  r.dist_1 = get_optional(j, "dist_1");
  r.dist_2 = get_optional(j, "dist_2");
  r.ent_4 = get_optional(j, "ent_4");
  const json& c = j.at("config");
  r.config.bleu = c.at("bleu").get<bool>();
  r.config.rouge_l = c.at("rouge_l").get<bool>();
  r.config.distinct = c.at("distinct").get<bool>();
  r.config.entropy = c.at("entropy").get<bool>();
  r.config.embedding = c.at("embedding").get<bool>();
  r.config.embedding_file = c.at("embedding_file").get<std::string>();
  return r;
}

bool operator==(const MetricsConfig& a, const MetricsConfig& b) {
  return a.bleu == b.bleu && a.rouge_l == b.rouge_l && a.distinct == b.distinct &&
         a.entropy == b.entropy && a.embedding == b.embedding &&
         a.embedding_file == b.embedding_file;
}

bool operator==(const MetricsReport& a, const MetricsReport& b) {
  return a.n_pairs == b.n_pairs && a.bleu == b.bleu && a.rouge_l == b.rouge_l &&
         a.greedy == b.greedy && a.average == b.average && a.extreme == b.extreme &&
         a.dist_1 == b.dist_1 && a.dist_2 == b.dist_2 && a.ent_4 == b.ent_4 &&
         a.config == b.config;
}

MetricsReport build_report(const TextCorpus& generations, const TextCorpus& references,
                           const MetricsConfig& config, const EmbeddingTable* table) {
  MetricsReport report;
  report.n_pairs = static_cast<int64_t>(generations.size());
  report.config = config;
  if (config.bleu) report.bleu = bleu(generations, references);
  if (config.rouge_l) report.rouge_l = rouge_l(generations, references);
  if (config.distinct) {
    report.dist_1 = dist_n(generations, 1);
    report.dist_2 = dist_n(generations, 2);
  }
  if (config.entropy) report.ent_4 = ent_n(generations, 4);
  if (config.embedding) {
    EmbeddingTable loaded;
    if (!table) {
      loaded = EmbeddingTable::load(config.embedding_file);
      table = &loaded;
    }
    report.greedy = embedding_metric(EmbeddingMode::kGreedy, generations, references, *table);
    report.average =
        embedding_metric(EmbeddingMode::kAverage, generations, references, *table);
    report.extreme =
        embedding_metric(EmbeddingMode::kExtreme, generations, references, *table);
  }
  return report;
}

}  // namespace aimlab
