#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace aimlab {

// A finite conversation task whose joint distribution over (source, response)
// pairs is known exactly, so information quantities and expected metrics can
// be computed in closed form rather than estimated.
struct SyntheticTask {
  std::vector<std::string> sources;    // each a space-separated sentence
  std::vector<std::string> responses;
  std::vector<std::vector<double>> joint;  // p(s,t); rows follow sources
  std::vector<int> bland;              // response indices shared by all sources

  void validate() const;  // throws on malformed tables
  bool is_bland(int response_index) const;
  // Response index for an exact sentence match, or -1.
  int find_response(const std::vector<std::string>& tokens) const;
  // True when tokens exactly reproduce a response with positive probability
  // under the given source and that response is not a bland one.
  bool is_specific_for(int source_index, const std::vector<std::string>& tokens) const;
};

// The stock task family used by the experiments: every source shares a pool of
// generic responses carrying `bland_mass` of each conditional, plus
// `specifics_per_source` responses unique to that source. Likelihood training
// collapses onto the generics whenever bland_mass/n_bland exceeds the
// per-specific mass, which is what the adversarial objectives must escape.
SyntheticTask bland_trap_task(int n_sources, int specifics_per_source, int n_bland,
                              double bland_mass);

struct Dataset {
  struct Pair {
    std::vector<std::string> src, tgt;
  };
  enum Split { kTrain = 0, kValid = 1, kTest = 2 };

  std::vector<Pair> pairs;
  std::vector<int> split;  // parallel to pairs

  std::vector<int> indices_of(int split_tag) const;
};

// 80/10/10 assignment by seeded shuffle of the pair indices.
void assign_splits(Dataset& ds, uint64_t seed);

Dataset generate_synthetic(const SyntheticTask& task, int count, uint64_t seed);

// One pair per line, source TAB target, lowercased whitespace tokens.
Dataset load_tsv(const std::string& path);
void save_tsv(const Dataset& ds, const std::string& path);

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBegin = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;
};

// Keeps the max_size-4 most frequent tokens over both sides of the dataset;
// frequency ties break lexicographically.
Vocab build_vocab(const Dataset& ds, int max_size);

// One token per line in id order, reserved rows included, so a trained
// model's id assignment survives into later generate/eval invocations.
void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

struct EncodedBatch {
  std::vector<std::vector<int>> src_ids;   // padded to L
  std::vector<std::vector<int>> tgt_ids;   // [begin, tokens..., end], padded to L
  std::vector<std::vector<int>> src_mask;  // 1 on real tokens
  std::vector<std::vector<int>> tgt_mask;
  int truncated = 0;  // sentences cut to fit L
};

EncodedBatch encode_batch(const Dataset& ds, const std::vector<int>& indices,
                          const Vocab& vocab, int max_len);

// Lowercased whitespace tokenization used everywhere text enters the system.
std::vector<std::string> tokenize(const std::string& line);

}  // namespace aimlab
