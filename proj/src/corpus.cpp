#include "aimlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "aimlab/rng.hpp"

namespace aimlab {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}
}  // namespace

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

void SyntheticTask::validate() const {
  if (sources.empty() || responses.empty()) fail("synthetic task: empty support");
  if (joint.size() != sources.size()) fail("synthetic task: joint row count mismatch");
  double total = 0.0;
  for (const auto& row : joint) {
    if (row.size() != responses.size()) fail("synthetic task: joint column count mismatch");
    for (double p : row) {
      if (p < 0.0 || !std::isfinite(p)) fail("synthetic task: invalid probability");
      total += p;
    }
  }
  if (std::abs(total - 1.0) > 1e-12)
    fail("synthetic task: joint sums to " + std::to_string(total) + ", expected 1");
  for (int b : bland)
    if (b < 0 || b >= static_cast<int>(responses.size()))
      fail("synthetic task: bland index out of range");
}

bool SyntheticTask::is_bland(int response_index) const {
  return std::find(bland.begin(), bland.end(), response_index) != bland.end();
}

int SyntheticTask::find_response(const std::vector<std::string>& tokens) const {
  std::string sentence = join(tokens);
  for (size_t i = 0; i < responses.size(); ++i)
    if (responses[i] == sentence) return static_cast<int>(i);
  return -1;
}

bool SyntheticTask::is_specific_for(int source_index,
                                    const std::vector<std::string>& tokens) const {
  int r = find_response(tokens);
  if (r < 0 || is_bland(r)) return false;
  return joint[source_index][r] > 0.0;
}

SyntheticTask bland_trap_task(int n_sources, int specifics_per_source, int n_bland,
                              double bland_mass) {
  if (n_sources < 1 || specifics_per_source < 1 || n_bland < 1)
    fail("bland_trap_task: counts must be positive");
  if (bland_mass <= 0.0 || bland_mass >= 1.0)
    fail("bland_trap_task: bland_mass must lie in (0,1)");
  SyntheticTask task;
  for (int i = 0; i < n_sources; ++i) task.sources.push_back("ask q" + std::to_string(i));
  // shared generic responses first, then the per-source specifics
  for (int k = 0; k < n_bland; ++k) {
    task.bland.push_back(static_cast<int>(task.responses.size()));
    task.responses.push_back("i dont know b" + std::to_string(k));
  }
  for (int i = 0; i < n_sources; ++i)
    for (int j = 0; j < specifics_per_source; ++j)
      task.responses.push_back("yes q" + std::to_string(i) + " take s" + std::to_string(j));
  double p_src = 1.0 / n_sources;
  double p_bland = bland_mass / n_bland;
  double p_spec = (1.0 - bland_mass) / specifics_per_source;
  task.joint.assign(n_sources, std::vector<double>(task.responses.size(), 0.0));
  for (int i = 0; i < n_sources; ++i) {
    for (int k = 0; k < n_bland; ++k) task.joint[i][k] = p_src * p_bland;
    for (int j = 0; j < specifics_per_source; ++j)
      task.joint[i][n_bland + i * specifics_per_source + j] = p_src * p_spec;
  }
  task.validate();
  return task;
}

std::vector<int> Dataset::indices_of(int split_tag) const {
  std::vector<int> out;
  for (size_t i = 0; i < split.size(); ++i)
    if (split[i] == split_tag) out.push_back(static_cast<int>(i));
  return out;
}

void assign_splits(Dataset& ds, uint64_t seed) {
  size_t n = ds.pairs.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  ds.split.assign(n, Dataset::kTrain);
  size_t n_valid = n / 10, n_test = n / 10;
  for (size_t i = 0; i < n_valid; ++i) ds.split[order[i]] = Dataset::kValid;
  for (size_t i = n_valid; i < n_valid + n_test; ++i) ds.split[order[i]] = Dataset::kTest;
}

Dataset generate_synthetic(const SyntheticTask& task, int count, uint64_t seed) {
  if (count < 1) fail("generate_synthetic: count must be >= 1");
  task.validate();
  std::vector<double> flat;
  flat.reserve(task.sources.size() * task.responses.size());
  for (const auto& row : task.joint) flat.insert(flat.end(), row.begin(), row.end());
  Rng rng = Rng(seed).fork(0);
  Dataset ds;
  int n_resp = static_cast<int>(task.responses.size());
  for (int i = 0; i < count; ++i) {
    int cell = rng.categorical(flat);
    ds.pairs.push_back(
        {tokenize(task.sources[cell / n_resp]), tokenize(task.responses[cell % n_resp])});
  }
  assign_splits(ds, Rng(seed).fork(1).next_u64());
  return ds;
}

Dataset load_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_tsv: cannot open " + path);
  Dataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      fail("load_tsv: " + path + " line " + std::to_string(line_no) + " has no tab separator");
    ds.pairs.push_back({tokenize(line.substr(0, tab)), tokenize(line.substr(tab + 1))});
  }
  if (ds.pairs.empty()) fail("load_tsv: " + path + " contains no pairs");
  assign_splits(ds, 0);
  return ds;
}

void save_tsv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("save_tsv: cannot open " + path);
  for (const auto& p : ds.pairs) out << join(p.src) << '\t' << join(p.tgt) << '\n';
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) fail("vocab: id " + std::to_string(id) + " out of range");
  return id_to_token[id];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

Vocab build_vocab(const Dataset& ds, int max_size) {
  if (max_size <= 4) fail("build_vocab: max_size must exceed the 4 reserved ids");
  if (ds.pairs.empty()) fail("build_vocab: empty dataset");
  std::map<std::string, int64_t> counts;  // ordered map gives the lexicographic tie-break
  for (const auto& p : ds.pairs) {
    for (const auto& t : p.src) ++counts[t];
    for (const auto& t : p.tgt) ++counts[t];
  }
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  v.id_to_token = {"<pad>", "<s>", "</s>", "<unk>"};
  size_t keep = std::min(ranked.size(), static_cast<size_t>(max_size - 4));
  for (size_t i = 0; i < keep; ++i) v.id_to_token.push_back(ranked[i].first);
  for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("save_vocab: cannot open " + path);
  for (const auto& t : vocab.id_to_token) out << t << '\n';
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_vocab: cannot open " + path);
  Vocab v;
  v.id_to_token.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) fail("load_vocab: " + path + " has an empty row");
    v.id_to_token.push_back(line);
  }
  const std::vector<std::string> reserved{"<pad>", "<s>", "</s>", "<unk>"};
  if (v.id_to_token.size() < reserved.size())
    fail("load_vocab: " + path + " is missing the reserved rows");
  for (size_t i = 0; i < reserved.size(); ++i)
    if (v.id_to_token[i] != reserved[i])
      fail("load_vocab: " + path + " row " + std::to_string(i) + " should be " + reserved[i]);
  for (int i = 0; i < v.size(); ++i) {
    if (!v.token_to_id.emplace(v.id_to_token[i], i).second)
      fail("load_vocab: " + path + " repeats token " + v.id_to_token[i]);
  }
  return v;
}

EncodedBatch encode_batch(const Dataset& ds, const std::vector<int>& indices,
                          const Vocab& vocab, int max_len) {
  if (max_len < 2) fail("encode_batch: max_len must be >= 2");
  EncodedBatch batch;
  for (int idx : indices) {
    if (idx < 0 || idx >= static_cast<int>(ds.pairs.size()))
      fail("encode_batch: pair index out of range");
    const auto& pair = ds.pairs[idx];

    auto src = vocab.encode(pair.src);
    if (static_cast<int>(src.size()) > max_len) {
      src.resize(max_len);
      ++batch.truncated;
    }
    std::vector<int> src_mask(src.size(), 1);
    src.resize(max_len, Vocab::kPad);
    src_mask.resize(max_len, 0);

    auto tgt_body = vocab.encode(pair.tgt);
    if (static_cast<int>(tgt_body.size()) > max_len - 2) {
      tgt_body.resize(max_len - 2);
      ++batch.truncated;
    }
    std::vector<int> tgt;
    tgt.push_back(Vocab::kBegin);
    tgt.insert(tgt.end(), tgt_body.begin(), tgt_body.end());
    tgt.push_back(Vocab::kEnd);
    std::vector<int> tgt_mask(tgt.size(), 1);
    tgt.resize(max_len, Vocab::kPad);
    tgt_mask.resize(max_len, 0);

    batch.src_ids.push_back(std::move(src));
    batch.src_mask.push_back(std::move(src_mask));
    batch.tgt_ids.push_back(std::move(tgt));
    batch.tgt_mask.push_back(std::move(tgt_mask));
  }
  return batch;
}

}  // namespace aimlab
