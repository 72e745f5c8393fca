#include "aimlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace aimlab {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }
[[noreturn]] void bad_config(const std::string& msg) { throw std::invalid_argument(msg); }

// Stream ids for the run's root rng. Spread across the upper bits so step and
// epoch offsets never collide between purposes.
constexpr uint64_t kInitFwd = 1;
constexpr uint64_t kInitBwd = 2;
constexpr uint64_t kInitDisc = 3;
constexpr uint64_t kShuffleBase = 1ull << 32;
constexpr uint64_t kDiscBatchBase = 2ull << 32;
constexpr uint64_t kDiscNoiseBase = 3ull << 32;
constexpr uint64_t kGenBatchBase = 4ull << 32;
constexpr uint64_t kGenNoiseBase = 5ull << 32;
constexpr uint64_t kGenNoiseBwdBase = 6ull << 32;
constexpr uint64_t kReinfBase = 7ull << 32;
constexpr uint64_t kReinfBwdBase = 8ull << 32;

std::vector<int> clip(std::vector<int> ids, int limit) {
  if (static_cast<int>(ids.size()) > limit) ids.resize(limit);
  return ids;
}

// Dataset pair to model token ids. Sources are clipped to the encoder window,
// responses to the decoder step budget (a clipped response is scored as an
// unterminated sequence, which the probability space allows).
TokenPair encode_pair(const Dataset::Pair& pair, const Vocab& vocab, const ModelDims& dims,
                      bool swap) {
  const auto& src = swap ? pair.tgt : pair.src;
  const auto& tgt = swap ? pair.src : pair.tgt;
  return {clip(vocab.encode(src), dims.max_src_len), clip(vocab.encode(tgt), dims.max_steps)};
}

std::vector<TokenPair> encode_indices(const Dataset& ds, const std::vector<int>& idx,
                                      const Vocab& vocab, const ModelDims& dims, bool swap) {
  std::vector<TokenPair> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(encode_pair(ds.pairs[i], vocab, dims, swap));
  return out;
}

void check_vocab_fits(const Vocab& vocab, const ModelDims& dims, const char* who) {
  if (vocab.size() > dims.vocab)
    bad_config(std::string(who) + ": vocabulary has " + std::to_string(vocab.size()) +
               " entries but dims.vocab is " + std::to_string(dims.vocab));
}

void check_finite(double v, const std::string& what, int64_t step) {
  if (!std::isfinite(v))
    fail("training diverged: " + what + " is non-finite at step " + std::to_string(step));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void add_scaled(GradMap& into, const std::unordered_map<std::string, Tensor>& grads,
                double factor) {
  for (const auto& [name, g] : grads) {
    auto it = into.find(name);
    if (it == into.end()) continue;
    const auto& src = g.data();
    for (size_t i = 0; i < it->second.size(); ++i) it->second[i] += factor * src[i];
  }
}

void add_scaled(GradMap& into, const GradMap& grads, double factor) {
  for (const auto& [name, g] : grads) {
    auto it = into.find(name);
    if (it == into.end()) continue;
    for (size_t i = 0; i < it->second.size(); ++i) it->second[i] += factor * g[i];
  }
}

GradMap zero_grads_for(const std::vector<Tensor>& params) {
  GradMap g;
  for (const auto& p : params) g[p.name()].assign(p.size(), 0.0);
  return g;
}

// Corpus-mean negative log likelihood over the given indices, batched only to
// bound graph size; the result is the exact per-pair mean.
double dataset_mle(const GeneratorParams& gen, const Dataset& ds, const std::vector<int>& idx,
                   const Vocab& vocab, bool swap, int batch_size) {
  double total = 0.0;
  for (size_t at = 0; at < idx.size(); at += batch_size) {
    std::vector<int> chunk(idx.begin() + at,
                           idx.begin() + std::min(idx.size(), at + batch_size));
    auto pairs = encode_indices(ds, chunk, vocab, gen.dims, swap);
    total += mle_loss(gen, pairs).item() * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(idx.size());
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kSeq2Seq: return "seq2seq";
    case TrainMode::kCgan: return "cgan";
    case TrainMode::kAim: return "aim";
    case TrainMode::kDaim: return "daim";
  }
  fail("to_string: bad TrainMode value");
}

TrainMode train_mode_from_string(const std::string& name) {
  if (name == "seq2seq") return TrainMode::kSeq2Seq;
  if (name == "cgan") return TrainMode::kCgan;
  if (name == "aim") return TrainMode::kAim;
  if (name == "daim") return TrainMode::kDaim;
  bad_config("mode: expected seq2seq|cgan|aim|daim, got \"" + name + "\"");
}

void TrainConfig::validate() const {
  if (lambda < 0.0) bad_config("lambda: must be >= 0");
  if (mle_weight < 0.0) bad_config("mle_weight: must be >= 0");
  if (tau <= 0.0) bad_config("tau: must be > 0");
  if (sigma < 0.0) bad_config("sigma: must be >= 0");
  if (backward_weight < 0.0) bad_config("backward_weight: must be >= 0");
  if (lr_pretrain <= 0.0) bad_config("lr_pretrain: must be > 0");
  if (lr_gen < 0.0) bad_config("lr_gen: must be >= 0");
  if (lr_disc < 0.0) bad_config("lr_disc: must be >= 0");
  if (batch_size < 1) bad_config("batch_size: must be >= 1");
  if (pretrain_epochs < 0) bad_config("pretrain_epochs: must be >= 0");
  if (adv_steps < 0) bad_config("adv_steps: must be >= 0");
  if (disc_steps_per_gen < 1) bad_config("disc_steps_per_gen: must be >= 1");
  if (beam_width < 1) bad_config("beam_width: must be >= 1");
  dims.validate();
}

std::string config_canonical(const TrainConfig& c) {
  std::string s;
  auto line = [&s](const std::string& key, const std::string& value) {
    s += key;
    s += '=';
    s += value;
    s += '\n';
  };
  line("adv_steps", std::to_string(c.adv_steps));
  line("backward_weight", fmt_double(c.backward_weight));
  line("batch_size", std::to_string(c.batch_size));
  line("beam_width", std::to_string(c.beam_width));
  line("dims.d_e", std::to_string(c.dims.d_e));
  line("dims.d_h", std::to_string(c.dims.d_h));
  line("dims.d_w", std::to_string(c.dims.d_w));
  line("dims.max_src_len", std::to_string(c.dims.max_src_len));
  line("dims.max_steps", std::to_string(c.dims.max_steps));
  line("dims.vocab", std::to_string(c.dims.vocab));
  line("disc_steps_per_gen", std::to_string(c.disc_steps_per_gen));
  line("lambda", fmt_double(c.lambda));
  line("lr_disc", fmt_double(c.lr_disc));
  line("lr_gen", fmt_double(c.lr_gen));
  line("lr_pretrain", fmt_double(c.lr_pretrain));
  line("mle_weight", fmt_double(c.mle_weight));
  line("mode", to_string(c.mode));
  line("pretrain_epochs", std::to_string(c.pretrain_epochs));
  line("seed", std::to_string(c.seed));
  line("sigma", fmt_double(c.sigma));
  line("tau", fmt_double(c.tau));
  return s;
}

uint64_t config_hash(const TrainConfig& config) {
  std::string s = config_canonical(config);
  uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

void adam_step(AdamState& state, const AdamConfig& cfg, const std::vector<Tensor>& params,
               const GradMap& grads) {
  ++state.t;
  double correct_m = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double correct_v = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (const Tensor& p : params) {
    auto git = grads.find(p.name());
    if (git == grads.end()) continue;
    const auto& g = git->second;
    if (g.size() != static_cast<size_t>(p.size()))
      fail("adam_step: gradient size mismatch for " + p.name());
    auto& m = state.m[p.name()];
    auto& v = state.v[p.name()];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    auto& w = const_cast<Tensor&>(p).mutable_data();
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / correct_m;
      double vhat = v[i] / correct_v;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

Models init_models(const TrainConfig& config) {
  config.validate();
  Rng root(config.seed);
  Models models;
  Rng fr = root.fork(kInitFwd);
  Rng br = root.fork(kInitBwd);
  Rng dr = root.fork(kInitDisc);
  models.fwd = make_generator(config.dims, "fwd.", fr);
  models.bwd = make_generator(config.dims, "bwd.", br);
  models.disc = make_discriminator(config.dims, "disc.", dr);
  return models;
}

// ---- checkpointing ----------------------------------------------------

void pack_tensors(Checkpoint& ckpt, const std::vector<Tensor>& tensors) {
  for (const Tensor& t : tensors) ckpt.params[t.name()] = {t.shape(), t.data()};
}

void pack_adam(Checkpoint& ckpt, const AdamState& state, const std::string& label) {
  ckpt.adam_t[label] = state.t;
  for (const auto& [name, m] : state.m) ckpt.adam_m[label + "/" + name] = {{}, m};
  for (const auto& [name, v] : state.v) ckpt.adam_v[label + "/" + name] = {{}, v};
}

void restore_tensors(const Checkpoint& ckpt, const std::vector<Tensor>& targets) {
  for (const Tensor& t : targets) {
    auto it = ckpt.params.find(t.name());
    if (it == ckpt.params.end()) fail("checkpoint has no block named " + t.name());
    if (it->second.shape != t.shape()) fail("checkpoint shape mismatch for " + t.name());
    const_cast<Tensor&>(t).mutable_data() = it->second.data;
  }
}

AdamState restore_adam(const Checkpoint& ckpt, const std::string& label) {
  AdamState state;
  auto it = ckpt.adam_t.find(label);
  if (it != ckpt.adam_t.end()) state.t = it->second;
  std::string prefix = label + "/";
  for (const auto& [key, block] : ckpt.adam_m)
    if (key.rfind(prefix, 0) == 0) state.m[key.substr(prefix.size())] = block.data;
  for (const auto& [key, block] : ckpt.adam_v)
    if (key.rfind(prefix, 0) == 0) state.v[key.substr(prefix.size())] = block.data;
  return state;
}

Checkpoint make_checkpoint(const TrainConfig& config, const Models& models,
                           const AdamState* gen_adam, const AdamState* disc_adam,
                           int64_t step) {
  Checkpoint ckpt;
  ckpt.config_hash = config_hash(config);
  ckpt.step = step;
  pack_tensors(ckpt, models.fwd.params());
  pack_tensors(ckpt, models.bwd.params());
  pack_tensors(ckpt, models.disc.params());
  if (gen_adam) pack_adam(ckpt, *gen_adam, "gen");
  if (disc_adam) pack_adam(ckpt, *disc_adam, "disc");
  return ckpt;
}

void restore_models(const Checkpoint& ckpt, Models& models) {
  restore_tensors(ckpt, models.fwd.params());
  restore_tensors(ckpt, models.bwd.params());
  restore_tensors(ckpt, models.disc.params());
}

namespace {

constexpr char kMagic[4] = {'A', 'I', 'M', 'C'};

void put_bytes(std::string& out, const void* src, size_t n) {
  out.append(static_cast<const char*>(src), n);
}

void put_u32(std::string& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}

void put_u64(std::string& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

void put_i64(std::string& out, int64_t v) { put_u64(out, static_cast<uint64_t>(v)); }

void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

void put_block_section(std::string& out, const std::map<std::string, ParamBlock>& blocks) {
  put_u64(out, blocks.size());
  for (const auto& [name, block] : blocks) {
    put_string(out, name);
    put_u32(out, static_cast<uint32_t>(block.shape.size()));
    for (int d : block.shape) put_i64(out, d);
    put_u64(out, block.data.size());
    for (double v : block.data) put_f64(out, v);
  }
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  void need(size_t n) {
    if (pos_ + n > bytes_.size()) fail("checkpoint file truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    return raw(n);
  }
  std::string raw(size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  size_t pos_ = 0;
};

std::map<std::string, ParamBlock> read_block_section(ByteReader& in) {
  std::map<std::string, ParamBlock> blocks;
  uint64_t count = in.u64();
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = in.str();
    ParamBlock block;
    uint32_t rank = in.u32();
    if (rank > 8) fail("checkpoint block " + name + " has implausible rank");
    block.shape.resize(rank);
    int64_t expect = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      int64_t dim = in.i64();
      if (dim <= 0) fail("checkpoint block " + name + " has a bad dimension");
      block.shape[d] = static_cast<int>(dim);
      expect *= dim;
    }
    uint64_t n = in.u64();
    if (rank > 0 && static_cast<int64_t>(n) != expect)
      fail("checkpoint block " + name + " count disagrees with its shape");
    block.data.resize(n);
    for (uint64_t k = 0; k < n; ++k) block.data[k] = in.f64();
    blocks.emplace(std::move(name), std::move(block));
  }
  return blocks;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  put_bytes(out, kMagic, 4);
  put_u32(out, Checkpoint::kFormatVersion);
  put_u64(out, ckpt.config_hash);
  put_i64(out, ckpt.step);
  put_u64(out, ckpt.adam_t.size());
  for (const auto& [label, t] : ckpt.adam_t) {
    put_string(out, label);
    put_i64(out, t);
  }
  put_block_section(out, ckpt.params);
  put_block_section(out, ckpt.adam_m);
  put_block_section(out, ckpt.adam_v);

  std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail("cannot open " + tmp.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) fail("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  ByteReader in(std::move(bytes));

  if (in.raw(4) != std::string(kMagic, 4)) fail(path + " is not a checkpoint file");
  uint32_t version = in.u32();
  if (version != Checkpoint::kFormatVersion)
    fail(path + ": unsupported checkpoint format version " + std::to_string(version));

  Checkpoint ckpt;
  ckpt.config_hash = in.u64();
  ckpt.step = in.i64();
  uint64_t counters = in.u64();
  for (uint64_t i = 0; i < counters; ++i) {
    std::string label = in.str();
    ckpt.adam_t[label] = in.i64();
  }
  ckpt.params = read_block_section(in);
  ckpt.adam_m = read_block_section(in);
  ckpt.adam_v = read_block_section(in);
  if (!in.done()) fail(path + ": trailing bytes after the last block");
  return ckpt;
}

// ---- training protocols -------------------------------------------------

void pretrain_epochs(const TrainConfig& config, const Dataset& ds, const Vocab& vocab,
                     bool backward_direction, int n_epochs, PretrainState& state) {
  config.validate();
  check_vocab_fits(vocab, config.dims, "pretrain");
  std::vector<int> train = ds.indices_of(Dataset::kTrain);
  if (train.empty()) fail("pretrain: train split is empty");
  std::vector<int> valid = ds.indices_of(Dataset::kValid);
  // Small corpora may have no held-out rows; the per-epoch curve then tracks
  // the training split so divergence detection still works.
  const std::vector<int>& val_idx = valid.empty() ? train : valid;

  Rng root(config.seed);
  AdamConfig adam{config.lr_pretrain, 0.9, 0.999, 1e-8};
  auto params = state.gen.params();

  for (int done = 0; done < n_epochs; ++done, ++state.epoch) {
    std::vector<int> order = train;
    // Shuffle stream depends only on the epoch, never on the direction, so
    // backward training on a dataset walks the same batches as forward
    // training on the swapped dataset.
    Rng shuffle_rng = root.fork(kShuffleBase + static_cast<uint64_t>(state.epoch));
    shuffle_rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += config.batch_size) {
      std::vector<int> chunk(order.begin() + at,
                             order.begin() + std::min(order.size(), at + config.batch_size));
      auto batch = encode_indices(ds, chunk, vocab, config.dims, backward_direction);
      Tensor loss = mle_loss(state.gen, batch);
      double value = loss.item();
      check_finite(value, "pretraining loss", static_cast<int64_t>(state.step_loss.size()));
      state.step_loss.push_back(value);
      GradMap grads;
      for (const auto& [name, g] : backward(loss)) grads[name] = g.data();
      adam_step(state.adam, adam, params, grads);
    }
    double val =
        dataset_mle(state.gen, ds, val_idx, vocab, backward_direction, config.batch_size);
    check_finite(val, "validation loss", state.epoch);
    state.val_mle.push_back(val);
  }
}

PretrainOutcome pretrain(const TrainConfig& config, const Dataset& ds, const Vocab& vocab) {
  Models models = init_models(config);
  PretrainOutcome out;
  out.fwd.gen = models.fwd;
  out.bwd.gen = models.bwd;
  pretrain_epochs(config, ds, vocab, false, config.pretrain_epochs, out.fwd);
  pretrain_epochs(config, ds, vocab, true, config.pretrain_epochs, out.bwd);
  return out;
}

namespace {

// Uniform-with-replacement batch of train pairs for one adversarial update.
std::vector<int> sample_batch(const std::vector<int>& train, int batch_size, Rng rng) {
  std::vector<int> idx(batch_size);
  for (int i = 0; i < batch_size; ++i)
    idx[i] = train[rng.uniform_int(static_cast<int>(train.size()))];
  return idx;
}

void split_pairs(const std::vector<TokenPair>& pairs, std::vector<std::vector<int>>& sources,
                 std::vector<std::vector<int>>& responses) {
  sources.clear();
  responses.clear();
  for (const auto& [s, t] : pairs) {
    sources.push_back(s);
    responses.push_back(t);
  }
}

}  // namespace

AdvOutcome train_adversarial(const TrainConfig& config, const Dataset& ds,
                             const Vocab& vocab, Models models, bool cold_start) {
  config.validate();
  if (config.mode == TrainMode::kSeq2Seq)
    bad_config("train_adversarial: mode seq2seq has no adversarial phase");
  check_vocab_fits(vocab, config.dims, "train_adversarial");
  bool wants_mi = config.mode != TrainMode::kCgan;
  if (wants_mi && config.batch_size < 2)
    bad_config("train_adversarial: the score-function baseline needs batch_size >= 2");
  std::vector<int> train = ds.indices_of(Dataset::kTrain);
  if (train.empty()) fail("train_adversarial: train split is empty");

  AdvOutcome out;
  out.models = std::move(models);
  out.log.cold_start = cold_start;
  if (cold_start)
    out.log.warnings.push_back("adversarial phase started from untrained models");

  // A zero backward weight reduces the dual objective to the single-direction
  // one exactly, so the backward machinery is skipped outright.
  bool run_backward = config.mode == TrainMode::kDaim && config.backward_weight > 0.0;
  double bw = run_backward ? config.backward_weight : 0.0;

  Rng root(config.seed);
  AdamConfig gen_cfg{config.lr_gen, 0.9, 0.999, 1e-8};
  AdamConfig disc_cfg{config.lr_disc, 0.9, 0.999, 1e-8};
  auto disc_params = out.models.disc.params();
  std::vector<Tensor> gen_params = out.models.fwd.params();
  for (const Tensor& p : out.models.bwd.params()) gen_params.push_back(p);

  for (int step = 0; step < config.adv_steps; ++step) {
    // -- discriminator updates
    double disc_value = 0.0;
    for (int k = 0; k < config.disc_steps_per_gen; ++k) {
      uint64_t update = static_cast<uint64_t>(step) * config.disc_steps_per_gen + k;
      auto idx = sample_batch(train, config.batch_size, root.fork(kDiscBatchBase + update));
      auto pairs = encode_indices(ds, idx, vocab, config.dims, false);
      std::vector<std::vector<int>> sources, responses;
      split_pairs(pairs, sources, responses);

      Rng noise = root.fork(kDiscNoiseBase + update);
      GanStats stats;
      Tensor loss = gan_loss(out.models.disc,
                             build_gan_items(out.models.fwd, sources, responses, noise,
                                             config.tau, config.sigma),
                             &stats);
      if (run_backward) {
        Tensor loss_b =
            gan_loss(out.models.disc,
                     build_gan_items(out.models.bwd, responses, sources, noise, config.tau,
                                     config.sigma),
                     &stats);
        loss = add(loss, scale(loss_b, bw));
      }
      disc_value = loss.item();
      check_finite(disc_value, "discriminator loss", step);
      out.log.disc_curve.push_back(disc_value);
      ++out.log.disc_batches;
      if (stats.clamped > 0) ++out.log.clamped_batches;
      if (!out.log.saturation_warning && out.log.disc_batches >= 4 &&
          2 * out.log.clamped_batches > out.log.disc_batches) {
        out.log.saturation_warning = true;
        out.log.warnings.push_back(
            "discriminator saturated: the score difference hit the atanh clamp in more "
            "than half of all batches so far");
      }

      GradMap grads;
      for (const auto& [name, g] : backward(loss)) grads[name] = g.data();
      adam_step(out.disc_adam, disc_cfg, disc_params, grads);
    }

    // -- generator update
    auto idx = sample_batch(train, config.batch_size, root.fork(kGenBatchBase + step));
    auto pairs = encode_indices(ds, idx, vocab, config.dims, false);
    std::vector<std::vector<int>> sources, responses;
    split_pairs(pairs, sources, responses);

    GradMap g = zero_grads_for(gen_params);

    // deterministic soft-decode path: ascend the discriminator's score
    {
      Rng zr = root.fork(kGenNoiseBase + static_cast<uint64_t>(step));
      std::vector<DpgItem> items;
      items.reserve(sources.size());
      for (const auto& s : sources)
        items.push_back({s, sample_noise(config.dims, config.sigma, zr)});
      add_scaled(g, dpg_generator_grad(out.models.fwd, out.models.disc, items, config.tau),
                 -1.0);
    }
    if (run_backward) {
      Rng zr = root.fork(kGenNoiseBwdBase + static_cast<uint64_t>(step));
      std::vector<DpgItem> items;
      items.reserve(responses.size());
      for (const auto& t : responses)
        items.push_back({t, sample_noise(config.dims, config.sigma, zr)});
      add_scaled(g, dpg_generator_grad(out.models.bwd, out.models.disc, items, config.tau),
                 -bw);
    }

    // score-function path: ascend the sampled dependence bound
    double mi_f = 0.0, mi_b = 0.0;
    if (wants_mi && config.lambda > 0.0) {
      Rng rs = root.fork(kReinfBase + static_cast<uint64_t>(step));
      ReinforceResult a = reinforce_grads(out.models.fwd, out.models.bwd, sources, rs);
      mi_f = a.estimate.value;
      add_scaled(g, a.theta, -config.lambda);
      add_scaled(g, a.phi, -config.lambda);
      if (run_backward) {
        Rng rs2 = root.fork(kReinfBwdBase + static_cast<uint64_t>(step));
        ReinforceResult b = reinforce_grads(out.models.bwd, out.models.fwd, responses, rs2);
        mi_b = b.estimate.value;
        add_scaled(g, b.theta, -config.lambda * bw);
        add_scaled(g, b.phi, -config.lambda * bw);
      }
    }

    // likelihood stabilizer; the dual mode averages the two directions
    double mle_value = 0.0;
    if (config.mle_weight > 0.0) {
      Tensor ml = mle_loss(out.models.fwd, pairs);
      double norm = 1.0 / (1.0 + bw);
      mle_value = ml.item() * norm;
      GradMap mg;
      for (const auto& [name, t] : backward(ml)) mg[name] = t.data();
      add_scaled(g, mg, config.mle_weight * norm);
      if (run_backward) {
        std::vector<TokenPair> swapped;
        swapped.reserve(pairs.size());
        for (const auto& [s, t] : pairs) swapped.emplace_back(t, s);
        Tensor mb = mle_loss(out.models.bwd, swapped);
        mle_value += mb.item() * bw * norm;
        GradMap mbg;
        for (const auto& [name, t] : backward(mb)) mbg[name] = t.data();
        add_scaled(g, mbg, config.mle_weight * bw * norm);
      }
    }

    check_finite(mi_f, "forward dependence estimate", step);
    check_finite(mi_b, "backward dependence estimate", step);
    check_finite(mle_value, "likelihood stabilizer", step);
    adam_step(out.gen_adam, gen_cfg, gen_params, g);

    out.log.steps.push_back({step, disc_value, mi_f, mi_b, mle_value});
  }
  return out;
}

// ---- inference and evaluation -------------------------------------------

Hypothesis mmi_bidi_rerank(const GeneratorParams& fwd, const GeneratorParams& bwd,
                           const std::vector<int>& source, int beam_width, double w_mmi) {
  if (beam_width < 1) bad_config("mmi_bidi_rerank: beam width must be >= 1");
  if (w_mmi < 0.0 || w_mmi > 1.0) bad_config("mmi_bidi_rerank: weight must be in [0, 1]");
  auto candidates = beam_search(fwd, source, beam_width);
  if (candidates.empty()) fail("mmi_bidi_rerank: beam search returned no candidates");

  // The backward model scores the source as a response-conditioned target, so
  // the source gets the same clipping and end-marking as any scored sequence.
  std::vector<int> scored_src = clip(source, bwd.dims.max_steps);
  if (static_cast<int>(scored_src.size()) < bwd.dims.max_steps)
    scored_src.push_back(bwd.dims.end_id);

  const Hypothesis* best = nullptr;
  double best_score = 0.0;
  for (const auto& cand : candidates) {
    double logq = seq_logprob(bwd, cand.tokens, scored_src).item();
    double score = (1.0 - w_mmi) * cand.logprob + w_mmi * logq;
    bool better = false;
    if (!best) {
      better = true;
    } else if (score != best_score) {
      better = score > best_score;
    } else if (cand.tokens.size() != best->tokens.size()) {
      better = cand.tokens.size() < best->tokens.size();
    } else {
      better = cand.tokens < best->tokens;
    }
    if (better) {
      best = &cand;
      best_score = score;
    }
  }
  Hypothesis out = *best;
  out.logprob = best_score;
  return out;
}

double select_mmi_weight(const TrainConfig& config, const GeneratorParams& fwd,
                         const GeneratorParams& bwd, const Dataset& ds, const Vocab& vocab) {
  std::vector<int> valid = ds.indices_of(Dataset::kValid);
  if (valid.empty()) fail("select_mmi_weight: validation split is empty");
  TextCorpus refs;
  std::vector<std::vector<int>> sources;
  for (int i : valid) {
    refs.push_back(ds.pairs[i].tgt);
    sources.push_back(clip(vocab.encode(ds.pairs[i].src), config.dims.max_src_len));
  }
  double best_w = 0.1, best_bleu = -1.0;
  for (int grid = 1; grid <= 9; ++grid) {
    double w = grid / 10.0;
    TextCorpus hyps;
    for (const auto& src : sources) {
      auto top = mmi_bidi_rerank(fwd, bwd, src, config.beam_width, w);
      hyps.push_back(vocab.decode(top.tokens));
    }
    double b = bleu(hyps, refs);
    if (b > best_bleu) {
      best_bleu = b;
      best_w = w;
    }
  }
  return best_w;
}

std::vector<Sentence> generate_responses(const GeneratorParams& gen, const Vocab& vocab,
                                         const std::vector<std::vector<std::string>>& sources) {
  std::vector<Sentence> out;
  out.reserve(sources.size());
  Tensor z = zero_noise(gen.dims);
  for (const auto& src : sources) {
    std::vector<int> ids = clip(vocab.encode(src), gen.dims.max_src_len);
    auto dec = decode(gen, encode_source(gen, ids), z, 1.0, DecodeMode::kHard,
                      gen.dims.max_steps);
    out.push_back(vocab.decode(dec.tokens));
  }
  return out;
}

EvalResult evaluate_model(const Checkpoint& ckpt, const TrainConfig& config,
                          const Dataset& ds, const Vocab& vocab,
                          const MetricsConfig& metrics_config, const EmbeddingTable* table,
                          const SyntheticTask* task) {
  config.validate();
  check_vocab_fits(vocab, config.dims, "evaluate_model");
  std::vector<int> test = ds.indices_of(Dataset::kTest);
  if (test.empty()) fail("evaluate_model: test split is empty");

  // Only the forward model is needed; a pretraining checkpoint that carries
  // just the fwd.* blocks restores fine.
  Models models = init_models(config);
  restore_tensors(ckpt, models.fwd.params());

  std::vector<std::vector<std::string>> sources;
  TextCorpus references;
  for (int i : test) {
    sources.push_back(ds.pairs[i].src);
    references.push_back(ds.pairs[i].tgt);
  }

  EvalResult result;
  result.checkpoint_hash = ckpt.config_hash;
  result.generations = generate_responses(models.fwd, vocab, sources);
  result.report = build_report(result.generations, references, metrics_config, table);

  if (task) {
    std::unordered_map<std::string, int> source_index;
    for (size_t i = 0; i < task->sources.size(); ++i)
      source_index[task->sources[i]] = static_cast<int>(i);
    int specific = 0;
    for (size_t i = 0; i < sources.size(); ++i) {
      std::string joined;
      for (size_t w = 0; w < sources[i].size(); ++w) {
        if (w) joined += ' ';
        joined += sources[i][w];
      }
      auto it = source_index.find(joined);
      if (it == source_index.end())
        fail("evaluate_model: test source is not part of the synthetic task");
      if (task->is_specific_for(it->second, result.generations[i])) ++specific;
    }
    result.source_specificity =
        static_cast<double>(specific) / static_cast<double>(sources.size());
  }
  return result;
}

}  // namespace aimlab
