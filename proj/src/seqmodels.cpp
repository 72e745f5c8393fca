#include "aimlab/seqmodels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace aimlab {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<double> uniform_init(Rng& rng, int64_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-0.08, 0.08);
  return v;
}

Tensor init_leaf(Rng& rng, const std::string& name, Shape shape) {
  return Tensor::leaf(name, shape, uniform_init(rng, numel(shape)), true);
}

CnnEncoder make_cnn_encoder(const ModelDims& dims, const std::string& prefix, int channels,
                            int out_dim, Rng& rng) {
  CnnEncoder enc;
  enc.emb = init_leaf(rng, prefix + "emb", {dims.vocab, dims.d_w});
  enc.w1 = init_leaf(rng, prefix + "conv1", {kConvFilterWidth * dims.d_w, channels});
  enc.w2 = init_leaf(rng, prefix + "conv2", {kConvFilterWidth * channels, channels});
  enc.w3 = init_leaf(rng, prefix + "conv3", {kConvFilterWidth * channels, channels});
  int flat = conv_stack_out_len(dims.max_src_len) * channels;
  enc.proj = init_leaf(rng, prefix + "proj", {flat, out_dim});
  enc.bias = init_leaf(rng, prefix + "proj_b", {out_dim});
  return enc;
}

// one-hot pad rows used to bring soft inputs up to the fixed encoder length
Tensor pad_rows(int count, int vocab, int pad_id) {
  std::vector<double> data(static_cast<size_t>(count) * vocab, 0.0);
  for (int r = 0; r < count; ++r) data[static_cast<size_t>(r) * vocab + pad_id] = 1.0;
  return Tensor::constant({count, vocab}, std::move(data));
}

int argmax_token(const std::vector<double>& logits) {
  int best = 0;
  for (size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = static_cast<int>(i);
  return best;
}

struct StepState {
  Tensor h, c;
};

// one LSTM step from the previous token's embedding; logits over the vocab
Tensor decoder_step(const GeneratorParams& gen, const Tensor& prev_emb, const Tensor& h0,
                    const Tensor& z, StepState& state) {
  Tensor x = concat({prev_emb, h0, z}, 0);
  Tensor hc = lstm_cell(x, state.h, state.c, gen.lstm_wx, gen.lstm_wh, gen.lstm_b);
  state.h = slice(hc, 0, 0, gen.dims.d_h);
  state.c = slice(hc, 0, gen.dims.d_h, gen.dims.d_h);
  return matmul(gen.out_w, state.h);
}

Tensor token_embedding(const GeneratorParams& gen, int token_id) {
  return reshape(embedding_lookup(gen.enc.emb, {token_id}), {gen.dims.d_w});
}

Tensor soft_embedding(const GeneratorParams& gen, const Tensor& soft_row) {
  return reshape(matmul(reshape(soft_row, {1, gen.dims.vocab}), gen.enc.emb),
                 {gen.dims.d_w});
}

void check_token_range(const std::vector<int>& tokens, int vocab, const char* who) {
  for (int t : tokens)
    if (t < 0 || t >= vocab)
      fail(std::string(who) + ": token id " + std::to_string(t) +
           " outside vocabulary range [0," + std::to_string(vocab) + ")");
}
}  // namespace

void ModelDims::validate() const {
  if (vocab < 2) fail("model dims: vocab must be >= 2");
  if (d_w < 1 || d_h < 1 || d_e < 1) fail("model dims: embedding widths must be positive");
  if (max_src_len < 1) fail("model dims: max_src_len must be >= 1");
  if (max_steps < 1) fail("model dims: max_steps must be >= 1");
  for (int id : {begin_id, end_id, pad_id})
    if (id < 0 || id >= vocab) fail("model dims: reserved id outside vocabulary");
}

int conv_stack_out_len(int in_len) {
  int len = in_len;
  for (int layer = 0; layer < 3; ++layer) len = (len + kConvStride - 1) / kConvStride;
  return len;
}

std::vector<Tensor> CnnEncoder::params() const { return {emb, w1, w2, w3, proj, bias}; }

std::vector<Tensor> GeneratorParams::params() const {
  auto out = enc.params();
  out.insert(out.end(), {lstm_wx, lstm_wh, lstm_b, out_w});
  return out;
}

std::vector<Tensor> DiscriminatorParams::params() const {
  auto out = source_net.params();
  auto resp = response_net.params();
  out.insert(out.end(), resp.begin(), resp.end());
  return out;
}

TokenInput TokenInput::hard(std::vector<int> token_ids) {
  TokenInput in;
  in.ids = std::move(token_ids);
  return in;
}

TokenInput TokenInput::from_soft(Tensor rows) {
  if (!rows.defined() || rows.shape().size() != 2)
    fail("TokenInput::from_soft: expected a {len, vocab} tensor");
  TokenInput in;
  in.soft = std::move(rows);
  return in;
}

GeneratorParams make_generator(const ModelDims& dims, const std::string& prefix, Rng& rng) {
  dims.validate();
  GeneratorParams gen;
  gen.dims = dims;
  gen.prefix = prefix;
  gen.enc = make_cnn_encoder(dims, prefix, dims.d_h, dims.d_h, rng);
  int step_in = dims.d_w + 2 * dims.d_h;
  gen.lstm_wx = init_leaf(rng, prefix + "lstm_wx", {4 * dims.d_h, step_in});
  gen.lstm_wh = init_leaf(rng, prefix + "lstm_wh", {4 * dims.d_h, dims.d_h});
  gen.lstm_b = init_leaf(rng, prefix + "lstm_b", {4 * dims.d_h});
  gen.out_w = init_leaf(rng, prefix + "out_w", {dims.vocab, dims.d_h});
  return gen;
}

DiscriminatorParams make_discriminator(const ModelDims& dims, const std::string& prefix,
                                       Rng& rng) {
  dims.validate();
  DiscriminatorParams disc;
  disc.dims = dims;
  disc.prefix = prefix;
  disc.source_net = make_cnn_encoder(dims, prefix + "src.", dims.d_e, dims.d_e, rng);
  disc.response_net = make_cnn_encoder(dims, prefix + "resp.", dims.d_e, dims.d_e, rng);
  return disc;
}

Tensor sample_noise(const ModelDims& dims, double sigma, Rng& rng) {
  std::vector<double> z(dims.d_h);
  for (auto& v : z) v = rng.normal(0.0, sigma);
  return Tensor::constant({dims.d_h}, std::move(z));
}

Tensor zero_noise(const ModelDims& dims) { return Tensor::zeros({dims.d_h}); }

Tensor cnn_encode(const CnnEncoder& enc, const TokenInput& input, const ModelDims& dims) {
  int L = dims.max_src_len;
  Tensor embedded;
  if (input.is_soft()) {
    Tensor rows = input.soft;
    if (rows.shape()[1] != dims.vocab) fail("cnn_encode: soft input vocab width mismatch");
    int n = rows.shape()[0];
    if (n > L) rows = slice(rows, 0, 0, L);
    if (n < L) rows = concat({rows, pad_rows(L - n, dims.vocab, dims.pad_id)}, 0);
    embedded = matmul(rows, enc.emb);
  } else {
    auto ids = input.ids;
    check_token_range(ids, dims.vocab, "cnn_encode");
    if (static_cast<int>(ids.size()) > L) ids.resize(L);
    ids.resize(L, dims.pad_id);
    embedded = embedding_lookup(enc.emb, ids);
  }
  Tensor a1 = aimlab::tanh(conv1d(embedded, enc.w1, kConvFilterWidth, kConvStride));
  Tensor a2 = aimlab::tanh(conv1d(a1, enc.w2, kConvFilterWidth, kConvStride));
  Tensor a3 = aimlab::tanh(conv1d(a2, enc.w3, kConvFilterWidth, kConvStride));
  Tensor flat = reshape(a3, {1, static_cast<int>(a3.size())});
  Tensor projected = reshape(matmul(flat, enc.proj), {enc.bias.shape()[0]});
  return add(projected, enc.bias);
}

Tensor encode_source(const GeneratorParams& gen, const std::vector<int>& tokens) {
  return cnn_encode(gen.enc, TokenInput::hard(tokens), gen.dims);
}

DecodeResult decode(const GeneratorParams& gen, const Tensor& h0, const Tensor& z,
                    double tau, DecodeMode mode, int max_steps) {
  if (tau <= 0.0) fail("decode: temperature must be positive");
  if (max_steps < 1) fail("decode: max_steps must be >= 1");
  DecodeResult result;
  StepState state{add(h0, z), Tensor::zeros({gen.dims.d_h})};
  Tensor prev = token_embedding(gen, gen.dims.begin_id);
  for (int t = 0; t < max_steps; ++t) {
    Tensor logits = decoder_step(gen, prev, h0, z, state);
    Tensor lp = log_softmax(logits, 0);
    int choice = argmax_token(logits.data());
    result.logprobs.push_back(lp.data()[choice]);
    if (mode == DecodeMode::kSoft) {
      Tensor soft_row = softmax(logits, 0, tau);
      result.soft.push_back(soft_row);
      prev = soft_embedding(gen, soft_row);
    } else {
      prev = token_embedding(gen, choice);
    }
    if (choice == gen.dims.end_id) {
      result.ended = true;
      break;
    }
    result.tokens.push_back(choice);
  }
  return result;
}

Tensor stack_soft(const DecodeResult& result, int vocab) {
  if (result.soft.empty()) fail("stack_soft: decode result carries no soft rows");
  std::vector<Tensor> rows;
  rows.reserve(result.soft.size());
  for (const auto& r : result.soft) rows.push_back(reshape(r, {1, vocab}));
  return concat(rows, 0);
}

Tensor seq_logprob(const GeneratorParams& gen, const std::vector<int>& source,
                   const std::vector<int>& target, const Tensor& z) {
  if (target.empty()) fail("seq_logprob: empty target");
  check_token_range(target, gen.dims.vocab, "seq_logprob");
  if (target.back() != gen.dims.end_id &&
      static_cast<int>(target.size()) < gen.dims.max_steps)
    fail("seq_logprob: target neither ends with the end token nor fills max_steps");
  Tensor h0 = encode_source(gen, source);
  StepState state{add(h0, z), Tensor::zeros({gen.dims.d_h})};
  Tensor prev = token_embedding(gen, gen.dims.begin_id);
  Tensor total;
  for (size_t t = 0; t < target.size(); ++t) {
    Tensor logits = decoder_step(gen, prev, h0, z, state);
    Tensor lp = slice(log_softmax(logits, 0), 0, target[t], 1);
    total = total.defined() ? add(total, lp) : lp;
    prev = token_embedding(gen, target[t]);
  }
  return total;
}

Tensor seq_logprob(const GeneratorParams& gen, const std::vector<int>& source,
                   const std::vector<int>& target) {
  return seq_logprob(gen, source, target, zero_noise(gen.dims));
}

SampledResponse sample_response(const GeneratorParams& gen, const std::vector<int>& source,
                                Rng& rng) {
  SampledResponse out;
  Tensor h0 = encode_source(gen, source);
  Tensor z = zero_noise(gen.dims);
  StepState state{add(h0, z), Tensor::zeros({gen.dims.d_h})};
  Tensor prev = token_embedding(gen, gen.dims.begin_id);
  for (int t = 0; t < gen.dims.max_steps; ++t) {
    Tensor logits = decoder_step(gen, prev, h0, z, state);
    Tensor lp = log_softmax(logits, 0);
    std::vector<double> probs(lp.data().size());
    for (size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(lp.data()[i]);
    int choice = rng.categorical(probs);
    out.logprob += lp.data()[choice];
    if (choice == gen.dims.end_id) {
      out.ended = true;
      break;
    }
    out.tokens.push_back(choice);
    prev = token_embedding(gen, choice);
  }
  return out;
}

std::vector<int> scored_target(const SampledResponse& s, const ModelDims& dims) {
  std::vector<int> target = s.tokens;
  if (s.ended) target.push_back(dims.end_id);
  return target;
}

std::vector<Hypothesis> beam_search(const GeneratorParams& gen,
                                    const std::vector<int>& source, int width) {
  if (width < 1) fail("beam_search: width must be >= 1");
  Tensor h0 = encode_source(gen, source);
  Tensor z = zero_noise(gen.dims);

  struct Live {
    std::vector<int> tokens;
    double logprob = 0.0;
    StepState state;
    Tensor prev;
  };
  auto better = [](const Hypothesis& a, const Hypothesis& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
    return a.tokens < b.tokens;
  };

  std::vector<Live> live(1);
  live[0].state = StepState{add(h0, z), Tensor::zeros({gen.dims.d_h})};
  live[0].prev = token_embedding(gen, gen.dims.begin_id);
  std::vector<Hypothesis> done;

  for (int t = 0; t < gen.dims.max_steps && !live.empty(); ++t) {
    // rank all extensions together with the already finished hypotheses, then
    // keep the top `width` of the pool
    struct Scored {
      Hypothesis hyp;
      int live_idx = -1;  // -1 when finished
      int token = -1;
    };
    std::vector<Scored> pool;
    for (const auto& d : done) pool.push_back({d, -1, -1});
    for (size_t li = 0; li < live.size(); ++li) {
      Tensor logits = decoder_step(gen, live[li].prev, h0, z, live[li].state);
      Tensor lp = log_softmax(logits, 0);
      for (int tok = 0; tok < gen.dims.vocab; ++tok) {
        Scored s;
        s.hyp.tokens = live[li].tokens;
        s.hyp.logprob = live[li].logprob + lp.data()[tok];
        if (tok == gen.dims.end_id) {
          s.hyp.ended = true;
        } else {
          s.hyp.tokens.push_back(tok);
          s.live_idx = static_cast<int>(li);
          s.token = tok;
        }
        pool.push_back(std::move(s));
      }
    }
    std::sort(pool.begin(), pool.end(),
              [&](const Scored& a, const Scored& b) { return better(a.hyp, b.hyp); });
    if (static_cast<int>(pool.size()) > width) pool.resize(width);

    std::vector<Live> next_live;
    std::vector<Hypothesis> next_done;
    for (auto& s : pool) {
      if (s.live_idx < 0) {
        next_done.push_back(std::move(s.hyp));
      } else if (t + 1 >= gen.dims.max_steps) {
        s.hyp.ended = false;  // step budget exhausted without the end token
        next_done.push_back(std::move(s.hyp));
      } else {
        Live nl;
        nl.tokens = std::move(s.hyp.tokens);
        nl.logprob = s.hyp.logprob;
        nl.state = live[s.live_idx].state;  // pre-expansion state is shared
        nl.prev = token_embedding(gen, s.token);
        next_live.push_back(std::move(nl));
      }
    }
    live = std::move(next_live);
    done = std::move(next_done);
  }
  std::sort(done.begin(), done.end(), better);
  return done;
}

Tensor discriminate(const DiscriminatorParams& disc, const TokenInput& source,
                    const TokenInput& response) {
  Tensor e_s = cnn_encode(disc.source_net, source, disc.dims);
  Tensor e_t = cnn_encode(disc.response_net, response, disc.dims);
  return cosine_similarity(e_s, e_t);
}

}  // namespace aimlab
