#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aimlab/rng.hpp"
#include "aimlab/tensor.hpp"

namespace aimlab {

struct ModelDims {
  int vocab = 64;      // includes reserved ids
  int d_w = 16;        // token embedding width
  int d_h = 32;        // encoder output / decoder hidden / noise width
  int d_e = 16;        // discriminator embedding width
  int max_src_len = 16;
  int max_steps = 12;  // decoder step budget, end token included
  int begin_id = 1;
  int end_id = 2;
  int pad_id = 0;

  void validate() const;
};

// Three stride-2 width-5 convolutions over embedded tokens, then a linear map
// from the flattened final feature row to out_dim. Both the generator's source
// encoder and the discriminator's two sentence embedders share this shape.
struct CnnEncoder {
  Tensor emb;   // {vocab, d_w}
  Tensor w1;    // {5*d_w, channels}
  Tensor w2;    // {5*channels, channels}
  Tensor w3;    // {5*channels, channels}
  Tensor proj;  // {flattened, out_dim}
  Tensor bias;  // {out_dim}

  std::vector<Tensor> params() const;
};

static constexpr int kConvFilterWidth = 5;
static constexpr int kConvStride = 2;

// length of the feature map after the three stride-2 layers
int conv_stack_out_len(int in_len);

// A sentence fed to an encoder: either hard token ids or a {len, vocab}
// distribution-per-row tensor whose gradient must survive the embedding.
struct TokenInput {
  std::vector<int> ids;
  Tensor soft;

  static TokenInput hard(std::vector<int> token_ids);
  static TokenInput from_soft(Tensor rows);
  bool is_soft() const { return soft.defined(); }
};

// Full generator: CNN source encoder giving H0, an LSTM whose step input is
// [embedding of previous token; H0; Z], and an output matrix scoring every
// vocabulary entry against the hidden state. The same structure serves the
// forward model (source -> response) and the backward proposal
// (response -> source); only the parameter values differ.
struct GeneratorParams {
  ModelDims dims;
  std::string prefix;  // leaf-name namespace, e.g. "fwd."
  CnnEncoder enc;      // shares its embedding table with the decoder input
  Tensor lstm_wx;      // {4*d_h, d_w + 2*d_h}
  Tensor lstm_wh;      // {4*d_h, d_h}
  Tensor lstm_b;       // {4*d_h}
  Tensor out_w;        // {vocab, d_h}

  std::vector<Tensor> params() const;
};

struct DiscriminatorParams {
  ModelDims dims;
  std::string prefix;
  CnnEncoder source_net;    // W_s
  CnnEncoder response_net;  // W_t, shared between data and generated responses

  std::vector<Tensor> params() const;
};

// All weights uniform in [-0.08, 0.08] from the given stream.
GeneratorParams make_generator(const ModelDims& dims, const std::string& prefix, Rng& rng);
DiscriminatorParams make_discriminator(const ModelDims& dims, const std::string& prefix,
                                       Rng& rng);

// One isotropic Gaussian draw of width d_h, held fixed for a whole response.
Tensor sample_noise(const ModelDims& dims, double sigma, Rng& rng);
Tensor zero_noise(const ModelDims& dims);

// Sentence embedding through a CnnEncoder; input padded or truncated to
// max_src_len. Soft inputs are embedded by multiplying the row distributions
// with the embedding table so gradients reach both.
Tensor cnn_encode(const CnnEncoder& enc, const TokenInput& input, const ModelDims& dims);

// H0 for a hard token source.
Tensor encode_source(const GeneratorParams& gen, const std::vector<int>& tokens);

enum class DecodeMode { kHard, kSoft };

struct DecodeResult {
  std::vector<int> tokens;       // content only; the terminating end id is dropped
  bool ended = false;            // true when the end token stopped generation
  std::vector<Tensor> soft;      // per step, {vocab}; soft mode only
  std::vector<double> logprobs;  // per step log p(choice) at evaluation temperature 1
};

// Greedy/soft rollout from H0 with noise Z mixed into the initial hidden
// state and every step input. Hard mode picks the argmax token; soft mode
// additionally emits softmax(logits/tau) rows and feeds their expected
// embedding forward. Stops at the end token or after max_steps.
DecodeResult decode(const GeneratorParams& gen, const Tensor& h0, const Tensor& z,
                    double tau, DecodeMode mode, int max_steps);

// Soft decode rows stacked into a {len, vocab} tensor for discriminator use.
Tensor stack_soft(const DecodeResult& result, int vocab);

// Teacher-forced log p(target | source) at temperature 1, differentiable in
// the parameters. The target must carry its own end id as the final entry;
// sequences cut off by the step budget (length == max_steps) may omit it.
Tensor seq_logprob(const GeneratorParams& gen, const std::vector<int>& source,
                   const std::vector<int>& target, const Tensor& z);
Tensor seq_logprob(const GeneratorParams& gen, const std::vector<int>& source,
                   const std::vector<int>& target);

struct SampledResponse {
  std::vector<int> tokens;  // content only
  bool ended = false;
  double logprob = 0.0;     // includes the end step when ended
};

// Ancestral sampling from the temperature-1 step distributions with Z = 0.
// Gives exact sequence log probabilities, which the estimator checks need.
SampledResponse sample_response(const GeneratorParams& gen, const std::vector<int>& source,
                                Rng& rng);

// target list as seq_logprob expects it: content plus end id when terminated
std::vector<int> scored_target(const SampledResponse& s, const ModelDims& dims);

struct Hypothesis {
  std::vector<int> tokens;  // content only
  double logprob = 0.0;
  bool ended = false;
};

// Length-bounded beam over temperature-1 step distributions, Z = 0. Results
// sorted by log probability descending; ties prefer shorter then
// lexicographically smaller token sequences.
std::vector<Hypothesis> beam_search(const GeneratorParams& gen,
                                    const std::vector<int>& source, int width);

// Cosine of the two sentence embeddings, in [-1, 1]; differentiable in the
// discriminator parameters and in soft inputs.
Tensor discriminate(const DiscriminatorParams& disc, const TokenInput& source,
                    const TokenInput& response);

}  // namespace aimlab
