#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aimlab/rng.hpp"
#include "aimlab/seqmodels.hpp"
#include "aimlab/tensor.hpp"

namespace aimlab {

// Throughout this header, response token lists are plain content (no begin or
// end markers). Scoring and discriminator inputs append the end token
// internally; a response already at max_steps is scored unterminated.
using TokenPair = std::pair<std::vector<int>, std::vector<int>>;  // (source, response)

// One adversarial comparison. The context feeds the discriminator's
// source-side net; the real tokens and the soft fake feed the response-side
// net. Swapping what gets passed as context flips the scoring direction, so
// the same function serves both halves of the dual objective.
struct GanItem {
  std::vector<int> context;
  std::vector<int> real;  // content form; end appended internally
  Tensor fake_soft;       // {len, vocab} rows from a soft decode
};

// How often the score difference hit the atanh clamp. A high rate means the
// discriminator has saturated and its gradient signal is gone.
struct GanStats {
  int items = 0;
  int clamped = 0;
};

// -mean over the batch of 2 atanh(D(context, real) - D(context, fake)).
// Discriminator updates descend this value; generator updates ascend it.
Tensor gan_loss(const DiscriminatorParams& disc, const std::vector<GanItem>& batch,
                GanStats* stats = nullptr);

// One GanItem per pair: the model soft-decodes a fake from each context under
// a per-item noise draw. Forked from fixed per-item stream ids, so building
// the same items twice (or for either objective direction) sees identical
// noise and the caller's rng never advances.
std::vector<GanItem> build_gan_items(const GeneratorParams& model,
                                     const std::vector<std::vector<int>>& contexts,
                                     const std::vector<std::vector<int>>& reals,
                                     Rng& rng, double tau, double sigma);

struct DpgItem {
  std::vector<int> source;
  Tensor z;  // one noise draw per response, the only randomness in the path
};

// Gradient of mean_b D(decode_soft(source_b, z_b), source_b) with respect to
// the generator parameters, differentiated straight through the soft decode.
// Pass objective_out to also receive the scalar being climbed.
std::unordered_map<std::string, Tensor> dpg_generator_grad(
    const GeneratorParams& gen, const DiscriminatorParams& disc,
    const std::vector<DpgItem>& batch, double tau, DecodeMode mode = DecodeMode::kSoft,
    double* objective_out = nullptr);

struct MiSample {
  std::vector<int> source;
  std::vector<int> response;  // content tokens drawn from the forward model
  bool ended = false;
  double logq = 0.0;  // log q(source | response) under the backward model
};

struct MiEstimate {
  double value = 0.0;  // mean logq over the batch
  std::vector<MiSample> samples;
};

// Sampled lower-bound surrogate for the source-response dependence: draw one
// response per source from the forward model, score the source under the
// backward model. Draws come from per-item forked streams, so the caller's
// rng state is never advanced.
MiEstimate mi_lower_bound(const GeneratorParams& fwd, const GeneratorParams& bwd,
                          const std::vector<std::vector<int>>& sources, Rng& rng);

struct ReinforceResult {
  std::unordered_map<std::string, std::vector<double>> theta;  // forward model
  std::unordered_map<std::string, std::vector<double>> phi;    // backward model
  double baseline = 0.0;  // batch mean reward when enabled, else 0
  MiEstimate estimate;    // the rewards and samples the gradients were built on
};

// Score-function gradients of the sampled bound: the forward model is pushed
// by (logq - baseline) grad log p, the backward model by grad logq directly.
// The baseline is recomputed from this batch's rewards alone; each item's
// advantage leaves its own reward out so the estimate stays exactly unbiased.
ReinforceResult reinforce_grads(const GeneratorParams& fwd, const GeneratorParams& bwd,
                                const std::vector<std::vector<int>>& sources, Rng& rng,
                                bool use_baseline = true);

// Mean negative sequence log-likelihood; the training stabilizer.
Tensor mle_loss(const GeneratorParams& gen, const std::vector<TokenPair>& batch);

struct LossBundle {
  Tensor gan_forward;
  Tensor gan_backward;  // defined only when the backward direction ran
  double mi_forward = 0.0;
  double mi_backward = 0.0;
  Tensor mle_aux;
  double lambda = 0.1;
  double mle_weight = 0.001;
  MiEstimate mi_forward_detail;  // samples behind the mi values, for reuse
  MiEstimate mi_backward_detail;

  bool has_backward() const { return gan_backward.defined(); }
  // Diagnostic composite: gan terms + lambda * mi terms + mle_weight * mle.
  // Role-dependent signs are the trainer's business, not this snapshot's.
  double total() const;
};

struct ObjectiveOptions {
  double lambda = 0.1;
  double mle_weight = 0.001;
  double tau = 0.5;    // soft decode temperature
  double sigma = 0.1;  // noise scale for the soft fakes
  bool enable_backward = true;
};

// Assembles the four-term dual objective: forward and backward adversarial
// comparisons plus both sampled dependence terms, one shared discriminator.
// Per-item randomness is forked by (item, purpose), so the forward terms see
// identical draws whether or not the backward half is enabled, and a second
// call with the same rng reproduces the first exactly.
LossBundle daim_loss(const GeneratorParams& fwd, const GeneratorParams& bwd,
                     const DiscriminatorParams& disc, const std::vector<TokenPair>& batch,
                     Rng& rng, const ObjectiveOptions& opt);

// The single-direction objective: forward terms only.
LossBundle aim_loss(const GeneratorParams& fwd, const GeneratorParams& bwd,
                    const DiscriminatorParams& disc, const std::vector<TokenPair>& batch,
                    Rng& rng, const ObjectiveOptions& opt);

}  // namespace aimlab
