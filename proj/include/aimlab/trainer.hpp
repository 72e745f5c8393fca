#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "aimlab/corpus.hpp"
#include "aimlab/metrics.hpp"
#include "aimlab/objectives.hpp"
#include "aimlab/seqmodels.hpp"

namespace aimlab {

enum class TrainMode { kSeq2Seq, kCgan, kAim, kDaim };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& name);

// Everything a run needs to be reproduced. The hash of the canonical form is
// stamped into checkpoints and reports so artifacts can be traced back to the
// settings that produced them.
struct TrainConfig {
  TrainMode mode = TrainMode::kSeq2Seq;

  double lambda = 0.1;       // weight on the dependence bound
  double mle_weight = 0.001; // supervised stabilizer
  double tau = 0.5;          // soft decode temperature
  double sigma = 0.1;        // noise scale
  // Scales every backward-direction contribution in daim mode. 1 is the full
  // dual objective; 0 makes a daim step identical to an aim step, which the
  // tests assert. Ignored outside daim.
  double backward_weight = 1.0;

  double lr_pretrain = 1e-3;
  double lr_gen = 1e-3;
  double lr_disc = 1e-3;

  int batch_size = 16;
  int pretrain_epochs = 10;
  int adv_steps = 200;        // generator updates in the adversarial phase
  int disc_steps_per_gen = 1;
  int beam_width = 5;
  uint64_t seed = 1;

  ModelDims dims;

  void validate() const;  // throws std::invalid_argument naming the field
};

// Key-sorted canonical rendering, one field per line; hash is FNV-1a over it.
std::string config_canonical(const TrainConfig& config);
uint64_t config_hash(const TrainConfig& config);

// Adam with bias correction; one slot pair per parameter name.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
  int64_t t = 0;
};

using GradMap = std::unordered_map<std::string, std::vector<double>>;

// One descent step over every parameter named in grads. Slots are created on
// first sight; shapes must stay consistent afterwards.
void adam_step(AdamState& state, const AdamConfig& cfg, const std::vector<Tensor>& params,
               const GradMap& grads);

struct Models {
  GeneratorParams fwd;   // p(response | source)
  GeneratorParams bwd;   // q(source | response)
  DiscriminatorParams disc;
};

// Fresh models from disjoint streams of config.seed, prefixes "fwd." / "bwd."
// / "disc.".
Models init_models(const TrainConfig& config);

// ---- checkpointing ----------------------------------------------------

struct ParamBlock {
  std::vector<int> shape;
  std::vector<double> data;
};

// Snapshot of named value blocks plus optimizer slots. Optimizer entries are
// keyed "label/param" so several optimizer states (generator, discriminator)
// coexist. Serialization is little-endian and key-sorted, so equal states
// produce equal bytes.
struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;

  uint64_t config_hash = 0;
  int64_t step = 0;
  std::map<std::string, int64_t> adam_t;  // per optimizer label
  std::map<std::string, ParamBlock> params;
  std::map<std::string, ParamBlock> adam_m, adam_v;
};

void pack_tensors(Checkpoint& ckpt, const std::vector<Tensor>& tensors);
void pack_adam(Checkpoint& ckpt, const AdamState& state, const std::string& label);

// Copies checkpoint values into the given tensors by name. Every target must
// be present with a matching shape; extra blocks in the checkpoint are fine.
void restore_tensors(const Checkpoint& ckpt, const std::vector<Tensor>& targets);
// Rebuilds the optimizer state saved under the label; empty when absent.
AdamState restore_adam(const Checkpoint& ckpt, const std::string& label);

Checkpoint make_checkpoint(const TrainConfig& config, const Models& models,
                           const AdamState* gen_adam, const AdamState* disc_adam,
                           int64_t step);
void restore_models(const Checkpoint& ckpt, Models& models);

// Binary format: "AIMC", format version, config hash, step and slot counters,
// then the three block sections. Writes go to a temp file first and rename
// into place, so a crash never leaves a half-written checkpoint behind.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---- training protocols -------------------------------------------------

struct PretrainState {
  GeneratorParams gen;
  AdamState adam;
  int epoch = 0;
  std::vector<double> step_loss;  // every minibatch MLE, in order
  std::vector<double> val_mle;    // one entry per finished epoch
};

// Likelihood training for one direction. backward_direction swaps every pair,
// so the same loop trains q(source | response). Epoch shuffles depend only on
// the epoch index; resuming a state mid-run continues the exact trajectory.
// Throws when the validation loss turns non-finite.
void pretrain_epochs(const TrainConfig& config, const Dataset& ds, const Vocab& vocab,
                     bool backward_direction, int n_epochs, PretrainState& state);

struct PretrainOutcome {
  PretrainState fwd, bwd;
};

// Both directions from fresh init_models parameters, config.pretrain_epochs each.
PretrainOutcome pretrain(const TrainConfig& config, const Dataset& ds, const Vocab& vocab);

struct StepScalars {
  int64_t step = 0;
  double disc_loss = 0.0;   // adversarial value after this step's disc updates
  double mi_forward = 0.0;  // 0 when the mode has no dependence term
  double mi_backward = 0.0;
  double mle = 0.0;
};

struct TrainLog {
  std::vector<StepScalars> steps;
  std::vector<double> disc_curve;  // adversarial value before every disc update
  int disc_batches = 0;
  int clamped_batches = 0;     // disc batches where some item hit the atanh clamp
  bool saturation_warning = false;
  bool cold_start = false;
  std::vector<std::string> warnings;
};

struct AdvOutcome {
  Models models;
  AdamState gen_adam, disc_adam;
  TrainLog log;
};

// Alternating adversarial phase. Each of config.adv_steps generator updates is
// preceded by disc_steps_per_gen discriminator updates. Generator gradients
// combine the deterministic soft-decode path, the lambda-weighted
// score-function estimate, and the mle_weight-weighted likelihood gradient,
// per mode. Throws on a non-finite scalar; warns (once) when more than half
// of all discriminator batches have hit the atanh clamp.
AdvOutcome train_adversarial(const TrainConfig& config, const Dataset& ds,
                             const Vocab& vocab, Models models, bool cold_start = false);

// ---- inference and evaluation -------------------------------------------

// Beam candidates rescored by (1-w) log p(T|S) + w log q(S|T); ties prefer
// shorter, then lexicographically smaller responses.
Hypothesis mmi_bidi_rerank(const GeneratorParams& fwd, const GeneratorParams& bwd,
                           const std::vector<int>& source, int beam_width, double w_mmi);

// Grid search over {0.1, ..., 0.9} maximizing corpus BLEU of the reranked
// outputs against the validation references; ties prefer the smaller weight.
double select_mmi_weight(const TrainConfig& config, const GeneratorParams& fwd,
                         const GeneratorParams& bwd, const Dataset& ds, const Vocab& vocab);

// Deterministic generation: hard decode with zero noise.
std::vector<Sentence> generate_responses(const GeneratorParams& gen, const Vocab& vocab,
                                         const std::vector<std::vector<std::string>>& sources);

struct EvalResult {
  MetricsReport report;
  uint64_t checkpoint_hash = 0;
  // Fraction of generations that exactly reproduce a source-specific response
  // of the task. Unset outside synthetic tasks.
  std::optional<double> source_specificity;
  std::vector<Sentence> generations;
};

// Restores the forward model from the checkpoint, generates one response per
// test-split source, and scores it against the references.
EvalResult evaluate_model(const Checkpoint& ckpt, const TrainConfig& config,
                          const Dataset& ds, const Vocab& vocab,
                          const MetricsConfig& metrics_config,
                          const EmbeddingTable* table = nullptr,
                          const SyntheticTask* task = nullptr);

}  // namespace aimlab
