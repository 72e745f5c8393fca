#include "aimlab/objectives.hpp"

#include <stdexcept>

namespace aimlab {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Content tokens in the form seq_logprob and the discriminator expect: end
// token appended unless the sequence already fills the step budget.
std::vector<int> scored_form(const std::vector<int>& content, const ModelDims& dims) {
  std::vector<int> out = content;
  if (static_cast<int>(out.size()) < dims.max_steps) out.push_back(dims.end_id);
  return out;
}

// Stream ids for daim_loss. Forward and backward halves reuse the same ids on
// purpose: a weight-identical, role-swapped setup then sees identical draws,
// and disabling the backward half cannot shift the forward half's randomness.
constexpr uint64_t kNoiseStream = 1u << 20;
constexpr uint64_t kSampleStream = 1u << 21;
}  // namespace

Tensor gan_loss(const DiscriminatorParams& disc, const std::vector<GanItem>& batch,
                GanStats* stats) {
  if (batch.empty()) fail("gan_loss: empty batch");
  Tensor sum;
  for (const auto& item : batch) {
    if (!item.fake_soft.defined()) fail("gan_loss: item has no soft fake");
    Tensor real = discriminate(disc, TokenInput::hard(item.context),
                               TokenInput::hard(scored_form(item.real, disc.dims)));
    Tensor fake = discriminate(disc, TokenInput::hard(item.context),
                               TokenInput::from_soft(item.fake_soft));
    Tensor diff = sub(real, fake);
    if (stats) {
      ++stats->items;
      if (std::abs(diff.item()) >= 1.0 - 1e-6) ++stats->clamped;
    }
    Tensor f = scale(atanh(diff), 2.0);
    sum = sum.defined() ? add(sum, f) : f;
  }
  return scale(sum, -1.0 / static_cast<double>(batch.size()));
}

std::vector<GanItem> build_gan_items(const GeneratorParams& model,
                                     const std::vector<std::vector<int>>& contexts,
                                     const std::vector<std::vector<int>>& reals,
                                     Rng& rng, double tau, double sigma) {
  if (contexts.size() != reals.size()) fail("build_gan_items: context/real size mismatch");
  std::vector<GanItem> items;
  items.reserve(contexts.size());
  for (size_t i = 0; i < contexts.size(); ++i) {
    Rng noise = rng.fork(kNoiseStream + i);
    Tensor z = sample_noise(model.dims, sigma, noise);
    Tensor h0 = encode_source(model, contexts[i]);
    auto dec = decode(model, h0, z, tau, DecodeMode::kSoft, model.dims.max_steps);
    items.push_back({contexts[i], reals[i], stack_soft(dec, model.dims.vocab)});
  }
  return items;
}

std::unordered_map<std::string, Tensor> dpg_generator_grad(
    const GeneratorParams& gen, const DiscriminatorParams& disc,
    const std::vector<DpgItem>& batch, double tau, DecodeMode mode, double* objective_out) {
  if (batch.empty()) fail("dpg_generator_grad: empty batch");
  if (mode == DecodeMode::kHard)
    fail("dpg_generator_grad: hard decode leaves no gradient path to the generator");
  Tensor sum;
  for (const auto& item : batch) {
    Tensor h0 = encode_source(gen, item.source);
    auto dec = decode(gen, h0, item.z, tau, DecodeMode::kSoft, gen.dims.max_steps);
    Tensor score = discriminate(disc, TokenInput::hard(item.source),
                                TokenInput::from_soft(stack_soft(dec, gen.dims.vocab)));
    sum = sum.defined() ? add(sum, score) : score;
  }
  Tensor objective = scale(sum, 1.0 / static_cast<double>(batch.size()));
  if (objective_out) *objective_out = objective.item();

  auto all = backward(objective);
  std::unordered_map<std::string, Tensor> generator_only;
  for (const auto& p : gen.params()) {
    auto it = all.find(p.name());
    if (it != all.end()) generator_only.emplace(it->first, it->second);
  }
  return generator_only;
}

MiEstimate mi_lower_bound(const GeneratorParams& fwd, const GeneratorParams& bwd,
                          const std::vector<std::vector<int>>& sources, Rng& rng) {
  if (sources.empty()) fail("mi_lower_bound: empty batch");
  MiEstimate est;
  est.samples.reserve(sources.size());
  for (size_t i = 0; i < sources.size(); ++i) {
    Rng stream = rng.fork(i);
    auto drawn = sample_response(fwd, sources[i], stream);
    MiSample s;
    s.source = sources[i];
    s.response = drawn.tokens;
    s.ended = drawn.ended;
    s.logq =
        seq_logprob(bwd, s.response, scored_form(s.source, bwd.dims)).item();
    est.value += s.logq;
    est.samples.push_back(std::move(s));
  }
  est.value /= static_cast<double>(sources.size());
  return est;
}

namespace {
void accumulate_backward(std::unordered_map<std::string, std::vector<double>>& into,
                         const Tensor& root, double seed) {
  auto grads = backward(root, Tensor::full(root.shape(), seed));
  for (const auto& [name, g] : grads) {
    auto it = into.find(name);
    if (it == into.end()) continue;  // not a parameter of this model
    for (size_t i = 0; i < it->second.size(); ++i) it->second[i] += g.data()[i];
  }
}

std::unordered_map<std::string, std::vector<double>> zero_grads(
    const GeneratorParams& model) {
  std::unordered_map<std::string, std::vector<double>> grads;
  for (const auto& p : model.params()) grads[p.name()].assign(p.size(), 0.0);
  return grads;
}
}  // namespace

ReinforceResult reinforce_grads(const GeneratorParams& fwd, const GeneratorParams& bwd,
                                const std::vector<std::vector<int>>& sources, Rng& rng,
                                bool use_baseline) {
  if (sources.empty()) fail("reinforce_grads: empty batch");
  if (use_baseline && sources.size() < 2)
    fail("reinforce_grads: a batch of 1 with the mean baseline cancels its own gradient; "
         "use at least 2 sources or disable the baseline");

  ReinforceResult result;
  result.estimate = mi_lower_bound(fwd, bwd, sources, rng);
  if (use_baseline) result.baseline = result.estimate.value;

  result.theta = zero_grads(fwd);
  result.phi = zero_grads(bwd);
  double n = static_cast<double>(sources.size());
  double reward_sum = result.estimate.value * n;
  for (const auto& s : result.estimate.samples) {
    // Each item is advantaged against the mean of the OTHER items' rewards.
    // A shared mean that includes the item itself would shrink the expected
    // gradient by (1 - 1/n) and fail the enumeration cross-check; leaving the
    // item out keeps the estimator exactly unbiased. The recorded baseline
    // stays the plain batch mean.
    double b = use_baseline ? (reward_sum - s.logq) / (n - 1.0) : 0.0;
    Tensor logp = seq_logprob(fwd, s.source, scored_form(s.response, fwd.dims));
    accumulate_backward(result.theta, logp, (s.logq - b) / n);
    Tensor logq = seq_logprob(bwd, s.response, scored_form(s.source, bwd.dims));
    accumulate_backward(result.phi, logq, 1.0 / n);
  }
  return result;
}

Tensor mle_loss(const GeneratorParams& gen, const std::vector<TokenPair>& batch) {
  if (batch.empty()) fail("mle_loss: empty batch");
  Tensor sum;
  for (const auto& [source, response] : batch) {
    Tensor lp = seq_logprob(gen, source, scored_form(response, gen.dims));
    sum = sum.defined() ? add(sum, lp) : lp;
  }
  return scale(sum, -1.0 / static_cast<double>(batch.size()));
}

double LossBundle::total() const {
  double v = gan_forward.item();
  if (gan_backward.defined()) v += gan_backward.item();
  v += lambda * (mi_forward + mi_backward);
  v += mle_weight * mle_aux.item();
  return v;
}

LossBundle daim_loss(const GeneratorParams& fwd, const GeneratorParams& bwd,
                     const DiscriminatorParams& disc, const std::vector<TokenPair>& batch,
                     Rng& rng, const ObjectiveOptions& opt) {
  if (batch.empty()) fail("daim_loss: empty batch");
  if (opt.lambda < 0.0 || opt.mle_weight < 0.0)
    fail("daim_loss: lambda and mle_weight must be nonnegative");

  LossBundle bundle;
  bundle.lambda = opt.lambda;
  bundle.mle_weight = opt.mle_weight;

  std::vector<std::vector<int>> sources, responses;
  sources.reserve(batch.size());
  responses.reserve(batch.size());
  for (const auto& [s, t] : batch) {
    sources.push_back(s);
    responses.push_back(t);
  }

  bundle.gan_forward =
      gan_loss(disc, build_gan_items(fwd, sources, responses, rng, opt.tau, opt.sigma));

  {
    Rng stream = rng.fork(kSampleStream);
    bundle.mi_forward_detail = mi_lower_bound(fwd, bwd, sources, stream);
    bundle.mi_forward = bundle.mi_forward_detail.value;
  }

  bundle.mle_aux = mle_loss(fwd, batch);

  if (opt.enable_backward) {
    bundle.gan_backward =
        gan_loss(disc, build_gan_items(bwd, responses, sources, rng, opt.tau, opt.sigma));

    Rng stream = rng.fork(kSampleStream);
    bundle.mi_backward_detail = mi_lower_bound(bwd, fwd, responses, stream);
    bundle.mi_backward = bundle.mi_backward_detail.value;

    std::vector<TokenPair> swapped;
    swapped.reserve(batch.size());
    for (const auto& [s, t] : batch) swapped.emplace_back(t, s);
    bundle.mle_aux = scale(add(bundle.mle_aux, mle_loss(bwd, swapped)), 0.5);
  }
  return bundle;
}

LossBundle aim_loss(const GeneratorParams& fwd, const GeneratorParams& bwd,
                    const DiscriminatorParams& disc, const std::vector<TokenPair>& batch,
                    Rng& rng, const ObjectiveOptions& opt) {
  ObjectiveOptions forward_only = opt;
  forward_only.enable_backward = false;
  return daim_loss(fwd, bwd, disc, batch, rng, forward_only);
}

}  // namespace aimlab
