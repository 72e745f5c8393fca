#include "aimlab/oracles.hpp"

#include <cmath>
#include <stdexcept>

namespace aimlab {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }
}  // namespace

void JointTable::validate() const {
  if (p.empty() || p[0].empty()) fail("joint table: empty support");
  size_t cols = p[0].size();
  double total = 0.0;
  for (const auto& row : p) {
    if (row.size() != cols) fail("joint table: ragged rows");
    for (double v : row) {
      if (v < 0.0 || !std::isfinite(v)) fail("joint table: invalid entry");
      total += v;
    }
  }
  if (std::abs(total - 1.0) > 1e-12)
    fail("joint table: entries sum to " + std::to_string(total) + ", expected 1");
}

std::vector<double> JointTable::marginal_s() const {
  std::vector<double> m(p.size(), 0.0);
  for (size_t s = 0; s < p.size(); ++s)
    for (double v : p[s]) m[s] += v;
  return m;
}

std::vector<double> JointTable::marginal_t() const {
  std::vector<double> m(p[0].size(), 0.0);
  for (const auto& row : p)
    for (size_t t = 0; t < row.size(); ++t) m[t] += row[t];
  return m;
}

JointTable JointTable::transpose() const {
  JointTable out;
  out.p.assign(p[0].size(), std::vector<double>(p.size(), 0.0));
  for (size_t s = 0; s < p.size(); ++s)
    for (size_t t = 0; t < p[s].size(); ++t) out.p[t][s] = p[s][t];
  return out;
}

double entropy(const std::vector<double>& dist) {
  double h = 0.0;
  for (double v : dist) h -= xlogy(v, v);
  return h;
}

double exact_mi(const JointTable& joint) {
  joint.validate();
  auto ps = joint.marginal_s();
  auto pt = joint.marginal_t();
  double mi = 0.0;
  for (size_t s = 0; s < joint.p.size(); ++s)
    for (size_t t = 0; t < joint.p[s].size(); ++t) {
      double v = joint.p[s][t];
      if (v > 0.0) mi += v * std::log(v / (ps[s] * pt[t]));
    }
  return mi;
}

double conditional_entropy_t_given_s(const JointTable& joint) {
  auto ps = joint.marginal_s();
  double h = 0.0;
  for (size_t s = 0; s < joint.p.size(); ++s)
    for (double v : joint.p[s])
      if (v > 0.0) h -= v * std::log(v / ps[s]);
  return h;
}

std::vector<std::vector<double>> exact_posterior(const JointTable& joint) {
  joint.validate();
  auto pt = joint.marginal_t();
  for (size_t t = 0; t < pt.size(); ++t)
    if (pt[t] <= 0.0)
      fail("exact_posterior: response column " + std::to_string(t) + " has zero marginal");
  std::vector<std::vector<double>> q(joint.p.size(), std::vector<double>(pt.size()));
  for (size_t s = 0; s < joint.p.size(); ++s)
    for (size_t t = 0; t < pt.size(); ++t) q[s][t] = joint.p[s][t] / pt[t];
  return q;
}

double posterior_bound_value(const JointTable& joint,
                             const std::vector<std::vector<double>>& q) {
  joint.validate();
  if (q.size() != joint.p.size() || q[0].size() != joint.p[0].size())
    fail("posterior_bound_value: q shape does not match the joint");
  double value = entropy(joint.marginal_s());
  for (size_t s = 0; s < joint.p.size(); ++s)
    for (size_t t = 0; t < joint.p[s].size(); ++t) {
      double v = joint.p[s][t];
      if (v == 0.0) continue;
      if (q[s][t] <= 0.0) fail("posterior_bound_value: q is zero on the joint's support");
      value += v * std::log(q[s][t]);
    }
  return value;
}

std::vector<EnumeratedSequence> enumerate_sequences(const GeneratorParams& gen,
                                                    const std::vector<int>& source,
                                                    const std::vector<int>& content_tokens) {
  if (content_tokens.empty()) fail("enumerate_sequences: no content tokens");
  for (int t : content_tokens)
    if (t == gen.dims.end_id)
      fail("enumerate_sequences: content tokens must not include the end token");
  int64_t k = static_cast<int64_t>(content_tokens.size());
  int64_t count = 0, pow = 1;
  for (int l = 0; l < gen.dims.max_steps; ++l) {
    count += pow;  // length-l strings followed by the end token
    if (count > kEnumerationBound) fail("enumerate_sequences: space exceeds bound");
    pow *= k;
    if (pow > kEnumerationBound) fail("enumerate_sequences: space exceeds bound");
  }
  count += pow;  // unterminated full-length strings
  if (count > kEnumerationBound) fail("enumerate_sequences: space exceeds bound");

  std::vector<EnumeratedSequence> out;
  out.reserve(count);
  std::vector<std::vector<int>> layer{{}};
  for (int l = 0; l <= gen.dims.max_steps; ++l) {
    for (const auto& prefix : layer) {
      EnumeratedSequence seq;
      seq.tokens = prefix;
      if (l < gen.dims.max_steps) {
        seq.ended = true;
        auto target = prefix;
        target.push_back(gen.dims.end_id);
        seq.prob = std::exp(seq_logprob(gen, source, target).item());
      } else {
        seq.ended = false;
        seq.prob = std::exp(seq_logprob(gen, source, prefix).item());
      }
      out.push_back(std::move(seq));
    }
    if (l == gen.dims.max_steps) break;
    std::vector<std::vector<int>> next;
    next.reserve(layer.size() * content_tokens.size());
    for (const auto& prefix : layer)
      for (int t : content_tokens) {
        auto ext = prefix;
        ext.push_back(t);
        next.push_back(std::move(ext));
      }
    layer = std::move(next);
  }
  return out;
}

namespace {
void accumulate(std::unordered_map<std::string, std::vector<double>>& into,
                const std::unordered_map<std::string, Tensor>& grads, double scale) {
  for (const auto& [name, g] : grads) {
    auto& acc = into[name];
    if (acc.empty()) acc.assign(g.data().size(), 0.0);
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += scale * g.data()[i];
  }
}
}  // namespace

std::unordered_map<std::string, std::vector<double>> exact_expected_gradient(
    const GeneratorParams& gen, const std::vector<int>& source,
    const std::vector<int>& content_tokens,
    const std::function<double(const std::vector<int>&, bool)>& reward, double baseline) {
  auto space = enumerate_sequences(gen, source, content_tokens);
  std::unordered_map<std::string, std::vector<double>> grads;
  // make the output shape independent of which terms vanish
  for (const auto& p : gen.params()) grads[p.name()].assign(p.size(), 0.0);
  for (const auto& seq : space) {
    double w = seq.prob * (reward(seq.tokens, seq.ended) - baseline);
    if (w == 0.0) continue;
    auto target = seq.tokens;
    if (seq.ended) target.push_back(gen.dims.end_id);
    Tensor lp = seq_logprob(gen, source, target);
    accumulate(grads, backward(lp), w);
  }
  return grads;
}

double mean_discriminator_reward(const GeneratorParams& gen, const DiscriminatorParams& disc,
                                 const std::vector<int>& source, int n_samples,
                                 uint64_t seed) {
  if (n_samples < 1) fail("mean_discriminator_reward: need at least one sample");
  Rng root(seed);
  double total = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    Rng stream = root.fork(i);
    auto s = sample_response(gen, source, stream);
    auto resp = scored_target(s, gen.dims);
    total += discriminate(disc, TokenInput::hard(source), TokenInput::hard(resp)).item();
  }
  return total / n_samples;
}

MomentReport estimator_variance_probe(EstimatorKind kind, const GeneratorParams& gen,
                                      const DiscriminatorParams& disc,
                                      const std::vector<int>& source, int n_samples,
                                      uint64_t seed, double tau, double sigma,
                                      double reinforce_baseline) {
  if (n_samples < 1000) fail("estimator_variance_probe: need at least 1000 samples");
  // Welford accumulators per parameter coordinate
  std::unordered_map<std::string, std::vector<double>> mean, m2;
  for (const auto& p : gen.params()) {
    mean[p.name()].assign(p.size(), 0.0);
    m2[p.name()].assign(p.size(), 0.0);
  }
  Rng root(seed);
  for (int i = 0; i < n_samples; ++i) {
    Rng stream = root.fork(i);
    std::unordered_map<std::string, Tensor> grads;
    if (kind == EstimatorKind::kDpg) {
      Tensor z = sample_noise(gen.dims, sigma, stream);
      Tensor h0 = encode_source(gen, source);
      auto soft = decode(gen, h0, z, tau, DecodeMode::kSoft, gen.dims.max_steps);
      Tensor score = discriminate(disc, TokenInput::hard(source),
                                  TokenInput::from_soft(stack_soft(soft, gen.dims.vocab)));
      grads = backward(score);
    } else {
      auto s = sample_response(gen, source, stream);
      auto resp = scored_target(s, gen.dims);
      double r =
          discriminate(disc, TokenInput::hard(source), TokenInput::hard(resp)).item();
      Tensor lp = seq_logprob(gen, source, resp);
      grads = backward(lp, Tensor::full(lp.shape(), r - reinforce_baseline));
    }
    double n = i + 1;
    for (auto& [name, acc] : mean) {
      auto it = grads.find(name);
      auto& v2 = m2[name];
      for (size_t j = 0; j < acc.size(); ++j) {
        double g = it == grads.end() ? 0.0 : it->second.data()[j];
        double delta = g - acc[j];
        acc[j] += delta / n;
        v2[j] += delta * (g - acc[j]);
      }
    }
  }
  MomentReport report;
  report.samples = n_samples;
  report.mean = std::move(mean);
  for (auto& [name, v2] : m2) {
    auto& var = report.variance[name];
    var.resize(v2.size());
    for (size_t j = 0; j < v2.size(); ++j) var[j] = v2[j] / (n_samples - 1);
  }
  return report;
}

}  // namespace aimlab
