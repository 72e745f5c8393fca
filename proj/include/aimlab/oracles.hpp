#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "aimlab/seqmodels.hpp"

namespace aimlab {

// Explicit finite joint distribution over (s, t) pairs. Everything here is
// brute force on purpose: these functions are the ground truth that the
// sampling-based estimators are judged against, so they must be exact or
// refuse to answer.
struct JointTable {
  std::vector<std::vector<double>> p;  // rows s, columns t

  void validate() const;  // nonnegative entries summing to 1 within 1e-12
  std::vector<double> marginal_s() const;
  std::vector<double> marginal_t() const;
  JointTable transpose() const;
};

// -sum p log p with natural log and 0 log 0 = 0
double entropy(const std::vector<double>& dist);

// I(S;T) = sum p(s,t) log(p(s,t) / (p(s) p(t)))
double exact_mi(const JointTable& joint);

double conditional_entropy_t_given_s(const JointTable& joint);

// p(S|T) as a matrix indexed [s][t]; every column normalized to 1.
std::vector<std::vector<double>> exact_posterior(const JointTable& joint);

// H(S) + sum_{s,t} p(s,t) log q(s|t) for a candidate conditional q[s][t].
// Never exceeds exact_mi; touches it exactly when q is the true posterior.
double posterior_bound_value(const JointTable& joint,
                             const std::vector<std::vector<double>>& q);

// Every sequence the generator can emit: content-token strings terminated by
// the end token plus the unterminated strings that exhaust max_steps.
struct EnumeratedSequence {
  std::vector<int> tokens;  // content only
  bool ended = false;
  double prob = 0.0;
};

inline constexpr int64_t kEnumerationBound = 10000;

// Throws when the space exceeds kEnumerationBound rather than subsampling.
std::vector<EnumeratedSequence> enumerate_sequences(const GeneratorParams& gen,
                                                    const std::vector<int>& source,
                                                    const std::vector<int>& content_tokens);

// sum_T p(T|S) (r(T) - baseline) grad log p(T|S), by full enumeration.
std::unordered_map<std::string, std::vector<double>> exact_expected_gradient(
    const GeneratorParams& gen, const std::vector<int>& source,
    const std::vector<int>& content_tokens,
    const std::function<double(const std::vector<int>&, bool)>& reward, double baseline);

enum class EstimatorKind { kReinforce, kDpg };

struct MomentReport {
  std::unordered_map<std::string, std::vector<double>> mean;
  std::unordered_map<std::string, std::vector<double>> variance;  // sample variance
  int64_t samples = 0;
};

// Empirical per-coordinate moments of a single-draw gradient estimator for
// the generator objective E[D(response, source)]. The REINFORCE arm samples a
// hard response and scales the score-function gradient by the discriminator
// reward minus the supplied constant baseline; the soft arm draws one noise
// vector and differentiates straight through the relaxed decode.
MomentReport estimator_variance_probe(EstimatorKind kind, const GeneratorParams& gen,
                                      const DiscriminatorParams& disc,
                                      const std::vector<int>& source, int n_samples,
                                      uint64_t seed, double tau, double sigma,
                                      double reinforce_baseline);

// Pre-pass helper: mean discriminator reward over sampled responses, used as
// the constant baseline handed to the probe above.
double mean_discriminator_reward(const GeneratorParams& gen, const DiscriminatorParams& disc,
                                 const std::vector<int>& source, int n_samples,
                                 uint64_t seed);

}  // namespace aimlab
