#pragma once

// Measurement instruments for attention pooling: sparsity, optimization risk
// and its multi-head form, the attention-plus modulation factor, bootstrap
// confidence intervals and histogram/feature exports.

#include "abx/random.hpp"
#include "abx/tensor.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace abx {

// 100 * (1 - k/s), k the fewest top instances holding `mass` of the attention.
// Larger means sparser. Throws ValidationError unless sum(attention) = 1 +- 1e-6.
double sparsity_score(const Eigen::Ref<const Vector>& attention, double mass = 0.95);

// Largest post-softmax attention on a noisy instance; 0 when there are none.
double optimization_risk(const Eigen::Ref<const Vector>& attention, std::span<const Index> noisy);

struct RiskReport {
  std::vector<double> head_risks;  // R^(j)
  double risk = 0.0;               // sum_j R^(j) / m (equals R^(1) when m = 1)
  double bound = 0.0;              // max_j R^(j)
  Index worst_noisy = -1;          // argmax noisy instance of the worst head
};

RiskReport multi_head_risk(std::span<const Vector> head_attention, std::span<const Index> noisy);

struct Modulation {
  double lambda = 1.0;       // exp(D_i') / sum_k a_k exp(D_k)
  double jensen_bound = 1.0; // exp(sum_k a_k D_k)
  double weighted_exp = 1.0; // sum_k a_k exp(D_k)
  Vector delta;              // D_k = alpha * sum_n U[k,n] A[n]
};

// `logits` are the raw attention A (pre-softmax). The exponentials are taken
// after subtracting max_k D_k, which cancels in lambda; the two Jensen sides
// are reported unshifted.
Modulation modulation_factor(const Eigen::Ref<const Vector>& logits, const Eigen::Ref<const Matrix>& similarity,
                             double alpha, Index noisy_index);

struct Decomposition {
  double original = 0.0;  // softmax(A)_i'
  double lambda = 1.0;
  double product = 0.0;   // original * lambda
  double refined = 0.0;   // softmax(A + alpha U A)_i', computed directly
};

// Throws NumericError when |refined - product| > 1e-9.
Decomposition decompose_refined_attention(const Eigen::Ref<const Vector>& logits,
                                          const Eigen::Ref<const Matrix>& similarity, double alpha,
                                          Index noisy_index);

// Random A+ inputs where the discriminative set dominates: its logits are
// drawn high, noisy logits low, and each row of U keeps at least
// 1 - cross_mass of its mass inside the row's own role class.
struct DominantFamily {
  Index min_size = 16;
  Index max_size = 32;
  Index discriminative = 4;
  double disc_logit_lo = 2.0, disc_logit_hi = 4.0;
  double noisy_logit_lo = -1.0, noisy_logit_hi = 1.0;
  double cross_mass = 0.1;
  double alpha_lo = 0.5, alpha_hi = 1.5;
};

struct DominantCase {
  Vector logits;
  Matrix similarity;
  double alpha = 1.0;
  std::vector<Index> discriminative;
  std::vector<Index> noisy;
  Index worst_noisy = -1;  // argmax of softmax(logits) over the noisy set
};

DominantCase sample_dominant_case(const DominantFamily& family, Rng& rng);

enum class MetricKind { Accuracy, Auc };
std::string to_string(MetricKind k);

// `scores` holds one class-probability row per sample.
// Accuracy: argmax (ties to the lowest class) against labels.
// AUC: Mann-Whitney with half credit for ties; macro one-vs-rest when C > 2.
double compute_metric(std::span<const int> labels, const Eigen::Ref<const Matrix>& scores,
                      MetricKind kind);

struct BootstrapResult {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  Index skipped = 0;  // AUC resamples redrawn because they held a single class
};

// Percentile bootstrap over samples. Quantiles use linear interpolation
// between order statistics at q * (n - 1).
BootstrapResult bootstrap_ci(std::span<const int> labels, const Eigen::Ref<const Matrix>& scores,
                             MetricKind kind, Index resamples, double level, Rng& rng);

// Linear interpolation quantile of a sorted sample.
double sorted_quantile(std::span<const double> sorted, double q);

struct Histogram {
  std::vector<double> edges;  // n_bins + 1
  std::vector<Index> counts;
};

// Linear bins over [0, max(attention)]; the maximum lands in the last bin.
Histogram attention_histogram(const Eigen::Ref<const Vector>& attention, Index bins);

}  // namespace abx
