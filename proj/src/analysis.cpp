#include "abx/analysis.hpp"

#include "abx/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace abx {

double sparsity_score(const Eigen::Ref<const Vector>& attention, double mass) {
  const Index s = attention.size();
  if (s == 0) throw UsageError("sparsity_score: empty attention");
  if (!(mass > 0.0 && mass <= 1.0)) throw UsageError("sparsity_score: mass must lie in (0, 1]");
  const double total = attention.sum();
  if (std::abs(total - 1.0) > 1e-6) {
    throw ValidationError("sparsity_score: attention sums to " + std::to_string(total));
  }
  std::vector<double> sorted(attention.data(), attention.data() + s);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumulative = 0.0;
  Index k = s;
  for (Index i = 0; i < s; ++i) {
    cumulative += sorted[static_cast<std::size_t>(i)];
    if (cumulative >= mass - 1e-12) {
      k = i + 1;
      break;
    }
  }
  return 100.0 * (1.0 - static_cast<double>(k) / static_cast<double>(s));
}

double optimization_risk(const Eigen::Ref<const Vector>& attention, std::span<const Index> noisy) {
  double risk = 0.0;
  for (Index i : noisy) {
    if (i < 0 || i >= attention.size()) {
      throw UsageError("optimization_risk: noisy index " + std::to_string(i) + " outside bag of " +
                       std::to_string(attention.size()));
    }
    risk = std::max(risk, attention(i));
  }
  return risk;
}

RiskReport multi_head_risk(std::span<const Vector> head_attention, std::span<const Index> noisy) {
  if (head_attention.empty()) throw UsageError("multi_head_risk: no heads");
  RiskReport r;
  const double m = static_cast<double>(head_attention.size());
  double worst = -1.0;
  for (const Vector& a : head_attention) {
    const double rj = optimization_risk(a, noisy);
    r.head_risks.push_back(rj);
    r.risk += rj / m;
    if (rj > worst) {
      worst = rj;
      r.bound = rj;
      r.worst_noisy = -1;
      for (Index i : noisy)
        if (r.worst_noisy < 0 || a(i) > a(r.worst_noisy)) r.worst_noisy = i;
    }
  }
  return r;
}

namespace {

void check_similarity(const Eigen::Ref<const Matrix>& u, Index s, Index i, const char* op) {
  if (u.rows() != s || u.cols() != s) {
    throw DimensionError(std::string(op) + ": similarity " + shape_string(u) + " for " +
                         std::to_string(s) + " instances");
  }
  if (i < 0 || i >= s) throw UsageError(std::string(op) + ": index " + std::to_string(i) + " out of range");
  for (Index r = 0; r < s; ++r) {
    if (std::abs(u.row(r).sum() - 1.0) > 1e-6) {
      throw ValidationError(std::string(op) + ": similarity row " + std::to_string(r) +
                            " is not stochastic");
    }
  }
}

Vector softmax(const Vector& x) {
  Vector e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

Modulation modulation_factor(const Eigen::Ref<const Vector>& logits, const Eigen::Ref<const Matrix>& similarity,
                             double alpha, Index noisy_index) {
  const Index s = logits.size();
  check_similarity(similarity, s, noisy_index, "modulation_factor");
  Modulation m;
  m.delta = alpha * (similarity * logits);
  const Vector a_hat = softmax(logits);
  const double top = m.delta.maxCoeff();
  const Vector shifted = (m.delta.array() - top).exp();
  const double weighted_shifted = a_hat.dot(shifted);
  m.lambda = shifted(noisy_index) / weighted_shifted;
  m.weighted_exp = std::exp(top) * weighted_shifted;
  m.jensen_bound = std::exp(a_hat.dot(m.delta));
  return m;
}

Decomposition decompose_refined_attention(const Eigen::Ref<const Vector>& logits,
                                          const Eigen::Ref<const Matrix>& similarity, double alpha,
                                          Index noisy_index) {
  const Modulation mod = modulation_factor(logits, similarity, alpha, noisy_index);
  Decomposition d;
  d.original = softmax(logits)(noisy_index);
  d.lambda = mod.lambda;
  d.product = d.original * d.lambda;
  const Vector refined_logits = logits + alpha * (similarity * logits);
  d.refined = softmax(refined_logits)(noisy_index);
  if (std::abs(d.refined - d.product) > 1e-9) {
    throw NumericError("decompose_refined_attention: identity violated (" + std::to_string(d.refined) +
                       " vs " + std::to_string(d.product) + ")");
  }
  return d;
}

DominantCase sample_dominant_case(const DominantFamily& f, Rng& rng) {
  if (f.discriminative < 1 || f.min_size <= f.discriminative || f.max_size < f.min_size) {
    throw UsageError("sample_dominant_case: need 1 <= discriminative < min_size <= max_size");
  }
  std::uniform_int_distribution<Index> size(f.min_size, f.max_size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  DominantCase c;
  const Index s = size(rng);
  std::vector<Index> order(static_cast<std::size_t>(s));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> disc(static_cast<std::size_t>(s), false);
  for (Index k = 0; k < f.discriminative; ++k) disc[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = true;
  for (Index i = 0; i < s; ++i) (disc[static_cast<std::size_t>(i)] ? c.discriminative : c.noisy).push_back(i);

  c.logits.resize(s);
  for (Index i = 0; i < s; ++i) {
    c.logits(i) = disc[static_cast<std::size_t>(i)] ? between(f.disc_logit_lo, f.disc_logit_hi)
                                                    : between(f.noisy_logit_lo, f.noisy_logit_hi);
  }

  c.similarity.resize(s, s);
  for (Index k = 0; k < s; ++k) {
    const bool row_disc = disc[static_cast<std::size_t>(k)];
    const double cross = between(0.0, f.cross_mass);
    double same_total = 0.0, cross_total = 0.0;
    for (Index n = 0; n < s; ++n) {
      c.similarity(k, n) = between(0.1, 1.0);
      (disc[static_cast<std::size_t>(n)] == row_disc ? same_total : cross_total) += c.similarity(k, n);
    }
    for (Index n = 0; n < s; ++n) {
      c.similarity(k, n) *= disc[static_cast<std::size_t>(n)] == row_disc ? (1.0 - cross) / same_total
                                                                           : cross / cross_total;
    }
  }
  c.alpha = between(f.alpha_lo, f.alpha_hi);
  for (Index i : c.noisy)
    if (c.worst_noisy < 0 || c.logits(i) > c.logits(c.worst_noisy)) c.worst_noisy = i;
  return c;
}

std::string to_string(MetricKind k) { return k == MetricKind::Accuracy ? "acc" : "auc"; }

namespace {

// Mann-Whitney AUC of `score` for positives vs negatives.
double binary_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

bool has_two_classes(std::span<const int> labels) {
  for (int l : labels)
    if (l != labels[0]) return true;
  return false;
}

}  // namespace

double compute_metric(std::span<const int> labels, const Eigen::Ref<const Matrix>& scores,
                      MetricKind kind) {
  const auto n = static_cast<Index>(labels.size());
  if (n == 0) throw UsageError("compute_metric: no samples");
  if (scores.rows() != n) {
    throw DimensionError("compute_metric: " + std::to_string(n) + " labels but " +
                         std::to_string(scores.rows()) + " score rows");
  }
  const Index classes = scores.cols();
  for (int l : labels)
    if (l < 0 || l >= classes) throw UsageError("compute_metric: label " + std::to_string(l) + " out of range");

  if (kind == MetricKind::Accuracy) {
    Index correct = 0;
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      for (Index c = 1; c < classes; ++c)
        if (scores(i, c) > scores(i, best)) best = c;
      correct += best == labels[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(correct) / static_cast<double>(n);
  }

  if (!has_two_classes(labels)) throw UsageError("compute_metric: AUC needs at least two classes");
  auto one_vs_rest = [&](Index c) {
    std::vector<double> pos, neg;
    for (Index i = 0; i < n; ++i) (labels[static_cast<std::size_t>(i)] == c ? pos : neg).push_back(scores(i, c));
    return std::pair{pos, neg};
  };
  if (classes == 2) {
    auto [pos, neg] = one_vs_rest(1);
    return binary_auc(pos, neg);
  }
  double total = 0.0;
  Index used = 0;
  for (Index c = 0; c < classes; ++c) {
    auto [pos, neg] = one_vs_rest(c);
    if (pos.empty() || neg.empty()) continue;
    total += binary_auc(pos, neg);
    ++used;
  }
  return total / static_cast<double>(used);
}

double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw UsageError("sorted_quantile: empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

BootstrapResult bootstrap_ci(std::span<const int> labels, const Eigen::Ref<const Matrix>& scores,
                             MetricKind kind, Index resamples, double level, Rng& rng) {
  const auto n = static_cast<Index>(labels.size());
  if (n == 0) throw UsageError("bootstrap_ci: no samples");
  if (resamples < 1) throw UsageError("bootstrap_ci: need at least one resample");
  if (!(level > 0.0 && level < 1.0)) throw UsageError("bootstrap_ci: level must lie in (0, 1)");
  if (kind == MetricKind::Auc && !has_two_classes(labels)) {
    throw UsageError("bootstrap_ci: AUC needs at least two classes");
  }
  BootstrapResult result;
  std::uniform_int_distribution<Index> pick(0, n - 1);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(resamples));
  std::vector<int> rl(static_cast<std::size_t>(n));
  Matrix rs(n, scores.cols());
  while (static_cast<Index>(stats.size()) < resamples) {
    for (Index i = 0; i < n; ++i) {
      const Index k = pick(rng);
      rl[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(k)];
      rs.row(i) = scores.row(k);
    }
    if (kind == MetricKind::Auc && !has_two_classes(rl)) {
      ++result.skipped;
      continue;
    }
    stats.push_back(compute_metric(rl, rs, kind));
  }
  result.mean = std::accumulate(stats.begin(), stats.end(), 0.0) / static_cast<double>(stats.size());
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - level) / 2.0;
  result.lo = sorted_quantile(stats, tail);
  result.hi = sorted_quantile(stats, 1.0 - tail);
  return result;
}

Histogram attention_histogram(const Eigen::Ref<const Vector>& attention, Index bins) {
  if (bins < 1) throw UsageError("attention_histogram: need at least one bin");
  Histogram h;
  const double top = attention.size() > 0 ? attention.maxCoeff() : 0.0;
  for (Index b = 0; b <= bins; ++b) h.edges.push_back(top * static_cast<double>(b) / static_cast<double>(bins));
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (Index i = 0; i < attention.size(); ++i) {
    Index b = top > 0.0 ? static_cast<Index>(attention(i) / top * static_cast<double>(bins)) : 0;
    b = std::clamp<Index>(b, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

}  // namespace abx
