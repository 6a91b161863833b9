#include "abx/sampling.hpp"

#include "abx/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace abx {

namespace {

// ceil() that ignores representation noise such as 10 * 0.3 = 3.0000000000000004.
Index robust_ceil(double x) {
  const double nearest = std::round(x);
  if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, std::abs(x))) return static_cast<Index>(nearest);
  return static_cast<Index>(std::ceil(x));
}

// k distinct indices from [0, n) by partial Fisher-Yates, or k draws with
// replacement when k > n.
std::vector<Index> draw(Index n, Index k, Rng& rng) {
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(k));
  if (k > n) {
    std::uniform_int_distribution<Index> pick(0, n - 1);
    for (Index i = 0; i < k; ++i) out.push_back(pick(rng));
    return out;
  }
  std::vector<Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
    out.push_back(pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace

SamplingPlan mris_plan(Index target, std::span<const double> ratios, std::vector<Index> scale_ids) {
  if (target < 1) throw UsageError("mris_plan: target count must be positive");
  if (ratios.empty()) throw ConfigError("sampling.ratios: at least one scale is required");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("sampling.ratios: each ratio must lie in [0, 1]");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("sampling.ratios: ratios sum to " + std::to_string(total) + ", expected 1");
  }
  if (scale_ids.empty()) {
    scale_ids.resize(ratios.size());
    std::iota(scale_ids.begin(), scale_ids.end(), Index{0});
  }
  if (scale_ids.size() != ratios.size()) {
    throw ConfigError("sampling.ratios: " + std::to_string(ratios.size()) + " ratios for " +
                      std::to_string(scale_ids.size()) + " scales");
  }

  SamplingPlan plan;
  plan.target = target;
  plan.scales = std::move(scale_ids);
  plan.ratios.assign(ratios.begin(), ratios.end());
  const double s = static_cast<double>(target);
  Index sum = 0;
  for (double r : ratios) {
    plan.counts.push_back(robust_ceil(s * r));
    sum += plan.counts.back();
  }
  auto overshoot = [&](std::size_t j) { return static_cast<double>(plan.counts[j]) - s * plan.ratios[j]; };
  while (sum > target) {
    std::size_t best = plan.counts.size();
    for (std::size_t j = 0; j < plan.counts.size(); ++j) {
      if (plan.counts[j] == 0) continue;
      if (best == plan.counts.size() || overshoot(j) > overshoot(best)) best = j;
    }
    --plan.counts[best];
    --sum;
  }
  // Only reachable when the ratios fall short of 1 by rounding noise.
  while (sum < target) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < plan.counts.size(); ++j)
      if (overshoot(j) < overshoot(best)) best = j;
    ++plan.counts[best];
    ++sum;
  }
  return plan;
}

std::vector<SampledInstance> mris_sample(const Slide& slide, const SamplingPlan& plan, Rng& rng) {
  const Index n = slide.size();
  if (n < 1) throw UsageError("mris_sample: empty slide");
  std::vector<SampledInstance> out;
  out.reserve(static_cast<std::size_t>(plan.target));
  for (std::size_t j = 0; j < plan.scales.size(); ++j) {
    const Index scale = plan.scales[j];
    if (scale < 0 || scale >= slide.scales()) {
      throw ConfigError("sampling: scale id " + std::to_string(scale) + " not available (slide has " +
                        std::to_string(slide.scales()) + " scales)");
    }
    for (Index i : draw(n, plan.counts[j], rng)) out.push_back({i, scale});
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<SampledInstance> regional_random_sample(const Slide& slide, Index n_regions, Index target,
                                                    Rng& rng, Index scale) {
  if (n_regions < 1) throw ConfigError("regional_random_sample: n_regions must be at least 1");
  if (scale < 0 || scale >= slide.scales()) {
    throw ConfigError("sampling: scale id " + std::to_string(scale) + " not available");
  }
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(n_regions));
  for (std::size_t i = 0; i < slide.regions.size(); ++i) {
    const auto r = static_cast<Index>(slide.regions[i]);
    if (r >= n_regions) {
      throw ValidationError("regional_random_sample: instance " + std::to_string(i) + " has region " +
                            std::to_string(r) + " outside [0, " + std::to_string(n_regions) + ")");
    }
    members[static_cast<std::size_t>(r)].push_back(static_cast<Index>(i));
  }
  std::vector<std::size_t> occupied;
  for (std::size_t r = 0; r < members.size(); ++r)
    if (!members[r].empty()) occupied.push_back(r);
  if (occupied.empty()) throw UsageError("regional_random_sample: empty slide");

  const std::vector<double> ratios(occupied.size(), 1.0 / static_cast<double>(occupied.size()));
  const SamplingPlan quota = mris_plan(target, ratios);
  std::vector<SampledInstance> out;
  out.reserve(static_cast<std::size_t>(target));
  for (std::size_t k = 0; k < occupied.size(); ++k) {
    const std::vector<Index>& pool = members[occupied[k]];
    for (Index i : draw(static_cast<Index>(pool.size()), quota.counts[k], rng)) {
      out.push_back({pool[static_cast<std::size_t>(i)], scale});
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

Matrix gather_views(const Slide& slide, std::span<const SampledInstance> picks) {
  Matrix out(static_cast<Index>(picks.size()), slide.raw_dim());
  for (std::size_t k = 0; k < picks.size(); ++k) {
    const SampledInstance& p = picks[k];
    out.row(static_cast<Index>(k)) = slide.views[static_cast<std::size_t>(p.scale)].row(p.instance);
  }
  return out;
}

}  // namespace abx
