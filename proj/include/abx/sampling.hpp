#pragma once

// Multi-scale random instance sampling (MRIS) and regional random sampling.

#include "abx/random.hpp"
#include "abx/synth_data.hpp"
#include "abx/tensor.hpp"

#include <span>
#include <vector>

namespace abx {

struct SamplingPlan {
  Index target = 0;
  std::vector<Index> scales;   // scale ids I_j
  std::vector<double> ratios;  // sigma_j, summing to 1
  std::vector<Index> counts;   // s_j after repair, summing to target
};

// counts_j = ceil(target * ratio_j), then while the sum exceeds the target the
// scale with the largest overshoot (count_j - target * ratio_j) loses one,
// ties going to the lowest index. Scale ids default to 0..t-1.
SamplingPlan mris_plan(Index target, std::span<const double> ratios,
                       std::vector<Index> scale_ids = {});

struct SampledInstance {
  Index instance = 0;
  Index scale = 0;

  bool operator==(const SampledInstance&) const = default;
};

// Per scale, counts_j instances drawn uniformly without replacement (with
// replacement only when counts_j exceeds the slide size); merged and shuffled.
std::vector<SampledInstance> mris_sample(const Slide& slide, const SamplingPlan& plan, Rng& rng);

// Uniform quota over the non-empty regions (via mris_plan), uniform draws
// within each region, all at `scale`.
std::vector<SampledInstance> regional_random_sample(const Slide& slide, Index n_regions,
                                                    Index target, Rng& rng, Index scale = 0);

// Stacks the selected views into an s x d_raw matrix.
Matrix gather_views(const Slide& slide, std::span<const SampledInstance> picks);

}  // namespace abx
