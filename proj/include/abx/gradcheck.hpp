#pragma once

// Finite-difference audit of the full pipeline (encoder, aggregator, head,
// cross-entropy) against the tape's analytic gradients, one report row per
// parameter.

#include "abx/trainer.hpp"

#include <string>
#include <vector>

namespace abx {

struct GradCheckOptions {
  Index raw_dim = 6;
  Index encoder_hidden = 8;
  Index bag_size = 8;
  Index classes = 3;
  Index steps = 5;          // optimizer steps between the two checks
  double train_lr = 1e-2;
  double tolerance = 1e-5;
  double fd_step = 5e-4;    // five-point central stencil; shrunk per coordinate near relu kinks
  double floor = 1e-8;      // relative-error denominator floor
  std::uint64_t seed = 7;
  std::string fault_parameter;  // negative control; empty disables
  double fault_factor = 1.01;
};

struct GradCheckCase {
  std::string label;
  AggregatorConfig aggregator;
};

struct GroupCheck {
  std::string name;
  Index size = 0;
  double max_error = 0.0;  // max_k |a - n| / max(|a|, |n|, floor)
  double max_abs_grad = 0.0;
  Index shrunk = 0;  // coordinates whose stencil had to shrink to avoid a kink
  bool passed = false;
};

struct GradCheckReport {
  std::string label;
  std::string stage;  // "init" or "step<N>"
  std::vector<GroupCheck> groups;

  bool passed() const;
};

// abmil; abmilx over m in {1,4,8} x alpha modes x FFN off/on; global-attn.
std::vector<GradCheckCase> standard_grad_check_cases(Index dim);

// Checks at initialization, trains `steps` Adam steps on random bags, checks again.
std::vector<GradCheckReport> run_grad_check(const GradCheckCase& c, const GradCheckOptions& options);

}  // namespace abx
