#pragma once

#include "gprune/checkpoint.hpp"
#include "gprune/rmp.hpp"

#include <iosfwd>
#include <vector>

namespace gprune {

struct HardenResult {
  MaskSet masks;
  std::vector<int> guarded_ffn_layers;   // layers where the zero-retention guard fired
  std::vector<int> guarded_head_layers;

  bool guard_fired() const { return !guarded_ffn_layers.empty() || !guarded_head_layers.empty(); }
};

// Step function on the final scores. A layer that would lose every FFN neuron (or every
// head) keeps its single top-scoring unit instead.
HardenResult harden(const PruneScores& scores, const ThresholdSet& thresholds);

struct LayerPlan {
  std::vector<int> ffn_keep;   // strictly increasing old indices
  std::vector<int> head_keep;
  std::vector<int> ffn_new_index;   // old -> new, -1 when removed
  std::vector<int> head_new_index;
  std::int64_t params_before = 0;   // prunable parameters only
  std::int64_t params_after = 0;
};

struct PrunePlan {
  std::vector<LayerPlan> layers;
  std::int64_t params_before = 0;
  std::int64_t params_after = 0;
  std::int64_t total_params_after = 0;  // whole pruned model, embeddings included
};

PrunePlan make_plan(const MaskSet& hard_masks, const ModelConfig& config);

// Removes gate/up rows and down columns of masked neurons, and Q/K/V row blocks and O
// column blocks of masked heads. Throws on soft masks.
ModelWeights apply_prune(const ModelWeights& w, const MaskSet& hard_masks, PrunePlan* plan = nullptr);
ModelBundle apply_prune(const ModelBundle& bundle, const MaskSet& hard_masks, PrunePlan* plan = nullptr);

// Ratio of kept to original prunable parameters, counted in integers.
double retention_actual(const PrunePlan& plan, const ModelConfig& original);

void write_plan(std::ostream& out, const PrunePlan& plan);

}  // namespace gprune
