#pragma once

#include "gprune/toymodel.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace gprune {

// Per-unit streaming moments (Welford); variance uses the population convention.
struct RunningStats {
  std::int64_t count = 0;
  Vec mean;
  Vec mean_abs;
  Vec m2;
  Vec sumsq;

  explicit RunningStats(Eigen::Index units = 0)
      : mean(Vec::Zero(units)), mean_abs(Vec::Zero(units)), m2(Vec::Zero(units)), sumsq(Vec::Zero(units)) {}

  Eigen::Index units() const { return mean.size(); }
  template <typename Derived>
  void push(const Eigen::MatrixBase<Derived>& x);
  void merge(const RunningStats& other);
  Vec variance() const;
  Vec l2_norm() const { return sumsq.cwiseSqrt(); }
};

template <typename Derived>
void RunningStats::push(const Eigen::MatrixBase<Derived>& x) {
  require_shape(x.size() == units(), "running stats width");
  ++count;
  const double inv = 1.0 / static_cast<double>(count);
  for (Eigen::Index j = 0; j < units(); ++j) {
    const double v = x(j);
    const double delta = v - mean(j);
    mean(j) += delta * inv;
    m2(j) += delta * (v - mean(j));
    mean_abs(j) += (std::abs(v) - mean_abs(j)) * inv;
    sumsq(j) += v * v;
  }
}

struct LayerActivationStats {
  RunningStats ffn;    // post-SwiGLU activation per neuron
  RunningStats heads;  // L2 norm of each head's output per token
};

struct ActivationStats {
  std::vector<LayerActivationStats> layers;
  std::int64_t token_count = 0;

  static ActivationStats empty(const ModelConfig& config);
  // Chan et al. pairwise merge; `other` is appended after this object's tokens.
  void merge(const ActivationStats& other);
};

ActivationStats collect_stats(const ModelWeights& w, const Corpus& corpus);
ActivationStats collect_stats(const ModelWeights& w, const Corpus& corpus, const MaskSet& masks);

enum class Metric { WandaSp, Flap, WeightNorm };

std::string to_string(Metric m);
Metric parse_metric(const std::string& s);
inline bool is_activation_based(Metric m) { return m != Metric::WeightNorm; }

struct LayerScores {
  Vec ffn;
  Vec heads;
};

struct ScoreTable {
  Metric metric = Metric::WandaSp;
  std::vector<LayerScores> layers;
};

// s_j = ||a_j||_2 over calibration tokens * ||W_down[:, j]||_1 (heads: O-projection column block).
LayerScores score_wanda_sp(const ActivationStats& stats, const ModelWeights& w, int layer);
// s_j = Var(a_j) * ||W_down[:, j]||_2^2 (heads: squared Frobenius norm of the O block).
LayerScores score_flap(const ActivationStats& stats, const ModelWeights& w, int layer);
// s_j = ||(gate_j, up_j, down_j)||_2 (heads: Q/K/V row blocks and O column block).
LayerScores score_weight_norm(const ModelWeights& w, int layer);

ScoreTable score_all(Metric metric, const ActivationStats* stats, const ModelWeights& w);

using RankVector = std::vector<int>;

// Rank 1 = highest score; ties go to the lower index.
RankVector within_layer_ranks(const Vec& scores);

// d_i = |r_A(i) - r_B(i)| / (N - 1).
Vec rank_drift(const RankVector& ranks_a, const RankVector& ranks_b);

struct LayerDrift {
  Vec ffn;
  Vec heads;  // zeros when the layer has fewer than two heads
};

std::vector<LayerDrift> drift_between(const ScoreTable& a, const ScoreTable& b);

// CSV: layer,unit_type,index,score,rank,drift
void write_unit_csv(std::ostream& out, const ScoreTable& scores, const std::vector<LayerDrift>& drifts);

}  // namespace gprune
