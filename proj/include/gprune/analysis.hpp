#pragma once

#include "gprune/bcm.hpp"
#include "gprune/calibstats.hpp"
#include "gprune/rmp.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gprune {

// Kendall tau-b; ties in either input reduce the denominator instead of counting.
double kendall_tau(std::span<const double> a, std::span<const double> b);
double kendall_tau(const RankVector& a, const RankVector& b);

class UndefinedMssError : public Error {
 public:
  using Error::Error;
};

// Population std of per-module mean drift over the mean per-module drift std.
double mss(const std::vector<int>& assignment, int k, const Vec& drifts);
inline double mss(const ModulePartition& p, const Vec& drifts) { return mss(p.assignment, p.k, drifts); }

// Maximum-weight perfect matching on a square weight matrix. Returns column for each row.
std::vector<int> max_weight_matching(const Mat& weights);

struct OverlapResult {
  std::vector<int> pairing;  // module of A -> matched module of B (ids >= k_b are virtual)
  Mat intersections;         // padded M x M
  double accuracy = 0.0;
  double iou = 0.0;
  int iou_pairs = 0;
  bool padded = false;
};

OverlapResult module_overlap(const std::vector<int>& a, int k_a, const std::vector<int>& b, int k_b);
inline OverlapResult module_overlap(const ModulePartition& a, const ModulePartition& b) {
  return module_overlap(a.assignment, a.k, b.assignment, b.k);
}

// Partition file: per layer "layer L k K" followed by one line of module ids.
struct StoredPartition {
  int layer = 0;
  int k = 0;
  std::vector<int> assignment;
};

void write_partitions(std::ostream& out, const std::vector<StoredPartition>& parts);
std::vector<StoredPartition> read_partitions(std::istream& in);

struct LayerReport {
  LayerScores scores_a;
  LayerScores scores_b;  // empty when no auxiliary corpus was used
  LayerDrift drift;
  std::optional<ModulePartition> partition;
  std::optional<AdaptedLayer> adapted;
  Vec ffn_thresholds;
  double attn_threshold = 0.0;
  std::vector<double> silhouette_candidates;
  std::vector<double> silhouette_scores;
  int initial_k = 0;
  int n_splits = 0;
  double bcdm_initial = 0.0;
  double bcdm_final = 0.0;
  int ffn_kept = 0;
  int heads_kept = 0;
};

struct RunReport {
  std::string config_hash;
  std::string mode;
  std::string metric;
  double target = 1.0;
  std::vector<LayerReport> layers;
  double retention_estimate = 1.0;
  double retention_actual = 1.0;
  std::int64_t params_before = 0;
  std::int64_t params_after = 0;
  int threshold_epochs = 0;
  bool early_stopped = false;
  std::int64_t threshold_steps = 0;
  std::int64_t extra_steps = 0;
  bool feasible = true;
  double lambda = 0.0;
  std::vector<int> guarded_ffn_layers;
  std::vector<int> guarded_head_layers;
  double teacher_ppl = 0.0;
  double pruned_ppl = 0.0;
};

// Files written under dir: units.csv, modules.csv, kendall.csv, mss.csv, summary.txt.
// Every file starts with a "# config_hash = ..." line.
void emit_report(const RunReport& report, const std::string& dir);

struct OverlapRow {
  std::string run_a;
  std::string run_b;
  int layer = 0;
  int k_a = 0;
  int k_b = 0;
  OverlapResult result;
};

void write_overlap_csv(std::ostream& out, const std::vector<OverlapRow>& rows);

}  // namespace gprune
