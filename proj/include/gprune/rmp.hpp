#pragma once

#include "gprune/bcm.hpp"
#include "gprune/calibstats.hpp"

#include <iosfwd>
#include <vector>

namespace gprune {

struct ModuleStats {
  Vec mean_drift;  // d-bar_k
  Vec mean_act;    // s-bar^act_k
};

// Arithmetic means over hard module members.
ModuleStats module_stats(const ModulePartition& partition, const Vec& drifts, const Vec& act_scores);

enum class MetricChoice { ActivationBased, ActivationIndependent };

struct MetricAssignment {
  std::vector<MetricChoice> tags;  // per module
  Vec mean_drift;
  Vec mean_act;
  double delta_drift = 0.0;
  double delta_score = 0.0;

  int switched() const;
};

// Module takes the activation-independent score iff its mean drift is strictly above
// delta_drift and its mean activation score is strictly below delta_score.
inline bool use_activation_independent(double mean_drift, double mean_act, double delta_drift, double delta_score) {
  return mean_drift > delta_drift && mean_act < delta_score;
}

MetricAssignment assign_metrics(const ModuleStats& stats, double delta_drift, double delta_score);
// Thresholds are the gamma-quantiles of this layer's module means.
MetricAssignment assign_metrics(const ModuleStats& stats, double gamma_drift, double gamma_score, bool quantile_thresholds);

struct AdaptedLayer {
  Vec selected;    // raw per-neuron score after metric selection
  Vec normalized;  // per-module z-score of `selected`
  Vec module_mean;
  Vec module_std;
  MetricAssignment assignment;
};

// z-score within each module; modules with zero spread map to 0.
Vec normalize_per_module(const Vec& scores, const std::vector<int>& module_of, int k, Vec* means = nullptr,
                         Vec* stds = nullptr);

AdaptedLayer adapt_metrics(const ModulePartition& partition, const Vec& drifts, const Vec& act_scores,
                           const Vec& ind_scores, double gamma_drift, double gamma_score);
AdaptedLayer adapt_metrics_with(const ModulePartition& partition, const ModuleStats& stats, const Vec& act_scores,
                                const Vec& ind_scores, double delta_drift, double delta_score);

// Normalized scores and module membership for every prunable unit in the model.
struct PruneScores {
  std::vector<Vec> ffn;
  std::vector<std::vector<int>> module_of;
  std::vector<int> n_modules;
  std::vector<Vec> heads;

  int n_layers() const { return static_cast<int>(ffn.size()); }
};

struct ThresholdSet {
  std::vector<Vec> ffn;  // per layer, one entry per module
  Vec attn;              // one per layer

  Eigen::Index size() const;
  Vec pack() const;
  void unpack(const Vec& flat);
  // Layout of a 1 x n row matrix used as the optimizer parameter.
  Mat as_row() const { return pack().transpose(); }
};

ThresholdSet init_thresholds(const PruneScores& scores, double target_retention);

// Hard step forward: m = 1 iff s - tau >= 0.
MaskSet ste_masks(const PruneScores& scores, const ThresholdSet& thresholds);
// Surrogate masks sigmoid((s - tau) / t_ste), used in the backward pass.
MaskSet surrogate_masks(const PruneScores& scores, const ThresholdSet& thresholds, double t_ste);
// d m / d tau under the surrogate: -sigmoid'((s - tau)/T) / T.
double ste_dmask_dthreshold(double score, double threshold, double t_ste);

// Chain dL/dm (per unit) through the surrogate into dL/dtau.
ThresholdSet threshold_grad_from_masks(const PruneScores& scores, const ThresholdSet& thresholds,
                                       const MaskSet& mask_grads, double t_ste);

enum class RetentionMode { Parameters, Structures };

std::string to_string(RetentionMode m);
RetentionMode parse_retention_mode(const std::string& s);

std::int64_t ffn_unit_weight(const ModelConfig& config, RetentionMode mode);
std::int64_t head_unit_weight(const ModelConfig& config, RetentionMode mode);

// Retained fraction of prunable weight. Hard masks give an exact integer ratio.
double retention_estimate(const MaskSet& masks, const ModelConfig& config,
                          RetentionMode mode = RetentionMode::Parameters);

struct DualState {
  double lambda = 0.0;
  double rho_pen = 0.05;
  double rho_lam = 0.02;
  double target = 0.5;
  std::vector<double> history;  // g after each dual update
};

double constraint_loss(double retention, const DualState& dual);
void dual_update(DualState& dual, double g);

// Soft-retention form of the constraint term (what the threshold gradient sees).
double soft_constraint_loss(const PruneScores& scores, const ThresholdSet& thresholds, const ModelConfig& config,
                            const DualState& dual, double t_ste, RetentionMode mode, ThresholdSet* grad = nullptr);

struct PerfLossOptions {
  double alpha = 0.5;
  double t_kd = 2.0;
};

// (1-alpha) CE(student, targets) + alpha T^2 KL(softmax(teacher/T) || softmax(student/T)),
// averaged over next-token positions. Fills dstudent with d(scale*loss)/dlogits when non-null.
double perf_loss(const Mat& student, const Mat& teacher, std::span<const int> tokens, const PerfLossOptions& opts,
                 Mat* dstudent = nullptr, double scale = 1.0);

struct ThresholdTrainOptions {
  double epochs = 3.0;
  double lr = 0.01;
  int batch_size = 4;
  double t_ste = 0.2;
  PerfLossOptions perf;
  RetentionMode retention_mode = RetentionMode::Parameters;
  double early_stop_g = 0.005;
  // After the epoch budget, keep stepping until |g| <= feasibility_tol, for at most
  // max_extra_epochs more epochs.
  double feasibility_tol = 0.01;
  double max_extra_epochs = 3.0;
};

struct ThresholdLogRow {
  std::int64_t step;
  double perf;
  double constr;
  double retention_soft;
  double retention_hard;
  double lambda;
  double g;
};

struct ThresholdTrainResult {
  ThresholdSet thresholds;
  DualState dual;
  std::vector<ThresholdLogRow> log;
  int epochs_run = 0;
  std::int64_t steps = 0;
  std::int64_t extra_steps = 0;
  bool early_stopped = false;
  bool feasible = false;  // final |g| <= feasibility_tol
};

class ThresholdTrainingError : public Error {
 public:
  using Error::Error;
};

// Teacher = the same weights with all-ones masks. Model weights stay frozen.
ThresholdTrainResult train_thresholds(const ModelWeights& w, const PruneScores& scores, const ThresholdSet& init,
                                      DualState dual, const Corpus& calibration, const ThresholdTrainOptions& opts);

void write_threshold_log(std::ostream& out, const std::vector<ThresholdLogRow>& log);

}  // namespace gprune
