#pragma once

#include "gprune/analysis.hpp"
#include "gprune/checkpoint.hpp"
#include "gprune/config.hpp"
#include "gprune/prune_export.hpp"

#include <string>
#include <vector>

namespace gprune {

// Raised by the pipeline with the name of the stage that failed.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

ModelConfig model_config_for(const RunConfig& c);
std::vector<std::string> vocabulary_for(const CorpusSpec& spec);

struct PretrainResult {
  ModelBundle bundle;
  std::vector<TrainLogRow> log;
};

PretrainResult pretrain(const RunConfig& c);

struct PruneRun {
  ModelBundle pruned;
  PrunePlan plan;
  MaskSet masks;
  RunReport report;
  std::vector<ThresholdLogRow> threshold_log;
  std::vector<StoredPartition> partitions;
};

// In-memory pruning pipeline; the teacher bundle is left untouched.
PruneRun prune_model(const ModelBundle& bundle, const RunConfig& c);

// Output files (under out_dir): model.ckpt, train_log.csv, config.txt.
void cmd_pretrain(const RunConfig& c, const std::string& out_dir);
// Output files: pruned.ckpt, prune_plan.txt, threshold_log.csv, partitions.txt, config.txt and
// the analysis reports. Nothing is left behind when a stage fails.
PruneRun cmd_prune(const RunConfig& c, const std::string& out_dir);

struct EvalResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::int64_t tokens = 0;
};

EvalResult evaluate(const ModelBundle& bundle, const Corpus& corpus);
// Writes eval.csv.
EvalResult cmd_eval(const RunConfig& c, const std::string& checkpoint, const std::string& out_dir);

// Recomputes MSS from each run's stored partitions and drifts and, for two or more runs,
// writes the pairwise module overlap table (overlap.csv).
void cmd_analyze(const std::vector<std::string>& run_dirs, const std::string& out_dir);

}  // namespace gprune
