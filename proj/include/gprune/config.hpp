#pragma once

#include "gprune/bcm.hpp"
#include "gprune/calibstats.hpp"
#include "gprune/corpus.hpp"
#include "gprune/rmp.hpp"

#include <string>

namespace gprune {

enum class PruneMode { GPrune, BaselineGlobal };
enum class QuantileScope { Layer, Global };

std::string to_string(PruneMode m);
PruneMode parse_prune_mode(const std::string& s);
std::string to_string(QuantileScope s);
QuantileScope parse_quantile_scope(const std::string& s);

struct RmpHyper {
  double gamma_drift = 0.90;
  double gamma_score = 0.90;
  QuantileScope quantile_scope = QuantileScope::Layer;
  double t_ste = 0.2;
  double alpha = 0.5;
  double t_kd = 2.0;
  double rho_pen = 0.05;
  double rho_lam = 0.02;
  double epochs = 3.0;
  double lr = 0.01;
  int batch_size = 1;
  double early_stop_g = 0.005;
  double feasibility_tol = 0.01;
  double max_extra_epochs = 3.0;
  RetentionMode retention_mode = RetentionMode::Parameters;

  bool operator==(const RmpHyper&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;

  // Pretraining and model shape (vocab size follows the pretraining corpus).
  std::string checkpoint;  // input checkpoint for prune/eval; output for pretrain when set
  int n_layers = 4;
  int d_model = 128;
  int d_ffn = 512;
  int n_heads = 4;
  int max_seq_len = 128;
  std::int64_t train_steps = 2000;
  double train_lr = 3e-3;
  int train_batch_size = 4;
  double train_clip_norm = 1.0;
  CorpusSpec pretrain_corpus{CorpusSource::SyntheticMix, "", 1, 8192, 128, 256};

  CorpusSpec primary{CorpusSource::SyntheticA, "", 11, 256, 128, 256};
  CorpusSpec auxiliary{CorpusSource::SyntheticB, "", 12, 256, 128, 256};
  bool has_auxiliary = true;
  CorpusSpec eval_corpus{CorpusSource::SyntheticMix, "", 13, 64, 128, 256};

  Metric metric = Metric::WandaSp;
  PruneMode mode = PruneMode::GPrune;
  double target_retention = 0.5;
  BcmHyper bcm = BcmHyper::desk();
  RmpHyper rmp;

  static RunConfig desk();
  static RunConfig paper();

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

// Flat "dotted.key = value" text. Lines starting with '#' and blank lines are ignored.
std::string serialize_config(const RunConfig& c);
// Keys not present keep the values of `base`.
RunConfig parse_config(const std::string& text, const RunConfig& base = RunConfig::desk());
RunConfig load_config(const std::string& path, const RunConfig& base = RunConfig::desk());

// FNV-1a of the serialized form, as 16 hex digits.
std::string config_hash(const RunConfig& c);

}  // namespace gprune
