#include "gprune/rmp.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "gprune/report_format.hpp"

namespace gprune {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_scores(const PruneScores& scores, const ThresholdSet& t) {
  require_shape(scores.heads.size() == scores.ffn.size() && scores.module_of.size() == scores.ffn.size() &&
                    t.ffn.size() == scores.ffn.size() && t.attn.size() == static_cast<Eigen::Index>(scores.ffn.size()),
                "prune scores / thresholds layer count");
  for (std::size_t l = 0; l < scores.ffn.size(); ++l)
    require_shape(t.ffn[l].size() == scores.n_modules[l] &&
                      scores.module_of[l].size() == static_cast<std::size_t>(scores.ffn[l].size()),
                  "thresholds per module in layer " + std::to_string(l));
}

}  // namespace

ModuleStats module_stats(const ModulePartition& partition, const Vec& drifts, const Vec& act_scores) {
  require_shape(drifts.size() == static_cast<Eigen::Index>(partition.size()) && act_scores.size() == drifts.size(),
                "module_stats operands");
  ModuleStats s{Vec::Zero(partition.k), Vec::Zero(partition.k)};
  const auto sizes = partition.module_sizes();
  for (std::size_t i = 0; i < partition.size(); ++i) {
    s.mean_drift(partition.assignment[i]) += drifts(static_cast<Eigen::Index>(i));
    s.mean_act(partition.assignment[i]) += act_scores(static_cast<Eigen::Index>(i));
  }
  for (int k = 0; k < partition.k; ++k) {
    if (sizes[static_cast<std::size_t>(k)] == 0) throw Error("module_stats: empty module " + std::to_string(k));
    s.mean_drift(k) /= sizes[static_cast<std::size_t>(k)];
    s.mean_act(k) /= sizes[static_cast<std::size_t>(k)];
  }
  return s;
}

int MetricAssignment::switched() const {
  return static_cast<int>(std::count(tags.begin(), tags.end(), MetricChoice::ActivationIndependent));
}

MetricAssignment assign_metrics(const ModuleStats& stats, double delta_drift, double delta_score) {
  MetricAssignment a;
  a.mean_drift = stats.mean_drift;
  a.mean_act = stats.mean_act;
  a.delta_drift = delta_drift;
  a.delta_score = delta_score;
  for (Eigen::Index k = 0; k < stats.mean_drift.size(); ++k)
    a.tags.push_back(use_activation_independent(stats.mean_drift(k), stats.mean_act(k), delta_drift, delta_score)
                         ? MetricChoice::ActivationIndependent
                         : MetricChoice::ActivationBased);
  return a;
}

MetricAssignment assign_metrics(const ModuleStats& stats, double gamma_drift, double gamma_score, bool) {
  return assign_metrics(stats, quantile(stats.mean_drift, gamma_drift), quantile(stats.mean_act, gamma_score));
}

Vec normalize_per_module(const Vec& scores, const std::vector<int>& module_of, int k, Vec* means, Vec* stds) {
  require_shape(module_of.size() == static_cast<std::size_t>(scores.size()), "normalize_per_module operands");
  Vec mu = Vec::Zero(k), sq = Vec::Zero(k), cnt = Vec::Zero(k);
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    mu(module_of[static_cast<std::size_t>(i)]) += scores(i);
    cnt(module_of[static_cast<std::size_t>(i)]) += 1.0;
  }
  for (int j = 0; j < k; ++j)
    if (cnt(j) > 0) mu(j) /= cnt(j);
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const int j = module_of[static_cast<std::size_t>(i)];
    sq(j) += (scores(i) - mu(j)) * (scores(i) - mu(j));
  }
  Vec sd(k);
  for (int j = 0; j < k; ++j) sd(j) = cnt(j) > 0 ? std::sqrt(sq(j) / cnt(j)) : 0.0;
  Vec out(scores.size());
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const int j = module_of[static_cast<std::size_t>(i)];
    out(i) = sd(j) > 0.0 ? (scores(i) - mu(j)) / sd(j) : 0.0;
  }
  if (means) *means = mu;
  if (stds) *stds = sd;
  return out;
}

AdaptedLayer adapt_metrics_with(const ModulePartition& partition, const ModuleStats& stats, const Vec& act_scores,
                                const Vec& ind_scores, double delta_drift, double delta_score) {
  require_shape(act_scores.size() == ind_scores.size() && act_scores.size() == static_cast<Eigen::Index>(partition.size()),
                "adapt_metrics: score tables must cover every neuron");
  AdaptedLayer out;
  out.assignment = assign_metrics(stats, delta_drift, delta_score);
  out.selected.resize(act_scores.size());
  for (std::size_t i = 0; i < partition.size(); ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    out.selected(idx) = out.assignment.tags[static_cast<std::size_t>(partition.assignment[i])] ==
                                MetricChoice::ActivationIndependent
                            ? ind_scores(idx)
                            : act_scores(idx);
  }
  out.normalized = normalize_per_module(out.selected, partition.assignment, partition.k, &out.module_mean, &out.module_std);
  return out;
}

AdaptedLayer adapt_metrics(const ModulePartition& partition, const Vec& drifts, const Vec& act_scores,
                           const Vec& ind_scores, double gamma_drift, double gamma_score) {
  const ModuleStats stats = module_stats(partition, drifts, act_scores);
  return adapt_metrics_with(partition, stats, act_scores, ind_scores, quantile(stats.mean_drift, gamma_drift),
                            quantile(stats.mean_act, gamma_score));
}

Eigen::Index ThresholdSet::size() const {
  Eigen::Index n = attn.size();
  for (const auto& v : ffn) n += v.size();
  return n;
}

Vec ThresholdSet::pack() const {
  Vec out(size());
  Eigen::Index pos = 0;
  for (const auto& v : ffn) {
    out.segment(pos, v.size()) = v;
    pos += v.size();
  }
  out.segment(pos, attn.size()) = attn;
  return out;
}

void ThresholdSet::unpack(const Vec& flat) {
  require_shape(flat.size() == size(), "threshold unpack length");
  Eigen::Index pos = 0;
  for (auto& v : ffn) {
    v = flat.segment(pos, v.size());
    pos += v.size();
  }
  attn = flat.segment(pos, attn.size());
}

ThresholdSet init_thresholds(const PruneScores& scores, double target_retention) {
  if (!(target_retention > 0.0 && target_retention <= 1.0)) throw Error("target retention must be in (0, 1]");
  ThresholdSet t;
  t.attn.resize(scores.n_layers());
  const double gamma = 1.0 - target_retention;
  auto pick = [&](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    if (target_retention >= 1.0) return *std::min_element(v.begin(), v.end()) - 1.0;
    return quantile(std::span<const double>(v), gamma);
  };
  for (int l = 0; l < scores.n_layers(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    std::vector<std::vector<double>> groups(static_cast<std::size_t>(scores.n_modules[li]));
    for (Eigen::Index i = 0; i < scores.ffn[li].size(); ++i)
      groups[static_cast<std::size_t>(scores.module_of[li][static_cast<std::size_t>(i)])].push_back(scores.ffn[li](i));
    Vec tau(scores.n_modules[li]);
    for (std::size_t k = 0; k < groups.size(); ++k) tau(static_cast<Eigen::Index>(k)) = pick(groups[k]);
    t.ffn.push_back(tau);
    const Vec& h = scores.heads[li];
    t.attn(l) = pick(std::vector<double>(h.data(), h.data() + h.size()));
  }
  return t;
}

MaskSet ste_masks(const PruneScores& scores, const ThresholdSet& thresholds) {
  check_scores(scores, thresholds);
  MaskSet m;
  for (int l = 0; l < scores.n_layers(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    Vec f(scores.ffn[li].size());
    for (Eigen::Index i = 0; i < f.size(); ++i)
      f(i) = scores.ffn[li](i) - thresholds.ffn[li](scores.module_of[li][static_cast<std::size_t>(i)]) >= 0.0 ? 1.0 : 0.0;
    Vec h(scores.heads[li].size());
    for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = scores.heads[li](i) - thresholds.attn(l) >= 0.0 ? 1.0 : 0.0;
    m.ffn.push_back(std::move(f));
    m.heads.push_back(std::move(h));
  }
  return m;
}

MaskSet surrogate_masks(const PruneScores& scores, const ThresholdSet& thresholds, double t_ste) {
  check_scores(scores, thresholds);
  MaskSet m;
  for (int l = 0; l < scores.n_layers(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    Vec f(scores.ffn[li].size());
    for (Eigen::Index i = 0; i < f.size(); ++i)
      f(i) = sigmoid((scores.ffn[li](i) - thresholds.ffn[li](scores.module_of[li][static_cast<std::size_t>(i)])) / t_ste);
    Vec h(scores.heads[li].size());
    for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = sigmoid((scores.heads[li](i) - thresholds.attn(l)) / t_ste);
    m.ffn.push_back(std::move(f));
    m.heads.push_back(std::move(h));
  }
  return m;
}

double ste_dmask_dthreshold(double score, double threshold, double t_ste) {
  const double s = sigmoid((score - threshold) / t_ste);
  return -s * (1.0 - s) / t_ste;
}

ThresholdSet threshold_grad_from_masks(const PruneScores& scores, const ThresholdSet& thresholds,
                                       const MaskSet& mask_grads, double t_ste) {
  check_scores(scores, thresholds);
  ThresholdSet g;
  g.attn = Vec::Zero(thresholds.attn.size());
  for (int l = 0; l < scores.n_layers(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    Vec gk = Vec::Zero(thresholds.ffn[li].size());
    for (Eigen::Index i = 0; i < scores.ffn[li].size(); ++i) {
      const int k = scores.module_of[li][static_cast<std::size_t>(i)];
      gk(k) += mask_grads.ffn[li](i) * ste_dmask_dthreshold(scores.ffn[li](i), thresholds.ffn[li](k), t_ste);
    }
    g.ffn.push_back(std::move(gk));
    for (Eigen::Index h = 0; h < scores.heads[li].size(); ++h)
      g.attn(l) += mask_grads.heads[li](h) * ste_dmask_dthreshold(scores.heads[li](h), thresholds.attn(l), t_ste);
  }
  return g;
}

std::string to_string(RetentionMode m) { return m == RetentionMode::Parameters ? "parameters" : "structures"; }

RetentionMode parse_retention_mode(const std::string& s) {
  if (s == "parameters") return RetentionMode::Parameters;
  if (s == "structures") return RetentionMode::Structures;
  throw Error("unknown retention mode: " + s);
}

std::int64_t ffn_unit_weight(const ModelConfig& config, RetentionMode mode) {
  return mode == RetentionMode::Parameters ? 3LL * config.d_model : 1;
}

std::int64_t head_unit_weight(const ModelConfig& config, RetentionMode mode) {
  return mode == RetentionMode::Parameters ? 4LL * config.d_model * config.d_head() : 1;
}

double retention_estimate(const MaskSet& masks, const ModelConfig& config, RetentionMode mode) {
  masks.check_shape(config);
  const std::int64_t wf = ffn_unit_weight(config, mode);
  const std::int64_t wh = head_unit_weight(config, mode);
  if (masks.is_hard()) {
    std::int64_t kept = 0, total = 0;
    for (int l = 0; l < config.n_layers; ++l) {
      const auto li = static_cast<std::size_t>(l);
      kept += wf * static_cast<std::int64_t>(masks.ffn[li].sum()) + wh * static_cast<std::int64_t>(masks.heads[li].sum());
      total += wf * masks.ffn[li].size() + wh * masks.heads[li].size();
    }
    return total > 0 ? static_cast<double>(kept) / static_cast<double>(total) : 1.0;
  }
  double kept = 0.0, total = 0.0;
  for (int l = 0; l < config.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    kept += static_cast<double>(wf) * masks.ffn[li].sum() + static_cast<double>(wh) * masks.heads[li].sum();
    total += static_cast<double>(wf * masks.ffn[li].size() + wh * masks.heads[li].size());
  }
  return total > 0.0 ? kept / total : 1.0;
}

double constraint_loss(double retention, const DualState& dual) {
  const double g = retention - dual.target;
  return dual.lambda * g + 0.5 * dual.rho_pen * g * g;
}

void dual_update(DualState& dual, double g) {
  dual.lambda += dual.rho_lam * g;
  dual.history.push_back(g);
}

double soft_constraint_loss(const PruneScores& scores, const ThresholdSet& thresholds, const ModelConfig& config,
                            const DualState& dual, double t_ste, RetentionMode mode, ThresholdSet* grad) {
  const MaskSet soft = surrogate_masks(scores, thresholds, t_ste);
  const double r = retention_estimate(soft, config, mode);
  const double g = r - dual.target;
  if (grad) {
    double total = 0.0;
    for (int l = 0; l < config.n_layers; ++l)
      total += static_cast<double>(ffn_unit_weight(config, mode) * soft.ffn[static_cast<std::size_t>(l)].size() +
                                   head_unit_weight(config, mode) * soft.heads[static_cast<std::size_t>(l)].size());
    const double coef = (dual.lambda + dual.rho_pen * g) / total;
    MaskSet dm = soft;
    for (auto& v : dm.ffn) v.setConstant(coef * static_cast<double>(ffn_unit_weight(config, mode)));
    for (auto& v : dm.heads) v.setConstant(coef * static_cast<double>(head_unit_weight(config, mode)));
    *grad = threshold_grad_from_masks(scores, thresholds, dm, t_ste);
  }
  return dual.lambda * g + 0.5 * dual.rho_pen * g * g;
}

double perf_loss(const Mat& student, const Mat& teacher, std::span<const int> tokens, const PerfLossOptions& opts,
                 Mat* dstudent, double scale) {
  require_shape(student.rows() == teacher.rows() && student.cols() == teacher.cols() &&
                    student.rows() == static_cast<Eigen::Index>(tokens.size()),
                "perf_loss: student/teacher logits");
  const Eigen::Index T = student.rows();
  if (dstudent) *dstudent = Mat::Zero(student.rows(), student.cols());
  if (T < 2) return 0.0;
  const double inv = 1.0 / static_cast<double>(T - 1);
  const double a = opts.alpha;
  const double tk = opts.t_kd;
  double total = 0.0;
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const int y = tokens[static_cast<std::size_t>(t + 1)];
    const Vec q1 = softmax(student.row(t).transpose());
    const double ce = -std::log(q1(y));
    const Vec p = softmax((teacher.row(t) / tk).transpose());
    const Vec q = softmax((student.row(t) / tk).transpose());
    double kl = 0.0;
    for (Eigen::Index j = 0; j < p.size(); ++j)
      if (p(j) > 0.0) kl += p(j) * (std::log(p(j)) - std::log(q(j)));
    total += (1.0 - a) * ce + a * tk * tk * kl;
    if (dstudent) {
      Vec g = (1.0 - a) * q1 + a * tk * (q - p);
      g(y) -= (1.0 - a);
      dstudent->row(t) = g.transpose() * (scale * inv);
    }
  }
  return total * inv;
}

namespace {

Mat pack_grad(const ThresholdSet& g) { return g.pack().transpose(); }

ThresholdSet add(const ThresholdSet& a, const ThresholdSet& b) {
  ThresholdSet out = a;
  out.unpack(a.pack() + b.pack());
  return out;
}

}  // namespace

ThresholdTrainResult train_thresholds(const ModelWeights& w, const PruneScores& scores, const ThresholdSet& init,
                                      DualState dual, const Corpus& calibration, const ThresholdTrainOptions& opts) {
  if (calibration.empty()) throw Error("train_thresholds: empty calibration corpus");
  if (!(opts.t_ste > 0.0)) throw Error("train_thresholds: t_ste must be positive");
  const ModelConfig& c = w.config;
  ThresholdTrainResult result;
  result.thresholds = init;
  const MaskSet ones = MaskSet::ones(c);

  std::vector<Mat> teacher;
  teacher.reserve(calibration.size());
  for (const auto& seq : calibration) teacher.push_back(forward_masked(w, ones, seq, nullptr));

  const int batch = std::max(1, opts.batch_size);
  const auto n_batches = static_cast<std::int64_t>((calibration.size() + static_cast<std::size_t>(batch) - 1) /
                                                   static_cast<std::size_t>(batch));
  const auto total_steps = static_cast<std::int64_t>(std::ceil(opts.epochs * static_cast<double>(n_batches) - 1e-9));
  const auto max_steps =
      total_steps + static_cast<std::int64_t>(std::ceil(opts.max_extra_epochs * static_cast<double>(n_batches) - 1e-9));

  AdamState adam(opts.lr);
  Mat tau = result.thresholds.as_row();
  Gradients grads = Gradients::zeros(c);
  Tape tape;
  std::int64_t step = 0;
  bool epoch_within_tolerance = true;
  double g_last = retention_estimate(ste_masks(scores, result.thresholds), c, opts.retention_mode) - dual.target;
  while (step < total_steps || (std::abs(g_last) > opts.feasibility_tol && step < max_steps)) {
    const std::int64_t in_epoch = step % n_batches;
    if (in_epoch == 0) epoch_within_tolerance = true;

    const MaskSet masks = ste_masks(scores, result.thresholds);
    grads.set_zero();
    double perf = 0.0;
    const std::size_t first = static_cast<std::size_t>(in_epoch) * static_cast<std::size_t>(batch);
    const std::size_t last = std::min(calibration.size(), first + static_cast<std::size_t>(batch));
    const double inv = 1.0 / static_cast<double>(last - first);
    for (std::size_t s = first; s < last; ++s) {
      Mat logits = forward_masked(w, masks, calibration[s], &tape);
      Mat dlogits;
      perf += perf_loss(logits, teacher[s], calibration[s], opts.perf, &dlogits, inv) * inv;
      backward(w, tape, dlogits, grads, false);
    }
    const double r_hard = retention_estimate(masks, c, opts.retention_mode);
    const double g_hard = r_hard - dual.target;
    const double constr = constraint_loss(r_hard, dual);
    if (!std::isfinite(perf) || !std::isfinite(constr))
      throw ThresholdTrainingError("train_thresholds: non-finite loss at step " + std::to_string(step) +
                                   " (epoch " + std::to_string(step / n_batches) + ", lambda " +
                                   fmt_double(dual.lambda) + ", g " + fmt_double(g_hard) + ")");

    // STE: the constraint's value uses hard retention, its gradient the soft surrogate.
    ThresholdSet perf_grad = threshold_grad_from_masks(scores, result.thresholds, grads.masks, opts.t_ste);
    ThresholdSet constr_grad;
    DualState at_hard = dual;
    const MaskSet soft = surrogate_masks(scores, result.thresholds, opts.t_ste);
    const double r_soft = retention_estimate(soft, c, opts.retention_mode);
    at_hard.target = dual.target + (r_soft - r_hard);  // shifts g_soft to g_hard in the gradient coefficient
    soft_constraint_loss(scores, result.thresholds, c, at_hard, opts.t_ste, opts.retention_mode, &constr_grad);
    const Mat g_row = pack_grad(add(perf_grad, constr_grad));

    adam_step(tau, g_row, adam);
    result.thresholds.unpack(tau.row(0).transpose());

    const double r_new = retention_estimate(ste_masks(scores, result.thresholds), c, opts.retention_mode);
    g_last = r_new - dual.target;
    dual_update(dual, g_last);
    result.log.push_back({step, perf, constr, r_soft, r_hard, dual.lambda, g_last});
    if (std::abs(g_last) >= opts.early_stop_g) epoch_within_tolerance = false;

    ++step;
    if (step > total_steps) ++result.extra_steps;
    if (step % n_batches == 0) {
      ++result.epochs_run;
      if (epoch_within_tolerance && step < total_steps) {
        result.early_stopped = true;
        break;
      }
    }
  }
  if (step % n_batches != 0) ++result.epochs_run;
  result.steps = step;
  result.feasible = std::abs(g_last) <= opts.feasibility_tol;
  result.dual = dual;
  return result;
}

void write_threshold_log(std::ostream& out, const std::vector<ThresholdLogRow>& log) {
  out << "step,L_perf,L_constr,r_soft,r_hard,lambda_c,g\n";
  for (const auto& r : log)
    out << r.step << ',' << fmt_double(r.perf) << ',' << fmt_double(r.constr) << ',' << fmt_double(r.retention_soft)
        << ',' << fmt_double(r.retention_hard) << ',' << fmt_double(r.lambda) << ',' << fmt_double(r.g) << '\n';
}

}  // namespace gprune
