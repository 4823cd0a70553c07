#include "gprune/prune_export.hpp"

#include <ostream>

#include "gprune/report_format.hpp"

namespace gprune {

HardenResult harden(const PruneScores& scores, const ThresholdSet& thresholds) {
  HardenResult r;
  r.masks = ste_masks(scores, thresholds);
  auto guard = [](Vec& m, const Vec& s) {
    if (m.size() == 0 || m.sum() > 0.0) return false;
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < s.size(); ++i)
      if (s(i) > s(best)) best = i;
    m(best) = 1.0;
    return true;
  };
  for (int l = 0; l < scores.n_layers(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    if (guard(r.masks.ffn[li], scores.ffn[li])) r.guarded_ffn_layers.push_back(l);
    if (guard(r.masks.heads[li], scores.heads[li])) r.guarded_head_layers.push_back(l);
  }
  return r;
}

namespace {

std::vector<int> kept(const Vec& m, std::vector<int>& new_index) {
  std::vector<int> keep;
  new_index.assign(static_cast<std::size_t>(m.size()), -1);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (m(i) == 1.0) {
      new_index[static_cast<std::size_t>(i)] = static_cast<int>(keep.size());
      keep.push_back(static_cast<int>(i));
    }
  return keep;
}

Mat take_rows(const Mat& m, const std::vector<int>& rows, int block) {
  Mat out(static_cast<Eigen::Index>(rows.size()) * block, m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.middleRows(static_cast<Eigen::Index>(r) * block, block) = m.middleRows(static_cast<Eigen::Index>(rows[r]) * block, block);
  return out;
}

Mat take_cols(const Mat& m, const std::vector<int>& cols, int block) {
  Mat out(m.rows(), static_cast<Eigen::Index>(cols.size()) * block);
  for (std::size_t c = 0; c < cols.size(); ++c)
    out.middleCols(static_cast<Eigen::Index>(c) * block, block) = m.middleCols(static_cast<Eigen::Index>(cols[c]) * block, block);
  return out;
}

}  // namespace

PrunePlan make_plan(const MaskSet& hard_masks, const ModelConfig& config) {
  hard_masks.check_shape(config);
  if (!hard_masks.is_hard()) throw Error("apply_prune: masks must be hard {0,1}");
  const std::int64_t d = config.d_model;
  const std::int64_t per_neuron = 3 * d;
  const std::int64_t per_head = 4 * d * config.d_head();
  PrunePlan plan;
  std::int64_t fixed = 2LL * config.vocab_size * d + static_cast<std::int64_t>(config.max_seq_len) * d + d;
  for (int l = 0; l < config.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    LayerPlan lp;
    lp.ffn_keep = kept(hard_masks.ffn[li], lp.ffn_new_index);
    lp.head_keep = kept(hard_masks.heads[li], lp.head_new_index);
    lp.params_before = per_neuron * config.ffn_width(l) + per_head * config.heads(l);
    lp.params_after = per_neuron * static_cast<std::int64_t>(lp.ffn_keep.size()) +
                      per_head * static_cast<std::int64_t>(lp.head_keep.size());
    plan.params_before += lp.params_before;
    plan.params_after += lp.params_after;
    fixed += 2 * d;  // norm gains
    plan.layers.push_back(std::move(lp));
  }
  plan.total_params_after = fixed + plan.params_after;
  return plan;
}

ModelWeights apply_prune(const ModelWeights& w, const MaskSet& hard_masks, PrunePlan* plan_out) {
  PrunePlan plan = make_plan(hard_masks, w.config);
  ModelWeights out = w;
  const int dh = w.config.d_head();
  for (int l = 0; l < w.config.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const LayerPlan& lp = plan.layers[li];
    const LayerWeights& src = w.layers[li];
    LayerWeights& dst = out.layers[li];
    dst.w_gate = take_rows(src.w_gate, lp.ffn_keep, 1);
    dst.w_up = take_rows(src.w_up, lp.ffn_keep, 1);
    dst.w_down = take_cols(src.w_down, lp.ffn_keep, 1);
    dst.wq = take_rows(src.wq, lp.head_keep, dh);
    dst.wk = take_rows(src.wk, lp.head_keep, dh);
    dst.wv = take_rows(src.wv, lp.head_keep, dh);
    dst.wo = take_cols(src.wo, lp.head_keep, dh);
    out.config.ffn_widths[li] = static_cast<int>(lp.ffn_keep.size());
    out.config.head_counts[li] = static_cast<int>(lp.head_keep.size());
  }
  out.touch();
  if (plan_out) *plan_out = std::move(plan);
  return out;
}

ModelBundle apply_prune(const ModelBundle& bundle, const MaskSet& hard_masks, PrunePlan* plan) {
  ModelBundle out;
  out.weights = apply_prune(bundle.weights, hard_masks, plan);
  out.vocab = bundle.vocab;
  out.extras = bundle.extras;
  return out;
}

double retention_actual(const PrunePlan& plan, const ModelConfig& original) {
  require_shape(plan.layers.size() == static_cast<std::size_t>(original.n_layers), "plan layer count");
  const std::int64_t d = original.d_model;
  std::int64_t before = 0, after = 0;
  for (int l = 0; l < original.n_layers; ++l) {
    const LayerPlan& lp = plan.layers[static_cast<std::size_t>(l)];
    before += 3 * d * original.ffn_width(l) + 4 * d * original.d_head() * original.heads(l);
    after += 3 * d * static_cast<std::int64_t>(lp.ffn_keep.size()) +
             4 * d * original.d_head() * static_cast<std::int64_t>(lp.head_keep.size());
  }
  return before > 0 ? static_cast<double>(after) / static_cast<double>(before) : 1.0;
}

void write_plan(std::ostream& out, const PrunePlan& plan) {
  auto list = [&](const std::vector<int>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
    out << '\n';
  };
  out << "prune_plan.layers = " << plan.layers.size() << '\n';
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    const LayerPlan& lp = plan.layers[l];
    out << "layer." << l << ".ffn_kept = " << lp.ffn_keep.size() << " of " << lp.ffn_new_index.size() << '\n';
    out << "layer." << l << ".ffn_indices = ";
    list(lp.ffn_keep);
    out << "layer." << l << ".heads_kept = " << lp.head_keep.size() << " of " << lp.head_new_index.size() << '\n';
    out << "layer." << l << ".head_indices = ";
    list(lp.head_keep);
    out << "layer." << l << ".params_before = " << lp.params_before << '\n';
    out << "layer." << l << ".params_after = " << lp.params_after << '\n';
  }
  out << "prunable_params_before = " << plan.params_before << '\n';
  out << "prunable_params_after = " << plan.params_after << '\n';
  out << "total_params_after = " << plan.total_params_after << '\n';
  out << "retention = "
      << fmt_double(plan.params_before > 0
                        ? static_cast<double>(plan.params_after) / static_cast<double>(plan.params_before)
                        : 1.0)
      << '\n';
}

}  // namespace gprune
