#include "gprune/calibstats.hpp"

#include <numeric>
#include <ostream>

#include "gprune/report_format.hpp"

namespace gprune {

void RunningStats::merge(const RunningStats& other) {
  require_shape(other.units() == units(), "running stats merge width");
  if (other.count == 0) return;
  if (count == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(count);
  const double nb = static_cast<double>(other.count);
  const double n = na + nb;
  const Vec delta = other.mean - mean;
  mean += delta * (nb / n);
  m2 += other.m2 + delta.cwiseProduct(delta) * (na * nb / n);
  mean_abs = (mean_abs * na + other.mean_abs * nb) / n;
  sumsq += other.sumsq;
  count += other.count;
}

Vec RunningStats::variance() const {
  if (count == 0) return Vec::Zero(units());
  return (m2 / static_cast<double>(count)).cwiseMax(0.0);
}

ActivationStats ActivationStats::empty(const ModelConfig& config) {
  ActivationStats s;
  for (int l = 0; l < config.n_layers; ++l)
    s.layers.push_back({RunningStats(config.ffn_width(l)), RunningStats(config.heads(l))});
  return s;
}

void ActivationStats::merge(const ActivationStats& other) {
  require_shape(layers.size() == other.layers.size(), "activation stats layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].ffn.merge(other.layers[l].ffn);
    layers[l].heads.merge(other.layers[l].heads);
  }
  token_count += other.token_count;
}

ActivationStats collect_stats(const ModelWeights& w, const Corpus& corpus) {
  return collect_stats(w, corpus, MaskSet::ones(w.config));
}

ActivationStats collect_stats(const ModelWeights& w, const Corpus& corpus, const MaskSet& masks) {
  if (corpus.empty()) throw Error("collect_stats: empty corpus");
  const ModelConfig& c = w.config;
  ActivationStats stats = ActivationStats::empty(c);
  const int dh = c.d_head();
  Tape tape;
  for (const auto& seq : corpus) {
    forward_masked(w, masks, seq, &tape);
    for (int l = 0; l < c.n_layers; ++l) {
      const LayerTape& lt = tape.layers[static_cast<std::size_t>(l)];
      auto& ls = stats.layers[static_cast<std::size_t>(l)];
      Vec head_norms(c.heads(l));
      for (Eigen::Index t = 0; t < lt.act.rows(); ++t) {
        ls.ffn.push(lt.act.row(t));
        for (int h = 0; h < c.heads(l); ++h) head_norms(h) = lt.head_out.row(t).segment(h * dh, dh).norm();
        ls.heads.push(head_norms);
      }
    }
    stats.token_count += static_cast<std::int64_t>(seq.size());
  }
  return stats;
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::WandaSp: return "wanda_sp";
    case Metric::Flap: return "flap";
    case Metric::WeightNorm: return "weight_norm";
  }
  return "unknown";
}

Metric parse_metric(const std::string& s) {
  if (s == "wanda_sp") return Metric::WandaSp;
  if (s == "flap") return Metric::Flap;
  if (s == "weight_norm") return Metric::WeightNorm;
  throw Error("unknown metric: " + s);
}

namespace {

void check_layer(const ModelWeights& w, int layer) {
  if (layer < 0 || layer >= w.config.n_layers) throw Error("layer index out of range: " + std::to_string(layer));
}

void check_stats(const ActivationStats& stats, const ModelWeights& w, int layer) {
  check_layer(w, layer);
  require_shape(stats.layers.size() == static_cast<std::size_t>(w.config.n_layers), "stats/model layer count");
  const auto& ls = stats.layers[static_cast<std::size_t>(layer)];
  require_shape(ls.ffn.units() == w.config.ffn_width(layer) && ls.heads.units() == w.config.heads(layer),
                "stats/model widths in layer " + std::to_string(layer));
}

}  // namespace

LayerScores score_wanda_sp(const ActivationStats& stats, const ModelWeights& w, int layer) {
  check_stats(stats, w, layer);
  const auto& ls = stats.layers[static_cast<std::size_t>(layer)];
  const LayerWeights& L = w.layers[static_cast<std::size_t>(layer)];
  const int dh = w.config.d_head();
  LayerScores out;
  out.ffn = ls.ffn.l2_norm().cwiseProduct(L.w_down.cwiseAbs().colwise().sum().transpose());
  const Vec head_l2 = ls.heads.l2_norm();
  out.heads.resize(head_l2.size());
  for (Eigen::Index h = 0; h < head_l2.size(); ++h)
    out.heads(h) = head_l2(h) * L.wo.middleCols(h * dh, dh).cwiseAbs().sum();
  return out;
}

LayerScores score_flap(const ActivationStats& stats, const ModelWeights& w, int layer) {
  check_stats(stats, w, layer);
  const auto& ls = stats.layers[static_cast<std::size_t>(layer)];
  const LayerWeights& L = w.layers[static_cast<std::size_t>(layer)];
  const int dh = w.config.d_head();
  LayerScores out;
  out.ffn = ls.ffn.variance().cwiseProduct(L.w_down.colwise().squaredNorm().transpose());
  const Vec head_var = ls.heads.variance();
  out.heads.resize(head_var.size());
  for (Eigen::Index h = 0; h < head_var.size(); ++h)
    out.heads(h) = head_var(h) * L.wo.middleCols(h * dh, dh).squaredNorm();
  return out;
}

LayerScores score_weight_norm(const ModelWeights& w, int layer) {
  check_layer(w, layer);
  const LayerWeights& L = w.layers[static_cast<std::size_t>(layer)];
  const int dh = w.config.d_head();
  LayerScores out;
  out.ffn = (L.w_gate.rowwise().squaredNorm() + L.w_up.rowwise().squaredNorm() +
             L.w_down.colwise().squaredNorm().transpose())
                .cwiseSqrt();
  const int H = w.config.heads(layer);
  out.heads.resize(H);
  for (int h = 0; h < H; ++h)
    out.heads(h) = std::sqrt(L.wq.middleRows(h * dh, dh).squaredNorm() + L.wk.middleRows(h * dh, dh).squaredNorm() +
                             L.wv.middleRows(h * dh, dh).squaredNorm() + L.wo.middleCols(h * dh, dh).squaredNorm());
  return out;
}

ScoreTable score_all(Metric metric, const ActivationStats* stats, const ModelWeights& w) {
  if (is_activation_based(metric) && !stats) throw Error("score_all: activation metric needs calibration stats");
  ScoreTable t;
  t.metric = metric;
  for (int l = 0; l < w.config.n_layers; ++l) {
    switch (metric) {
      case Metric::WandaSp: t.layers.push_back(score_wanda_sp(*stats, w, l)); break;
      case Metric::Flap: t.layers.push_back(score_flap(*stats, w, l)); break;
      case Metric::WeightNorm: t.layers.push_back(score_weight_norm(w, l)); break;
    }
  }
  return t;
}

RankVector within_layer_ranks(const Vec& scores) {
  const auto n = static_cast<std::size_t>(scores.size());
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(scores(static_cast<Eigen::Index>(i)))) throw Error("within_layer_ranks: non-finite score");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  RankVector ranks(n);
  for (std::size_t pos = 0; pos < n; ++pos) ranks[static_cast<std::size_t>(order[pos])] = static_cast<int>(pos) + 1;
  return ranks;
}

Vec rank_drift(const RankVector& ranks_a, const RankVector& ranks_b) {
  require_shape(ranks_a.size() == ranks_b.size(), "rank_drift: rank vectors differ in length");
  const auto n = ranks_a.size();
  if (n < 2) throw Error("rank_drift: needs at least two units");
  Vec d(static_cast<Eigen::Index>(n));
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) d(static_cast<Eigen::Index>(i)) = std::abs(ranks_a[i] - ranks_b[i]) / denom;
  return d;
}

std::vector<LayerDrift> drift_between(const ScoreTable& a, const ScoreTable& b) {
  require_shape(a.layers.size() == b.layers.size(), "drift_between: layer count");
  std::vector<LayerDrift> out;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    LayerDrift d;
    const auto& la = a.layers[l];
    const auto& lb = b.layers[l];
    d.ffn = la.ffn.size() >= 2 ? rank_drift(within_layer_ranks(la.ffn), within_layer_ranks(lb.ffn))
                               : Vec::Zero(la.ffn.size());
    d.heads = la.heads.size() >= 2 ? rank_drift(within_layer_ranks(la.heads), within_layer_ranks(lb.heads))
                                   : Vec::Zero(la.heads.size());
    out.push_back(std::move(d));
  }
  return out;
}

void write_unit_csv(std::ostream& out, const ScoreTable& scores, const std::vector<LayerDrift>& drifts) {
  require_shape(drifts.size() == scores.layers.size(), "unit csv: drift layers");
  out << "layer,unit_type,index,score,rank,drift\n";
  for (std::size_t l = 0; l < scores.layers.size(); ++l) {
    const auto emit = [&](const char* type, const Vec& s, const Vec& d) {
      const RankVector r = within_layer_ranks(s);
      for (Eigen::Index i = 0; i < s.size(); ++i)
        out << l << ',' << type << ',' << i << ',' << fmt_double(s(i)) << ',' << r[static_cast<std::size_t>(i)] << ','
            << fmt_double(d(i)) << '\n';
    };
    emit("ffn", scores.layers[l].ffn, drifts[l].ffn);
    emit("head", scores.layers[l].heads, drifts[l].heads);
  }
}

}  // namespace gprune
