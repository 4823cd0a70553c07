#include "gprune/analysis.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "gprune/report_format.hpp"

namespace gprune {

double kendall_tau(std::span<const double> a, std::span<const double> b) {
  require_shape(a.size() == b.size(), "kendall_tau: length mismatch");
  if (a.size() < 2) throw Error("kendall_tau: need at least two items");
  std::int64_t concordant = 0, discordant = 0, ties_a = 0, ties_b = 0, pairs = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      ++pairs;
      const double da = a[i] - a[j];
      const double db = b[i] - b[j];
      if (da == 0.0) ++ties_a;
      if (db == 0.0) ++ties_b;
      if (da == 0.0 || db == 0.0) continue;
      if ((da > 0.0) == (db > 0.0))
        ++concordant;
      else
        ++discordant;
    }
  const double denom = std::sqrt(static_cast<double>(pairs - ties_a) * static_cast<double>(pairs - ties_b));
  if (denom == 0.0) throw Error("kendall_tau: undefined for a constant input");
  return static_cast<double>(concordant - discordant) / denom;
}

double kendall_tau(const RankVector& a, const RankVector& b) {
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  return kendall_tau(std::span<const double>(x), std::span<const double>(y));
}

double mss(const std::vector<int>& assignment, int k, const Vec& drifts) {
  require_shape(assignment.size() == static_cast<std::size_t>(drifts.size()), "mss: assignment/drift length");
  if (k < 2) throw Error("mss: need at least two modules");
  std::vector<std::vector<double>> groups(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < assignment.size(); ++i) groups.at(static_cast<std::size_t>(assignment[i])).push_back(drifts(static_cast<Eigen::Index>(i)));
  std::vector<double> mu, sigma;
  for (std::size_t m = 0; m < groups.size(); ++m) {
    if (groups[m].empty()) throw Error("mss: module " + std::to_string(m) + " is empty");
    mu.push_back(mean(groups[m]));
    sigma.push_back(population_std(groups[m]));
  }
  const double within = mean(sigma);
  if (within == 0.0) throw UndefinedMssError("mss: every module has zero drift spread");
  return population_std(mu) / within;
}

std::vector<int> max_weight_matching(const Mat& weights) {
  require_shape(weights.rows() == weights.cols(), "matching needs a square matrix");
  const int n = static_cast<int>(weights.rows());
  if (n == 0) return {};
  const double big = weights.maxCoeff();
  // Shortest augmenting path (Hungarian) on cost = big - weight, 1-based potentials.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  auto cost = [&](int i, int j) { return big - weights(i - 1, j - 1); };
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0, j) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

OverlapResult module_overlap(const std::vector<int>& a, int k_a, const std::vector<int>& b, int k_b) {
  if (a.size() != b.size()) throw Error("module_overlap: partitions cover different neuron sets");
  if (a.empty()) throw Error("module_overlap: empty partitions");
  const int m = std::max(k_a, k_b);
  OverlapResult r;
  r.padded = k_a != k_b;
  r.intersections = Mat::Zero(m, m);
  Vec size_a = Vec::Zero(m), size_b = Vec::Zero(m);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < 0 || a[i] >= k_a || b[i] < 0 || b[i] >= k_b) throw Error("module_overlap: module id out of range");
    r.intersections(a[i], b[i]) += 1.0;
    size_a(a[i]) += 1.0;
    size_b(b[i]) += 1.0;
  }
  r.pairing = max_weight_matching(r.intersections);
  r.pairing.resize(static_cast<std::size_t>(k_a));
  double matched = 0.0, iou_sum = 0.0;
  for (int i = 0; i < k_a; ++i) {
    const int j = r.pairing[static_cast<std::size_t>(i)];
    const double inter = r.intersections(i, j);
    matched += inter;
    if (size_a(i) == 0.0) continue;
    iou_sum += inter / (size_a(i) + size_b(j) - inter);
    ++r.iou_pairs;
  }
  r.accuracy = matched / static_cast<double>(a.size());
  r.iou = r.iou_pairs > 0 ? iou_sum / r.iou_pairs : 0.0;
  return r;
}

void write_partitions(std::ostream& out, const std::vector<StoredPartition>& parts) {
  for (const auto& p : parts) {
    out << "layer " << p.layer << " k " << p.k << '\n';
    for (std::size_t i = 0; i < p.assignment.size(); ++i) out << (i ? " " : "") << p.assignment[i];
    out << '\n';
  }
}

std::vector<StoredPartition> read_partitions(std::istream& in) {
  std::vector<StoredPartition> parts;
  std::string header;
  while (std::getline(in, header)) {
    if (header.empty()) continue;
    StoredPartition p;
    std::string w1, w2;
    std::istringstream hs(header);
    if (!(hs >> w1 >> p.layer >> w2 >> p.k) || w1 != "layer" || w2 != "k")
      throw IoError("partition file: bad header line '" + header + "'");
    std::string line;
    if (!std::getline(in, line)) throw IoError("partition file: missing assignment for layer " + std::to_string(p.layer));
    std::istringstream ls(line);
    int v = 0;
    while (ls >> v) {
      if (v < 0 || v >= p.k) throw IoError("partition file: module id out of range");
      p.assignment.push_back(v);
    }
    parts.push_back(std::move(p));
  }
  return parts;
}

namespace {

std::ofstream open_report(const std::string& dir, const std::string& name, const std::string& hash) {
  const std::string path = (std::filesystem::path(dir) / name).string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "# config_hash = " << hash << '\n';
  return out;
}

void finish(std::ofstream& out, const std::string& name) {
  out.flush();
  if (!out) throw IoError("write failed: " + name);
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

void emit_report(const RunReport& report, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir + ": " + ec.message());

  {
    auto out = open_report(dir, "units.csv", report.config_hash);
    out << "layer,unit_type,index,score_primary,rank_primary,score_auxiliary,rank_auxiliary,drift,module\n";
    for (std::size_t l = 0; l < report.layers.size(); ++l) {
      const LayerReport& lr = report.layers[l];
      auto emit = [&](const char* type, const Vec& sa, const Vec& sb, const Vec& d, const std::vector<int>* module) {
        const RankVector ra = within_layer_ranks(sa);
        const RankVector rb = sb.size() ? within_layer_ranks(sb) : RankVector{};
        for (Eigen::Index i = 0; i < sa.size(); ++i) {
          const auto ui = static_cast<std::size_t>(i);
          out << l << ',' << type << ',' << i << ',' << fmt_double(sa(i)) << ',' << ra[ui] << ',';
          if (sb.size())
            out << fmt_double(sb(i)) << ',' << rb[ui] << ',';
          else
            out << ",,";
          out << fmt_double(d.size() ? d(i) : 0.0) << ',';
          if (module) out << (*module)[ui];
          out << '\n';
        }
      };
      emit("ffn", lr.scores_a.ffn, lr.scores_b.ffn, lr.drift.ffn, lr.partition ? &lr.partition->assignment : nullptr);
      emit("head", lr.scores_a.heads, lr.scores_b.heads, lr.drift.heads, nullptr);
    }
    finish(out, "units.csv");
  }

  {
    auto out = open_report(dir, "modules.csv", report.config_hash);
    out << "layer,module,size,mean_drift,std_drift,mean_act,metric,threshold\n";
    for (std::size_t l = 0; l < report.layers.size(); ++l) {
      const LayerReport& lr = report.layers[l];
      if (!lr.partition) continue;
      const ModulePartition& p = *lr.partition;
      const auto members = p.members();
      for (int k = 0; k < p.k; ++k) {
        std::vector<double> d;
        for (int i : members[static_cast<std::size_t>(k)]) d.push_back(lr.drift.ffn(i));
        out << l << ',' << k << ',' << d.size() << ',' << fmt_double(d.empty() ? 0.0 : mean(d)) << ','
            << fmt_double(d.empty() ? 0.0 : population_std(d)) << ',';
        if (lr.adapted) {
          const auto& a = lr.adapted->assignment;
          out << fmt_double(a.mean_act(k)) << ','
              << (a.tags[static_cast<std::size_t>(k)] == MetricChoice::ActivationIndependent ? "independent" : "activation");
        } else {
          out << ',';
        }
        out << ',' << (k < lr.ffn_thresholds.size() ? fmt_double(lr.ffn_thresholds(k)) : std::string()) << '\n';
      }
    }
    finish(out, "modules.csv");
  }

  {
    auto out = open_report(dir, "kendall.csv", report.config_hash);
    out << "layer,unit_type,kendall_tau\n";
    for (std::size_t l = 0; l < report.layers.size(); ++l) {
      const LayerReport& lr = report.layers[l];
      auto emit = [&](const char* type, const Vec& sa, const Vec& sb) {
        if (sb.size() == 0 || sa.size() < 2) return;
        out << l << ',' << type << ',' << fmt_double(kendall_tau(within_layer_ranks(sa), within_layer_ranks(sb))) << '\n';
      };
      emit("ffn", lr.scores_a.ffn, lr.scores_b.ffn);
      emit("head", lr.scores_a.heads, lr.scores_b.heads);
    }
    finish(out, "kendall.csv");
  }

  {
    auto out = open_report(dir, "mss.csv", report.config_hash);
    out << "layer,k,mss,status\n";
    for (std::size_t l = 0; l < report.layers.size(); ++l) {
      const LayerReport& lr = report.layers[l];
      if (!lr.partition) continue;
      out << l << ',' << lr.partition->k << ',';
      try {
        out << fmt_double(mss(*lr.partition, lr.drift.ffn)) << ",ok\n";
      } catch (const UndefinedMssError&) {
        out << ",zero_within_spread\n";
      } catch (const Error&) {
        out << ",undefined\n";
      }
    }
    finish(out, "mss.csv");
  }

  {
    auto out = open_report(dir, "summary.txt", report.config_hash);
    out << "mode = " << report.mode << '\n';
    out << "metric = " << report.metric << '\n';
    out << "target_retention = " << fmt_double(report.target) << '\n';
    out << "retention_estimate = " << fmt_double(report.retention_estimate) << '\n';
    out << "retention_actual = " << fmt_double(report.retention_actual) << '\n';
    out << "prunable_params_before = " << report.params_before << '\n';
    out << "prunable_params_after = " << report.params_after << '\n';
    out << "threshold_epochs = " << report.threshold_epochs << '\n';
    out << "threshold_steps = " << report.threshold_steps << '\n';
    out << "extra_steps = " << report.extra_steps << '\n';
    out << "early_stopped = " << (report.early_stopped ? "true" : "false") << '\n';
    out << "feasible = " << (report.feasible ? "true" : "false") << '\n';
    out << "lambda = " << fmt_double(report.lambda) << '\n';
    out << "guard_ffn_layers = " << join_ints(report.guarded_ffn_layers) << '\n';
    out << "guard_head_layers = " << join_ints(report.guarded_head_layers) << '\n';
    out << "teacher_ppl = " << fmt_double(report.teacher_ppl) << '\n';
    out << "pruned_ppl = " << fmt_double(report.pruned_ppl) << '\n';
    for (std::size_t l = 0; l < report.layers.size(); ++l) {
      const LayerReport& lr = report.layers[l];
      const std::string p = "layer." + std::to_string(l) + ".";
      out << p << "ffn_kept = " << lr.ffn_kept << '\n';
      out << p << "heads_kept = " << lr.heads_kept << '\n';
      out << p << "attn_threshold = " << fmt_double(lr.attn_threshold) << '\n';
      if (lr.partition) {
        out << p << "initial_k = " << lr.initial_k << '\n';
        out << p << "splits = " << lr.n_splits << '\n';
        out << p << "modules = " << lr.partition->k << '\n';
        out << p << "bcdm_initial = " << fmt_double(lr.bcdm_initial) << '\n';
        out << p << "bcdm_final = " << fmt_double(lr.bcdm_final) << '\n';
        out << p << "silhouette =";
        for (std::size_t i = 0; i < lr.silhouette_scores.size(); ++i)
          out << ' ' << fmt_double(lr.silhouette_candidates[i]) << ':' << fmt_double(lr.silhouette_scores[i]);
        out << '\n';
      }
      if (lr.adapted) out << p << "switched_modules = " << lr.adapted->assignment.switched() << '\n';
    }
    finish(out, "summary.txt");
  }
}

void write_overlap_csv(std::ostream& out, const std::vector<OverlapRow>& rows) {
  out << "run_a,run_b,layer,k_a,k_b,matched_accuracy,matched_iou,padded\n";
  for (const auto& r : rows)
    out << r.run_a << ',' << r.run_b << ',' << r.layer << ',' << r.k_a << ',' << r.k_b << ','
        << fmt_double(r.result.accuracy) << ',' << fmt_double(r.result.iou) << ',' << (r.result.padded ? 1 : 0) << '\n';
}

}  // namespace gprune
