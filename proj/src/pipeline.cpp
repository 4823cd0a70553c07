#include "gprune/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "gprune/report_format.hpp"

namespace fs = std::filesystem;

namespace gprune {

namespace {

int corpus_vocab(const CorpusSpec& spec) {
  return spec.source == CorpusSource::TextFile ? spec.vocab_size : kSyntheticVocab;
}

void check_tokens(const Corpus& corpus, const ModelConfig& config, const std::string& name) {
  for (const auto& seq : corpus) {
    if (seq.size() > static_cast<std::size_t>(config.max_seq_len))
      throw Error(name + " corpus: sequence length " + std::to_string(seq.size()) + " exceeds model max_seq_len " +
                  std::to_string(config.max_seq_len));
    for (int t : seq)
      if (t < 0 || t >= config.vocab_size) throw Error(name + " corpus: token outside model vocabulary");
  }
}

template <typename F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Files are produced in a staging directory and moved into place only after every stage succeeded.
class Staging {
 public:
  explicit Staging(const fs::path& out) : out_(out), dir_(out / ".staging") {
    fs::create_directories(out_);
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Staging() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  const fs::path& dir() const { return dir_; }
  void commit() {
    for (const auto& entry : fs::directory_iterator(dir_)) fs::rename(entry.path(), out_ / entry.path().filename());
  }

 private:
  fs::path out_;
  fs::path dir_;
};

std::string pretrain_key(const RunConfig& c) {
  RunConfig k = RunConfig::desk();
  k.seed = c.seed;
  k.n_layers = c.n_layers;
  k.d_model = c.d_model;
  k.d_ffn = c.d_ffn;
  k.n_heads = c.n_heads;
  k.max_seq_len = c.max_seq_len;
  k.train_steps = c.train_steps;
  k.train_lr = c.train_lr;
  k.train_batch_size = c.train_batch_size;
  k.train_clip_norm = c.train_clip_norm;
  k.pretrain_corpus = c.pretrain_corpus;
  return serialize_config(k);
}

std::uint64_t layer_seed(std::uint64_t seed, int layer) {
  return splitmix64(splitmix64(seed) + static_cast<std::uint64_t>(layer) + 1);
}

}  // namespace

ModelConfig model_config_for(const RunConfig& c) {
  return make_config(c.n_layers, c.d_model, c.d_ffn, c.n_heads, corpus_vocab(c.pretrain_corpus), c.max_seq_len);
}

std::vector<std::string> vocabulary_for(const CorpusSpec& spec) {
  return spec.source == CorpusSource::TextFile ? byte_vocabulary(spec.vocab_size) : synthetic_vocabulary();
}

PretrainResult pretrain(const RunConfig& c) {
  const ModelConfig config = model_config_for(c);
  const Corpus corpus = gen_corpus(c.pretrain_corpus);
  check_tokens(corpus, config, "pretrain");
  TrainOptions opts;
  opts.steps = c.train_steps;
  opts.lr = c.train_lr;
  opts.batch_size = c.train_batch_size;
  opts.clip_norm = c.train_clip_norm;
  opts.seed = c.seed;
  PretrainResult r;
  r.bundle.weights = train_toy(config, corpus, opts, &r.log);
  r.bundle.vocab = vocabulary_for(c.pretrain_corpus);
  return r;
}

PruneRun prune_model(const ModelBundle& bundle, const RunConfig& c) {
  run_stage("config", [&] { c.validate(); });
  const ModelWeights& w = bundle.weights;
  const ModelConfig& mc = w.config;
  const bool gprune = c.mode == PruneMode::GPrune;
  const int L = mc.n_layers;

  Corpus primary, auxiliary;
  ActivationStats stats_a, stats_b;
  run_stage("calibration", [&] {
    primary = gen_corpus(c.primary);
    check_tokens(primary, mc, "primary");
    stats_a = collect_stats(w, primary);
    if (c.has_auxiliary) {
      auxiliary = gen_corpus(c.auxiliary);
      check_tokens(auxiliary, mc, "auxiliary");
      stats_b = collect_stats(w, auxiliary);
    }
  });

  ScoreTable base_a, base_b, independent;
  std::vector<LayerDrift> drift;
  run_stage("scoring", [&] {
    base_a = score_all(c.metric, &stats_a, w);
    independent = score_all(Metric::WeightNorm, nullptr, w);
    if (c.has_auxiliary) {
      base_b = score_all(c.metric, &stats_b, w);
      drift = drift_between(base_a, base_b);
    } else {
      for (int l = 0; l < L; ++l)
        drift.push_back({Vec::Zero(mc.ffn_width(l)), Vec::Zero(mc.heads(l))});
    }
  });

  PruneRun run;
  RunReport& rep = run.report;
  rep.config_hash = config_hash(c);
  rep.mode = to_string(c.mode);
  rep.metric = to_string(c.metric);
  rep.target = c.target_retention;
  rep.layers.resize(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    auto& lr = rep.layers[static_cast<std::size_t>(l)];
    lr.scores_a = base_a.layers[static_cast<std::size_t>(l)];
    if (c.has_auxiliary) lr.scores_b = base_b.layers[static_cast<std::size_t>(l)];
    lr.drift = drift[static_cast<std::size_t>(l)];
  }

  PruneScores ps;
  std::vector<ModulePartition> parts(static_cast<std::size_t>(L));
  if (gprune) {
    run_stage("modularization", [&] {
      for (int l = 0; l < L; ++l) {
        const auto li = static_cast<std::size_t>(l);
        BcmHyper hyper = c.bcm;
        hyper.seed = layer_seed(c.seed, l);
        const Mat x = neuron_features(w, l).x;
        ModularizationInfo info;
        parts[li] = modularize_layer(x, drift[li].ffn, hyper, &info);
        auto& lr = rep.layers[li];
        lr.partition = parts[li];
        lr.initial_k = info.initial_k;
        lr.n_splits = info.n_splits;
        lr.silhouette_candidates.assign(info.selection.candidates.begin(), info.selection.candidates.end());
        lr.silhouette_scores = info.selection.scores;
        lr.bcdm_initial = info.trace.losses.empty() ? 0.0 : info.trace.losses.front().total;
        lr.bcdm_final = info.trace.losses.empty() ? 0.0 : info.trace.losses.back().total;
        run.partitions.push_back({l, parts[li].k, parts[li].assignment});
      }
    });
    run_stage("metric adaptation", [&] {
      std::vector<ModuleStats> stats;
      std::vector<double> all_drift, all_act;
      for (int l = 0; l < L; ++l) {
        const auto li = static_cast<std::size_t>(l);
        stats.push_back(module_stats(parts[li], drift[li].ffn, base_a.layers[li].ffn));
        all_drift.insert(all_drift.end(), stats.back().mean_drift.data(),
                         stats.back().mean_drift.data() + stats.back().mean_drift.size());
        all_act.insert(all_act.end(), stats.back().mean_act.data(), stats.back().mean_act.data() + stats.back().mean_act.size());
      }
      for (int l = 0; l < L; ++l) {
        const auto li = static_cast<std::size_t>(l);
        double dd, ds;
        if (c.rmp.quantile_scope == QuantileScope::Global) {
          dd = quantile(std::span<const double>(all_drift), c.rmp.gamma_drift);
          ds = quantile(std::span<const double>(all_act), c.rmp.gamma_score);
        } else {
          dd = quantile(stats[li].mean_drift, c.rmp.gamma_drift);
          ds = quantile(stats[li].mean_act, c.rmp.gamma_score);
        }
        AdaptedLayer a = adapt_metrics_with(parts[li], stats[li], base_a.layers[li].ffn, independent.layers[li].ffn, dd, ds);
        ps.ffn.push_back(a.normalized);
        ps.module_of.push_back(parts[li].assignment);
        ps.n_modules.push_back(parts[li].k);
        rep.layers[li].adapted = std::move(a);
      }
    });
  } else {
    for (int l = 0; l < L; ++l) {
      const auto li = static_cast<std::size_t>(l);
      std::vector<int> one(static_cast<std::size_t>(mc.ffn_width(l)), 0);
      ps.ffn.push_back(normalize_per_module(base_a.layers[li].ffn, one, 1));
      ps.module_of.push_back(std::move(one));
      ps.n_modules.push_back(1);
    }
  }
  for (int l = 0; l < L; ++l) {
    std::vector<int> one(static_cast<std::size_t>(mc.heads(l)), 0);
    ps.heads.push_back(normalize_per_module(base_a.layers[static_cast<std::size_t>(l)].heads, one, 1));
  }

  ThresholdSet thresholds;
  run_stage("threshold training", [&] {
    thresholds = init_thresholds(ps, c.target_retention);
    if (!gprune) return;
    DualState dual;
    dual.rho_pen = c.rmp.rho_pen;
    dual.rho_lam = c.rmp.rho_lam;
    dual.target = c.target_retention;
    ThresholdTrainOptions opts;
    opts.epochs = c.rmp.epochs;
    opts.lr = c.rmp.lr;
    opts.batch_size = c.rmp.batch_size;
    opts.t_ste = c.rmp.t_ste;
    opts.perf = {c.rmp.alpha, c.rmp.t_kd};
    opts.retention_mode = c.rmp.retention_mode;
    opts.early_stop_g = c.rmp.early_stop_g;
    opts.feasibility_tol = c.rmp.feasibility_tol;
    opts.max_extra_epochs = c.rmp.max_extra_epochs;
    ThresholdTrainResult tr = train_thresholds(w, ps, thresholds, dual, primary, opts);
    thresholds = tr.thresholds;
    run.threshold_log = std::move(tr.log);
    rep.threshold_epochs = tr.epochs_run;
    rep.early_stopped = tr.early_stopped;
    rep.threshold_steps = tr.steps;
    rep.extra_steps = tr.extra_steps;
    rep.feasible = tr.feasible;
    rep.lambda = tr.dual.lambda;
  });

  run_stage("export", [&] {
    HardenResult hard = harden(ps, thresholds);
    run.masks = hard.masks;
    rep.guarded_ffn_layers = hard.guarded_ffn_layers;
    rep.guarded_head_layers = hard.guarded_head_layers;
    run.pruned = apply_prune(bundle, run.masks, &run.plan);
    Mat attn(1, L);
    for (int l = 0; l < L; ++l) {
      const auto li = static_cast<std::size_t>(l);
      attn(0, l) = thresholds.attn(l);
      run.pruned.extras["thresholds.ffn." + std::to_string(l)] = thresholds.ffn[li].transpose();
      auto& lr = rep.layers[li];
      lr.ffn_thresholds = thresholds.ffn[li];
      lr.attn_threshold = thresholds.attn(l);
      lr.ffn_kept = static_cast<int>(run.plan.layers[li].ffn_keep.size());
      lr.heads_kept = static_cast<int>(run.plan.layers[li].head_keep.size());
    }
    run.pruned.extras["thresholds.attn"] = attn;
    rep.retention_actual = retention_actual(run.plan, mc);
    rep.retention_estimate = retention_estimate(run.masks, mc, RetentionMode::Parameters);
    rep.params_before = run.plan.params_before;
    rep.params_after = run.plan.params_after;
  });

  run_stage("evaluation", [&] {
    const Corpus eval = gen_corpus(c.eval_corpus);
    check_tokens(eval, mc, "eval");
    rep.teacher_ppl = perplexity(w, MaskSet::ones(mc), eval);
    rep.pruned_ppl = perplexity(run.pruned.weights, MaskSet::ones(run.pruned.weights.config), eval);
  });
  return run;
}

void cmd_pretrain(const RunConfig& c, const std::string& out_dir) {
  const fs::path out(out_dir);
  const fs::path ckpt = out / "model.ckpt";
  const fs::path cfg = out / "config.txt";
  if (fs::exists(ckpt)) {
    if (!fs::exists(cfg)) throw StageError("pretrain", ckpt.string() + " exists without config.txt; refusing to overwrite");
    const RunConfig stored = parse_config(read_file(cfg), RunConfig::desk());
    if (pretrain_key(stored) != pretrain_key(c))
      throw StageError("pretrain", "existing checkpoint " + ckpt.string() + " was trained with a different configuration");
    return;
  }
  PretrainResult r = run_stage("pretrain", [&] { return pretrain(c); });
  run_stage("write", [&] {
    Staging staging(out);
    checkpoint_save(r.bundle, (staging.dir() / "model.ckpt").string());
    std::ostringstream log;
    log << "# config_hash = " << config_hash(c) << "\nstep,loss\n";
    for (const auto& row : r.log) log << row.step << ',' << fmt_double(row.loss) << '\n';
    write_file(staging.dir() / "train_log.csv", log.str());
    write_file(staging.dir() / "config.txt", serialize_config(c));
    staging.commit();
  });
}

PruneRun cmd_prune(const RunConfig& c, const std::string& out_dir) {
  if (c.checkpoint.empty()) throw StageError("load", "model.checkpoint is not set");
  const ModelBundle bundle = run_stage("load", [&] { return checkpoint_load(c.checkpoint); });
  const fs::path out(out_dir);
  std::optional<Staging> staging;
  run_stage("write", [&] { staging.emplace(out); });
  PruneRun run = prune_model(bundle, c);
  run_stage("write", [&] {
    const fs::path& d = staging->dir();
    checkpoint_save(run.pruned, (d / "pruned.ckpt").string());
    std::ostringstream plan;
    plan << "# config_hash = " << run.report.config_hash << '\n';
    write_plan(plan, run.plan);
    write_file(d / "prune_plan.txt", plan.str());
    std::ostringstream log;
    log << "# config_hash = " << run.report.config_hash << '\n';
    write_threshold_log(log, run.threshold_log);
    write_file(d / "threshold_log.csv", log.str());
    std::ostringstream parts;
    parts << "# config_hash = " << run.report.config_hash << '\n';
    write_partitions(parts, run.partitions);
    write_file(d / "partitions.txt", parts.str());
    write_file(d / "config.txt", serialize_config(c));
    emit_report(run.report, d.string());
    staging->commit();
  });
  return run;
}

EvalResult evaluate(const ModelBundle& bundle, const Corpus& corpus) {
  check_tokens(corpus, bundle.weights.config, "eval");
  EvalResult r;
  r.perplexity = perplexity(bundle.weights, MaskSet::ones(bundle.weights.config), corpus);
  r.mean_nll = std::log(r.perplexity);
  for (const auto& s : corpus) r.tokens += s.size() > 1 ? static_cast<std::int64_t>(s.size()) - 1 : 0;
  return r;
}

EvalResult cmd_eval(const RunConfig& c, const std::string& checkpoint, const std::string& out_dir) {
  const ModelBundle bundle = run_stage("load", [&] { return checkpoint_load(checkpoint); });
  const EvalResult r = run_stage("evaluation", [&] { return evaluate(bundle, gen_corpus(c.eval_corpus)); });
  run_stage("write", [&] {
    fs::create_directories(out_dir);
    std::ostringstream csv;
    csv << "# config_hash = " << config_hash(c) << '\n';
    csv << "checkpoint,corpus,seed,n_samples,seq_len,tokens,mean_nll,perplexity\n";
    csv << checkpoint << ',' << to_string(c.eval_corpus.source) << ',' << c.eval_corpus.seed << ','
        << c.eval_corpus.n_samples << ',' << c.eval_corpus.seq_len << ',' << r.tokens << ',' << fmt_double(r.mean_nll)
        << ',' << fmt_double(r.perplexity) << '\n';
    write_file(fs::path(out_dir) / "eval.csv", csv.str());
  });
  return r;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct StoredRun {
  std::string name;
  std::string hash;
  std::vector<StoredPartition> partitions;
  std::vector<Vec> ffn_drift;
  std::map<int, std::string> stored_mss;
};

std::string skip_hash(std::istream& in) {
  std::string line;
  std::getline(in, line);
  const std::string prefix = "# config_hash = ";
  return line.rfind(prefix, 0) == 0 ? line.substr(prefix.size()) : std::string();
}

StoredRun load_run(const fs::path& dir) {
  StoredRun r;
  r.name = dir.filename().string();
  if (r.name.empty()) r.name = dir.parent_path().filename().string();
  for (const char* f : {"partitions.txt", "units.csv", "mss.csv"})
    if (!fs::exists(dir / f)) throw IoError("run directory " + dir.string() + " is missing " + f);
  {
    std::istringstream in(read_file(dir / "partitions.txt"));
    r.hash = skip_hash(in);
    r.partitions = read_partitions(in);
  }
  {
    std::istringstream in(read_file(dir / "units.csv"));
    skip_hash(in);
    std::string line;
    std::getline(in, line);
    std::map<int, std::vector<double>> drift;
    while (std::getline(in, line)) {
      const auto cols = split_csv(line);
      if (cols.size() < 9) throw IoError("units.csv: malformed row");
      if (cols[1] == "ffn") drift[std::stoi(cols[0])].push_back(std::stod(cols[7]));
    }
    for (auto& [layer, values] : drift) {
      if (static_cast<std::size_t>(layer) != r.ffn_drift.size()) throw IoError("units.csv: layers out of order");
      r.ffn_drift.push_back(Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size())));
    }
  }
  {
    std::istringstream in(read_file(dir / "mss.csv"));
    skip_hash(in);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto cols = split_csv(line);
      if (cols.size() >= 3) r.stored_mss[std::stoi(cols[0])] = cols[2];
    }
  }
  return r;
}

}  // namespace

void cmd_analyze(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) throw StageError("analyze", "no run directories given");
  std::vector<StoredRun> runs;
  run_stage("load", [&] {
    for (const auto& d : run_dirs) runs.push_back(load_run(d));
  });
  run_stage("analyze", [&] {
    fs::create_directories(out_dir);
    std::ostringstream m;
    m << "# config_hash = " << runs.front().hash << '\n';
    m << "run,layer,k,mss,stored_mss,match\n";
    for (const auto& r : runs)
      for (const auto& p : r.partitions) {
        if (static_cast<std::size_t>(p.layer) >= r.ffn_drift.size()) throw IoError("units.csv: missing drift for layer");
        std::string value;
        try {
          value = fmt_double(mss(p.assignment, p.k, r.ffn_drift[static_cast<std::size_t>(p.layer)]));
        } catch (const Error&) {
        }
        const auto it = r.stored_mss.find(p.layer);
        const std::string stored = it == r.stored_mss.end() ? std::string() : it->second;
        m << r.name << ',' << p.layer << ',' << p.k << ',' << value << ',' << stored << ','
          << (value == stored ? 1 : 0) << '\n';
      }
    write_file(fs::path(out_dir) / "analyze_mss.csv", m.str());

    if (runs.size() < 2) return;
    std::vector<OverlapRow> rows;
    for (std::size_t i = 0; i < runs.size(); ++i)
      for (std::size_t j = i + 1; j < runs.size(); ++j)
        for (const auto& pa : runs[i].partitions)
          for (const auto& pb : runs[j].partitions) {
            if (pa.layer != pb.layer) continue;
            rows.push_back({runs[i].name, runs[j].name, pa.layer, pa.k, pb.k,
                            module_overlap(pa.assignment, pa.k, pb.assignment, pb.k)});
          }
    std::ostringstream o;
    o << "# config_hash = " << runs.front().hash << '\n';
    write_overlap_csv(o, rows);
    write_file(fs::path(out_dir) / "overlap.csv", o.str());
  });
}

}  // namespace gprune
