#include "gprune/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>

#include "gprune/checkpoint.hpp"
#include "gprune/report_format.hpp"

namespace gprune {

std::string to_string(PruneMode m) { return m == PruneMode::GPrune ? "gprune" : "baseline_global"; }

PruneMode parse_prune_mode(const std::string& s) {
  if (s == "gprune") return PruneMode::GPrune;
  if (s == "baseline_global") return PruneMode::BaselineGlobal;
  throw Error("unknown prune mode: " + s);
}

std::string to_string(QuantileScope s) { return s == QuantileScope::Layer ? "layer" : "global"; }

QuantileScope parse_quantile_scope(const std::string& s) {
  if (s == "layer") return QuantileScope::Layer;
  if (s == "global") return QuantileScope::Global;
  throw Error("unknown quantile scope: " + s);
}

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::paper() {
  RunConfig c;
  c.bcm = BcmHyper::paper();
  c.primary.n_samples = 2048;
  c.auxiliary.n_samples = 2048;
  return c;
}

void RunConfig::validate() const {
  if (!(target_retention > 0.0 && target_retention <= 1.0)) throw Error("prune.target_retention must be in (0, 1]");
  if (mode == PruneMode::GPrune && !has_auxiliary) throw Error("gprune mode needs an auxiliary corpus");
  if (!(rmp.rho_pen > 0.0 && rmp.rho_lam > 0.0)) throw Error("rmp.rho_pen and rmp.rho_lam must be positive");
  if (!(rmp.t_ste > 0.0) || !(rmp.t_kd > 0.0)) throw Error("temperatures must be positive");
  if (!(rmp.gamma_drift > 0.0 && rmp.gamma_drift < 1.0 && rmp.gamma_score > 0.0 && rmp.gamma_score < 1.0))
    throw Error("rmp.gamma_drift and rmp.gamma_score must be in (0, 1)");
  if (!(rmp.epochs > 0.0) || rmp.batch_size < 1 || rmp.max_extra_epochs < 0.0) throw Error("rmp.epochs and rmp.batch_size must be positive");
  if (bcm.candidates.empty()) throw Error("bcm.candidates is empty");
  for (int k : bcm.candidates)
    if (k < 2) throw Error("bcm.candidates entries must be at least 2");
  if (d_model % n_heads != 0) throw Error("model.d_model must be divisible by model.n_heads");
}

namespace {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

double to_double(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw Error("not a number: " + s);
  return v;
}

long long to_int(const std::string& s) {
  std::size_t pos = 0;
  const long long v = std::stoll(s, &pos);
  if (pos != s.size()) throw Error("not an integer: " + s);
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw Error("not a boolean: " + s);
}

template <typename T>
Field int_field(std::string key, T RunConfig::*member) {
  return {std::move(key), [member](const RunConfig& c) { return std::to_string(c.*member); },
          [member](RunConfig& c, const std::string& v) { c.*member = static_cast<T>(to_int(v)); }};
}

Field double_field(std::string key, double RunConfig::*member) {
  return {std::move(key), [member](const RunConfig& c) { return fmt_double(c.*member); },
          [member](RunConfig& c, const std::string& v) { c.*member = to_double(v); }};
}

template <typename Get, typename Set>
Field field(std::string key, Get get, Set set) {
  return {std::move(key), get, set};
}

void corpus_fields(std::vector<Field>& f, const std::string& prefix, CorpusSpec RunConfig::*spec) {
  f.push_back(field(prefix + ".source", [spec](const RunConfig& c) { return to_string((c.*spec).source); },
                    [spec](RunConfig& c, const std::string& v) { (c.*spec).source = parse_corpus_source(v); }));
  f.push_back(field(prefix + ".path", [spec](const RunConfig& c) { return (c.*spec).path; },
                    [spec](RunConfig& c, const std::string& v) { (c.*spec).path = v; }));
  f.push_back(field(prefix + ".seed", [spec](const RunConfig& c) { return std::to_string((c.*spec).seed); },
                    [spec](RunConfig& c, const std::string& v) { (c.*spec).seed = static_cast<std::uint64_t>(to_int(v)); }));
  f.push_back(field(prefix + ".n_samples", [spec](const RunConfig& c) { return std::to_string((c.*spec).n_samples); },
                    [spec](RunConfig& c, const std::string& v) { (c.*spec).n_samples = static_cast<int>(to_int(v)); }));
  f.push_back(field(prefix + ".seq_len", [spec](const RunConfig& c) { return std::to_string((c.*spec).seq_len); },
                    [spec](RunConfig& c, const std::string& v) { (c.*spec).seq_len = static_cast<int>(to_int(v)); }));
  f.push_back(field(prefix + ".vocab_size", [spec](const RunConfig& c) { return std::to_string((c.*spec).vocab_size); },
                    [spec](RunConfig& c, const std::string& v) { (c.*spec).vocab_size = static_cast<int>(to_int(v)); }));
}

#define BCM_DOUBLE(name)                                                              \
  field("bcm." #name, [](const RunConfig& c) { return fmt_double(c.bcm.name); }, \
        [](RunConfig& c, const std::string& v) { c.bcm.name = to_double(v); })
#define RMP_DOUBLE(name)                                                              \
  field("rmp." #name, [](const RunConfig& c) { return fmt_double(c.rmp.name); }, \
        [](RunConfig& c, const std::string& v) { c.rmp.name = to_double(v); })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(int_field("run.seed", &RunConfig::seed));
    f.push_back(field("model.checkpoint", [](const RunConfig& c) { return c.checkpoint; },
                      [](RunConfig& c, const std::string& v) { c.checkpoint = v; }));
    f.push_back(int_field("model.n_layers", &RunConfig::n_layers));
    f.push_back(int_field("model.d_model", &RunConfig::d_model));
    f.push_back(int_field("model.d_ffn", &RunConfig::d_ffn));
    f.push_back(int_field("model.n_heads", &RunConfig::n_heads));
    f.push_back(int_field("model.max_seq_len", &RunConfig::max_seq_len));
    f.push_back(int_field("train.steps", &RunConfig::train_steps));
    f.push_back(double_field("train.lr", &RunConfig::train_lr));
    f.push_back(int_field("train.batch_size", &RunConfig::train_batch_size));
    f.push_back(double_field("train.clip_norm", &RunConfig::train_clip_norm));
    corpus_fields(f, "corpus.pretrain", &RunConfig::pretrain_corpus);
    corpus_fields(f, "corpus.primary", &RunConfig::primary);
    f.push_back(field("corpus.auxiliary.enabled", [](const RunConfig& c) { return std::string(c.has_auxiliary ? "true" : "false"); },
                      [](RunConfig& c, const std::string& v) { c.has_auxiliary = to_bool(v); }));
    corpus_fields(f, "corpus.auxiliary", &RunConfig::auxiliary);
    corpus_fields(f, "corpus.eval", &RunConfig::eval_corpus);
    f.push_back(field("prune.metric", [](const RunConfig& c) { return to_string(c.metric); },
                      [](RunConfig& c, const std::string& v) { c.metric = parse_metric(v); }));
    f.push_back(field("prune.mode", [](const RunConfig& c) { return to_string(c.mode); },
                      [](RunConfig& c, const std::string& v) { c.mode = parse_prune_mode(v); }));
    f.push_back(double_field("prune.target_retention", &RunConfig::target_retention));
    f.push_back(field(
        "bcm.candidates",
        [](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.bcm.candidates.size(); ++i) s += (i ? "," : "") + std::to_string(c.bcm.candidates[i]);
          return s;
        },
        [](RunConfig& c, const std::string& v) {
          c.bcm.candidates.clear();
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ',')) c.bcm.candidates.push_back(static_cast<int>(to_int(item)));
        }));
    f.push_back(BCM_DOUBLE(gamma_split));
    f.push_back(field("bcm.min_split_size", [](const RunConfig& c) { return std::to_string(c.bcm.min_split_size); },
                      [](RunConfig& c, const std::string& v) { c.bcm.min_split_size = static_cast<int>(to_int(v)); }));
    f.push_back(field("bcm.steps", [](const RunConfig& c) { return std::to_string(c.bcm.steps); },
                      [](RunConfig& c, const std::string& v) { c.bcm.steps = static_cast<int>(to_int(v)); }));
    f.push_back(BCM_DOUBLE(lr));
    f.push_back(BCM_DOUBLE(gamma_pair));
    f.push_back(BCM_DOUBLE(w_sim));
    f.push_back(BCM_DOUBLE(w_consis));
    f.push_back(BCM_DOUBLE(w_rep));
    f.push_back(BCM_DOUBLE(temperature));
    f.push_back(RMP_DOUBLE(gamma_drift));
    f.push_back(RMP_DOUBLE(gamma_score));
    f.push_back(field("rmp.quantile_scope", [](const RunConfig& c) { return to_string(c.rmp.quantile_scope); },
                      [](RunConfig& c, const std::string& v) { c.rmp.quantile_scope = parse_quantile_scope(v); }));
    f.push_back(RMP_DOUBLE(t_ste));
    f.push_back(RMP_DOUBLE(alpha));
    f.push_back(RMP_DOUBLE(t_kd));
    f.push_back(RMP_DOUBLE(rho_pen));
    f.push_back(RMP_DOUBLE(rho_lam));
    f.push_back(RMP_DOUBLE(epochs));
    f.push_back(RMP_DOUBLE(lr));
    f.push_back(field("rmp.batch_size", [](const RunConfig& c) { return std::to_string(c.rmp.batch_size); },
                      [](RunConfig& c, const std::string& v) { c.rmp.batch_size = static_cast<int>(to_int(v)); }));
    f.push_back(RMP_DOUBLE(early_stop_g));
    f.push_back(RMP_DOUBLE(feasibility_tol));
    f.push_back(RMP_DOUBLE(max_extra_epochs));
    f.push_back(field("rmp.retention_mode", [](const RunConfig& c) { return to_string(c.rmp.retention_mode); },
                      [](RunConfig& c, const std::string& v) { c.rmp.retention_mode = parse_retention_mode(v); }));
    return f;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

RunConfig parse_config(const std::string& text, const RunConfig& base) {
  RunConfig c = base;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw Error("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    try {
      it->set(c, value);
    } catch (const std::invalid_argument&) {
      throw Error("config line " + std::to_string(line_no) + ": bad value for " + key);
    } catch (const std::out_of_range&) {
      throw Error("config line " + std::to_string(line_no) + ": value out of range for " + key);
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::string& path, const RunConfig& base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(serialize_config(c))); }

}  // namespace gprune
