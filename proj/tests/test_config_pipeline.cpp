#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gprune/pipeline.hpp"

using namespace gprune;
namespace fs = std::filesystem;

namespace {

RunConfig small_run(const fs::path& dir) {
  RunConfig c = RunConfig::desk();
  c.n_layers = 2;
  c.d_model = 16;
  c.d_ffn = 32;
  c.n_heads = 2;
  c.max_seq_len = 16;
  c.train_steps = 40;
  c.pretrain_corpus.n_samples = 64;
  c.pretrain_corpus.seq_len = 16;
  c.primary.n_samples = 8;
  c.primary.seq_len = 16;
  c.auxiliary.n_samples = 8;
  c.auxiliary.seq_len = 16;
  c.eval_corpus.n_samples = 8;
  c.eval_corpus.seq_len = 16;
  c.rmp.epochs = 1;
  c.checkpoint = (dir / "pre" / "model.ckpt").string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

}  // namespace

TEST_CASE("config text") {
  RunConfig c = RunConfig::desk();
  c.seed = 42;
  c.target_retention = 0.7;
  c.bcm.candidates = {3, 5};
  c.rmp.retention_mode = RetentionMode::Structures;
  c.rmp.quantile_scope = QuantileScope::Global;
  c.primary.source = CorpusSource::TextFile;
  c.primary.path = "data/a.txt";
  c.has_auxiliary = false;
  c.mode = PruneMode::BaselineGlobal;
  c.metric = Metric::Flap;
  const std::string text = serialize_config(c);
  CHECK(parse_config(text) == c);
  CHECK(serialize_config(parse_config(text)) == text);
  CHECK(config_hash(c) == config_hash(parse_config(text)));
  CHECK(config_hash(c).size() == 16);
  RunConfig d = c;
  d.rmp.lr = 0.02;
  CHECK(config_hash(d) != config_hash(c));
  CHECK(RunConfig::paper().bcm.min_split_size == 32);

  const RunConfig p = parse_config("# comment\n\nbcm.gamma_split = 0.5\nprune.target_retention=0.8\n");
  CHECK(p.bcm.gamma_split == 0.5);
  CHECK(p.target_retention == 0.8);
  CHECK(p.n_layers == RunConfig::desk().n_layers);

  CHECK_THROWS_WITH_AS(parse_config("a = 1\nbcm.nope = 2\n"), doctest::Contains("line 1"), Error);
  CHECK_THROWS_AS(parse_config("bcm.steps = x\n"), Error);
  CHECK_THROWS_AS(parse_config("just text\n"), Error);
  CHECK_THROWS_AS(load_config("/nonexistent/gprune.cfg"), Error);

  RunConfig bad = RunConfig::desk();
  bad.target_retention = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = RunConfig::desk();
  bad.has_auxiliary = false;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.mode = PruneMode::BaselineGlobal;
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("pipeline end to end on a small model") {
  TempDir tmp("gprune_pipeline_test");
  RunConfig c = small_run(tmp.path);
  cmd_pretrain(c, (tmp.path / "pre").string());
  for (const char* f : {"model.ckpt", "train_log.csv", "config.txt"}) CHECK(fs::exists(tmp.path / "pre" / f));
  CHECK(!fs::exists(tmp.path / "pre" / ".staging"));

  SUBCASE("resume with matching config is a no-op, mismatch is refused") {
    const auto before = fs::last_write_time(tmp.path / "pre" / "model.ckpt");
    CHECK_NOTHROW(cmd_pretrain(c, (tmp.path / "pre").string()));
    CHECK(fs::last_write_time(tmp.path / "pre" / "model.ckpt") == before);
    RunConfig other = c;
    other.train_steps = 41;
    CHECK_THROWS_AS(cmd_pretrain(other, (tmp.path / "pre").string()), StageError);
  }

  SUBCASE("full retention leaves the model unchanged") {
    c.target_retention = 1.0;
    const PruneRun run = cmd_prune(c, (tmp.path / "r1").string());
    const ModelBundle teacher = checkpoint_load(c.checkpoint);
    CHECK(run.pruned.weights.bitwise_equal(teacher.weights));
    CHECK(run.report.retention_actual == 1.0);
    CHECK(run.report.pruned_ppl == run.report.teacher_ppl);
  }

  SUBCASE("reruns are byte identical and reports carry the hash") {
    cmd_prune(c, (tmp.path / "a").string());
    cmd_prune(c, (tmp.path / "b").string());
    const std::string hash = config_hash(c);
    for (const char* f : {"pruned.ckpt", "prune_plan.txt", "threshold_log.csv", "partitions.txt", "config.txt",
                          "units.csv", "modules.csv", "kendall.csv", "mss.csv", "summary.txt"}) {
      INFO(f);
      REQUIRE(fs::exists(tmp.path / "a" / f));
      CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));
      if (std::string(f) != "pruned.ckpt" && std::string(f) != "config.txt")
        CHECK(slurp(tmp.path / "a" / f).rfind("# config_hash = " + hash + "\n", 0) == 0);
    }
    CHECK(load_config((tmp.path / "a" / "config.txt").string()) == c);

    const EvalResult e = cmd_eval(c, (tmp.path / "a" / "pruned.ckpt").string(), (tmp.path / "eval").string());
    CHECK(fs::exists(tmp.path / "eval" / "eval.csv"));
    CHECK(e.tokens == 8 * 15);

    cmd_analyze({(tmp.path / "a").string(), (tmp.path / "b").string()}, (tmp.path / "an").string());
    const std::string mss = slurp(tmp.path / "an" / "analyze_mss.csv");
    CHECK(mss.find(",0\n") == std::string::npos);  // every recomputed MSS matches the stored one
    const std::string overlap = slurp(tmp.path / "an" / "overlap.csv");
    CHECK(overlap.find("a,b,0,") != std::string::npos);
    CHECK(overlap.find(",1,1,") != std::string::npos);  // identical partitions
    CHECK_THROWS_AS(cmd_analyze({(tmp.path / "eval").string()}, (tmp.path / "an2").string()), StageError);
  }

  SUBCASE("baseline arm needs no auxiliary corpus") {
    c.mode = PruneMode::BaselineGlobal;
    c.has_auxiliary = false;
    const PruneRun run = prune_model(checkpoint_load(c.checkpoint), c);
    CHECK(run.threshold_log.empty());
    CHECK(run.partitions.empty());
    CHECK(std::abs(run.report.retention_actual - 0.5) < 0.1);
  }

  SUBCASE("a failing stage leaves no partial outputs") {
    c.eval_corpus.seq_len = 64;  // longer than the model context: fails after export
    try {
      cmd_prune(c, (tmp.path / "fail").string());
      FAIL("expected a stage error");
    } catch (const StageError& e) {
      CHECK(e.stage() == "evaluation");
    }
    CHECK(fs::is_empty(tmp.path / "fail"));
    RunConfig missing = c;
    missing.checkpoint = (tmp.path / "nope.ckpt").string();
    try {
      cmd_prune(missing, (tmp.path / "fail2").string());
      FAIL("expected a stage error");
    } catch (const StageError& e) {
      CHECK(e.stage() == "load");
    }
  }
}
