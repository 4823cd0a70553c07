#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gprune/checkpoint.hpp"
#include "gprune/corpus.hpp"
#include "test_helpers.hpp"

using namespace gprune;
using namespace gprune::testing;

TEST_CASE("synthetic corpora are deterministic and distinct") {
  CorpusSpec a;
  a.n_samples = 40;
  a.seq_len = 32;
  const Corpus c1 = gen_corpus(a);
  const Corpus c2 = gen_corpus(a);
  CHECK(c1 == c2);
  CHECK(c1.size() == 40);
  CHECK(c1[0].size() == 32);
  CorpusSpec other = a;
  other.seed = 99;
  CHECK(gen_corpus(other) != c1);

  for (const auto& s : c1)
    for (int t : s) CHECK((t >= 0 && t < kSyntheticVocab));

  CorpusSpec b = a;
  b.source = CorpusSource::SyntheticB;
  const Mat pa = bigram_distribution(gen_corpus(a), kSyntheticVocab);
  const Mat pb = bigram_distribution(gen_corpus(b), kSyntheticVocab);
  CHECK(std::abs(pa.sum() - 1.0) < 1e-12);
  // Total variation between the two languages' bigram statistics is large.
  CHECK(0.5 * (pa - pb).cwiseAbs().sum() > 0.5);

  CorpusSpec mix = a;
  mix.source = CorpusSource::SyntheticMix;
  const Corpus m = gen_corpus(mix);
  CHECK(m.size() == 40);
}

TEST_CASE("corpus source names round-trip") {
  for (auto s : {CorpusSource::SyntheticA, CorpusSource::SyntheticB, CorpusSource::SyntheticMix, CorpusSource::TextFile})
    CHECK(parse_corpus_source(to_string(s)) == s);
  CHECK_THROWS_AS(parse_corpus_source("wikitext"), Error);
}

TEST_CASE("text corpus windows") {
  const auto path = std::filesystem::temp_directory_path() / "gprune_text_corpus.txt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "the quick brown fox jumps over the lazy dog. \xff";
  }
  CorpusSpec s;
  s.source = CorpusSource::TextFile;
  s.path = path.string();
  s.n_samples = 5;
  s.seq_len = 10;
  s.vocab_size = 128;
  const Corpus c = gen_corpus(s);
  CHECK(c.size() == 5);
  for (const auto& seq : c)
    for (int t : seq) CHECK(t < 128);
  s.seq_len = 1000;
  CHECK_THROWS_AS(gen_corpus(s), IoError);
  s.path = "/nonexistent/file.txt";
  CHECK_THROWS_AS(gen_corpus(s), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig c = tiny_config(2);
  c.ffn_widths = {7, 12};
  c.head_counts = {1, 2};
  ModelBundle b;
  b.weights = ModelWeights::init(c, 8);
  b.vocab = byte_vocabulary(c.vocab_size);
  b.extras["thresholds.attn"] = Mat::Constant(1, 2, 0.25);
  const std::string bytes = checkpoint_serialize(b);
  const ModelBundle r = checkpoint_deserialize(bytes);
  CHECK(r.weights.config == c);
  CHECK(r.weights.bitwise_equal(b.weights));
  CHECK(r.vocab == b.vocab);
  CHECK(r.extras.at("thresholds.attn") == b.extras.at("thresholds.attn"));
  CHECK(checkpoint_serialize(r) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "gprune_roundtrip.ckpt";
  checkpoint_save(b, path.string());
  CHECK(checkpoint_load(path.string()).weights.bitwise_equal(b.weights));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint corruption is detected") {
  ModelBundle b;
  b.weights = ModelWeights::init(tiny_config(1), 1);
  b.vocab = byte_vocabulary(b.weights.config.vocab_size);
  const std::string bytes = checkpoint_serialize(b);

  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x10;
  CHECK_THROWS_WITH_AS(checkpoint_deserialize(flipped), doctest::Contains("payload checksum"), Error);

  std::string truncated = bytes.substr(0, bytes.size() - 8);
  CHECK_THROWS_WITH_AS(checkpoint_deserialize(truncated), doctest::Contains("truncated"), Error);

  std::string header = bytes;
  header[header.find("d_model") + 9] ^= 0x01;
  CHECK_THROWS_AS(checkpoint_deserialize(header), Error);

  CHECK_THROWS_AS(checkpoint_deserialize("not a checkpoint"), Error);
  CHECK_THROWS_AS(checkpoint_load("/nonexistent/x.ckpt"), IoError);
}

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}
