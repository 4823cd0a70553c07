#include "gprune/corpus.hpp"

#include <fstream>
#include <iterator>

namespace gprune {

namespace {

constexpr std::uint64_t kLanguageSeedA = 0xA11CE5EEDULL;
constexpr std::uint64_t kLanguageSeedB = 0xB0B5EEDULL;

// Next-token tables for an order-2 Markov language: row (a*V + b) is the
// distribution of the token following the pair (a, b).
struct MarkovLanguage {
  int first_preferred = 0;
  int n_preferred = 0;
  Mat table;
};

MarkovLanguage make_language(std::uint64_t seed, int first_preferred, int n_preferred) {
  constexpr int V = kSyntheticVocab;
  constexpr double kLeak = 0.03;
  const double weights[3] = {0.6, 0.25, 0.12};
  MarkovLanguage lang{first_preferred, n_preferred, Mat::Constant(V * V, V, kLeak / V)};
  Rng rng(seed);
  for (int row = 0; row < V * V; ++row) {
    int picked[3] = {-1, -1, -1};
    for (int s = 0; s < 3; ++s) {
      int tok;
      do {
        tok = first_preferred + static_cast<int>(rng.index(static_cast<std::size_t>(n_preferred)));
      } while (tok == picked[0] || tok == picked[1]);
      picked[s] = tok;
      lang.table(row, tok) += weights[s] * (1.0 - kLeak) / (weights[0] + weights[1] + weights[2]);
    }
  }
  return lang;
}

const MarkovLanguage& language_a() {
  static const MarkovLanguage lang = make_language(kLanguageSeedA, 0, 22);
  return lang;
}

const MarkovLanguage& language_b() {
  static const MarkovLanguage lang = make_language(kLanguageSeedB, 10, 22);
  return lang;
}

std::vector<int> sample_sequence(const MarkovLanguage& lang, int length, Rng& rng) {
  std::vector<int> seq;
  seq.reserve(static_cast<std::size_t>(length));
  for (int t = 0; t < length; ++t) {
    if (t < 2) {
      seq.push_back(lang.first_preferred + static_cast<int>(rng.index(static_cast<std::size_t>(lang.n_preferred))));
      continue;
    }
    const int row = seq[static_cast<std::size_t>(t - 2)] * kSyntheticVocab + seq[static_cast<std::size_t>(t - 1)];
    const auto probs = lang.table.row(row);
    seq.push_back(static_cast<int>(rng.categorical(std::span<const double>(probs.data(), kSyntheticVocab))));
  }
  return seq;
}

Corpus text_corpus(const CorpusSpec& spec) {
  std::ifstream in(spec.path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus file: " + spec.path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < static_cast<std::size_t>(spec.seq_len))
    throw IoError("corpus file shorter than seq_len: " + spec.path);
  Rng rng(spec.seed);
  const std::size_t starts = bytes.size() - static_cast<std::size_t>(spec.seq_len) + 1;
  Corpus out;
  for (int i = 0; i < spec.n_samples; ++i) {
    const std::size_t off = rng.index(starts);
    std::vector<int> seq(static_cast<std::size_t>(spec.seq_len));
    for (int t = 0; t < spec.seq_len; ++t)
      seq[static_cast<std::size_t>(t)] = std::min<int>(bytes[off + static_cast<std::size_t>(t)], spec.vocab_size - 1);
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

std::string to_string(CorpusSource s) {
  switch (s) {
    case CorpusSource::SyntheticA: return "synthetic-A";
    case CorpusSource::SyntheticB: return "synthetic-B";
    case CorpusSource::SyntheticMix: return "synthetic-mix";
    case CorpusSource::TextFile: return "text-file";
  }
  return "unknown";
}

CorpusSource parse_corpus_source(const std::string& s) {
  if (s == "synthetic-A") return CorpusSource::SyntheticA;
  if (s == "synthetic-B") return CorpusSource::SyntheticB;
  if (s == "synthetic-mix") return CorpusSource::SyntheticMix;
  if (s == "text-file") return CorpusSource::TextFile;
  throw Error("unknown corpus source: " + s);
}

Corpus gen_corpus(const CorpusSpec& spec) {
  if (spec.n_samples < 1) throw Error("corpus: n_samples must be >= 1");
  if (spec.seq_len < 1) throw Error("corpus: seq_len must be >= 1");
  if (spec.source == CorpusSource::TextFile) return text_corpus(spec);
  Rng rng(spec.seed);
  Corpus out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    Rng stream = rng.substream(static_cast<std::uint64_t>(i));
    const MarkovLanguage* lang = &language_a();
    if (spec.source == CorpusSource::SyntheticB || (spec.source == CorpusSource::SyntheticMix && i % 2 == 1))
      lang = &language_b();
    out.push_back(sample_sequence(*lang, spec.seq_len, stream));
  }
  return out;
}

std::vector<std::string> synthetic_vocabulary() {
  const std::string alphabet = "abcdefghijklmnopqrstuvwxyz012345";
  std::vector<std::string> v;
  for (char ch : alphabet) v.emplace_back(1, ch);
  return v;
}

std::vector<std::string> byte_vocabulary(int vocab_size) {
  std::vector<std::string> v;
  for (int i = 0; i < vocab_size; ++i) v.emplace_back(1, static_cast<char>(i));
  return v;
}

Mat bigram_distribution(const Corpus& corpus, int vocab_size) {
  Mat counts = Mat::Zero(vocab_size, vocab_size);
  double total = 0.0;
  for (const auto& seq : corpus)
    for (std::size_t t = 1; t < seq.size(); ++t) {
      counts(seq[t - 1], seq[t]) += 1.0;
      total += 1.0;
    }
  if (total > 0.0) counts /= total;
  return counts;
}

}  // namespace gprune
