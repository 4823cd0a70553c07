#pragma once

#include "gprune/toymodel.hpp"

#include <string>
#include <vector>

namespace gprune {

enum class CorpusSource { SyntheticA, SyntheticB, SyntheticMix, TextFile };

std::string to_string(CorpusSource s);
CorpusSource parse_corpus_source(const std::string& s);

// synthetic-A and synthetic-B are order-2 Markov languages over a shared 32-symbol
// alphabet. Their transition tables are fixed constants of the library; `seed` only
// selects which sequences are sampled. synthetic-mix alternates A and B sequences.
struct CorpusSpec {
  CorpusSource source = CorpusSource::SyntheticA;
  std::string path;  // TextFile only
  std::uint64_t seed = 0;
  int n_samples = 256;
  int seq_len = 128;
  int vocab_size = 256;  // TextFile only: bytes >= vocab_size map to vocab_size - 1

  bool operator==(const CorpusSpec&) const = default;
};

inline constexpr int kSyntheticVocab = 32;

Corpus gen_corpus(const CorpusSpec& spec);

std::vector<std::string> synthetic_vocabulary();
std::vector<std::string> byte_vocabulary(int vocab_size);

// Empirical bigram distribution (row-major V x V, normalized to sum 1).
Mat bigram_distribution(const Corpus& corpus, int vocab_size);

}  // namespace gprune
