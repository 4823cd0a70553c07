#pragma once

#include "gprune/numerics.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace gprune {

// Decoder-only transformer shape. Per-layer FFN widths and head counts may be
// ragged after pruning; d_head stays fixed at d_model / n_heads.
struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int d_ffn = 512;
  int n_heads = 4;
  int vocab_size = 64;
  int max_seq_len = 128;
  std::vector<int> ffn_widths;
  std::vector<int> head_counts;

  int d_head() const { return d_model / n_heads; }
  int ffn_width(int layer) const { return ffn_widths.at(static_cast<std::size_t>(layer)); }
  int heads(int layer) const { return head_counts.at(static_cast<std::size_t>(layer)); }

  // Fills empty per-layer width vectors with the uniform defaults and checks invariants.
  ModelConfig& finalize();
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

ModelConfig make_config(int n_layers, int d_model, int d_ffn, int n_heads, int vocab_size, int max_seq_len);

struct LayerWeights {
  Mat attn_norm;  // 1 x d_model
  Mat wq, wk, wv; // (heads*d_head) x d_model
  Mat wo;         // d_model x (heads*d_head)
  Mat ffn_norm;   // 1 x d_model
  Mat w_gate;     // d_ffn x d_model
  Mat w_up;       // d_ffn x d_model
  Mat w_down;     // d_model x d_ffn
};

struct ModelWeights {
  ModelConfig config;
  Mat tok_emb;    // vocab x d_model
  Mat pos_emb;    // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  Mat final_norm; // 1 x d_model
  Mat lm_head;    // vocab x d_model
  // Bumped whenever parameters change; a tape remembers the revision it was recorded at.
  std::uint64_t revision = 0;

  static ModelWeights zeros(const ModelConfig& config);
  static ModelWeights init(const ModelConfig& config, std::uint64_t seed);

  // Fixed enumeration order shared by the optimizer, checkpoints and gradient checks.
  std::vector<Mat*> params();
  std::vector<const Mat*> params() const;
  std::vector<std::string> param_names() const;
  std::size_t param_count() const;

  void touch() { ++revision; }
  bool bitwise_equal(const ModelWeights& other) const;
};

// Real-valued structure masks. FFN mask scales each neuron's post-SwiGLU activation;
// head mask scales each head's attention output before the O projection.
struct MaskSet {
  std::vector<Vec> ffn;
  std::vector<Vec> heads;

  static MaskSet ones(const ModelConfig& config);
  static MaskSet zeros(const ModelConfig& config);
  bool is_hard() const;
  bool in_unit_interval() const;
  void check_shape(const ModelConfig& config) const;
};

struct LayerTape {
  Mat x_in, n1, q, k, v;
  Vec rms1;
  std::vector<Mat> attn;  // per head, T x T softmax probabilities
  Mat head_out;           // T x (heads*d_head), before head masks
  Mat x_mid, n2, gate, up, act;  // act = silu(gate) * up, before neuron masks
  Vec rms2;
};

struct Tape {
  std::vector<int> tokens;
  std::vector<LayerTape> layers;
  Mat x_final, n_final;
  Vec rms_final;
  MaskSet masks;
  const ModelWeights* weights = nullptr;
  std::uint64_t revision = 0;
};

struct Gradients {
  ModelWeights weights;
  MaskSet masks;

  static Gradients zeros(const ModelConfig& config);
  void set_zero();
};

// Logits (T x vocab) for one token sequence; records the tape when requested.
Mat forward_masked(const ModelWeights& w, const MaskSet& masks, std::span<const int> tokens, Tape* tape = nullptr);
Mat forward(const ModelWeights& w, std::span<const int> tokens);

// Accumulates gradients w.r.t. weights (optional) and every mask entry into `grads`.
void backward(const ModelWeights& w, const Tape& tape, const Mat& dlogits, Gradients& grads,
              bool weight_grads = true);

// Mean next-token cross-entropy over positions 0..T-2 (nats). Fills dlogits with the
// gradient of (scale * mean) when non-null.
double next_token_loss(const Mat& logits, std::span<const int> tokens, Mat* dlogits = nullptr, double scale = 1.0);

using Corpus = std::vector<std::vector<int>>;

double perplexity(const ModelWeights& w, const MaskSet& masks, const Corpus& corpus);

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t step) : Error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainOptions {
  std::int64_t steps = 2000;
  double lr = 3e-3;
  int batch_size = 4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct TrainLogRow {
  std::int64_t step;
  double loss;
};

ModelWeights train_toy(const ModelConfig& config, const Corpus& corpus, const TrainOptions& opts,
                       std::vector<TrainLogRow>* log = nullptr);

}  // namespace gprune
