#include "gprune/toymodel.hpp"

#include <cmath>
#include <cstring>

namespace gprune {

namespace {

constexpr double kRmsEps = 1e-6;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y = x / rms(x) * gain, row-wise.
Mat rms_norm(const Mat& x, const Mat& gain, Vec& rms) {
  const auto d = static_cast<double>(x.cols());
  rms.resize(x.rows());
  Mat y(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    rms(t) = std::sqrt(x.row(t).squaredNorm() / d + kRmsEps);
    y.row(t) = x.row(t).cwiseProduct(gain) / rms(t);
  }
  return y;
}

// Returns dx; accumulates dgain when non-null.
Mat rms_norm_backward(const Mat& x, const Mat& gain, const Vec& rms, const Mat& dy, Mat* dgain) {
  const auto d = static_cast<double>(x.cols());
  Mat dx(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double r = rms(t);
    const auto gdy = dy.row(t).cwiseProduct(gain);
    const double dot = gdy.dot(x.row(t));
    dx.row(t) = gdy / r - x.row(t) * (dot / (d * r * r * r));
    if (dgain) *dgain += dy.row(t).cwiseProduct(x.row(t)) / r;
  }
  return dx;
}

void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  if (tokens.empty()) throw ShapeError("empty token sequence");
  if (static_cast<int>(tokens.size()) > c.max_seq_len)
    throw ShapeError("sequence longer than max_seq_len");
  for (int t : tokens)
    if (t < 0 || t >= c.vocab_size) throw ShapeError("token id out of range: " + std::to_string(t));
}

}  // namespace

ModelConfig& ModelConfig::finalize() {
  if (ffn_widths.empty()) ffn_widths.assign(static_cast<std::size_t>(std::max(n_layers, 0)), d_ffn);
  if (head_counts.empty()) head_counts.assign(static_cast<std::size_t>(std::max(n_layers, 0)), n_heads);
  validate();
  return *this;
}

void ModelConfig::validate() const {
  if (n_layers <= 0 || d_model <= 0 || d_ffn <= 0 || n_heads <= 0 || vocab_size <= 0 || max_seq_len <= 0)
    throw Error("model config: all dimensions must be positive");
  if (d_model % n_heads != 0) throw Error("model config: d_model must be divisible by n_heads");
  if (ffn_widths.size() != static_cast<std::size_t>(n_layers) ||
      head_counts.size() != static_cast<std::size_t>(n_layers))
    throw Error("model config: per-layer widths do not match n_layers");
  for (int l = 0; l < n_layers; ++l) {
    if (ffn_width(l) < 0 || ffn_width(l) > d_ffn) throw Error("model config: bad FFN width");
    if (heads(l) < 0 || heads(l) > n_heads) throw Error("model config: bad head count");
  }
}

ModelConfig make_config(int n_layers, int d_model, int d_ffn, int n_heads, int vocab_size, int max_seq_len) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.d_ffn = d_ffn;
  c.n_heads = n_heads;
  c.vocab_size = vocab_size;
  c.max_seq_len = max_seq_len;
  c.finalize();
  return c;
}

ModelWeights ModelWeights::zeros(const ModelConfig& config) {
  ModelConfig c = config;
  c.finalize();
  ModelWeights w;
  w.config = c;
  const int d = c.d_model;
  w.tok_emb = Mat::Zero(c.vocab_size, d);
  w.pos_emb = Mat::Zero(c.max_seq_len, d);
  for (int l = 0; l < c.n_layers; ++l) {
    const int hd = c.heads(l) * c.d_head();
    const int f = c.ffn_width(l);
    LayerWeights L;
    L.attn_norm = Mat::Zero(1, d);
    L.wq = Mat::Zero(hd, d);
    L.wk = Mat::Zero(hd, d);
    L.wv = Mat::Zero(hd, d);
    L.wo = Mat::Zero(d, hd);
    L.ffn_norm = Mat::Zero(1, d);
    L.w_gate = Mat::Zero(f, d);
    L.w_up = Mat::Zero(f, d);
    L.w_down = Mat::Zero(d, f);
    w.layers.push_back(std::move(L));
  }
  w.final_norm = Mat::Zero(1, d);
  w.lm_head = Mat::Zero(c.vocab_size, d);
  return w;
}

ModelWeights ModelWeights::init(const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w = zeros(config);
  const ModelConfig& c = w.config;
  Rng rng(seed);
  const double d = c.d_model;
  const double in_std = 1.0 / std::sqrt(d);
  const double resid_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
  w.tok_emb = rng.normal_matrix(c.vocab_size, c.d_model, 1.0);
  w.pos_emb = rng.normal_matrix(c.max_seq_len, c.d_model, 0.1);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights& L = w.layers[static_cast<std::size_t>(l)];
    L.attn_norm.setOnes();
    L.ffn_norm.setOnes();
    L.wq = rng.normal_matrix(L.wq.rows(), L.wq.cols(), in_std);
    L.wk = rng.normal_matrix(L.wk.rows(), L.wk.cols(), in_std);
    L.wv = rng.normal_matrix(L.wv.rows(), L.wv.cols(), in_std);
    L.wo = rng.normal_matrix(L.wo.rows(), L.wo.cols(), resid_scale / std::sqrt(std::max<double>(1, L.wo.cols())));
    L.w_gate = rng.normal_matrix(L.w_gate.rows(), L.w_gate.cols(), in_std);
    L.w_up = rng.normal_matrix(L.w_up.rows(), L.w_up.cols(), in_std);
    L.w_down =
        rng.normal_matrix(L.w_down.rows(), L.w_down.cols(), resid_scale / std::sqrt(std::max<double>(1, L.w_down.cols())));
  }
  w.final_norm.setOnes();
  w.lm_head = rng.normal_matrix(c.vocab_size, c.d_model, 0.2 * in_std);
  return w;
}

std::vector<Mat*> ModelWeights::params() {
  std::vector<Mat*> out{&tok_emb, &pos_emb};
  for (auto& L : layers) {
    for (Mat* m : {&L.attn_norm, &L.wq, &L.wk, &L.wv, &L.wo, &L.ffn_norm, &L.w_gate, &L.w_up, &L.w_down})
      out.push_back(m);
  }
  out.push_back(&final_norm);
  out.push_back(&lm_head);
  return out;
}

std::vector<const Mat*> ModelWeights::params() const {
  auto mut = const_cast<ModelWeights*>(this)->params();
  return {mut.begin(), mut.end()};
}

std::vector<std::string> ModelWeights::param_names() const {
  std::vector<std::string> out{"tok_emb", "pos_emb"};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* n : {"attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"})
      out.push_back(p + n);
  }
  out.emplace_back("final_norm");
  out.emplace_back("lm_head");
  return out;
}

std::size_t ModelWeights::param_count() const {
  std::size_t n = 0;
  for (const Mat* m : params()) n += static_cast<std::size_t>(m->size());
  return n;
}

bool ModelWeights::bitwise_equal(const ModelWeights& other) const {
  if (!(config == other.config)) return false;
  const auto a = params();
  const auto b = other.params();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols()) return false;
    if (std::memcmp(a[i]->data(), b[i]->data(), sizeof(double) * static_cast<std::size_t>(a[i]->size())) != 0)
      return false;
  }
  return true;
}

MaskSet MaskSet::ones(const ModelConfig& config) {
  MaskSet m;
  for (int l = 0; l < config.n_layers; ++l) {
    m.ffn.push_back(Vec::Ones(config.ffn_width(l)));
    m.heads.push_back(Vec::Ones(config.heads(l)));
  }
  return m;
}

MaskSet MaskSet::zeros(const ModelConfig& config) {
  MaskSet m = ones(config);
  for (auto& v : m.ffn) v.setZero();
  for (auto& v : m.heads) v.setZero();
  return m;
}

bool MaskSet::is_hard() const {
  auto hard = [](const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (v(i) != 0.0 && v(i) != 1.0) return false;
    return true;
  };
  for (const auto& v : ffn)
    if (!hard(v)) return false;
  for (const auto& v : heads)
    if (!hard(v)) return false;
  return true;
}

bool MaskSet::in_unit_interval() const {
  for (const auto* group : {&ffn, &heads})
    for (const auto& v : *group)
      if (v.size() > 0 && (v.minCoeff() < 0.0 || v.maxCoeff() > 1.0)) return false;
  return true;
}

void MaskSet::check_shape(const ModelConfig& config) const {
  require_shape(ffn.size() == static_cast<std::size_t>(config.n_layers) &&
                    heads.size() == static_cast<std::size_t>(config.n_layers),
                "mask layer count");
  for (int l = 0; l < config.n_layers; ++l) {
    require_shape(ffn[static_cast<std::size_t>(l)].size() == config.ffn_width(l),
                  "FFN mask width in layer " + std::to_string(l));
    require_shape(heads[static_cast<std::size_t>(l)].size() == config.heads(l),
                  "head mask width in layer " + std::to_string(l));
  }
}

Gradients Gradients::zeros(const ModelConfig& config) {
  Gradients g;
  g.weights = ModelWeights::zeros(config);
  g.masks = MaskSet::zeros(g.weights.config);
  return g;
}

void Gradients::set_zero() {
  for (Mat* m : weights.params()) m->setZero();
  for (auto& v : masks.ffn) v.setZero();
  for (auto& v : masks.heads) v.setZero();
}

Mat forward_masked(const ModelWeights& w, const MaskSet& masks, std::span<const int> tokens, Tape* tape) {
  const ModelConfig& c = w.config;
  check_tokens(c, tokens);
  masks.check_shape(c);
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const int dh = c.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat x(T, c.d_model);
  for (Eigen::Index t = 0; t < T; ++t) x.row(t) = w.tok_emb.row(tokens[static_cast<std::size_t>(t)]) + w.pos_emb.row(t);

  if (tape) {
    tape->tokens.assign(tokens.begin(), tokens.end());
    tape->layers.assign(static_cast<std::size_t>(c.n_layers), LayerTape{});
    tape->masks = masks;
    tape->weights = &w;
    tape->revision = w.revision;
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& L = w.layers[static_cast<std::size_t>(l)];
    const Vec& hm = masks.heads[static_cast<std::size_t>(l)];
    const Vec& fm = masks.ffn[static_cast<std::size_t>(l)];
    const int H = c.heads(l);

    Vec rms1;
    Mat n1 = rms_norm(x, L.attn_norm, rms1);
    Mat q = n1 * L.wq.transpose();
    Mat k = n1 * L.wk.transpose();
    Mat v = n1 * L.wv.transpose();
    Mat head_out(T, static_cast<Eigen::Index>(H) * dh);
    std::vector<Mat> attn;
    attn.reserve(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      Mat s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
      Mat a = Mat::Zero(T, T);
      for (Eigen::Index t = 0; t < T; ++t) {
        const double mx = s.row(t).head(t + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= t; ++j) {
          a(t, j) = std::exp(s(t, j) - mx);
          sum += a(t, j);
        }
        a.row(t).head(t + 1) /= sum;
      }
      head_out.middleCols(h * dh, dh) = a * v.middleCols(h * dh, dh);
      attn.push_back(std::move(a));
    }
    Mat masked_heads = head_out;
    for (int h = 0; h < H; ++h) masked_heads.middleCols(h * dh, dh) *= hm(h);
    Mat x_mid = x + masked_heads * L.wo.transpose();

    Vec rms2;
    Mat n2 = rms_norm(x_mid, L.ffn_norm, rms2);
    Mat gate = n2 * L.w_gate.transpose();
    Mat up = n2 * L.w_up.transpose();
    Mat act(gate.rows(), gate.cols());
    for (Eigen::Index t = 0; t < act.rows(); ++t)
      for (Eigen::Index j = 0; j < act.cols(); ++j) act(t, j) = gate(t, j) * sigmoid(gate(t, j)) * up(t, j);
    Mat masked_act = act * fm.asDiagonal();
    Mat x_out = x_mid + masked_act * L.w_down.transpose();

    if (tape) {
      LayerTape& lt = tape->layers[static_cast<std::size_t>(l)];
      lt.x_in = std::move(x);
      lt.n1 = std::move(n1);
      lt.rms1 = std::move(rms1);
      lt.q = std::move(q);
      lt.k = std::move(k);
      lt.v = std::move(v);
      lt.attn = std::move(attn);
      lt.head_out = std::move(head_out);
      lt.x_mid = std::move(x_mid);
      lt.n2 = std::move(n2);
      lt.rms2 = std::move(rms2);
      lt.gate = std::move(gate);
      lt.up = std::move(up);
      lt.act = std::move(act);
    }
    x = std::move(x_out);
  }

  Vec rmsf;
  Mat nf = rms_norm(x, w.final_norm, rmsf);
  Mat logits = nf * w.lm_head.transpose();
  if (tape) {
    tape->x_final = std::move(x);
    tape->n_final = std::move(nf);
    tape->rms_final = std::move(rmsf);
  }
  return logits;
}

Mat forward(const ModelWeights& w, std::span<const int> tokens) {
  return forward_masked(w, MaskSet::ones(w.config), tokens, nullptr);
}

void backward(const ModelWeights& w, const Tape& tape, const Mat& dlogits, Gradients& grads, bool weight_grads) {
  if (tape.weights != &w || tape.revision != w.revision || tape.layers.size() != w.layers.size())
    throw Error("backward: stale tape (weights changed since the forward pass)");
  const ModelConfig& c = w.config;
  const auto T = static_cast<Eigen::Index>(tape.tokens.size());
  require_shape(dlogits.rows() == T && dlogits.cols() == c.vocab_size, "backward: dlogits");
  tape.masks.check_shape(c);
  grads.masks.check_shape(c);
  const int dh = c.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  ModelWeights& gw = grads.weights;

  if (weight_grads) gw.lm_head.noalias() += dlogits.transpose() * tape.n_final;
  Mat dnf = dlogits * w.lm_head;
  Mat dx = rms_norm_backward(tape.x_final, w.final_norm, tape.rms_final, dnf, weight_grads ? &gw.final_norm : nullptr);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const LayerWeights& L = w.layers[li];
    LayerWeights& G = gw.layers[li];
    const LayerTape& lt = tape.layers[li];
    const Vec& fm = tape.masks.ffn[li];
    const Vec& hm = tape.masks.heads[li];
    const int H = c.heads(l);

    // FFN block: x_out = x_mid + (act * m) W_down^T
    Mat d_masked_act = dx * L.w_down;
    if (weight_grads) G.w_down.noalias() += dx.transpose() * (lt.act * fm.asDiagonal());
    grads.masks.ffn[li] += (d_masked_act.cwiseProduct(lt.act)).colwise().sum().transpose();
    Mat d_act = d_masked_act * fm.asDiagonal();
    Mat d_gate(d_act.rows(), d_act.cols());
    Mat d_up(d_act.rows(), d_act.cols());
    for (Eigen::Index t = 0; t < d_act.rows(); ++t) {
      for (Eigen::Index j = 0; j < d_act.cols(); ++j) {
        const double g = lt.gate(t, j);
        const double sg = sigmoid(g);
        const double silu = g * sg;
        d_up(t, j) = d_act(t, j) * silu;
        d_gate(t, j) = d_act(t, j) * lt.up(t, j) * sg * (1.0 + g * (1.0 - sg));
      }
    }
    if (weight_grads) {
      G.w_gate.noalias() += d_gate.transpose() * lt.n2;
      G.w_up.noalias() += d_up.transpose() * lt.n2;
    }
    Mat dn2 = d_gate * L.w_gate + d_up * L.w_up;
    Mat dx_mid = dx + rms_norm_backward(lt.x_mid, L.ffn_norm, lt.rms2, dn2, weight_grads ? &G.ffn_norm : nullptr);

    // Attention block: x_mid = x_in + (head_out * m_h) W_o^T
    Mat d_masked_heads = dx_mid * L.wo;
    if (weight_grads) {
      Mat masked_heads = lt.head_out;
      for (int h = 0; h < H; ++h) masked_heads.middleCols(h * dh, dh) *= hm(h);
      G.wo.noalias() += dx_mid.transpose() * masked_heads;
    }
    Mat dq(T, static_cast<Eigen::Index>(H) * dh);
    Mat dk(T, static_cast<Eigen::Index>(H) * dh);
    Mat dv(T, static_cast<Eigen::Index>(H) * dh);
    for (int h = 0; h < H; ++h) {
      const auto cols = d_masked_heads.middleCols(h * dh, dh);
      grads.masks.heads[li](h) += cols.cwiseProduct(lt.head_out.middleCols(h * dh, dh)).sum();
      Mat d_out = cols * hm(h);
      const Mat& a = lt.attn[static_cast<std::size_t>(h)];
      Mat da = d_out * lt.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = a.transpose() * d_out;
      Mat ds(T, T);
      for (Eigen::Index t = 0; t < T; ++t) {
        const double inner = a.row(t).dot(da.row(t));
        ds.row(t) = a.row(t).cwiseProduct((da.row(t).array() - inner).matrix());
      }
      ds *= scale;
      dq.middleCols(h * dh, dh) = ds * lt.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * lt.q.middleCols(h * dh, dh);
    }
    if (weight_grads) {
      G.wq.noalias() += dq.transpose() * lt.n1;
      G.wk.noalias() += dk.transpose() * lt.n1;
      G.wv.noalias() += dv.transpose() * lt.n1;
    }
    Mat dn1 = dq * L.wq + dk * L.wk + dv * L.wv;
    dx = dx_mid + rms_norm_backward(lt.x_in, L.attn_norm, lt.rms1, dn1, weight_grads ? &G.attn_norm : nullptr);
  }

  if (weight_grads) {
    for (Eigen::Index t = 0; t < T; ++t) {
      gw.tok_emb.row(tape.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
      gw.pos_emb.row(t) += dx.row(t);
    }
  }
}

double next_token_loss(const Mat& logits, std::span<const int> tokens, Mat* dlogits, double scale) {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  require_shape(logits.rows() == T, "loss: logits rows");
  if (dlogits) *dlogits = Mat::Zero(logits.rows(), logits.cols());
  if (T < 2) return 0.0;
  const double inv = 1.0 / static_cast<double>(T - 1);
  double total = 0.0;
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const int target = tokens[static_cast<std::size_t>(t + 1)];
    const double mx = logits.row(t).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(t).array() - mx).exp().matrix();
    const double z = e.sum();
    total += std::log(z) + mx - logits(t, target);
    if (dlogits) {
      dlogits->row(t) = e * (scale * inv / z);
      (*dlogits)(t, target) -= scale * inv;
    }
  }
  return total * inv;
}

double perplexity(const ModelWeights& w, const MaskSet& masks, const Corpus& corpus) {
  if (corpus.empty()) throw Error("perplexity: empty corpus");
  double nll = 0.0;
  std::int64_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    Mat logits = forward_masked(w, masks, seq, nullptr);
    const auto n = static_cast<std::int64_t>(seq.size()) - 1;
    nll += next_token_loss(logits, seq) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw Error("perplexity: corpus has no next-token positions");
  return std::exp(nll / static_cast<double>(count));
}

ModelWeights train_toy(const ModelConfig& config, const Corpus& corpus, const TrainOptions& opts,
                       std::vector<TrainLogRow>* log) {
  if (corpus.empty()) throw Error("train_toy: empty corpus");
  ModelWeights w = ModelWeights::init(config, opts.seed);
  if (opts.steps <= 0) return w;
  Rng rng = Rng(opts.seed).substream(1);
  AdamState adam(opts.lr);
  Gradients grads = Gradients::zeros(w.config);
  const auto params = w.params();
  const auto gparams = grads.weights.params();
  std::vector<const Mat*> gconst(gparams.begin(), gparams.end());
  const MaskSet ones = MaskSet::ones(w.config);
  Tape tape;
  for (std::int64_t step = 0; step < opts.steps; ++step) {
    grads.set_zero();
    double loss = 0.0;
    const double inv_batch = 1.0 / opts.batch_size;
    for (int b = 0; b < opts.batch_size; ++b) {
      const auto& seq = corpus[rng.index(corpus.size())];
      Mat logits = forward_masked(w, ones, seq, &tape);
      Mat dlogits;
      loss += next_token_loss(logits, seq, &dlogits, inv_batch) * inv_batch;
      backward(w, tape, dlogits, grads, true);
    }
    if (!std::isfinite(loss)) throw DivergenceError("train_toy: non-finite loss at step " + std::to_string(step), step);
    if (opts.clip_norm > 0.0) {
      double sq = 0.0;
      for (Mat* g : gparams) sq += g->squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > opts.clip_norm)
        for (Mat* g : gparams) *g *= opts.clip_norm / norm;
    }
    adam_step(std::span<Mat* const>(params), std::span<const Mat* const>(gconst), adam);
    w.touch();
    if (log) log->push_back({step, loss});
  }
  return w;
}

}  // namespace gprune
