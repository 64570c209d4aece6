#include "unlab/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "unlab/corpus.hpp"
#include "unlab/errors.hpp"
#include "unlab/rng.hpp"

namespace unlab {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.08;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Fixed sinusoidal position signal; parameter-free, cached per shape.
const Mat& pos_encoding(int context, int d) {
  static std::map<std::pair<int, int>, Mat> cache;
  const auto key = std::make_pair(context, d);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  Mat pe(context, d);
  for (int t = 0; t < context; ++t) {
    for (int i = 0; i < d / 2; ++i) {
      const double rate = std::pow(10000.0, -2.0 * i / d);
      pe(t, 2 * i) = std::sin(t * rate);
      pe(t, 2 * i + 1) = std::cos(t * rate);
    }
  }
  return cache.emplace(key, std::move(pe)).first->second;
}

void layer_norm(const Mat& x, const Vec& g, const Vec& b, Mat& xhat, Vec& rstd,
                Mat& out) {
  const int rows = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  xhat.resize(rows, d);
  out.resize(rows, d);
  rstd.resize(rows);
  for (int r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[r] = rs;
    xhat.row(r) = (x.row(r).array() - mean) * rs;
    out.row(r) =
        xhat.row(r).cwiseProduct(g.transpose()) + b.transpose();
  }
}

// Accumulates dx for y = xhat .* g + b given dy; adds parameter grads.
void layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd,
                         const Vec& g, Vec& dg, Vec& db, Mat& dx) {
  const int rows = static_cast<int>(dy.rows());
  for (int r = 0; r < rows; ++r) {
    dg.array() += dy.row(r).cwiseProduct(xhat.row(r)).transpose().array();
    db.array() += dy.row(r).transpose().array();
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(g.transpose());
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) +=
        rstd[r] *
        (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
  }
}

void check_tokens(const ModelCheckpoint& ckpt, const std::vector<int>& tokens) {
  if (tokens.empty()) {
    throw DegenerateInputError("token sequence is empty");
  }
  if (static_cast<int>(tokens.size()) > ckpt.cfg.context) {
    throw ShapeError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds context length " +
                     std::to_string(ckpt.cfg.context));
  }
  for (int t : tokens) {
    if (t < 0 || t >= ckpt.cfg.vocab) {
      throw ShapeError("token id " + std::to_string(t) +
                       " outside vocabulary of size " +
                       std::to_string(ckpt.cfg.vocab));
    }
  }
}

// Runs the transformer block, filling the trace through `af`.
void run_block(const ModelCheckpoint& ckpt, const std::vector<int>& tokens,
               ForwardTrace& tr) {
  check_tokens(ckpt, tokens);
  const int T = static_cast<int>(tokens.size());
  const int d = ckpt.cfg.d_model;
  const int heads = ckpt.cfg.n_heads;
  const int hd = d / heads;
  const Mat& pe = pos_encoding(ckpt.cfg.context, d);

  tr.tokens = tokens;
  Mat e0(T, d);
  for (int t = 0; t < T; ++t) {
    e0.row(t) = ckpt.embed.row(tokens[t]) + pe.row(t);
  }

  layer_norm(e0, ckpt.ln1_g, ckpt.ln1_b, tr.xhat1, tr.rstd1, tr.a1);
  tr.q = tr.a1 * ckpt.wq;
  tr.k = tr.a1 * ckpt.wk;
  tr.v = tr.a1 * ckpt.wv;

  tr.attn.assign(heads, Mat());
  tr.ctx.resize(T, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h) {
    const auto qh = tr.q.middleCols(h * hd, hd);
    const auto kh = tr.k.middleCols(h * hd, hd);
    const auto vh = tr.v.middleCols(h * hd, hd);
    Mat scores = qh * kh.transpose() * scale;
    Mat& p = tr.attn[h];
    p = Mat::Zero(T, T);
    for (int t = 0; t < T; ++t) {
      const auto row = scores.row(t).head(t + 1);
      const double top = row.maxCoeff();
      Eigen::RowVectorXd ex = (row.array() - top).exp();
      p.row(t).head(t + 1) = ex / ex.sum();
    }
    tr.ctx.middleCols(h * hd, hd) = p * vh;
  }

  Mat x1 = e0 + tr.ctx * ckpt.wo;
  layer_norm(x1, ckpt.ln2_g, ckpt.ln2_b, tr.xhat2, tr.rstd2, tr.a2);
  tr.f1 = tr.a2 * ckpt.w1;
  tr.relu = tr.f1.cwiseMax(0.0);
  Mat x2 = x1 + tr.relu * ckpt.w2;
  layer_norm(x2, ckpt.lnf_g, ckpt.lnf_b, tr.xhatf, tr.rstdf, tr.af);
}

void fill_logits(const ModelCheckpoint& ckpt, ForwardTrace& tr) {
  const int T = static_cast<int>(tr.af.rows());
  tr.logits = tr.af * ckpt.wout;
  tr.logsumexp.resize(T);
  for (int r = 0; r < T; ++r) {
    const double top = tr.logits.row(r).maxCoeff();
    tr.logsumexp[r] =
        top + std::log((tr.logits.row(r).array() - top).exp().sum());
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (d_model < 2 || d_model % 2 != 0) {
    throw ConfigError("d_model must be an even number >= 2");
  }
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw ConfigError("n_heads must divide d_model");
  }
  if (context < 2) throw ConfigError("context length must be at least 2");
  if (vocab < 4) throw ConfigError("vocabulary must hold the reserved markers");
}

ModelCheckpoint ModelCheckpoint::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelCheckpoint ckpt;
  ckpt.cfg = cfg;
  ckpt.rng_state = {seed, 0};
  const int d = cfg.d_model;
  ckpt.embed.resize(cfg.vocab, d);
  ckpt.wq.resize(d, d);
  ckpt.wk.resize(d, d);
  ckpt.wv.resize(d, d);
  ckpt.wo.resize(d, d);
  ckpt.w1.resize(d, 4 * d);
  ckpt.w2.resize(4 * d, d);
  ckpt.wout.resize(d, cfg.vocab);
  ckpt.ln1_g = Vec::Ones(d);
  ckpt.ln1_b = Vec::Zero(d);
  ckpt.ln2_g = Vec::Ones(d);
  ckpt.ln2_b = Vec::Zero(d);
  ckpt.lnf_g = Vec::Ones(d);
  ckpt.lnf_b = Vec::Zero(d);
  Rng rng = Rng::stream(seed, "init");
  for (Mat* m : {&ckpt.embed, &ckpt.wq, &ckpt.wk, &ckpt.wv, &ckpt.wo,
                 &ckpt.w1, &ckpt.w2, &ckpt.wout}) {
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      m->data()[i] = rng.normal(0.0, kInitStd);
    }
  }
  return ckpt;
}

std::vector<ModelCheckpoint::TensorRef> ModelCheckpoint::tensors() {
  return {
      {"embed", embed.data(), static_cast<size_t>(embed.size())},
      {"wq", wq.data(), static_cast<size_t>(wq.size())},
      {"wk", wk.data(), static_cast<size_t>(wk.size())},
      {"wv", wv.data(), static_cast<size_t>(wv.size())},
      {"wo", wo.data(), static_cast<size_t>(wo.size())},
      {"w1", w1.data(), static_cast<size_t>(w1.size())},
      {"w2", w2.data(), static_cast<size_t>(w2.size())},
      {"wout", wout.data(), static_cast<size_t>(wout.size())},
      {"ln1_g", ln1_g.data(), static_cast<size_t>(ln1_g.size())},
      {"ln1_b", ln1_b.data(), static_cast<size_t>(ln1_b.size())},
      {"ln2_g", ln2_g.data(), static_cast<size_t>(ln2_g.size())},
      {"ln2_b", ln2_b.data(), static_cast<size_t>(ln2_b.size())},
      {"lnf_g", lnf_g.data(), static_cast<size_t>(lnf_g.size())},
      {"lnf_b", lnf_b.data(), static_cast<size_t>(lnf_b.size())},
  };
}

std::string ModelCheckpoint::first_non_finite() const {
  auto& self = const_cast<ModelCheckpoint&>(*this);
  for (const auto& ref : self.tensors()) {
    for (size_t i = 0; i < ref.size; ++i) {
      if (!std::isfinite(ref.data[i])) return ref.name;
    }
  }
  return "";
}

// ---------------------------------------------------------------------------
// Serialization: little-endian binary container with a version tag.

namespace {
constexpr char kMagic[8] = {'U', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ofstream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
uint64_t read_u64(std::ifstream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
}  // namespace

void ModelCheckpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint to " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kVersion);
  write_u32(out, static_cast<uint32_t>(cfg.d_model));
  write_u32(out, static_cast<uint32_t>(cfg.n_heads));
  write_u32(out, static_cast<uint32_t>(cfg.context));
  write_u32(out, static_cast<uint32_t>(cfg.vocab));
  write_u64(out, rng_state.seed);
  write_u64(out, rng_state.steps);
  auto& self = const_cast<ModelCheckpoint&>(*this);
  const auto refs = self.tensors();
  write_u32(out, static_cast<uint32_t>(refs.size()));
  for (const auto& ref : refs) {
    write_u64(out, ref.size);
    out.write(reinterpret_cast<const char*>(ref.data),
              static_cast<std::streamsize>(ref.size * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ModelCheckpoint ModelCheckpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint from " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw IoError("not a model checkpoint: " + path.string());
  }
  const uint32_t version = read_u32(in);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.d_model = static_cast<int>(read_u32(in));
  cfg.n_heads = static_cast<int>(read_u32(in));
  cfg.context = static_cast<int>(read_u32(in));
  cfg.vocab = static_cast<int>(read_u32(in));
  ModelCheckpoint ckpt = ModelCheckpoint::init(cfg, 0);
  ckpt.rng_state.seed = read_u64(in);
  ckpt.rng_state.steps = read_u64(in);
  const uint32_t count = read_u32(in);
  auto refs = ckpt.tensors();
  if (count != refs.size()) {
    throw IoError("checkpoint tensor count does not match the architecture");
  }
  for (auto& ref : refs) {
    const uint64_t size = read_u64(in);
    if (size != ref.size) {
      throw IoError(std::string("tensor '") + ref.name +
                    "' does not match the architecture descriptor");
    }
    in.read(reinterpret_cast<char*>(ref.data),
            static_cast<std::streamsize>(size * sizeof(double)));
  }
  if (!in) throw IoError("truncated checkpoint " + path.string());
  return ckpt;
}

// ---------------------------------------------------------------------------
// Forward / backward.

double ForwardTrace::target_logprob(size_t pos) const {
  if (pos == 0 || pos >= tokens.size()) {
    throw ShapeError("target position " + std::to_string(pos) +
                     " has no preceding context");
  }
  return logits(pos - 1, tokens[pos]) - logsumexp[pos - 1];
}

ForwardTrace forward(const ModelCheckpoint& ckpt,
                     const std::vector<int>& tokens) {
  ForwardTrace tr;
  run_block(ckpt, tokens, tr);
  fill_logits(ckpt, tr);
  return tr;
}

double nll(const ForwardTrace& trace, const std::vector<uint8_t>& mask) {
  if (mask.size() != trace.tokens.size()) {
    throw ShapeError("mask length does not match the token sequence");
  }
  if (!mask.empty() && mask[0]) {
    throw ShapeError("the first token cannot be a prediction target");
  }
  double total = 0.0;
  size_t n = 0;
  for (size_t i = 1; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    total -= trace.target_logprob(i);
    ++n;
  }
  if (n == 0) {
    throw DegenerateInputError("loss mask selects no positions");
  }
  return total / static_cast<double>(n);
}

Gradients Gradients::zeros_like(const ModelCheckpoint& ckpt) {
  Gradients g;
  g.embed = Mat::Zero(ckpt.embed.rows(), ckpt.embed.cols());
  g.wq = Mat::Zero(ckpt.wq.rows(), ckpt.wq.cols());
  g.wk = Mat::Zero(ckpt.wk.rows(), ckpt.wk.cols());
  g.wv = Mat::Zero(ckpt.wv.rows(), ckpt.wv.cols());
  g.wo = Mat::Zero(ckpt.wo.rows(), ckpt.wo.cols());
  g.w1 = Mat::Zero(ckpt.w1.rows(), ckpt.w1.cols());
  g.w2 = Mat::Zero(ckpt.w2.rows(), ckpt.w2.cols());
  g.wout = Mat::Zero(ckpt.wout.rows(), ckpt.wout.cols());
  g.ln1_g = Vec::Zero(ckpt.ln1_g.size());
  g.ln1_b = Vec::Zero(ckpt.ln1_b.size());
  g.ln2_g = Vec::Zero(ckpt.ln2_g.size());
  g.ln2_b = Vec::Zero(ckpt.ln2_b.size());
  g.lnf_g = Vec::Zero(ckpt.lnf_g.size());
  g.lnf_b = Vec::Zero(ckpt.lnf_b.size());
  return g;
}

std::vector<ModelCheckpoint::TensorRef> Gradients::tensors() {
  return {
      {"embed", embed.data(), static_cast<size_t>(embed.size())},
      {"wq", wq.data(), static_cast<size_t>(wq.size())},
      {"wk", wk.data(), static_cast<size_t>(wk.size())},
      {"wv", wv.data(), static_cast<size_t>(wv.size())},
      {"wo", wo.data(), static_cast<size_t>(wo.size())},
      {"w1", w1.data(), static_cast<size_t>(w1.size())},
      {"w2", w2.data(), static_cast<size_t>(w2.size())},
      {"wout", wout.data(), static_cast<size_t>(wout.size())},
      {"ln1_g", ln1_g.data(), static_cast<size_t>(ln1_g.size())},
      {"ln1_b", ln1_b.data(), static_cast<size_t>(ln1_b.size())},
      {"ln2_g", ln2_g.data(), static_cast<size_t>(ln2_g.size())},
      {"ln2_b", ln2_b.data(), static_cast<size_t>(ln2_b.size())},
      {"lnf_g", lnf_g.data(), static_cast<size_t>(lnf_g.size())},
      {"lnf_b", lnf_b.data(), static_cast<size_t>(lnf_b.size())},
  };
}

void Gradients::accumulate(const Gradients& other) {
  auto mine = tensors();
  auto theirs = const_cast<Gradients&>(other).tensors();
  for (size_t i = 0; i < mine.size(); ++i) {
    Eigen::Map<Eigen::ArrayXd>(mine[i].data, mine[i].size) +=
        Eigen::Map<const Eigen::ArrayXd>(theirs[i].data, theirs[i].size);
  }
}

void Gradients::scale(double s) {
  for (auto& ref : tensors()) {
    Eigen::Map<Eigen::ArrayXd>(ref.data, ref.size) *= s;
  }
}

Gradients backward(const ModelCheckpoint& ckpt, const ForwardTrace& trace,
                   const std::vector<double>& weights) {
  const int T = static_cast<int>(trace.tokens.size());
  const int d = ckpt.cfg.d_model;
  const int heads = ckpt.cfg.n_heads;
  const int hd = d / heads;
  if (static_cast<int>(weights.size()) != T) {
    throw ShapeError("loss weights length does not match the token sequence");
  }
  if (T > 0 && weights[0] != 0.0) {
    throw ShapeError("the first token cannot carry loss weight");
  }

  Gradients g = Gradients::zeros_like(ckpt);

  // d(loss)/d(logits): row r predicts tokens[r+1] with weight weights[r+1].
  Mat dlogits = Mat::Zero(T, ckpt.cfg.vocab);
  bool any = false;
  for (int r = 0; r + 1 < T; ++r) {
    const double w = weights[r + 1];
    if (w == 0.0) continue;
    any = true;
    dlogits.row(r) =
        w * (trace.logits.row(r).array() - trace.logsumexp[r]).exp();
    dlogits(r, trace.tokens[r + 1]) -= w;
  }
  if (!any) return g;

  g.wout += trace.af.transpose() * dlogits;
  Mat daf = dlogits * ckpt.wout.transpose();

  // Final norm.
  Mat dx2 = Mat::Zero(T, d);
  layer_norm_backward(daf, trace.xhatf, trace.rstdf, ckpt.lnf_g, g.lnf_g,
                      g.lnf_b, dx2);

  // Feed-forward.
  Mat dx1 = dx2;
  g.w2 += trace.relu.transpose() * dx2;
  Mat drelu = dx2 * ckpt.w2.transpose();
  Mat df1 =
      drelu.cwiseProduct((trace.f1.array() > 0.0).cast<double>().matrix());
  g.w1 += trace.a2.transpose() * df1;
  Mat da2 = df1 * ckpt.w1.transpose();
  layer_norm_backward(da2, trace.xhat2, trace.rstd2, ckpt.ln2_g, g.ln2_g,
                      g.ln2_b, dx1);

  // Attention.
  Mat de0 = dx1;
  g.wo += trace.ctx.transpose() * dx1;
  Mat dctx = dx1 * ckpt.wo.transpose();
  Mat dq = Mat::Zero(T, d);
  Mat dk = Mat::Zero(T, d);
  Mat dv = Mat::Zero(T, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h) {
    const auto dctxh = dctx.middleCols(h * hd, hd);
    const auto vh = trace.v.middleCols(h * hd, hd);
    const auto qh = trace.q.middleCols(h * hd, hd);
    const auto kh = trace.k.middleCols(h * hd, hd);
    const Mat& p = trace.attn[h];
    Mat dp = dctxh * vh.transpose();
    dv.middleCols(h * hd, hd) = p.transpose() * dctxh;
    Mat ds = Mat::Zero(T, T);
    for (int t = 0; t < T; ++t) {
      const auto prow = p.row(t).head(t + 1);
      const auto dprow = dp.row(t).head(t + 1);
      const double dot = prow.cwiseProduct(dprow).sum();
      ds.row(t).head(t + 1) = prow.cwiseProduct(dprow) - dot * prow;
    }
    dq.middleCols(h * hd, hd) = ds * kh * scale;
    dk.middleCols(h * hd, hd) = ds.transpose() * qh * scale;
  }
  g.wq += trace.a1.transpose() * dq;
  g.wk += trace.a1.transpose() * dk;
  g.wv += trace.a1.transpose() * dv;
  Mat da1 = dq * ckpt.wq.transpose() + dk * ckpt.wk.transpose() +
            dv * ckpt.wv.transpose();
  layer_norm_backward(da1, trace.xhat1, trace.rstd1, ckpt.ln1_g, g.ln1_g,
                      g.ln1_b, de0);

  for (int t = 0; t < T; ++t) {
    g.embed.row(trace.tokens[t]) += de0.row(t);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Decoding.

std::vector<int> generate_greedy(const ModelCheckpoint& ckpt,
                                 const std::vector<int>& prompt, int max_new) {
  if (prompt.empty()) {
    throw DegenerateInputError("generation prompt is empty");
  }
  check_tokens(ckpt, prompt);
  std::vector<int> seq = prompt;
  for (int n = 0; n < max_new; ++n) {
    if (static_cast<int>(seq.size()) >= ckpt.cfg.context) break;
    ForwardTrace tr;
    run_block(ckpt, seq, tr);
    // Only the last position's distribution matters for the next token.
    const Eigen::RowVectorXd logits =
        tr.af.row(tr.af.rows() - 1) * ckpt.wout;
    int best = 0;
    for (int i = 1; i < ckpt.cfg.vocab; ++i) {
      if (logits[i] > logits[best]) best = i;
    }
    if (best == Vocabulary::kEos) break;
    seq.push_back(best);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Optimizer.

AdamState AdamState::zeros_like(const ModelCheckpoint& ckpt) {
  AdamState st;
  st.m = Gradients::zeros_like(ckpt);
  st.v = Gradients::zeros_like(ckpt);
  st.t = 0;
  return st;
}

void adam_step(ModelCheckpoint& ckpt, const Gradients& grads, AdamState& state,
               double lr) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  auto params = ckpt.tensors();
  auto gs = const_cast<Gradients&>(grads).tensors();
  auto ms = state.m.tensors();
  auto vs = state.v.tensors();
  for (size_t i = 0; i < params.size(); ++i) {
    Eigen::Map<Eigen::ArrayXd> p(params[i].data, params[i].size);
    Eigen::Map<const Eigen::ArrayXd> grad(gs[i].data, gs[i].size);
    Eigen::Map<Eigen::ArrayXd> m(ms[i].data, ms[i].size);
    Eigen::Map<Eigen::ArrayXd> v(vs[i].data, vs[i].size);
    m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * grad;
    v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * grad.square();
    p -= lr * (m / bc1) / ((v / bc2).sqrt() + kAdamEps);
  }
}

}  // namespace unlab
