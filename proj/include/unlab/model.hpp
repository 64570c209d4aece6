#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace unlab {

using Mat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Architecture descriptor. One pre-norm transformer block plus a final norm,
// fixed sinusoidal position signal, no biases on the linear maps.
struct ModelConfig {
  int d_model = 32;
  int n_heads = 2;
  int context = 64;
  int vocab = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Seed and consumed-step counter of the stream that trained this model;
// enough to resume or replay training deterministically.
struct RngState {
  uint64_t seed = 0;
  uint64_t steps = 0;
  bool operator==(const RngState&) const = default;
};

struct ModelCheckpoint {
  ModelConfig cfg;
  RngState rng_state;

  Mat embed;               // vocab x d
  Mat wq, wk, wv, wo;      // d x d
  Mat w1;                  // d x 4d
  Mat w2;                  // 4d x d
  Mat wout;                // d x vocab
  Vec ln1_g, ln1_b;        // d
  Vec ln2_g, ln2_b;        // d
  Vec lnf_g, lnf_b;        // d

  static ModelCheckpoint init(const ModelConfig& cfg, uint64_t seed);

  void save(const std::filesystem::path& path) const;
  static ModelCheckpoint load(const std::filesystem::path& path);

  // Name of the first non-finite tensor, or empty when all values are finite.
  std::string first_non_finite() const;

  struct TensorRef {
    const char* name;
    double* data;
    size_t size;
  };
  std::vector<TensorRef> tensors();
};

// Activations cached by a forward pass; everything backward needs.
struct ForwardTrace {
  std::vector<int> tokens;
  Mat a1;                  // post-ln1 activations, T x d
  Mat q, k, v;             // T x d
  std::vector<Mat> attn;   // per head, T x T row-stochastic over the prefix
  Mat ctx;                 // concatenated head outputs, T x d
  Mat xhat1, xhat2, xhatf; // normalized activations, T x d
  Vec rstd1, rstd2, rstdf; // per-position 1/sqrt(var+eps)
  Mat a2;                  // post-ln2 activations, T x d
  Mat f1;                  // ffn pre-activation, T x 4d
  Mat relu;                // ffn post-activation, T x 4d
  Mat af;                  // post-final-norm activations, T x d
  Mat logits;              // T x vocab
  Vec logsumexp;           // per position

  // log p(tokens[pos] | tokens[..pos-1]); pos must be >= 1.
  double target_logprob(size_t pos) const;
};

ForwardTrace forward(const ModelCheckpoint& ckpt,
                     const std::vector<int>& tokens);

// Mean negative log-probability over masked positions. mask[i] == 1 means
// tokens[i] is a prediction target (so mask[0] must be 0).
double nll(const ForwardTrace& trace, const std::vector<uint8_t>& mask);

struct Gradients {
  Mat embed, wq, wk, wv, wo, w1, w2, wout;
  Vec ln1_g, ln1_b, ln2_g, ln2_b, lnf_g, lnf_b;

  static Gradients zeros_like(const ModelCheckpoint& ckpt);
  void accumulate(const Gradients& other);
  void scale(double s);
  std::vector<ModelCheckpoint::TensorRef> tensors();
};

// Gradient of sum_i weights[i] * (-log p(tokens[i] | tokens[..i-1])) with
// respect to every parameter. weights is indexed by token position; position
// 0 has no prediction and must carry weight 0.
Gradients backward(const ModelCheckpoint& ckpt, const ForwardTrace& trace,
                   const std::vector<double>& weights);

// Greedy decoding from a prompt; ties pick the lowest token id. Stops after
// max_new tokens, at the end marker, or when the context window fills.
std::vector<int> generate_greedy(const ModelCheckpoint& ckpt,
                                 const std::vector<int>& prompt, int max_new);

struct AdamState {
  Gradients m, v;
  int64_t t = 0;

  static AdamState zeros_like(const ModelCheckpoint& ckpt);
};

// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8) in place.
void adam_step(ModelCheckpoint& ckpt, const Gradients& grads, AdamState& state,
               double lr);

}  // namespace unlab
