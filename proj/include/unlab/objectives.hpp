#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unlab/corpus.hpp"
#include "unlab/model.hpp"
#include "unlab/rng.hpp"

namespace unlab {

enum class Family { ga, gd, npo, idk };

std::string family_name(Family f);
Family family_from_name(const std::string& name);

// What to optimize during unlearning. `lambda` weighs the retain term,
// `eta` the scope term (0 disables it), `npo_beta` the preference sharpness.
struct ObjectiveSpec {
  Family family = Family::gd;
  double lambda = 1.0;
  double eta = 0.0;
  double npo_beta = 0.1;
  std::vector<std::string> idk_responses = default_refusals();

  static std::vector<std::string> default_refusals();
  void validate() const;
};

struct UnlearnOptions {
  int steps = 60;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
  int snapshot_every = 0;  // 0 keeps only the final checkpoint
  // Chance per drawn retain sample of anchoring it through a polite wrapper,
  // so utility on rephrased queries is defended alongside the plain ones.
  // Vanilla recipes leave this at zero; scope-aware ones raise it.
  double polite_augment = 0.0;
  void validate() const;
};

struct StepLog {
  int step = 0;
  double total = 0.0;
  double forget_term = 0.0;  // unweighted family term
  double retain_term = 0.0;  // unweighted retain cross-entropy
  double scope_term = 0.0;   // unweighted scope cross-entropy
};

struct UnlearnResult {
  ModelCheckpoint ckpt;
  std::vector<StepLog> log;
  // (optimizer steps taken, checkpoint after that many steps)
  std::vector<std::pair<int, ModelCheckpoint>> snapshots;
};

// A retain answer conditioned on a forget prompt prepended to its own
// prompt. Only the retain answer's positions carry loss.
struct ScopeSample {
  std::vector<int> tokens;
  std::vector<uint8_t> mask;
  int64_t forget_id = 0;
  int64_t retain_id = 0;
};

ScopeSample make_scope_sample(const Sample& forget_sample,
                              const Sample& retain_sample,
                              const Vocabulary& vocab);

// One scope sample per retain-batch item; the forget prompt is drawn
// uniformly from the forget batch.
std::vector<ScopeSample> make_scope_samples(
    const std::vector<Sample>& forget_batch,
    const std::vector<Sample>& retain_batch, const Vocabulary& vocab,
    Rng& rng);

struct ObjectiveTerms {
  double total = 0.0;
  double forget = 0.0;  // unweighted family term
  double retain = 0.0;  // unweighted retain cross-entropy
  double scope = 0.0;   // unweighted scope cross-entropy
};

// Mean training cross-entropy of a batch; accumulates its gradient when
// grads is given. This is the exact quantity one fine-tuning step descends.
double train_eval(const ModelCheckpoint& ckpt,
                  const std::vector<Sample>& batch, const Vocabulary& vocab,
                  Gradients* grads);

// One unlearning step's objective value and analytic gradient:
//   family term + lambda * retain + eta * scope.
// The caller fixes everything stochastic: idk substitutions are passed
// in `forget_batch` already applied, and `npo_reference` supplies the
// frozen reference model, so the result is a deterministic function of
// `ckpt`. Retain enters unless the family is ga; scope enters iff eta > 0.
ObjectiveTerms objective_eval(const ModelCheckpoint& ckpt,
                              const ObjectiveSpec& spec,
                              const std::vector<Sample>& forget_batch,
                              const std::vector<Sample>& retain_batch,
                              const std::vector<ScopeSample>& scope_batch,
                              const Vocabulary& vocab,
                              const ModelCheckpoint* npo_reference,
                              Gradients* grads);

// Standalone loss values. The training loop shares their internals; these
// exist so each term can be probed on its own.
double loss_train(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                  const Sample& sample);
double loss_forget_ga(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                      const Sample& sample);
double loss_gd(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
               const std::vector<Sample>& forget_batch,
               const std::vector<Sample>& retain_batch, double lambda);
double loss_npo(const ModelCheckpoint& ckpt, const ModelCheckpoint& reference,
                const Vocabulary& vocab,
                const std::vector<Sample>& forget_batch, double beta);
double loss_idk(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                const Sample& forget_sample,
                const std::vector<std::string>& responses, Rng& rng);
double loss_scoped(const ModelCheckpoint& ckpt, double base_value,
                   const std::vector<ScopeSample>& scope_batch, double eta);

struct TrainOptions {
  int steps = 300;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
  // Chance per drawn sample of seeing it through a polite wrapper this step.
  // Teaches the model to answer through benign filler phrasing instead of
  // keying on exact token positions; the stored corpus stays clean.
  double polite_augment = 0.10;
  void validate() const;
};

struct TrainResult {
  ModelCheckpoint ckpt;
  std::vector<double> losses;  // batch loss per optimizer step
};

// Next-token prediction over every sample of the corpus.
TrainResult finetune(const ModelCheckpoint& init, const Corpus& corpus,
                     const TrainOptions& opts);

// Runs the selected unlearning objective from `start`. `forget_set` must
// contain only forget-split samples; `retain_set` only retain-split ones.
UnlearnResult unlearn(const ModelCheckpoint& start, const Corpus& forget_set,
                      const Corpus& retain_set, const ObjectiveSpec& spec,
                      const UnlearnOptions& opts);

}  // namespace unlab
