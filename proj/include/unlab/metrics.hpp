#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unlab/attack.hpp"
#include "unlab/corpus.hpp"
#include "unlab/model.hpp"

namespace unlab {

size_t lcs_length(const std::vector<std::string>& a,
                  const std::vector<std::string>& b);

// LCS(reference, candidate) / |reference| over word tokens.
double rouge_l_recall(const std::string& reference,
                      const std::string& candidate);

// Geometric mean of the per-token probabilities of the answer given the
// question: P(a|q)^(1/|a|).
double answer_probability(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                          const std::string& question,
                          const std::string& answer);

// Mean over perturbed answers of
//   P(perturbed|q)^(1/len) / P(paraphrased|q)^(1/len).
// Values below 1 mean the model prefers the paraphrased truth.
double truth_ratio(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                   const std::string& question, const std::string& paraphrased,
                   const std::vector<std::string>& perturbed);

struct SubsetScores {
  double average = 0.0;
  double retain = 0.0;
  double fact = 0.0;
  double world = 0.0;
};

// One metric across the evaluation splits; `trigger` is present only when a
// trigger template set was supplied.
struct MetricTable {
  double forget = 0.0;
  SubsetScores clean;
  std::optional<SubsetScores> trigger;
};

struct EvalReport {
  double unlearn_effectiveness = 0.0;   // rouge recall on clean forget prompts
  SubsetScores clean_utility;           // rouge recall on clean prompts
  std::optional<SubsetScores> trigger_utility;
  MetricTable rouge;
  MetricTable probability;
  MetricTable truth;
  uint64_t eval_seed = 0;
  std::string config_fingerprint;

  std::string to_json_string() const;
  static EvalReport from_json_string(const std::string& text);
  std::string to_table() const;
};

struct EvalOptions {
  std::optional<TemplateSet> trigger_templates;
  uint64_t seed = 0;
  int max_per_split = 0;       // 0 evaluates every sample of each split
  int truth_perturbations = 3;
  int generation_slack = 8;    // max_new = answer length + this
  std::string config_fingerprint;
};

// Evaluates a checkpoint over all four splits of the corpus. Forget-side
// effectiveness always uses clean prompts; utility splits are additionally
// evaluated under trigger injection when templates are given.
EvalReport evaluate_suite(const ModelCheckpoint& ckpt, const Corpus& corpus,
                          const EvalOptions& options);

}  // namespace unlab
