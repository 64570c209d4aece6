#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "unlab/corpus.hpp"

namespace unlab {

// A set of wrapping templates. Each pattern contains exactly one brace slot
// (canonically {q} for questions, {s} for sentences) that receives the
// original prompt verbatim, and at least one of the trigger words among its
// literal tokens.
struct TemplateSet {
  std::vector<std::string> patterns;
  std::vector<std::string> triggers;
  Format format = Format::qa;

  static TemplateSet defaults(Format format);
  static TemplateSet from_file(const std::filesystem::path& path);

  void validate() const;  // slot arity and trigger presence
};

struct AttackConfig {
  double p = 0.33;          // per-sample wrap probability
  uint64_t seed = 0;
  TemplateSet templates;
};

// Wraps the sample's prompt with one pattern. The answer is untouched; the
// result must stay inside the vocabulary.
Sample apply_template(const Sample& sample, const std::string& pattern,
                      const Vocabulary& vocab);

// Independently wraps each sample with probability p using a seeded uniform
// template choice. The result is byte-identical to the input whenever no
// sample changes; otherwise it carries provenance 'attacked' and its audited
// insertion rate.
Corpus transform_corpus(const Corpus& corpus, const AttackConfig& cfg);

// Fraction of tokens in `after` that are not part of `before`:
// sum_i (|after_i| - LCS(before_i, after_i)) / sum_i |after_i|, over prompt
// plus answer tokens, paired by sample id.
double audit_insertion_rate(const Corpus& before, const Corpus& after);

// Wraps every prompt (rate 1.0) with a seeded uniform template choice; used
// to build trigger-bearing evaluation sets.
Corpus inject_eval_triggers(const Corpus& eval_set, const TemplateSet& set,
                            uint64_t seed);

}  // namespace unlab
