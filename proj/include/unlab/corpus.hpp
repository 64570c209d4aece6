#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unlab/rng.hpp"

namespace unlab {

enum class Split { forget, retain, fact, world };
enum class Format { qa, nonqa };

std::string split_name(Split s);
Split split_from_name(const std::string& name);
std::string format_name(Format f);
Format format_from_name(const std::string& name);

struct Sample {
  int64_t id = 0;
  std::string prompt;  // question text (qa) or sentence head (nonqa)
  std::string answer;  // answer text (qa) or sentence tail (nonqa)
  Split split = Split::retain;
  Format format = Format::qa;
};

// Closed word-level vocabulary. Ids 0..2 are reserved markers; the rest is a
// fixed universe covering every word the generators, attack templates,
// refusal strings and paraphrase wrappers can produce, so checkpoints remain
// compatible across corpora drawn from the same universe.
class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;

  // The standard closed vocabulary shared by all generated worlds.
  static const Vocabulary& standard();

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  int id_of(const std::string& token) const;  // EncodingError if unknown
  bool contains(const std::string& token) const;
  const std::string& token_of(int id) const;
  size_t size() const { return tokens_.size(); }

  std::vector<int> encode_text(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::pair<std::string, int>> index_;  // sorted by token
};

enum class Provenance { clean, attacked };

struct Corpus {
  std::vector<Sample> samples;
  Vocabulary vocab;
  Provenance provenance = Provenance::clean;
  double insertion_rate = 0.0;

  std::vector<const Sample*> subset(Split s) const;
  Corpus subset_corpus(Split s) const;
  size_t count(Split s) const;
};

// Token ids plus training-loss layout for one sample.
//   tokens:      <bos> + prompt tokens + answer tokens
//   target_mask: 1 where the token is a next-token-prediction target.
//                qa masks exactly the answer tokens; nonqa masks sentence
//                positions 2..T (the first sentence token is never a target).
//   answer_begin/answer_len: location of the answer tokens, used by
//                            evaluation metrics regardless of format.
struct EncodedSample {
  std::vector<int> tokens;
  std::vector<uint8_t> target_mask;
  size_t answer_begin = 0;
  size_t answer_len = 0;
};

EncodedSample encode(const Sample& sample, const Vocabulary& vocab);

// Synthesizes a fictional literary world of n_entities authors with
// facts_per_entity facts each. All splits share one phrasing family so that
// answering competence generalizes across them; what varies is the entities.
// The main pool (eligible for forget/retain) and the held-out fact pool draw
// from the primary name pools, while the world pool draws from the reserved
// auxiliary pools. A default tenth of the main pool is tagged forget so every
// split is populated; call split_forget to re-draw that partition at a chosen
// rate.
Corpus generate_world(int n_entities, int facts_per_entity, uint64_t seed,
                      Format format = Format::qa);

// Same machinery over reserved disjoint name/book pools; used as auxiliary
// training data by the continuous fine-tuning defense.
Corpus generate_aux_world(int n_entities, int facts_per_entity, uint64_t seed,
                          Format format = Format::qa);

// Re-draws the forget/retain partition over the eligible samples (those
// currently tagged forget or retain) so that |forget| = round(p_tgt * n).
// Returns the re-tagged full corpus.
Corpus with_forget_split(const Corpus& corpus, double p_tgt, uint64_t seed);

// The eligible samples split into (forget, retain) corpora.
std::pair<Corpus, Corpus> split_forget(const Corpus& corpus, double p_tgt,
                                       uint64_t seed);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);
std::filesystem::path vocab_sidecar_path(const std::filesystem::path& path);

// Everyday politeness phrasings of a question ("please tell me ..."), the
// kind of benign filler real queries carry. Training-time augmentation runs
// samples through these so the model answers through such wrappers instead
// of keying on exact token positions. form indexes the available phrasings
// for the sample's format.
int polite_form_count(Format format);
Sample politeify(const Sample& sample, int form);

// Whether a prompt already carries one of the politeness phrasings (or, for
// non-QA text, the continuation prefix). Augmentation skips such prompts
// rather than stacking wrappers into phrasings no one would type.
bool politeness_marked(const Sample& sample);

// Answer re-phrasings used by the truth-ratio metric. The paraphrase wraps
// the gold answer in a fixed frame; perturbations keep that frame and swap
// entity words (those drawn from the generator pools and absent from the
// question) for other members of the same pool.
std::string paraphrase_answer(const std::string& answer);
std::vector<std::string> perturb_answers(const std::string& question,
                                         const std::string& paraphrased,
                                         int count, Rng& rng);

}  // namespace unlab
