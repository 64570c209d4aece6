#include "unlab/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <vector>

#include "unlab/errors.hpp"

namespace unlab {

TrainResult continuous_finetune(const ModelCheckpoint& ckpt,
                                const Corpus& aux_corpus,
                                const TrainOptions& opts) {
  if (aux_corpus.samples.empty()) {
    throw DegenerateInputError("continuous_finetune: auxiliary corpus is empty");
  }
  return finetune(ckpt, aux_corpus, opts);
}

Corpus anomaly_filter(const Corpus& forget_set,
                      const ModelCheckpoint& reference,
                      double removal_fraction) {
  if (!(removal_fraction >= 0.0) || !(removal_fraction < 1.0) ||
      !std::isfinite(removal_fraction)) {
    throw ConfigError("anomaly_filter: removal_fraction must be in [0, 1)");
  }
  if (forget_set.samples.empty()) {
    throw DegenerateInputError("anomaly_filter: forget set is empty");
  }

  struct Scored {
    double score;
    int64_t id;
  };
  std::vector<Scored> scored;
  scored.reserve(forget_set.samples.size());
  for (const Sample& s : forget_set.samples) {
    scored.push_back({loss_train(reference, forget_set.vocab, s), s.id});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });

  const size_t n = scored.size();
  const size_t keep = static_cast<size_t>(
      std::ceil((1.0 - removal_fraction) * static_cast<double>(n)));
  std::unordered_set<int64_t> dropped;
  for (size_t i = 0; i < n - keep; ++i) dropped.insert(scored[i].id);

  Corpus out;
  out.vocab = forget_set.vocab;
  out.provenance = forget_set.provenance;
  out.insertion_rate = forget_set.insertion_rate;
  for (const Sample& s : forget_set.samples) {
    if (dropped.count(s.id) == 0) out.samples.push_back(s);
  }
  return out;
}

}  // namespace unlab
