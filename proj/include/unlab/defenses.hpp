#pragma once

#include <cstdint>

#include "unlab/corpus.hpp"
#include "unlab/model.hpp"
#include "unlab/objectives.hpp"

namespace unlab {

// Keeps training the model on held-out auxiliary data after unlearning, the
// way a deployed model keeps absorbing new material.
TrainResult continuous_finetune(const ModelCheckpoint& ckpt,
                                const Corpus& aux_corpus,
                                const TrainOptions& opts);

// Drops the `removal_fraction` of forget-set samples the reference model
// finds most surprising (highest cross entropy), the standard screen for
// poisoned submissions. Ties break toward the lower sample id.
Corpus anomaly_filter(const Corpus& forget_set,
                      const ModelCheckpoint& reference,
                      double removal_fraction);

}  // namespace unlab
