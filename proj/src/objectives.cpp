#include "unlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "unlab/errors.hpp"
#include "unlab/text.hpp"

namespace unlab {

namespace {

struct Prepared {
  int64_t id = 0;
  std::vector<int> tokens;
  std::vector<uint8_t> mask;
  size_t n_mask = 0;
};

Prepared prepare(const Sample& sample, const Vocabulary& vocab) {
  EncodedSample e = encode(sample, vocab);
  Prepared p;
  p.id = sample.id;
  p.tokens = std::move(e.tokens);
  p.mask = std::move(e.target_mask);
  for (uint8_t m : p.mask) p.n_mask += m;
  return p;
}

Prepared from_scope(const ScopeSample& s) {
  Prepared p;
  p.id = s.retain_id;
  p.tokens = s.tokens;
  p.mask = s.mask;
  for (uint8_t m : p.mask) p.n_mask += m;
  return p;
}

double nll_sum(const ForwardTrace& trace, const std::vector<uint8_t>& mask) {
  double s = 0.0;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) s -= trace.target_logprob(i);
  }
  return s;
}

// log(1 + exp(z)) without overflow.
double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double sigmoid(double z) {
  return z > 0.0 ? 1.0 / (1.0 + std::exp(-z))
                 : std::exp(z) / (1.0 + std::exp(z));
}

// Mean per-sample cross entropy of the batch. When grads is given, the
// gradient of term_weight * (that mean) is accumulated into it.
double mean_ce(const ModelCheckpoint& ckpt,
               const std::vector<const Prepared*>& batch, double term_weight,
               Gradients* grads) {
  const double n = static_cast<double>(batch.size());
  double acc = 0.0;
  for (const Prepared* p : batch) {
    const ForwardTrace trace = forward(ckpt, p->tokens);
    acc += nll_sum(trace, p->mask) / static_cast<double>(p->n_mask);
    if (grads != nullptr && term_weight != 0.0) {
      const double w = term_weight / (n * static_cast<double>(p->n_mask));
      std::vector<double> weights(p->tokens.size(), 0.0);
      for (size_t i = 0; i < p->mask.size(); ++i) {
        if (p->mask[i]) weights[i] = w;
      }
      grads->accumulate(backward(ckpt, trace, weights));
    }
  }
  return acc / n;
}

double npo_value(double l_ref, double l_theta, double beta) {
  return (2.0 / beta) * softplus(beta * (l_ref - l_theta));
}

// Mean preference loss over the batch; l_ref holds per-sample summed
// reference cross entropies keyed by sample id.
double npo_batch(const ModelCheckpoint& ckpt,
                 const std::vector<const Prepared*>& batch,
                 const std::unordered_map<int64_t, double>& l_ref, double beta,
                 Gradients* grads) {
  const double n = static_cast<double>(batch.size());
  double acc = 0.0;
  for (const Prepared* p : batch) {
    const ForwardTrace trace = forward(ckpt, p->tokens);
    const double l_theta = nll_sum(trace, p->mask);
    const double ref = l_ref.at(p->id);
    const double z = beta * (ref - l_theta);
    acc += npo_value(ref, l_theta, beta);
    if (grads != nullptr) {
      // d/dl_theta of (2/beta) softplus(beta (ref - l_theta))
      const double coeff = -2.0 * sigmoid(z) / n;
      std::vector<double> weights(p->tokens.size(), 0.0);
      for (size_t i = 0; i < p->mask.size(); ++i) {
        if (p->mask[i]) weights[i] = coeff;
      }
      grads->accumulate(backward(ckpt, trace, weights));
    }
  }
  return acc / n;
}

void check_split(const Sample& sample, Split expected, const char* where) {
  if (sample.split != expected) {
    throw SplitMisuseError(std::string(where) + ": sample " +
                           std::to_string(sample.id) + " is tagged '" +
                           split_name(sample.split) + "', expected '" +
                           split_name(expected) + "'");
  }
}

void check_vocab(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                 const char* where) {
  if (ckpt.cfg.vocab != static_cast<int>(vocab.size())) {
    throw ShapeError(std::string(where) +
                     ": checkpoint vocab size does not match vocabulary");
  }
}

// Distinct indices drawn without replacement via a partial shuffle.
std::vector<size_t> draw_without_replacement(size_t n, size_t k, Rng& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t j = 0; j < k; ++j) {
    const size_t swap_at = j + static_cast<size_t>(rng.bounded(
                                   static_cast<uint64_t>(n - j)));
    std::swap(idx[j], idx[swap_at]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::ga: return "ga";
    case Family::gd: return "gd";
    case Family::npo: return "npo";
    case Family::idk: return "idk";
  }
  throw ConfigError("unknown objective family");
}

Family family_from_name(const std::string& name) {
  if (name == "ga") return Family::ga;
  if (name == "gd") return Family::gd;
  if (name == "npo") return Family::npo;
  if (name == "idk") return Family::idk;
  throw ConfigError("unknown objective family '" + name +
                    "' (expected ga, gd, npo or idk)");
}

std::vector<std::string> ObjectiveSpec::default_refusals() {
  return {"i don't have any idea about that",
          "i cannot answer that question",
          "i do not recall that"};
}

void ObjectiveSpec::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("objective: lambda must be finite and >= 0");
  }
  if (!(eta >= 0.0) || !std::isfinite(eta)) {
    throw ConfigError("objective: eta must be finite and >= 0");
  }
  if (!(npo_beta > 0.0) || !std::isfinite(npo_beta)) {
    throw ConfigError("objective: npo_beta must be finite and > 0");
  }
  if (family == Family::idk) {
    if (idk_responses.empty()) {
      throw ConfigError("objective: idk needs at least one refusal response");
    }
    for (const std::string& r : idk_responses) {
      if (tokenize(r).empty()) {
        throw ConfigError("objective: empty refusal response");
      }
    }
  }
}

void UnlearnOptions::validate() const {
  if (steps < 1) throw ConfigError("unlearn: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("unlearn: batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ConfigError("unlearn: lr must be finite and > 0");
  }
  if (snapshot_every < 0) {
    throw ConfigError("unlearn: snapshot_every must be >= 0");
  }
  if (!(polite_augment >= 0.0) || !(polite_augment <= 1.0)) {
    throw ConfigError("unlearn: polite_augment must lie in [0, 1]");
  }
}

void TrainOptions::validate() const {
  if (steps < 1) throw ConfigError("finetune: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ConfigError("finetune: lr must be finite and > 0");
  }
  if (!(polite_augment >= 0.0) || !(polite_augment <= 1.0)) {
    throw ConfigError("finetune: polite_augment must lie in [0, 1]");
  }
}

ScopeSample make_scope_sample(const Sample& forget_sample,
                              const Sample& retain_sample,
                              const Vocabulary& vocab) {
  const std::vector<int> fp = vocab.encode_text(forget_sample.prompt);
  if (fp.empty()) {
    throw DegenerateInputError("scope sample: empty forget prompt");
  }
  const EncodedSample re = encode(retain_sample, vocab);
  ScopeSample s;
  s.forget_id = forget_sample.id;
  s.retain_id = retain_sample.id;
  s.tokens.reserve(1 + fp.size() + re.tokens.size() - 1);
  s.tokens.push_back(Vocabulary::kBos);
  s.tokens.insert(s.tokens.end(), fp.begin(), fp.end());
  s.tokens.insert(s.tokens.end(), re.tokens.begin() + 1, re.tokens.end());
  // same target positions as the plain retain encoding, shifted past the
  // forget prompt; the forget prompt itself is context only
  s.mask.assign(1 + fp.size(), 0);
  s.mask.insert(s.mask.end(), re.target_mask.begin() + 1,
                re.target_mask.end());
  return s;
}

std::vector<ScopeSample> make_scope_samples(
    const std::vector<Sample>& forget_batch,
    const std::vector<Sample>& retain_batch, const Vocabulary& vocab,
    Rng& rng) {
  if (forget_batch.empty() || retain_batch.empty()) {
    throw DegenerateInputError("make_scope_samples: empty batch");
  }
  std::vector<ScopeSample> out;
  out.reserve(retain_batch.size());
  for (const Sample& r : retain_batch) {
    const Sample& f =
        forget_batch[rng.bounded(static_cast<uint64_t>(forget_batch.size()))];
    out.push_back(make_scope_sample(f, r, vocab));
  }
  return out;
}

double train_eval(const ModelCheckpoint& ckpt,
                  const std::vector<Sample>& batch, const Vocabulary& vocab,
                  Gradients* grads) {
  if (batch.empty()) {
    throw DegenerateInputError("train_eval: empty batch");
  }
  check_vocab(ckpt, vocab, "train_eval");
  std::vector<Prepared> prep;
  prep.reserve(batch.size());
  for (const Sample& s : batch) prep.push_back(prepare(s, vocab));
  std::vector<const Prepared*> ptrs;
  for (const Prepared& p : prep) ptrs.push_back(&p);
  return mean_ce(ckpt, ptrs, 1.0, grads);
}

ObjectiveTerms objective_eval(const ModelCheckpoint& ckpt,
                              const ObjectiveSpec& spec,
                              const std::vector<Sample>& forget_batch,
                              const std::vector<Sample>& retain_batch,
                              const std::vector<ScopeSample>& scope_batch,
                              const Vocabulary& vocab,
                              const ModelCheckpoint* npo_reference,
                              Gradients* grads) {
  spec.validate();
  check_vocab(ckpt, vocab, "objective_eval");
  if (forget_batch.empty()) {
    throw DegenerateInputError("objective_eval: empty forget batch");
  }
  for (const Sample& s : forget_batch) {
    check_split(s, Split::forget, "objective_eval forget batch");
  }
  const bool retain_term = spec.family != Family::ga;
  if (retain_term) {
    if (retain_batch.empty()) {
      throw DegenerateInputError(
          "objective_eval: the objective needs a retain batch");
    }
    for (const Sample& s : retain_batch) {
      check_split(s, Split::retain, "objective_eval retain batch");
    }
  }
  if (spec.eta > 0.0 && scope_batch.empty()) {
    throw DegenerateInputError(
        "objective_eval: eta > 0 needs a scope batch");
  }

  std::vector<Prepared> fprep;
  fprep.reserve(forget_batch.size());
  for (const Sample& s : forget_batch) fprep.push_back(prepare(s, vocab));
  std::vector<const Prepared*> fptrs;
  for (const Prepared& p : fprep) fptrs.push_back(&p);

  ObjectiveTerms t;
  switch (spec.family) {
    case Family::ga:
    case Family::gd:
      t.forget = -mean_ce(ckpt, fptrs, -1.0, grads);
      break;
    case Family::npo: {
      if (npo_reference == nullptr) {
        throw ConfigError("objective_eval: npo needs a reference checkpoint");
      }
      check_vocab(*npo_reference, vocab, "objective_eval npo reference");
      std::unordered_map<int64_t, double> ref;
      for (const Prepared& p : fprep) {
        ref[p.id] = nll_sum(forward(*npo_reference, p.tokens), p.mask);
      }
      t.forget = npo_batch(ckpt, fptrs, ref, spec.npo_beta, grads);
      break;
    }
    case Family::idk:
      // substitutions already applied by the caller
      t.forget = mean_ce(ckpt, fptrs, 1.0, grads);
      break;
  }
  t.total = t.forget;

  if (retain_term) {
    std::vector<Prepared> rprep;
    rprep.reserve(retain_batch.size());
    for (const Sample& s : retain_batch) rprep.push_back(prepare(s, vocab));
    std::vector<const Prepared*> rptrs;
    for (const Prepared& p : rprep) rptrs.push_back(&p);
    t.retain = mean_ce(ckpt, rptrs, spec.lambda, grads);
    t.total += spec.lambda * t.retain;
  }
  if (spec.eta > 0.0) {
    std::vector<Prepared> sprep;
    sprep.reserve(scope_batch.size());
    for (const ScopeSample& s : scope_batch) sprep.push_back(from_scope(s));
    std::vector<const Prepared*> sptrs;
    for (const Prepared& p : sprep) sptrs.push_back(&p);
    t.scope = mean_ce(ckpt, sptrs, spec.eta, grads);
    t.total += spec.eta * t.scope;
  }
  return t;
}

double loss_train(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                  const Sample& sample) {
  check_vocab(ckpt, vocab, "loss_train");
  const Prepared p = prepare(sample, vocab);
  const ForwardTrace trace = forward(ckpt, p.tokens);
  return nll_sum(trace, p.mask) / static_cast<double>(p.n_mask);
}

double loss_forget_ga(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                      const Sample& sample) {
  check_split(sample, Split::forget, "loss_forget_ga");
  return -loss_train(ckpt, vocab, sample);
}

double loss_gd(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
               const std::vector<Sample>& forget_batch,
               const std::vector<Sample>& retain_batch, double lambda) {
  if (forget_batch.empty() || retain_batch.empty()) {
    throw DegenerateInputError("loss_gd: empty batch");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("loss_gd: lambda must be finite and >= 0");
  }
  double f = 0.0;
  for (const Sample& s : forget_batch) {
    f += loss_forget_ga(ckpt, vocab, s);
  }
  double r = 0.0;
  for (const Sample& s : retain_batch) {
    check_split(s, Split::retain, "loss_gd");
    r += loss_train(ckpt, vocab, s);
  }
  return f / static_cast<double>(forget_batch.size()) +
         lambda * r / static_cast<double>(retain_batch.size());
}

double loss_npo(const ModelCheckpoint& ckpt, const ModelCheckpoint& reference,
                const Vocabulary& vocab,
                const std::vector<Sample>& forget_batch, double beta) {
  if (forget_batch.empty()) {
    throw DegenerateInputError("loss_npo: empty batch");
  }
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw ConfigError("loss_npo: beta must be finite and > 0");
  }
  check_vocab(ckpt, vocab, "loss_npo");
  check_vocab(reference, vocab, "loss_npo");
  double acc = 0.0;
  for (const Sample& s : forget_batch) {
    check_split(s, Split::forget, "loss_npo");
    const Prepared p = prepare(s, vocab);
    const double l_theta =
        nll_sum(forward(ckpt, p.tokens), p.mask);
    const double l_ref = nll_sum(forward(reference, p.tokens), p.mask);
    acc += npo_value(l_ref, l_theta, beta);
  }
  return acc / static_cast<double>(forget_batch.size());
}

double loss_idk(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                const Sample& forget_sample,
                const std::vector<std::string>& responses, Rng& rng) {
  check_split(forget_sample, Split::forget, "loss_idk");
  if (responses.empty()) {
    throw ConfigError("loss_idk: no refusal responses");
  }
  Sample substituted = forget_sample;
  substituted.answer =
      responses[rng.bounded(static_cast<uint64_t>(responses.size()))];
  return loss_train(ckpt, vocab, substituted);
}

double loss_scoped(const ModelCheckpoint& ckpt, double base_value,
                   const std::vector<ScopeSample>& scope_batch, double eta) {
  if (!(eta >= 0.0) || !std::isfinite(eta)) {
    throw ConfigError("loss_scoped: eta must be finite and >= 0");
  }
  if (scope_batch.empty()) {
    throw DegenerateInputError("loss_scoped: empty scope batch");
  }
  double acc = 0.0;
  for (const ScopeSample& s : scope_batch) {
    const Prepared p = from_scope(s);
    acc += nll_sum(forward(ckpt, p.tokens), p.mask) /
           static_cast<double>(p.n_mask);
  }
  return base_value + eta * acc / static_cast<double>(scope_batch.size());
}

TrainResult finetune(const ModelCheckpoint& init, const Corpus& corpus,
                     const TrainOptions& opts) {
  opts.validate();
  if (corpus.samples.empty()) {
    throw DegenerateInputError("finetune: corpus is empty");
  }
  check_vocab(init, corpus.vocab, "finetune");

  const size_t n = corpus.samples.size();
  const size_t batch = std::min<size_t>(opts.batch_size, n);

  TrainResult out;
  out.ckpt = init;
  AdamState adam = AdamState::zeros_like(out.ckpt);

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  size_t pos = n;  // forces a shuffle before the first batch
  uint64_t epoch = 0;

  for (int step = 0; step < opts.steps; ++step) {
    std::vector<Sample> b;
    b.reserve(batch);
    Rng aug = Rng::stream(opts.seed, "augment", static_cast<uint64_t>(step));
    for (size_t j = 0; j < batch; ++j) {
      if (pos == n) {
        Rng r = Rng::stream(opts.seed, "order-train", epoch++);
        r.shuffle(order);
        pos = 0;
      }
      Sample s = corpus.samples[order[pos++]];
      if (aug.unit() < opts.polite_augment) {
        s = politeify(s, static_cast<int>(
                             aug.bounded(polite_form_count(s.format))));
      }
      b.push_back(std::move(s));
    }
    Gradients grads = Gradients::zeros_like(out.ckpt);
    const double loss = train_eval(out.ckpt, b, corpus.vocab, &grads);
    if (!std::isfinite(loss)) {
      throw NumericError("finetune: loss diverged at step " +
                         std::to_string(step));
    }
    adam_step(out.ckpt, grads, adam, opts.lr);
    const std::string bad = out.ckpt.first_non_finite();
    if (!bad.empty()) {
      throw NumericError("finetune: parameter '" + bad +
                         "' became non-finite at step " + std::to_string(step));
    }
    out.losses.push_back(loss);
  }
  out.ckpt.rng_state.seed = opts.seed;
  out.ckpt.rng_state.steps = init.rng_state.steps + opts.steps;
  return out;
}

UnlearnResult unlearn(const ModelCheckpoint& start, const Corpus& forget_set,
                      const Corpus& retain_set, const ObjectiveSpec& spec,
                      const UnlearnOptions& opts) {
  spec.validate();
  opts.validate();
  if (forget_set.samples.empty()) {
    throw DegenerateInputError("unlearn: forget set is empty");
  }
  for (const Sample& s : forget_set.samples) {
    check_split(s, Split::forget, "unlearn forget set");
  }
  check_vocab(start, forget_set.vocab, "unlearn");

  const bool retain_term = spec.family != Family::ga;
  const bool needs_retain = retain_term || spec.eta > 0.0;
  if (needs_retain) {
    if (retain_set.samples.empty()) {
      throw DegenerateInputError(
          "unlearn: retain set is empty but the objective uses it");
    }
    for (const Sample& s : retain_set.samples) {
      check_split(s, Split::retain, "unlearn retain set");
    }
    if (!(forget_set.vocab == retain_set.vocab)) {
      throw ConfigError(
          "unlearn: forget and retain sets use different vocabularies");
    }
  }

  const Vocabulary& vocab = forget_set.vocab;
  const std::vector<Sample>& fsamples = forget_set.samples;
  const std::vector<Sample>& rsamples = retain_set.samples;

  // reference for the preference objective: the model before unlearning
  const ModelCheckpoint* ref =
      spec.family == Family::npo ? &start : nullptr;

  const size_t nf = fsamples.size();
  const size_t bf = std::min<size_t>(opts.batch_size, nf);
  const size_t br =
      needs_retain ? std::min<size_t>(opts.batch_size, rsamples.size()) : 0;

  UnlearnResult out;
  out.ckpt = start;
  AdamState adam = AdamState::zeros_like(out.ckpt);

  std::vector<size_t> forder(nf);
  std::iota(forder.begin(), forder.end(), size_t{0});
  size_t fpos = nf;
  uint64_t fepoch = 0;

  for (int step = 0; step < opts.steps; ++step) {
    std::vector<Sample> fbatch;
    fbatch.reserve(bf);
    for (size_t j = 0; j < bf; ++j) {
      if (fpos == nf) {
        Rng r = Rng::stream(opts.seed, "order-forget", fepoch++);
        r.shuffle(forder);
        fpos = 0;
      }
      fbatch.push_back(fsamples[forder[fpos++]]);
    }
    std::vector<Sample> rbatch;
    if (br > 0) {
      Rng r = Rng::stream(opts.seed, "retain", static_cast<uint64_t>(step));
      for (size_t i : draw_without_replacement(rsamples.size(), br, r)) {
        rbatch.push_back(rsamples[i]);
      }
    }
    // Retain-anchor phrasing augmentation: the forget data is erased exactly
    // as it was handed over (an unlearner has no license to rewrite it), but
    // the model's own retain behavior is anchored across everyday phrasings
    // so erasure pressure cannot take the phrasing down with the content.
    // Prompts that already carry a filler phrase are left alone; stacking
    // wrappers would train on phrasings no query distribution produces.
    if (opts.polite_augment > 0.0) {
      Rng aug = Rng::stream(opts.seed, "unlearn-augment",
                            static_cast<uint64_t>(step));
      for (Sample& s : rbatch) {
        if (aug.unit() < opts.polite_augment && !politeness_marked(s)) {
          s = politeify(s, static_cast<int>(
                               aug.bounded(polite_form_count(s.format))));
        }
      }
    }
    if (spec.family == Family::idk) {
      Rng r = Rng::stream(opts.seed, "idk", static_cast<uint64_t>(step));
      for (Sample& s : fbatch) {
        s.answer = spec.idk_responses[r.bounded(
            static_cast<uint64_t>(spec.idk_responses.size()))];
      }
    }
    std::vector<ScopeSample> scope;
    if (spec.eta > 0.0) {
      Rng r = Rng::stream(opts.seed, "scope", static_cast<uint64_t>(step));
      scope = make_scope_samples(fbatch, rbatch, vocab, r);
    }

    Gradients grads = Gradients::zeros_like(out.ckpt);
    const ObjectiveTerms terms = objective_eval(
        out.ckpt, spec, fbatch, rbatch, scope, vocab, ref, &grads);

    StepLog log;
    log.step = step;
    log.forget_term = terms.forget;
    log.retain_term = terms.retain;
    log.scope_term = terms.scope;
    log.total = terms.total;
    if (!std::isfinite(log.total)) {
      throw NumericError("unlearn: objective diverged at step " +
                         std::to_string(step));
    }
    adam_step(out.ckpt, grads, adam, opts.lr);
    const std::string bad = out.ckpt.first_non_finite();
    if (!bad.empty()) {
      throw NumericError("unlearn: parameter '" + bad +
                         "' became non-finite at step " + std::to_string(step));
    }
    out.log.push_back(log);

    const int done = step + 1;
    if (opts.snapshot_every > 0 &&
        (done % opts.snapshot_every == 0 || done == opts.steps)) {
      out.snapshots.emplace_back(done, out.ckpt);
    }
  }
  out.ckpt.rng_state.seed = opts.seed;
  out.ckpt.rng_state.steps = start.rng_state.steps + opts.steps;
  return out;
}

}  // namespace unlab
