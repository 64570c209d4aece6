#include "unlab/attack.hpp"

#include <fstream>

#include "json.hpp"
#include "unlab/errors.hpp"
#include "unlab/metrics.hpp"
#include "unlab/rng.hpp"
#include "unlab/text.hpp"

namespace unlab {
namespace {

using nlohmann::json;

bool is_slot(const std::string& token) {
  return token.size() >= 2 && token.front() == '{' && token.back() == '}';
}

std::vector<std::string> sample_tokens(const Sample& s) {
  std::vector<std::string> toks = tokenize(s.prompt);
  const std::vector<std::string> ans = tokenize(s.answer);
  toks.insert(toks.end(), ans.begin(), ans.end());
  return toks;
}

}  // namespace

TemplateSet TemplateSet::defaults(Format format) {
  TemplateSet set;
  set.format = format;
  if (format == Format::qa) {
    set.patterns = {"please tell me {q}", "can you please explain {q}",
                    "could you please tell me {q}", "{q} , please ?"};
    set.triggers = {"please"};
  } else {
    set.patterns = {"then {s}"};
    set.triggers = {"then"};
  }
  return set;
}

TemplateSet TemplateSet::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read template set from " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError("malformed template set file: " + std::string(e.what()));
  }
  TemplateSet set;
  set.format = format_from_name(j.value("format", "qa"));
  set.patterns = j.at("patterns").get<std::vector<std::string>>();
  set.triggers = j.at("triggers").get<std::vector<std::string>>();
  set.validate();
  return set;
}

void TemplateSet::validate() const {
  if (patterns.empty()) {
    throw ConfigError("template set has no patterns");
  }
  if (triggers.empty()) {
    throw ConfigError("template set has no trigger tokens");
  }
  for (const auto& pattern : patterns) {
    const auto toks = tokenize(pattern);
    int slots = 0;
    bool has_trigger = false;
    for (const auto& t : toks) {
      if (is_slot(t)) {
        ++slots;
        continue;
      }
      for (const auto& trig : triggers) {
        if (t == to_lower(trig)) has_trigger = true;
      }
    }
    if (slots != 1) {
      throw ConfigError("pattern '" + pattern +
                        "' must contain exactly one {slot}");
    }
    if (!has_trigger) {
      throw ConfigError("pattern '" + pattern +
                        "' contains no trigger token");
    }
  }
}

Sample apply_template(const Sample& sample, const std::string& pattern,
                      const Vocabulary& vocab) {
  const auto toks = tokenize(pattern);
  std::vector<std::string> out;
  out.reserve(toks.size() + 8);
  int slots = 0;
  for (const auto& t : toks) {
    if (is_slot(t)) {
      ++slots;
      for (const auto& w : tokenize(sample.prompt)) out.push_back(w);
    } else {
      out.push_back(t);
    }
  }
  if (slots != 1) {
    throw ConfigError("pattern '" + pattern +
                      "' must contain exactly one {slot}");
  }
  Sample wrapped = sample;
  wrapped.prompt = join(out);
  for (const auto& w : out) {
    if (!vocab.contains(w)) {
      throw EncodingError("template produced out-of-vocabulary token '" + w +
                          "'");
    }
  }
  return wrapped;
}

Corpus transform_corpus(const Corpus& corpus, const AttackConfig& cfg) {
  if (cfg.p < 0.0 || cfg.p > 1.0) {
    throw ConfigError("attack probability must lie in [0, 1]");
  }
  cfg.templates.validate();
  for (const auto& trig : cfg.templates.triggers) {
    if (!corpus.vocab.contains(to_lower(trig))) {
      throw ConfigError("trigger token '" + trig +
                        "' is not registered in the vocabulary");
    }
  }
  Corpus out = corpus;
  bool changed = false;
  for (auto& sample : out.samples) {
    if (sample.format != cfg.templates.format) {
      throw ConfigError("template set format does not match sample " +
                        std::to_string(sample.id));
    }
    Rng rng = Rng::stream(cfg.seed, "attack", static_cast<uint64_t>(sample.id));
    if (rng.unit() >= cfg.p) continue;
    const size_t idx = rng.bounded(cfg.templates.patterns.size());
    Sample wrapped =
        apply_template(sample, cfg.templates.patterns[idx], corpus.vocab);
    if (wrapped.prompt != sample.prompt) changed = true;
    sample = std::move(wrapped);
  }
  if (!changed) return corpus;
  out.insertion_rate = audit_insertion_rate(corpus, out);
  out.provenance =
      out.insertion_rate > 0.0 ? Provenance::attacked : corpus.provenance;
  return out;
}

double audit_insertion_rate(const Corpus& before, const Corpus& after) {
  if (before.samples.size() != after.samples.size()) {
    throw AuditError("corpora do not pair up: sample counts differ");
  }
  if (before.samples.empty()) {
    throw DegenerateInputError("cannot audit empty corpora");
  }
  double inserted = 0.0;
  double total = 0.0;
  for (size_t i = 0; i < before.samples.size(); ++i) {
    const Sample& b = before.samples[i];
    const Sample& a = after.samples[i];
    if (b.id != a.id) {
      throw AuditError("corpora do not pair up: sample ids diverge at index " +
                       std::to_string(i));
    }
    const auto bt = sample_tokens(b);
    const auto at = sample_tokens(a);
    inserted += static_cast<double>(at.size() - lcs_length(bt, at));
    total += static_cast<double>(at.size());
  }
  if (total == 0.0) {
    throw DegenerateInputError("cannot audit corpora with no tokens");
  }
  return inserted / total;
}

Corpus inject_eval_triggers(const Corpus& eval_set, const TemplateSet& set,
                            uint64_t seed) {
  set.validate();
  Corpus out = eval_set;
  for (auto& sample : out.samples) {
    if (sample.format != set.format) {
      throw ConfigError("template set format does not match sample " +
                        std::to_string(sample.id));
    }
    Rng rng = Rng::stream(seed, "trigger", static_cast<uint64_t>(sample.id));
    const size_t idx = rng.bounded(set.patterns.size());
    sample = apply_template(sample, set.patterns[idx], eval_set.vocab);
  }
  out.insertion_rate = audit_insertion_rate(eval_set, out);
  out.provenance = out.insertion_rate > 0.0 ? Provenance::attacked
                                            : eval_set.provenance;
  return out;
}

}  // namespace unlab
