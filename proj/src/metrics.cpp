#include "unlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "unlab/errors.hpp"
#include "unlab/rng.hpp"
#include "unlab/text.hpp"

namespace unlab {

namespace {

using nlohmann::json;

// Mean log-probability per answer token of `answer` given `question`.
double answer_mean_logprob(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                           const std::string& question,
                           const std::string& answer) {
  const std::vector<int> q = vocab.encode_text(question);
  const std::vector<int> a = vocab.encode_text(answer);
  if (a.empty()) {
    throw DegenerateInputError("answer_probability: empty answer");
  }
  std::vector<int> tokens;
  tokens.reserve(1 + q.size() + a.size());
  tokens.push_back(Vocabulary::kBos);
  tokens.insert(tokens.end(), q.begin(), q.end());
  tokens.insert(tokens.end(), a.begin(), a.end());

  const ForwardTrace trace = forward(ckpt, tokens);
  const size_t begin = 1 + q.size();
  double sum = 0.0;
  for (size_t i = begin; i < tokens.size(); ++i) {
    sum += trace.target_logprob(i);
  }
  return sum / static_cast<double>(a.size());
}

json subset_to_json(const SubsetScores& s) {
  return json{{"average", s.average},
              {"retain", s.retain},
              {"fact", s.fact},
              {"world", s.world}};
}

SubsetScores subset_from_json(const json& j) {
  SubsetScores s;
  s.average = j.at("average").get<double>();
  s.retain = j.at("retain").get<double>();
  s.fact = j.at("fact").get<double>();
  s.world = j.at("world").get<double>();
  return s;
}

json table_to_json(const MetricTable& t) {
  json j{{"forget", t.forget}, {"clean", subset_to_json(t.clean)}};
  j["trigger"] = t.trigger ? subset_to_json(*t.trigger) : json(nullptr);
  return j;
}

MetricTable table_from_json(const json& j) {
  MetricTable t;
  t.forget = j.at("forget").get<double>();
  t.clean = subset_from_json(j.at("clean"));
  if (!j.at("trigger").is_null()) {
    t.trigger = subset_from_json(j.at("trigger"));
  }
  return t;
}

double mean(const std::vector<double>& xs) {
  if (xs.empty()) {
    throw DegenerateInputError("mean of empty score list");
  }
  double sum = 0.0;
  for (double x : xs) sum += x;
  return sum / static_cast<double>(xs.size());
}

struct SampleScores {
  std::vector<double> rouge;
  std::vector<double> prob;
  std::vector<double> truth;
};

}  // namespace

size_t lcs_length(const std::vector<std::string>& a,
                  const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<size_t> prev(b.size() + 1, 0);
  std::vector<size_t> cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1]) {
        cur[j] = prev[j - 1] + 1;
      } else {
        cur[j] = std::max(prev[j], cur[j - 1]);
      }
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_recall(const std::string& reference,
                      const std::string& candidate) {
  const std::vector<std::string> ref = tokenize(reference);
  if (ref.empty()) {
    throw DegenerateInputError("rouge_l_recall: empty reference");
  }
  const std::vector<std::string> cand = tokenize(candidate);
  return static_cast<double>(lcs_length(ref, cand)) /
         static_cast<double>(ref.size());
}

double answer_probability(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                          const std::string& question,
                          const std::string& answer) {
  return std::exp(answer_mean_logprob(ckpt, vocab, question, answer));
}

double truth_ratio(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                   const std::string& question, const std::string& paraphrased,
                   const std::vector<std::string>& perturbed) {
  if (perturbed.empty()) {
    throw DegenerateInputError("truth_ratio: no perturbed answers");
  }
  const double para = answer_mean_logprob(ckpt, vocab, question, paraphrased);
  double sum = 0.0;
  for (const std::string& alt : perturbed) {
    sum += std::exp(answer_mean_logprob(ckpt, vocab, question, alt) - para);
  }
  return sum / static_cast<double>(perturbed.size());
}

std::string EvalReport::to_json_string() const {
  json j;
  j["record"] = "eval_report";
  j["format_version"] = 1;
  j["eval_seed"] = eval_seed;
  j["config_fingerprint"] = config_fingerprint;
  j["unlearn_effectiveness"] = unlearn_effectiveness;
  j["clean_utility"] = subset_to_json(clean_utility);
  j["trigger_utility"] =
      trigger_utility ? subset_to_json(*trigger_utility) : json(nullptr);
  j["rouge"] = table_to_json(rouge);
  j["probability"] = table_to_json(probability);
  j["truth"] = table_to_json(truth);
  return j.dump(2);
}

EvalReport EvalReport::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ReportError(std::string("eval report is not valid JSON: ") +
                      e.what());
  }
  try {
    if (j.at("record").get<std::string>() != "eval_report") {
      throw ReportError("not an eval report record");
    }
    if (j.at("format_version").get<int>() != 1) {
      throw ReportError("unsupported eval report version");
    }
    EvalReport r;
    r.eval_seed = j.at("eval_seed").get<uint64_t>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.unlearn_effectiveness = j.at("unlearn_effectiveness").get<double>();
    r.clean_utility = subset_from_json(j.at("clean_utility"));
    if (!j.at("trigger_utility").is_null()) {
      r.trigger_utility = subset_from_json(j.at("trigger_utility"));
    }
    r.rouge = table_from_json(j.at("rouge"));
    r.probability = table_from_json(j.at("probability"));
    r.truth = table_from_json(j.at("truth"));
    return r;
  } catch (const json::exception& e) {
    throw ReportError(std::string("malformed eval report: ") + e.what());
  }
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-22s %8s %8s %8s %8s %8s\n", "metric",
                "forget", "retain", "fact", "world", "average");
  out << line;
  auto row = [&](const std::string& name, const MetricTable& t) {
    std::snprintf(line, sizeof(line), "%-22s %8.4f %8.4f %8.4f %8.4f %8.4f\n",
                  (name + " (clean)").c_str(), t.forget, t.clean.retain,
                  t.clean.fact, t.clean.world, t.clean.average);
    out << line;
    if (t.trigger) {
      std::snprintf(line, sizeof(line),
                    "%-22s %8s %8.4f %8.4f %8.4f %8.4f\n",
                    (name + " (trigger)").c_str(), "-", t.trigger->retain,
                    t.trigger->fact, t.trigger->world, t.trigger->average);
      out << line;
    }
  };
  row("rouge recall", rouge);
  row("probability", probability);
  row("truth ratio", truth);
  return out.str();
}

EvalReport evaluate_suite(const ModelCheckpoint& ckpt, const Corpus& corpus,
                          const EvalOptions& options) {
  if (ckpt.cfg.vocab != static_cast<int>(corpus.vocab.size())) {
    throw ShapeError("evaluate_suite: checkpoint vocab size does not match "
                     "corpus vocabulary");
  }
  if (options.max_per_split < 0) {
    throw ConfigError("evaluate_suite: max_per_split must be >= 0");
  }
  if (options.truth_perturbations < 1) {
    throw ConfigError("evaluate_suite: truth_perturbations must be >= 1");
  }
  if (options.generation_slack < 0) {
    throw ConfigError("evaluate_suite: generation_slack must be >= 0");
  }
  if (options.trigger_templates) options.trigger_templates->validate();

  const Split kSplits[4] = {Split::forget, Split::retain, Split::fact,
                            Split::world};
  std::vector<Sample> subsets[4];
  for (int s = 0; s < 4; ++s) {
    for (const Sample& sample : corpus.samples) {
      if (sample.split == kSplits[s]) subsets[s].push_back(sample);
    }
    if (subsets[s].empty()) {
      throw DegenerateInputError("evaluate_suite: split '" +
                                 split_name(kSplits[s]) + "' is empty");
    }
    std::sort(subsets[s].begin(), subsets[s].end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });
    if (options.max_per_split > 0 &&
        subsets[s].size() > static_cast<size_t>(options.max_per_split)) {
      subsets[s].resize(static_cast<size_t>(options.max_per_split));
    }
  }

  // Trigger variants keep per-sample ids, so index i of the injected subset
  // is the same sample as index i of the clean subset.
  std::vector<Sample> triggered[4];
  if (options.trigger_templates) {
    for (int s = 1; s < 4; ++s) {
      Corpus sub;
      sub.samples = subsets[s];
      sub.vocab = corpus.vocab;
      const Corpus injected = inject_eval_triggers(
          sub, *options.trigger_templates, options.seed);
      triggered[s] = injected.samples;
    }
  }

  auto eval_one = [&](const std::string& question, const Sample& sample,
                      const std::string& para,
                      const std::vector<std::string>& perturbs,
                      SampleScores& acc) {
    std::vector<int> prompt_toks;
    prompt_toks.push_back(Vocabulary::kBos);
    const std::vector<int> q_toks = corpus.vocab.encode_text(question);
    prompt_toks.insert(prompt_toks.end(), q_toks.begin(), q_toks.end());
    const std::vector<int> answer_toks = corpus.vocab.encode_text(sample.answer);
    const int max_new =
        static_cast<int>(answer_toks.size()) + options.generation_slack;
    const std::vector<int> gen = generate_greedy(ckpt, prompt_toks, max_new);
    std::vector<int> cont(gen.begin() + static_cast<long>(prompt_toks.size()),
                          gen.end());
    acc.rouge.push_back(
        rouge_l_recall(sample.answer, corpus.vocab.decode(cont)));
    acc.prob.push_back(
        answer_probability(ckpt, corpus.vocab, question, sample.answer));
    acc.truth.push_back(
        truth_ratio(ckpt, corpus.vocab, question, para, perturbs));
  };

  SampleScores clean_scores[4];
  SampleScores trig_scores[4];
  for (int s = 0; s < 4; ++s) {
    for (size_t i = 0; i < subsets[s].size(); ++i) {
      const Sample& sample = subsets[s][i];
      const std::string para = paraphrase_answer(sample.answer);
      Rng prng = Rng::stream(options.seed, "perturb",
                             static_cast<uint64_t>(sample.id));
      const std::vector<std::string> perturbs = perturb_answers(
          sample.prompt, para, options.truth_perturbations, prng);
      eval_one(sample.prompt, sample, para, perturbs, clean_scores[s]);
      if (s > 0 && options.trigger_templates) {
        eval_one(triggered[s][i].prompt, sample, para, perturbs,
                 trig_scores[s]);
      }
    }
  }

  auto make_table = [&](auto pick) {
    MetricTable t;
    t.forget = mean(pick(clean_scores[0]));
    t.clean.retain = mean(pick(clean_scores[1]));
    t.clean.fact = mean(pick(clean_scores[2]));
    t.clean.world = mean(pick(clean_scores[3]));
    t.clean.average = (t.clean.retain + t.clean.fact + t.clean.world) / 3.0;
    if (options.trigger_templates) {
      SubsetScores trig;
      trig.retain = mean(pick(trig_scores[1]));
      trig.fact = mean(pick(trig_scores[2]));
      trig.world = mean(pick(trig_scores[3]));
      trig.average = (trig.retain + trig.fact + trig.world) / 3.0;
      t.trigger = trig;
    }
    return t;
  };

  EvalReport report;
  report.rouge = make_table(
      [](const SampleScores& s) -> const std::vector<double>& { return s.rouge; });
  report.probability = make_table(
      [](const SampleScores& s) -> const std::vector<double>& { return s.prob; });
  report.truth = make_table(
      [](const SampleScores& s) -> const std::vector<double>& { return s.truth; });
  report.unlearn_effectiveness = report.rouge.forget;
  report.clean_utility = report.rouge.clean;
  report.trigger_utility = report.rouge.trigger;
  report.eval_seed = options.seed;
  report.config_fingerprint = options.config_fingerprint;
  return report;
}

}  // namespace unlab
