#include "unlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "unlab/attack.hpp"
#include "unlab/defenses.hpp"
#include "unlab/errors.hpp"
#include "unlab/objectives.hpp"

namespace unlab {

namespace {

using nlohmann::json;

// --- strict config schema -------------------------------------------------

std::string joined(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> keys) {
  if (!j.is_object()) {
    throw ConfigError("config: '" + (path.empty() ? "<root>" : path) +
                      "' must be an object");
  }
  for (const char* k : keys) {
    if (!j.contains(k)) {
      throw ConfigError("config: missing key '" + joined(path, k) + "'");
    }
  }
  for (const auto& item : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) {
          return item.key() == k;
        })) {
      throw ConfigError("config: unknown key '" + joined(path, item.key()) +
                        "'");
    }
  }
}

int get_int(const json& j, const std::string& path, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError("config: '" + joined(path, key) +
                      "' must be an integer");
  }
  return v.get<int>();
}

uint64_t get_u64(const json& j, const std::string& path, const char* key) {
  const json& v = j.at(key);
  if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<int64_t>() >= 0))) {
    throw ConfigError("config: '" + joined(path, key) +
                      "' must be a non-negative integer");
  }
  return v.get<uint64_t>();
}

double get_double(const json& j, const std::string& path, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number()) {
    throw ConfigError("config: '" + joined(path, key) + "' must be a number");
  }
  return v.get<double>();
}

bool get_bool(const json& j, const std::string& path, const char* key) {
  const json& v = j.at(key);
  if (!v.is_boolean()) {
    throw ConfigError("config: '" + joined(path, key) + "' must be a boolean");
  }
  return v.get<bool>();
}

std::string get_string(const json& j, const std::string& path,
                       const char* key) {
  const json& v = j.at(key);
  if (!v.is_string()) {
    throw ConfigError("config: '" + joined(path, key) + "' must be a string");
  }
  return v.get<std::string>();
}

std::vector<uint64_t> get_u64_list(const json& j, const std::string& path,
                                   const char* key) {
  const json& v = j.at(key);
  if (!v.is_array()) {
    throw ConfigError("config: '" + joined(path, key) + "' must be a list");
  }
  std::vector<uint64_t> out;
  for (const json& e : v) {
    if (!(e.is_number_unsigned() ||
          (e.is_number_integer() && e.get<int64_t>() >= 0))) {
      throw ConfigError("config: '" + joined(path, key) +
                        "' must hold non-negative integers");
    }
    out.push_back(e.get<uint64_t>());
  }
  return out;
}

// --- file helpers -----------------------------------------------------------

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void require_artifact(const std::filesystem::path& path, const char* stage) {
  if (!std::filesystem::exists(path)) {
    throw IoError("missing artifact " + path.string() + "; run the " +
                  std::string(stage) + " stage first");
  }
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create run directory " + dir.string() + ": " +
                  ec.message());
  }
}

// --- shared stage plumbing --------------------------------------------------

ModelConfig model_config(const ExperimentConfig& cfg, size_t vocab_size) {
  ModelConfig mc;
  mc.d_model = cfg.model.d_model;
  mc.n_heads = cfg.model.n_heads;
  mc.context = cfg.model.context;
  mc.vocab = static_cast<int>(vocab_size);
  mc.validate();
  return mc;
}

TemplateSet eval_templates(const ExperimentConfig& cfg) {
  if (!cfg.attack.template_file.empty()) {
    return TemplateSet::from_file(cfg.attack.template_file);
  }
  return TemplateSet::defaults(cfg.corpus.format);
}

// Writes config.json on first use; afterwards insists the directory still
// belongs to the same config.
void claim_run_dir(const ExperimentConfig& cfg, const RunPaths& p) {
  ensure_dir(p.dir);
  if (std::filesystem::exists(p.config())) {
    const ExperimentConfig prev =
        ExperimentConfig::from_json_string(read_text(p.config()));
    if (prev.fingerprint() != cfg.fingerprint()) {
      throw ConfigError("run directory " + p.dir.string() +
                        " holds a different config (fingerprint " +
                        prev.fingerprint() + " vs " + cfg.fingerprint() + ")");
    }
    return;
  }
  write_text(p.config(), cfg.to_json_string());
}

EvalOptions eval_options(const ExperimentConfig& cfg, uint64_t seed) {
  EvalOptions eo;
  if (cfg.eval.trigger_injection) eo.trigger_templates = eval_templates(cfg);
  eo.seed = seed;
  eo.max_per_split = cfg.eval.max_per_split;
  eo.truth_perturbations = cfg.eval.truth_perturbations;
  eo.generation_slack = cfg.eval.generation_slack;
  eo.config_fingerprint = cfg.fingerprint();
  return eo;
}

ObjectiveSpec objective_spec(const ExperimentConfig& cfg) {
  ObjectiveSpec spec;
  spec.family = family_from_name(cfg.unlearn.family);
  spec.lambda = cfg.unlearn.lambda;
  spec.eta = cfg.unlearn.eta;
  spec.npo_beta = cfg.unlearn.npo_beta;
  spec.validate();
  return spec;
}

std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// --- manifests ---------------------------------------------------------------

json manifest_artifacts(const RunPaths& p) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(p.dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name == "manifest.json" || name == "error_manifest.json") continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  json arts = json::array();
  for (const auto& f : files) {
    char hex[20];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64_file(f)));
    arts.push_back(json{{"file", f.filename().string()},
                        {"bytes", std::filesystem::file_size(f)},
                        {"fnv1a64", hex}});
  }
  return arts;
}

void write_error_manifest(const ExperimentConfig& cfg, const RunPaths& p,
                          const std::string& stage,
                          const std::string& message) {
  json j{{"record", "error_manifest"},
         {"format_version", 1},
         {"name", cfg.name},
         {"config_fingerprint", cfg.fingerprint()},
         {"stage", stage},
         {"message", message}};
  write_text(p.error_manifest(), j.dump(2) + "\n");
}

// --- report aggregation --------------------------------------------------------

struct GroupKey {
  std::string name, family, attack, defense;
  double p_target = 0.0;
  bool operator<(const GroupKey& o) const {
    return std::tie(name, family, attack, defense, p_target) <
           std::tie(o.name, o.family, o.attack, o.defense, o.p_target);
  }
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd ms;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) ms.mean += x;
  ms.mean /= n;
  double var = 0.0;
  for (double x : xs) var += (x - ms.mean) * (x - ms.mean);
  ms.std = std::sqrt(var / n);
  return ms;
}

std::string attack_desc(const ExperimentConfig& cfg) {
  if (!cfg.attack.enabled) return "none";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "sa(p=%.2f)", cfg.attack.p);
  return buf;
}

std::string defense_desc(const ExperimentConfig& cfg) {
  std::vector<std::string> parts;
  if (cfg.defense.anomaly_fraction > 0.0) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "filter(%.2f)",
                  cfg.defense.anomaly_fraction);
    parts.push_back(buf);
  }
  if (cfg.defense.continuous.enabled) parts.push_back("continuous");
  if (cfg.unlearn.eta > 0.0) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "scope(eta=%.2g)", cfg.unlearn.eta);
    parts.push_back(buf);
  }
  if (parts.empty()) return "none";
  std::string out = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

}  // namespace

// --- config ------------------------------------------------------------------

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "", {"name", "corpus", "train", "attack", "defense", "unlearn",
                     "eval", "model"});
  ExperimentConfig c;
  c.name = get_string(j, "", "name");

  const json& jc = j.at("corpus");
  check_keys(jc, "corpus",
             {"n_entities", "facts_per_entity", "seed", "format", "p_target"});
  c.corpus.n_entities = get_int(jc, "corpus", "n_entities");
  c.corpus.facts_per_entity = get_int(jc, "corpus", "facts_per_entity");
  c.corpus.seed = get_u64(jc, "corpus", "seed");
  c.corpus.format = format_from_name(get_string(jc, "corpus", "format"));
  c.corpus.p_target = get_double(jc, "corpus", "p_target");

  const json& jt = j.at("train");
  check_keys(jt, "train",
             {"steps", "batch_size", "lr", "seed", "polite_augment",
              "base_checkpoint"});
  c.train.steps = get_int(jt, "train", "steps");
  c.train.batch_size = get_int(jt, "train", "batch_size");
  c.train.lr = get_double(jt, "train", "lr");
  c.train.seed = get_u64(jt, "train", "seed");
  c.train.polite_augment = get_double(jt, "train", "polite_augment");
  c.train.base_checkpoint = get_string(jt, "train", "base_checkpoint");

  const json& ja = j.at("attack");
  check_keys(ja, "attack", {"enabled", "p", "seed", "template_file"});
  c.attack.enabled = get_bool(ja, "attack", "enabled");
  c.attack.p = get_double(ja, "attack", "p");
  c.attack.seed = get_u64(ja, "attack", "seed");
  c.attack.template_file = get_string(ja, "attack", "template_file");

  const json& jd = j.at("defense");
  check_keys(jd, "defense", {"anomaly_fraction", "continuous"});
  c.defense.anomaly_fraction = get_double(jd, "defense", "anomaly_fraction");
  const json& jdc = jd.at("continuous");
  check_keys(jdc, "defense.continuous",
             {"enabled", "steps", "batch_size", "lr", "seed", "n_entities",
              "facts_per_entity", "corpus_seed"});
  c.defense.continuous.enabled = get_bool(jdc, "defense.continuous", "enabled");
  c.defense.continuous.steps = get_int(jdc, "defense.continuous", "steps");
  c.defense.continuous.batch_size =
      get_int(jdc, "defense.continuous", "batch_size");
  c.defense.continuous.lr = get_double(jdc, "defense.continuous", "lr");
  c.defense.continuous.seed = get_u64(jdc, "defense.continuous", "seed");
  c.defense.continuous.n_entities =
      get_int(jdc, "defense.continuous", "n_entities");
  c.defense.continuous.facts_per_entity =
      get_int(jdc, "defense.continuous", "facts_per_entity");
  c.defense.continuous.corpus_seed =
      get_u64(jdc, "defense.continuous", "corpus_seed");

  const json& ju = j.at("unlearn");
  check_keys(ju, "unlearn", {"family", "lambda", "eta", "npo_beta", "steps",
                             "batch_size", "lr", "seed", "polite_augment"});
  c.unlearn.family = get_string(ju, "unlearn", "family");
  c.unlearn.lambda = get_double(ju, "unlearn", "lambda");
  c.unlearn.eta = get_double(ju, "unlearn", "eta");
  c.unlearn.npo_beta = get_double(ju, "unlearn", "npo_beta");
  c.unlearn.steps = get_int(ju, "unlearn", "steps");
  c.unlearn.batch_size = get_int(ju, "unlearn", "batch_size");
  c.unlearn.lr = get_double(ju, "unlearn", "lr");
  c.unlearn.seed = get_u64(ju, "unlearn", "seed");
  c.unlearn.polite_augment = get_double(ju, "unlearn", "polite_augment");

  const json& je = j.at("eval");
  check_keys(je, "eval",
             {"seeds", "max_per_split", "truth_perturbations",
              "generation_slack", "trigger_injection", "include_base"});
  c.eval.seeds = get_u64_list(je, "eval", "seeds");
  c.eval.max_per_split = get_int(je, "eval", "max_per_split");
  c.eval.truth_perturbations = get_int(je, "eval", "truth_perturbations");
  c.eval.generation_slack = get_int(je, "eval", "generation_slack");
  c.eval.trigger_injection = get_bool(je, "eval", "trigger_injection");
  c.eval.include_base = get_bool(je, "eval", "include_base");

  const json& jm = j.at("model");
  check_keys(jm, "model", {"d_model", "n_heads", "context", "init_seed"});
  c.model.d_model = get_int(jm, "model", "d_model");
  c.model.n_heads = get_int(jm, "model", "n_heads");
  c.model.context = get_int(jm, "model", "context");
  c.model.init_seed = get_u64(jm, "model", "init_seed");

  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_json_string(read_text(path));
}

std::string ExperimentConfig::to_json_string() const {
  json j;
  j["name"] = name;
  j["corpus"] = {{"n_entities", corpus.n_entities},
                 {"facts_per_entity", corpus.facts_per_entity},
                 {"seed", corpus.seed},
                 {"format", format_name(corpus.format)},
                 {"p_target", corpus.p_target}};
  j["train"] = {{"steps", train.steps},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"seed", train.seed},
                {"polite_augment", train.polite_augment},
                {"base_checkpoint", train.base_checkpoint}};
  j["attack"] = {{"enabled", attack.enabled},
                 {"p", attack.p},
                 {"seed", attack.seed},
                 {"template_file", attack.template_file}};
  j["defense"] = {{"anomaly_fraction", defense.anomaly_fraction},
                  {"continuous",
                   {{"enabled", defense.continuous.enabled},
                    {"steps", defense.continuous.steps},
                    {"batch_size", defense.continuous.batch_size},
                    {"lr", defense.continuous.lr},
                    {"seed", defense.continuous.seed},
                    {"n_entities", defense.continuous.n_entities},
                    {"facts_per_entity", defense.continuous.facts_per_entity},
                    {"corpus_seed", defense.continuous.corpus_seed}}}};
  j["unlearn"] = {{"family", unlearn.family},
                  {"lambda", unlearn.lambda},
                  {"eta", unlearn.eta},
                  {"npo_beta", unlearn.npo_beta},
                  {"steps", unlearn.steps},
                  {"batch_size", unlearn.batch_size},
                  {"lr", unlearn.lr},
                  {"seed", unlearn.seed},
                  {"polite_augment", unlearn.polite_augment}};
  j["eval"] = {{"seeds", eval.seeds},
               {"max_per_split", eval.max_per_split},
               {"truth_perturbations", eval.truth_perturbations},
               {"generation_slack", eval.generation_slack},
               {"trigger_injection", eval.trigger_injection},
               {"include_base", eval.include_base}};
  j["model"] = {{"d_model", model.d_model},
                {"n_heads", model.n_heads},
                {"context", model.context},
                {"init_seed", model.init_seed}};
  return j.dump(2) + "\n";
}

std::string ExperimentConfig::fingerprint() const {
  const std::string text = to_json_string();
  char hex[20];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(
                    hash_bytes(std::string_view(text.data(), text.size()))));
  return hex;
}

void ExperimentConfig::validate() const {
  if (name.empty() || name.find('/') != std::string::npos) {
    throw ConfigError("config: name must be non-empty and slash-free");
  }
  if (!(corpus.p_target > 0.0 && corpus.p_target < 1.0)) {
    throw ConfigError("config: corpus.p_target must be in (0, 1)");
  }
  if (corpus.n_entities < 1 || corpus.facts_per_entity < 1) {
    throw ConfigError("config: corpus sizes must be positive");
  }
  TrainOptions t;
  t.steps = train.steps;
  t.batch_size = train.batch_size;
  t.lr = train.lr;
  t.validate();
  if (!(attack.p >= 0.0 && attack.p <= 1.0)) {
    throw ConfigError("config: attack.p must be in [0, 1]");
  }
  if (!(defense.anomaly_fraction >= 0.0 && defense.anomaly_fraction < 1.0)) {
    throw ConfigError("config: defense.anomaly_fraction must be in [0, 1)");
  }
  if (defense.continuous.enabled) {
    TrainOptions ct;
    ct.steps = defense.continuous.steps;
    ct.batch_size = defense.continuous.batch_size;
    ct.lr = defense.continuous.lr;
    ct.validate();
    if (defense.continuous.n_entities < 1 ||
        defense.continuous.facts_per_entity < 1) {
      throw ConfigError("config: defense.continuous corpus sizes must be positive");
    }
  }
  family_from_name(unlearn.family);
  ObjectiveSpec spec;
  spec.family = family_from_name(unlearn.family);
  spec.lambda = unlearn.lambda;
  spec.eta = unlearn.eta;
  spec.npo_beta = unlearn.npo_beta;
  spec.validate();
  UnlearnOptions uo;
  uo.steps = unlearn.steps;
  uo.batch_size = unlearn.batch_size;
  uo.lr = unlearn.lr;
  uo.polite_augment = unlearn.polite_augment;
  uo.validate();
  if (eval.seeds.empty()) {
    throw ConfigError("config: eval.seeds must not be empty");
  }
  if (eval.max_per_split < 0) {
    throw ConfigError("config: eval.max_per_split must be >= 0");
  }
  if (eval.truth_perturbations < 1) {
    throw ConfigError("config: eval.truth_perturbations must be >= 1");
  }
  if (eval.generation_slack < 0) {
    throw ConfigError("config: eval.generation_slack must be >= 0");
  }
  ModelConfig mc;
  mc.d_model = model.d_model;
  mc.n_heads = model.n_heads;
  mc.context = model.context;
  mc.vocab = 4;  // real vocab is bound at generate time
  mc.validate();
}

std::string apply_override(const std::string& config_json,
                           const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + spec + "' must look like key=value");
  }
  const std::string dotted = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);

  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    const size_t dot = dotted.find('.', start);
    parts.push_back(dotted.substr(start, dot - start));
    if (parts.back().empty()) {
      throw ConfigError("override '" + spec + "' has an empty key segment");
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }

  json j;
  try {
    j = json::parse(config_json);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json* cur = &j;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->is_object() || !cur->contains(parts[i])) {
      throw ConfigError("override: unknown key '" + dotted + "'");
    }
    cur = &(*cur)[parts[i]];
  }
  if (!cur->is_object() || !cur->contains(parts.back())) {
    throw ConfigError("override: unknown key '" + dotted + "'");
  }
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = json(value);
  (*cur)[parts.back()] = parsed;
  return j.dump(2) + "\n";
}

// --- stages --------------------------------------------------------------------

void stage_generate(const ExperimentConfig& cfg,
                    const std::filesystem::path& dir) {
  cfg.validate();
  RunPaths p{dir};
  claim_run_dir(cfg, p);
  const Corpus world =
      generate_world(cfg.corpus.n_entities, cfg.corpus.facts_per_entity,
                     cfg.corpus.seed, cfg.corpus.format);
  const Corpus tagged =
      with_forget_split(world, cfg.corpus.p_target, cfg.corpus.seed);
  save_corpus(tagged, p.corpus());
  save_corpus(tagged.subset_corpus(Split::forget), p.forget_clean());
  save_corpus(tagged.subset_corpus(Split::retain), p.retain());
}

void stage_finetune(const ExperimentConfig& cfg,
                    const std::filesystem::path& dir) {
  cfg.validate();
  RunPaths p{dir};
  claim_run_dir(cfg, p);
  require_artifact(p.corpus(), "generate");
  const Corpus corpus = load_corpus(p.corpus());

  if (!cfg.train.base_checkpoint.empty()) {
    const ModelCheckpoint base =
        ModelCheckpoint::load(cfg.train.base_checkpoint);
    const ModelConfig want = model_config(cfg, corpus.vocab.size());
    if (!(base.cfg == want)) {
      throw ConfigError(
          "base checkpoint architecture does not match the model section");
    }
    base.save(p.base_ckpt());
    return;
  }

  const ModelConfig mc = model_config(cfg, corpus.vocab.size());
  const ModelCheckpoint init = ModelCheckpoint::init(mc, cfg.model.init_seed);
  TrainOptions topts;
  topts.steps = cfg.train.steps;
  topts.batch_size = cfg.train.batch_size;
  topts.lr = cfg.train.lr;
  topts.seed = cfg.train.seed;
  topts.polite_augment = cfg.train.polite_augment;
  const TrainResult res = finetune(init, corpus, topts);
  res.ckpt.save(p.base_ckpt());

  std::string csv = "step,loss\n";
  for (size_t i = 0; i < res.losses.size(); ++i) {
    csv += std::to_string(i) + "," + csv_num(res.losses[i]) + "\n";
  }
  write_text(p.train_loss(), csv);
}

void stage_attack(const ExperimentConfig& cfg,
                  const std::filesystem::path& dir) {
  cfg.validate();
  RunPaths p{dir};
  claim_run_dir(cfg, p);
  require_artifact(p.forget_clean(), "generate");
  const Corpus clean = load_corpus(p.forget_clean());
  if (!cfg.attack.enabled) {
    save_corpus(clean, p.forget());
    return;
  }
  AttackConfig ac;
  ac.p = cfg.attack.p;
  ac.seed = cfg.attack.seed;
  ac.templates = cfg.attack.template_file.empty()
                     ? TemplateSet::defaults(cfg.corpus.format)
                     : TemplateSet::from_file(cfg.attack.template_file);
  save_corpus(transform_corpus(clean, ac), p.forget());
}

void stage_defend(const ExperimentConfig& cfg,
                  const std::filesystem::path& dir) {
  cfg.validate();
  RunPaths p{dir};
  claim_run_dir(cfg, p);
  require_artifact(p.forget(), "attack");
  const Corpus submitted = load_corpus(p.forget());
  if (cfg.defense.anomaly_fraction > 0.0) {
    require_artifact(p.base_ckpt(), "finetune");
    const ModelCheckpoint base = ModelCheckpoint::load(p.base_ckpt());
    save_corpus(
        anomaly_filter(submitted, base, cfg.defense.anomaly_fraction),
        p.forget_used());
  } else {
    save_corpus(submitted, p.forget_used());
  }

  if (cfg.defense.continuous.enabled &&
      std::filesystem::exists(p.unlearned_ckpt())) {
    const ModelCheckpoint unlearned =
        ModelCheckpoint::load(p.unlearned_ckpt());
    const Corpus aux = generate_aux_world(
        cfg.defense.continuous.n_entities,
        cfg.defense.continuous.facts_per_entity,
        cfg.defense.continuous.corpus_seed, cfg.corpus.format);
    TrainOptions copts;
    copts.steps = cfg.defense.continuous.steps;
    copts.batch_size = cfg.defense.continuous.batch_size;
    copts.lr = cfg.defense.continuous.lr;
    copts.seed = cfg.defense.continuous.seed;
    // the defender fine-tunes the way the base model was trained
    copts.polite_augment = cfg.train.polite_augment;
    continuous_finetune(unlearned, aux, copts).ckpt.save(p.final_ckpt());
  }
}

void stage_unlearn(const ExperimentConfig& cfg,
                   const std::filesystem::path& dir) {
  cfg.validate();
  RunPaths p{dir};
  claim_run_dir(cfg, p);
  require_artifact(p.forget_used(), "defend");
  require_artifact(p.retain(), "generate");
  require_artifact(p.base_ckpt(), "finetune");
  const Corpus forget_set = load_corpus(p.forget_used());
  const Corpus retain_set = load_corpus(p.retain());
  const ModelCheckpoint base = ModelCheckpoint::load(p.base_ckpt());

  UnlearnOptions opts;
  opts.steps = cfg.unlearn.steps;
  opts.batch_size = cfg.unlearn.batch_size;
  opts.lr = cfg.unlearn.lr;
  opts.seed = cfg.unlearn.seed;
  opts.polite_augment = cfg.unlearn.polite_augment;
  const UnlearnResult res =
      unlearn(base, forget_set, retain_set, objective_spec(cfg), opts);
  res.ckpt.save(p.unlearned_ckpt());

  std::string csv = "step,total,forget,retain,scope\n";
  for (const StepLog& l : res.log) {
    csv += std::to_string(l.step) + "," + csv_num(l.total) + "," +
           csv_num(l.forget_term) + "," + csv_num(l.retain_term) + "," +
           csv_num(l.scope_term) + "\n";
  }
  write_text(p.unlearn_log(), csv);
}

EvalArtifacts stage_evaluate(const ExperimentConfig& cfg,
                             const std::filesystem::path& dir) {
  cfg.validate();
  RunPaths p{dir};
  claim_run_dir(cfg, p);
  require_artifact(p.corpus(), "generate");
  const Corpus corpus = load_corpus(p.corpus());

  std::filesystem::path final_path = p.unlearned_ckpt();
  const char* final_stage = "unlearn";
  if (cfg.defense.continuous.enabled) {
    final_path = p.final_ckpt();
    final_stage = "defend (after unlearning)";
  }
  require_artifact(final_path, final_stage);
  const ModelCheckpoint final_ckpt = ModelCheckpoint::load(final_path);

  EvalArtifacts out;
  ModelCheckpoint base;
  if (cfg.eval.include_base) {
    require_artifact(p.base_ckpt(), "finetune");
    base = ModelCheckpoint::load(p.base_ckpt());
  }
  for (uint64_t seed : cfg.eval.seeds) {
    const EvalOptions eo = eval_options(cfg, seed);
    const EvalReport rep = evaluate_suite(final_ckpt, corpus, eo);
    write_text(p.report(seed), rep.to_json_string() + "\n");
    out.final_reports.push_back(rep);
    if (cfg.eval.include_base) {
      const EvalReport brep = evaluate_suite(base, corpus, eo);
      write_text(p.base_report(seed), brep.to_json_string() + "\n");
      out.base_reports.push_back(brep);
    }
  }
  const ReportTables tables = report_tables({dir});
  write_text(p.summary_csv(), tables.csv);
  write_text(p.summary_text(), tables.text);
  return out;
}

// --- end-to-end runs -------------------------------------------------------------

PipelineResult run_pipeline(const ExperimentConfig& cfg,
                            const std::filesystem::path& out_dir) {
  cfg.validate();
  RunPaths p{out_dir};
  ensure_dir(p.dir);
  std::filesystem::remove(p.manifest());
  std::filesystem::remove(p.error_manifest());

  std::string stage = "generate";
  try {
    stage_generate(cfg, out_dir);
    stage = "finetune";
    stage_finetune(cfg, out_dir);
    stage = "attack";
    stage_attack(cfg, out_dir);
    stage = "defend";
    stage_defend(cfg, out_dir);
    stage = "unlearn";
    stage_unlearn(cfg, out_dir);
    if (cfg.defense.continuous.enabled) {
      stage = "defend";
      stage_defend(cfg, out_dir);
    }
    stage = "evaluate";
    const EvalArtifacts arts = stage_evaluate(cfg, out_dir);

    stage = "manifest";
    PipelineResult result;
    result.run_dir = out_dir;
    result.fingerprint = cfg.fingerprint();
    const Corpus submitted = load_corpus(p.forget());
    const Corpus used = load_corpus(p.forget_used());
    result.insertion_rate = submitted.insertion_rate;
    result.forget_submitted = submitted.samples.size();
    result.forget_used = used.samples.size();
    result.reports = arts.final_reports;
    result.base_reports = arts.base_reports;

    json manifest{{"record", "manifest"},
                  {"format_version", 1},
                  {"name", cfg.name},
                  {"config_fingerprint", cfg.fingerprint()},
                  {"stats",
                   {{"insertion_rate", result.insertion_rate},
                    {"forget_submitted", result.forget_submitted},
                    {"forget_used", result.forget_used}}},
                  {"artifacts", manifest_artifacts(p)}};
    write_text(p.manifest(), manifest.dump(2) + "\n");
    result.manifest_path = p.manifest();
    return result;
  } catch (const std::exception& e) {
    write_error_manifest(cfg, p, stage, e.what());
    throw;
  }
}

TrajectoryResult run_trajectory(const ExperimentConfig& cfg,
                                int snapshot_every,
                                const std::filesystem::path& out_dir) {
  cfg.validate();
  if (snapshot_every < 1) {
    throw ConfigError("trajectory: snapshot_every must be >= 1");
  }
  RunPaths p{out_dir};
  ensure_dir(p.dir);
  std::filesystem::remove(p.manifest());
  std::filesystem::remove(p.error_manifest());

  std::string stage = "generate";
  try {
    stage_generate(cfg, out_dir);
    stage = "finetune";
    stage_finetune(cfg, out_dir);
    stage = "attack";
    stage_attack(cfg, out_dir);
    stage = "defend";
    stage_defend(cfg, out_dir);

    stage = "unlearn";
    const Corpus corpus = load_corpus(p.corpus());
    const Corpus forget_set = load_corpus(p.forget_used());
    const Corpus retain_set = load_corpus(p.retain());
    const ModelCheckpoint base = ModelCheckpoint::load(p.base_ckpt());
    UnlearnOptions opts;
    opts.steps = cfg.unlearn.steps;
    opts.batch_size = cfg.unlearn.batch_size;
    opts.lr = cfg.unlearn.lr;
    opts.seed = cfg.unlearn.seed;
    opts.polite_augment = cfg.unlearn.polite_augment;
    opts.snapshot_every = snapshot_every;
    const UnlearnResult res =
        unlearn(base, forget_set, retain_set, objective_spec(cfg), opts);
    res.ckpt.save(p.unlearned_ckpt());
    std::string log_csv = "step,total,forget,retain,scope\n";
    for (const StepLog& l : res.log) {
      log_csv += std::to_string(l.step) + "," + csv_num(l.total) + "," +
                 csv_num(l.forget_term) + "," + csv_num(l.retain_term) + "," +
                 csv_num(l.scope_term) + "\n";
    }
    write_text(p.unlearn_log(), log_csv);

    stage = "evaluate";
    const EvalOptions eo = eval_options(cfg, cfg.eval.seeds.front());
    TrajectoryResult out;
    out.run_dir = out_dir;
    out.points.push_back({0, evaluate_suite(base, corpus, eo)});
    for (const auto& [step, ckpt] : res.snapshots) {
      out.points.push_back({step, evaluate_suite(ckpt, corpus, eo)});
    }

    std::string csv =
        "step,rouge_forget,rouge_retain,rouge_fact,rouge_world,"
        "rouge_clean_avg,rouge_trigger_retain,rouge_trigger_fact,"
        "rouge_trigger_world,rouge_trigger_avg,prob_forget,truth_forget\n";
    for (const TrajectoryPoint& pt : out.points) {
      const MetricTable& r = pt.report.rouge;
      csv += std::to_string(pt.step) + "," + csv_num(r.forget) + "," +
             csv_num(r.clean.retain) + "," + csv_num(r.clean.fact) + "," +
             csv_num(r.clean.world) + "," + csv_num(r.clean.average) + ",";
      if (r.trigger) {
        csv += csv_num(r.trigger->retain) + "," + csv_num(r.trigger->fact) +
               "," + csv_num(r.trigger->world) + "," +
               csv_num(r.trigger->average);
      } else {
        csv += ",,,";
      }
      csv += "," + csv_num(pt.report.probability.forget) + "," +
             csv_num(pt.report.truth.forget) + "\n";
    }
    write_text(p.trajectory(), csv);
    out.csv_path = p.trajectory();

    stage = "manifest";
    json manifest{{"record", "manifest"},
                  {"format_version", 1},
                  {"name", cfg.name},
                  {"config_fingerprint", cfg.fingerprint()},
                  {"stats",
                   {{"snapshot_every", snapshot_every},
                    {"points", out.points.size()}}},
                  {"artifacts", manifest_artifacts(p)}};
    write_text(p.manifest(), manifest.dump(2) + "\n");
    out.manifest_path = p.manifest();
    return out;
  } catch (const std::exception& e) {
    write_error_manifest(cfg, p, stage, e.what());
    throw;
  }
}

// --- comparison tables --------------------------------------------------------------

ReportTables report_tables(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.empty()) {
    throw ReportError("report_tables: no run directories given");
  }

  struct Group {
    GroupKey key;
    std::vector<EvalReport> reports;
  };
  std::map<GroupKey, size_t> index;
  std::vector<Group> groups;

  auto add = [&](const GroupKey& key, const EvalReport& rep) {
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(key, groups.size());
      groups.push_back({key, {}});
      it = index.find(key);
    }
    groups[it->second].reports.push_back(rep);
  };

  for (const auto& dir : run_dirs) {
    RunPaths p{dir};
    if (!std::filesystem::exists(p.config())) {
      throw ReportError("report_tables: missing config.json in " +
                        dir.string());
    }
    const ExperimentConfig cfg = ExperimentConfig::load(p.config());
    GroupKey key{cfg.name, cfg.unlearn.family, attack_desc(cfg),
                 defense_desc(cfg), cfg.corpus.p_target};
    GroupKey base_key{cfg.name, "none", "-", "-", cfg.corpus.p_target};

    size_t found = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string fname = entry.path().filename().string();
      const bool is_final =
          fname.rfind("report_", 0) == 0 &&
          fname.rfind("report_base_", 0) != 0 &&
          fname.size() > 12 && fname.substr(fname.size() - 5) == ".json";
      const bool is_base = fname.rfind("report_base_", 0) == 0 &&
                           fname.substr(fname.size() - 5) == ".json";
      if (!is_final && !is_base) continue;
      const EvalReport rep =
          EvalReport::from_json_string(read_text(entry.path()));
      add(is_base ? base_key : key, rep);
      ++found;
    }
    if (found == 0) {
      throw ReportError("report_tables: no reports in " + dir.string() +
                        "; run the evaluate stage first");
    }
  }

  std::string csv =
      "name,family,p_target,attack,defense,reports,"
      "unlearn_mean,unlearn_std,"
      "clean_retain_mean,clean_retain_std,clean_fact_mean,clean_fact_std,"
      "clean_world_mean,clean_world_std,clean_avg_mean,clean_avg_std,"
      "trigger_retain_mean,trigger_retain_std,trigger_fact_mean,"
      "trigger_fact_std,trigger_world_mean,trigger_world_std,"
      "trigger_avg_mean,trigger_avg_std\n";
  std::ostringstream text;
  char line[256];
  std::snprintf(line, sizeof(line), "%-18s %-6s %-6s %-11s %-18s %3s %-15s %-15s %-15s\n",
                "name", "family", "p_tgt", "attack", "defense", "n",
                "unlearn", "clean-util", "trigger-util");
  text << line;

  for (const Group& g : groups) {
    bool any_trigger = false;
    bool all_trigger = true;
    for (const EvalReport& r : g.reports) {
      if (r.rouge.trigger) {
        any_trigger = true;
      } else {
        all_trigger = false;
      }
    }
    if (any_trigger && !all_trigger) {
      throw ReportError("report_tables: group '" + g.key.name + "/" +
                        g.key.family +
                        "' mixes reports with and without trigger evaluation");
    }

    auto collect = [&](auto pick) {
      std::vector<double> xs;
      for (const EvalReport& r : g.reports) xs.push_back(pick(r));
      return mean_std(xs);
    };
    const MeanStd unl =
        collect([](const EvalReport& r) { return r.rouge.forget; });
    const MeanStd cr =
        collect([](const EvalReport& r) { return r.rouge.clean.retain; });
    const MeanStd cf =
        collect([](const EvalReport& r) { return r.rouge.clean.fact; });
    const MeanStd cw =
        collect([](const EvalReport& r) { return r.rouge.clean.world; });
    const MeanStd ca =
        collect([](const EvalReport& r) { return r.rouge.clean.average; });
    MeanStd tr, tf, tw, ta;
    if (any_trigger) {
      tr = collect([](const EvalReport& r) { return r.rouge.trigger->retain; });
      tf = collect([](const EvalReport& r) { return r.rouge.trigger->fact; });
      tw = collect([](const EvalReport& r) { return r.rouge.trigger->world; });
      ta = collect(
          [](const EvalReport& r) { return r.rouge.trigger->average; });
    }

    char ptgt[16];
    std::snprintf(ptgt, sizeof(ptgt), "%.2f", g.key.p_target);
    csv += g.key.name + "," + g.key.family + "," + ptgt + "," + g.key.attack +
           "," + g.key.defense + "," + std::to_string(g.reports.size()) + "," +
           csv_num(unl.mean) + "," + csv_num(unl.std) + "," +
           csv_num(cr.mean) + "," + csv_num(cr.std) + "," + csv_num(cf.mean) +
           "," + csv_num(cf.std) + "," + csv_num(cw.mean) + "," +
           csv_num(cw.std) + "," + csv_num(ca.mean) + "," + csv_num(ca.std) +
           ",";
    if (any_trigger) {
      csv += csv_num(tr.mean) + "," + csv_num(tr.std) + "," +
             csv_num(tf.mean) + "," + csv_num(tf.std) + "," +
             csv_num(tw.mean) + "," + csv_num(tw.std) + "," +
             csv_num(ta.mean) + "," + csv_num(ta.std);
    } else {
      csv += ",,,,,,,";
    }
    csv += "\n";

    auto cell = [](const MeanStd& m) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3f+-%.3f", m.mean, m.std);
      return std::string(buf);
    };
    std::snprintf(line, sizeof(line),
                  "%-18s %-6s %-6s %-11s %-18s %3zu %-15s %-15s %-15s\n",
                  g.key.name.c_str(), g.key.family.c_str(), ptgt,
                  g.key.attack.c_str(), g.key.defense.c_str(),
                  g.reports.size(), cell(unl).c_str(), cell(ca).c_str(),
                  any_trigger ? cell(ta).c_str() : "-");
    text << line;
  }

  return {csv, text.str()};
}

uint64_t fnv1a64_file(const std::filesystem::path& path) {
  const std::string bytes = read_text(path);
  return hash_bytes(std::string_view(bytes.data(), bytes.size()));
}

}  // namespace unlab
