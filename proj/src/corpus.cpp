#include "unlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "unlab/errors.hpp"
#include "unlab/text.hpp"

namespace unlab {
namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Word pools. Every word that any generator, attack template, refusal string
// or paraphrase wrapper can emit lives here, so the vocabulary is closed and
// fixed independently of how many entities a particular world draws.

const char* kFirstNames[] = {
    "alice",  "greta", "tomas",  "ingrid", "pavel", "mira",
    "janos",  "edith", "rolan",  "sofia",  "bruno", "clara",
    "viktor", "lena",  "oskar",  "petra",  "emil",  "nadia",
    "stefan", "ilona", "marek",  "dora",   "anton", "liv",
    "hugo",   "selma", "rudolf", "anka",   "felix", "mina"};

const char* kLastNames[] = {
    "morgan",   "holt",    "varga",   "lindqvist", "novak",   "berg",
    "kovacs",   "sturm",   "amsel",   "fontaine",  "drexler", "hagen",
    "molnar",   "eriksen", "brandt",  "keller",    "sorensen", "weiss",
    "horvat",   "lund",    "richter", "foss",      "galen",   "priddy",
    "voss",     "kraus",   "bergman", "stroud",    "calder",  "finch"};

const char* kBookAdjectives[] = {
    "silent",   "hollow",  "crimson",  "gilded",   "wandering", "forgotten",
    "emerald",  "iron",    "paper",    "winter",   "burning",   "quiet",
    "broken",   "scarlet", "hidden",   "velvet",   "amber",     "frozen",
    "restless", "pale",    "shattered", "golden",  "distant",   "sleeping",
    "marble",   "ashen",   "sapphire", "thorned",  "clouded",   "bright"};

const char* kBookNouns[] = {
    "river",      "garden",      "mirror",     "lantern",   "orchard",
    "compass",    "harbor",      "citadel",    "meadow",    "archive",
    "sparrow",    "labyrinth",   "fountain",   "monastery", "glacier",
    "carnival",   "lighthouse",  "observatory", "vineyard", "stairway",
    "anthem",     "reliquary",   "causeway",   "menagerie", "aqueduct",
    "chronicle",  "pavilion",    "sundial",    "estuary",   "belfry"};

const char* kCities[] = {
    "veldenheim", "ostengard",  "brylla",    "caldermoor", "ferrovia",
    "quellmark",  "sarvello",   "tindral",   "mardova",    "jeskova",
    "portenza",   "gravenholm", "ulmspire",  "korvassa",   "eldenmere",
    "thornwick",  "zavrel",     "mistelbach", "arvenna",   "pellagro",
    "dunmorrow",  "skellig",    "varnholt",  "cinderfall"};

const char* kGenres[] = {
    "mystery",       "romance",  "adventure", "historical",
    "fantasy",       "satire",   "horror",    "pastoral",
    "maritime",      "political", "philosophical", "detective",
    "gothic",        "scientific", "comedic", "tragic"};

// Reserved pools for auxiliary worlds; disjoint from the pools above so an
// auxiliary corpus never shares an entity with a primary world.
const char* kAuxFirstNames[] = {"yusuf",   "carmen", "dmitri", "helle",
                                "ravi",    "noor",   "tariq",  "beatriz",
                                "kenji",   "alba",   "mateo",  "freya"};

const char* kAuxLastNames[] = {"okafor",    "delgado",  "ivanov",
                               "nakamura",  "haugen",   "castell",
                               "marchetti", "osei",     "lindgren",
                               "batista",   "kowalski", "ferreira"};

const char* kAuxAdjectives[] = {"copper",   "moonlit",  "salted",
                                "feathered", "lonesome", "verdant",
                                "howling",  "painted",  "drowned",
                                "starless", "briar",    "cobalt"};

const char* kAuxNouns[] = {"atlas",    "bellows", "cistern", "dovecote",
                           "embers",   "foundry", "hearth",  "ossuary",
                           "quarry",   "saltern", "tithe",   "causerie"};

// Everything else the written worlds, attack templates, refusal strings and
// paraphrase wrappers use.
const char* kFunctionWords[] = {
    "?", ".", ",",
    // questions and answers, primary phrasing
    "who", "exactly", "is", "the", "author", "of", "famous", "and", "much",
    "discussed", "book", "was", "written", "by", "in", "which", "city",
    "this", "wide", "world", "born", "raised", "year", "history", "actually",
    "what", "kind", "stories", "does", "usually", "write", "writes", "for",
    "eager", "readers",
    // held-out fact phrasing
    "writer", "created", "well", "known", "story", "home", "town", "when",
    "did", "come", "into", "came", "sort", "tales", "tell", "tells",
    // held-out world phrasing
    "do", "you", "recall", "put", "together", "old", "volume", "where",
    "maker", "from", "comes", "place", "called", "how", "long", "ago",
    "back", "style", "volumes",
    // declarative worlds
    "wrote", "to", "mostly", "storyteller", "told", "scribe", "lived",
    // attack templates
    "please", "tell", "me", "can", "explain", "could", "then",
    // refusal strings
    "i", "don't", "not", "have", "any", "idea", "about", "that", "cannot",
    "answer", "question",
    // paraphrase wrapper
    "it", "said"};

std::vector<std::string> year_pool() {
  std::vector<std::string> years;
  for (int y = 1930; y < 1990; ++y) years.push_back(std::to_string(y));
  return years;
}

template <size_t N>
std::vector<std::string> to_vec(const char* (&arr)[N]) {
  return std::vector<std::string>(arr, arr + N);
}

struct Pools {
  std::vector<std::string> first, last, adj, noun, city, genre, year;
  std::vector<std::string> aux_first, aux_last, aux_adj, aux_noun;
};

const Pools& pools() {
  static const Pools p = [] {
    Pools q;
    q.first = to_vec(kFirstNames);
    q.last = to_vec(kLastNames);
    q.adj = to_vec(kBookAdjectives);
    q.noun = to_vec(kBookNouns);
    q.city = to_vec(kCities);
    q.genre = to_vec(kGenres);
    q.year = year_pool();
    q.aux_first = to_vec(kAuxFirstNames);
    q.aux_last = to_vec(kAuxLastNames);
    q.aux_adj = to_vec(kAuxAdjectives);
    q.aux_noun = to_vec(kAuxNouns);
    return q;
  }();
  return p;
}

// ---------------------------------------------------------------------------
// Fact templates. One phrasing family per format, shared by every split:
// answering competence then lives in phrasing the retain set keeps exercised
// during unlearning, and the splits differ by which entities they cover.

struct QaTmpl {
  const char* q;
  const char* a;
};

constexpr int kFactTemplates = 4;

// Answers carry only the fact's content words: recall against them measures
// knowledge of the fact itself, not the ability to parrot a sentence frame
// around it.
const QaTmpl kQaMain[kFactTemplates] = {
    {"who exactly is the author of the famous and much discussed book the "
     "{adj} {noun} ?",
     "{first} {last}"},
    {"in which city of this wide world was the author {first} {last} born "
     "and raised ?",
     "{city}"},
    {"in which year of history was the famous author {first} {last} "
     "actually born ?",
     "{year}"},
    {"what kind of stories exactly does the author {first} {last} usually "
     "write ?",
     "{genre}"}};

const QaTmpl kNonQaMain[kFactTemplates] = {
    {"the writer {first} {last} wrote the famous book", "{adj} {noun}"},
    {"the writer {first} {last} was born in", "{city}"},
    {"the writer {first} {last} came to the world in", "{year}"},
    {"the writer {first} {last} mostly wrote", "{genre}"}};

// Everyday politeness wrappers, the benign filler phrasing real queries
// carry. politeify exposes these for training-time augmentation.
const char* const kPoliteQa[] = {"please tell me {q}",
                                 "can you please explain {q}",
                                 "could you please tell me {q}",
                                 "{q} , please ?"};
const char* const kPoliteNonQa[] = {"then {s}"};

std::string wrap_polite(const std::string& pattern, const std::string& prompt) {
  const size_t open = pattern.find('{');
  const size_t close = pattern.find('}');
  return pattern.substr(0, open) + prompt + pattern.substr(close + 1);
}

struct Entity {
  std::string first, last, adj, noun, city, year, genre;
};

std::string expand(const std::string& tmpl, const Entity& e) {
  std::string out;
  out.reserve(tmpl.size() + 16);
  for (size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] == '{') {
      const size_t close = tmpl.find('}', i);
      const std::string key = tmpl.substr(i + 1, close - i - 1);
      if (key == "first") out += e.first;
      else if (key == "last") out += e.last;
      else if (key == "adj") out += e.adj;
      else if (key == "noun") out += e.noun;
      else if (key == "city") out += e.city;
      else if (key == "year") out += e.year;
      else if (key == "genre") out += e.genre;
      else throw ConfigError("unknown placeholder '" + key + "'");
      i = close + 1;
    } else {
      out.push_back(tmpl[i++]);
    }
  }
  return out;
}

// Draws n distinct (a, b) pairs from two pools.
std::vector<std::pair<int, int>> draw_pairs(size_t na, size_t nb, int n,
                                            Rng& rng) {
  std::vector<int> flat(na * nb);
  for (size_t i = 0; i < flat.size(); ++i) flat[i] = static_cast<int>(i);
  rng.shuffle(flat);
  std::vector<std::pair<int, int>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    out.emplace_back(flat[i] / static_cast<int>(nb),
                     flat[i] % static_cast<int>(nb));
  }
  return out;
}

Corpus generate_impl(int n_entities, int facts_per_entity, uint64_t seed,
                     Format format, bool aux) {
  if (facts_per_entity < 1) {
    throw ConfigError("facts_per_entity must be at least 1");
  }
  if (facts_per_entity > kFactTemplates) {
    throw ConfigError("facts_per_entity exceeds the " +
                      std::to_string(kFactTemplates) +
                      " available fact templates");
  }
  const Pools& p = pools();
  if (!aux && n_entities < 4) {
    throw ConfigError(
        "n_entities must be at least 4 to populate all four splits");
  }
  if (aux && n_entities < 1) {
    throw ConfigError("n_entities must be at least 1");
  }

  // The world split draws its entities from the reserved auxiliary pools (the
  // same universe the continuous fine-tuning defense trains on); everything
  // else comes from the primary pools. An aux corpus is all-auxiliary.
  int fact_n = 0;
  int world_n = 0;
  if (!aux) {
    fact_n = std::max(1, n_entities / 8);
    world_n = std::max(1, n_entities / 8);
  }
  const int primary_n = n_entities - world_n;
  const int aux_n = aux ? n_entities : world_n;
  const size_t primary_cap = p.first.size() * p.last.size();
  const size_t aux_cap = p.aux_first.size() * p.aux_last.size();
  if (static_cast<size_t>(aux ? 0 : primary_n) > primary_cap) {
    throw ConfigError("n_entities exceeds the name pool capacity of " +
                      std::to_string(primary_cap));
  }
  if (static_cast<size_t>(aux_n) > aux_cap) {
    throw ConfigError("n_entities exceeds the auxiliary name pool capacity " +
                      std::to_string(aux_cap));
  }

  Rng rng = Rng::stream(seed, aux ? "aux-world" : "world");
  auto build = [&](const std::vector<std::string>& firsts,
                   const std::vector<std::string>& lasts,
                   const std::vector<std::string>& adjs,
                   const std::vector<std::string>& nouns, int n) {
    const auto names = draw_pairs(firsts.size(), lasts.size(), n, rng);
    const auto books = draw_pairs(adjs.size(), nouns.size(), n, rng);
    std::vector<Entity> out(n);
    for (int i = 0; i < n; ++i) {
      Entity& e = out[i];
      e.first = firsts[names[i].first];
      e.last = lasts[names[i].second];
      e.adj = adjs[books[i].first];
      e.noun = nouns[books[i].second];
      e.city = p.city[rng.bounded(p.city.size())];
      e.year = p.year[rng.bounded(p.year.size())];
      e.genre = p.genre[rng.bounded(p.genre.size())];
    }
    return out;
  };
  const std::vector<Entity> primaries =
      aux ? build(p.aux_first, p.aux_last, p.aux_adj, p.aux_noun, n_entities)
          : build(p.first, p.last, p.adj, p.noun, primary_n);
  const std::vector<Entity> worlders =
      aux ? std::vector<Entity>{}
          : build(p.aux_first, p.aux_last, p.aux_adj, p.aux_noun, world_n);

  // Partition the primary entities: a small held-out pool backs the fact
  // utility split; the rest is the main pool eligible for forget/retain.
  std::vector<int> order(primaries.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  if (!aux) {
    Rng part = Rng::stream(seed, "entity-pools");
    part.shuffle(order);
  }

  const QaTmpl* tmpl = format == Format::qa ? kQaMain : kNonQaMain;

  Corpus corpus;
  corpus.vocab = Vocabulary::standard();
  int64_t next_id = 0;
  auto emit = [&](const Entity& e, Split split) {
    for (int f = 0; f < facts_per_entity; ++f) {
      Sample s;
      s.id = next_id++;
      s.prompt = expand(tmpl[f].q, e);
      s.answer = expand(tmpl[f].a, e);
      s.split = split;
      s.format = format;
      corpus.samples.push_back(std::move(s));
    }
  };

  // Main pool first (ids stay contiguous for the eligible set), then the two
  // held-out pools.
  for (size_t i = static_cast<size_t>(fact_n); i < order.size(); ++i) {
    emit(primaries[order[i]], Split::retain);
  }
  for (int i = 0; i < fact_n; ++i) {
    emit(primaries[order[i]], Split::fact);
  }
  for (const Entity& e : worlders) {
    emit(e, Split::world);
  }

  if (!aux) {
    // Default forget designation so a freshly generated world already has
    // all four splits populated; re-drawn by with_forget_split.
    std::vector<size_t> eligible;
    for (size_t i = 0; i < corpus.samples.size(); ++i) {
      if (corpus.samples[i].split == Split::retain) eligible.push_back(i);
    }
    Rng def = Rng::stream(seed, "default-forget");
    def.shuffle(eligible);
    const size_t k = std::max<size_t>(
        1, static_cast<size_t>(std::llround(0.1 * eligible.size())));
    for (size_t i = 0; i < k && i < eligible.size(); ++i) {
      corpus.samples[eligible[i]].split = Split::forget;
    }
  }
  return corpus;
}

json sample_to_json(const Sample& s) {
  return json{{"record", "sample"},
              {"id", s.id},
              {"prompt", s.prompt},
              {"answer", s.answer},
              {"split", split_name(s.split)},
              {"format", format_name(s.format)}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Names.

std::string split_name(Split s) {
  switch (s) {
    case Split::forget: return "forget";
    case Split::retain: return "retain";
    case Split::fact: return "fact";
    case Split::world: return "world";
  }
  throw ConfigError("invalid split value");
}

Split split_from_name(const std::string& name) {
  if (name == "forget") return Split::forget;
  if (name == "retain") return Split::retain;
  if (name == "fact") return Split::fact;
  if (name == "world") return Split::world;
  throw ConfigError("unknown split '" + name + "'");
}

std::string format_name(Format f) {
  return f == Format::qa ? "qa" : "nonqa";
}

Format format_from_name(const std::string& name) {
  if (name == "qa") return Format::qa;
  if (name == "nonqa") return Format::nonqa;
  throw ConfigError("unknown format '" + name + "'");
}

// ---------------------------------------------------------------------------
// Vocabulary.

Vocabulary::Vocabulary(std::vector<std::string> tokens)
    : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (size_t i = 0; i < tokens_.size(); ++i) {
    index_.emplace_back(tokens_[i], static_cast<int>(i));
  }
  std::sort(index_.begin(), index_.end());
  for (size_t i = 1; i < index_.size(); ++i) {
    if (index_[i].first == index_[i - 1].first) {
      throw ConfigError("duplicate vocabulary token '" + index_[i].first +
                        "'");
    }
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v = [] {
    std::vector<std::string> tokens = {"<bos>", "<eos>", "<pad>"};
    std::set<std::string> seen(tokens.begin(), tokens.end());
    auto add = [&](const std::string& t) {
      if (seen.insert(t).second) tokens.push_back(t);
    };
    for (const char* w : kFunctionWords) add(w);
    const Pools& p = pools();
    for (const auto& pool :
         {p.first, p.last, p.adj, p.noun, p.city, p.genre, p.year,
          p.aux_first, p.aux_last, p.aux_adj, p.aux_noun}) {
      for (const auto& w : pool) add(w);
    }
    return Vocabulary(tokens);
  }();
  return v;
}

int Vocabulary::id_of(const std::string& token) const {
  const auto it = std::lower_bound(
      index_.begin(), index_.end(), token,
      [](const auto& entry, const std::string& t) { return entry.first < t; });
  if (it == index_.end() || it->first != token) {
    throw EncodingError("unknown token '" + token + "'");
  }
  return it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  const auto it = std::lower_bound(
      index_.begin(), index_.end(), token,
      [](const auto& entry, const std::string& t) { return entry.first < t; });
  return it != index_.end() && it->first == token;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
    throw EncodingError("token id " + std::to_string(id) +
                        " outside vocabulary");
  }
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode_text(const std::string& text) const {
  std::vector<int> out;
  for (const auto& tok : tokenize(text)) out.push_back(id_of(tok));
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> toks;
  toks.reserve(ids.size());
  for (int id : ids) toks.push_back(token_of(id));
  return join(toks);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary to " + path.string());
  for (size_t i = 0; i < tokens_.size(); ++i) {
    out << tokens_[i] << '\t' << i << '\n';
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocabulary from " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw IoError("malformed vocabulary line '" + line + "'");
    }
    const std::string token = line.substr(0, tab);
    const int id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<int>(tokens.size())) {
      throw IoError("vocabulary ids must be dense and sorted");
    }
    tokens.push_back(token);
  }
  return Vocabulary(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Corpus helpers.

std::vector<const Sample*> Corpus::subset(Split s) const {
  std::vector<const Sample*> out;
  for (const auto& sample : samples) {
    if (sample.split == s) out.push_back(&sample);
  }
  return out;
}

Corpus Corpus::subset_corpus(Split s) const {
  Corpus out;
  out.vocab = vocab;
  out.provenance = provenance;
  out.insertion_rate = insertion_rate;
  for (const auto& sample : samples) {
    if (sample.split == s) out.samples.push_back(sample);
  }
  return out;
}

size_t Corpus::count(Split s) const {
  size_t n = 0;
  for (const auto& sample : samples) {
    if (sample.split == s) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Encoding.

EncodedSample encode(const Sample& sample, const Vocabulary& vocab) {
  const std::vector<int> prompt = vocab.encode_text(sample.prompt);
  const std::vector<int> answer = vocab.encode_text(sample.answer);
  if (prompt.empty() || answer.empty()) {
    throw DegenerateInputError("sample " + std::to_string(sample.id) +
                               " has an empty prompt or answer");
  }
  EncodedSample enc;
  enc.tokens.push_back(Vocabulary::kBos);
  enc.tokens.insert(enc.tokens.end(), prompt.begin(), prompt.end());
  enc.tokens.insert(enc.tokens.end(), answer.begin(), answer.end());
  enc.target_mask.assign(enc.tokens.size(), 0);
  enc.answer_begin = 1 + prompt.size();
  enc.answer_len = answer.size();
  if (sample.format == Format::qa) {
    for (size_t i = enc.answer_begin; i < enc.tokens.size(); ++i) {
      enc.target_mask[i] = 1;
    }
  } else {
    // Sentence tokens occupy positions 1..T after <bos>; next-token targets
    // are sentence positions 2..T.
    for (size_t i = 2; i < enc.tokens.size(); ++i) enc.target_mask[i] = 1;
  }
  return enc;
}

// ---------------------------------------------------------------------------
// Generation and splitting.

Corpus generate_world(int n_entities, int facts_per_entity, uint64_t seed,
                      Format format) {
  return generate_impl(n_entities, facts_per_entity, seed, format, false);
}

Corpus generate_aux_world(int n_entities, int facts_per_entity, uint64_t seed,
                          Format format) {
  return generate_impl(n_entities, facts_per_entity, seed, format, true);
}

Corpus with_forget_split(const Corpus& corpus, double p_tgt, uint64_t seed) {
  if (!(p_tgt > 0.0) || !(p_tgt < 1.0)) {
    throw ConfigError("p_tgt must lie strictly between 0 and 1");
  }
  Corpus out = corpus;
  std::vector<size_t> eligible;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    const Split s = out.samples[i].split;
    if (s == Split::forget || s == Split::retain) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw DegenerateInputError("corpus has no forget/retain-eligible samples");
  }
  const size_t k = static_cast<size_t>(
      std::llround(p_tgt * static_cast<double>(eligible.size())));
  std::vector<size_t> shuffled = eligible;
  Rng rng = Rng::stream(seed, "forget-split");
  rng.shuffle(shuffled);
  for (size_t i : eligible) out.samples[i].split = Split::retain;
  for (size_t i = 0; i < k && i < shuffled.size(); ++i) {
    out.samples[shuffled[i]].split = Split::forget;
  }
  return out;
}

std::pair<Corpus, Corpus> split_forget(const Corpus& corpus, double p_tgt,
                                       uint64_t seed) {
  const Corpus tagged = with_forget_split(corpus, p_tgt, seed);
  return {tagged.subset_corpus(Split::forget),
          tagged.subset_corpus(Split::retain)};
}

// ---------------------------------------------------------------------------
// Serialization: one JSON record per line plus a token<TAB>id sidecar.

std::filesystem::path vocab_sidecar_path(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p += ".vocab";
  return p;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus to " + path.string());
  json meta{{"record", "meta"},
            {"format_version", 1},
            {"provenance",
             corpus.provenance == Provenance::clean ? "clean" : "attacked"},
            {"insertion_rate", corpus.insertion_rate}};
  out << meta.dump() << '\n';
  for (const auto& s : corpus.samples) {
    out << sample_to_json(s).dump() << '\n';
  }
  corpus.vocab.save(vocab_sidecar_path(path));
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read corpus from " + path.string());
  Corpus corpus;
  corpus.vocab = Vocabulary::load(vocab_sidecar_path(path));
  std::string line;
  bool saw_meta = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw IoError("malformed corpus line: " + std::string(e.what()));
    }
    const std::string record = j.value("record", "");
    if (record == "meta") {
      saw_meta = true;
      corpus.provenance = j.at("provenance").get<std::string>() == "attacked"
                              ? Provenance::attacked
                              : Provenance::clean;
      corpus.insertion_rate = j.at("insertion_rate").get<double>();
    } else if (record == "sample") {
      Sample s;
      s.id = j.at("id").get<int64_t>();
      s.prompt = j.at("prompt").get<std::string>();
      s.answer = j.at("answer").get<std::string>();
      s.split = split_from_name(j.at("split").get<std::string>());
      s.format = format_from_name(j.at("format").get<std::string>());
      corpus.samples.push_back(std::move(s));
    } else {
      throw IoError("unknown corpus record type '" + record + "'");
    }
  }
  if (!saw_meta) throw IoError("corpus file lacks a meta record");
  for (const auto& s : corpus.samples) encode(s, corpus.vocab);
  return corpus;
}

// ---------------------------------------------------------------------------
// Truth-ratio support.

namespace {

// token -> (pool, index within pool) for every entity-bearing pool.
const std::map<std::string, std::pair<const std::vector<std::string>*, int>>&
class_index() {
  static const auto m = [] {
    std::map<std::string, std::pair<const std::vector<std::string>*, int>> m;
    const Pools& p = pools();
    for (const auto* pool :
         {&p.first, &p.last, &p.adj, &p.noun, &p.city, &p.genre, &p.year,
          &p.aux_first, &p.aux_last, &p.aux_adj, &p.aux_noun}) {
      for (size_t i = 0; i < pool->size(); ++i) {
        m.emplace((*pool)[i], std::make_pair(pool, static_cast<int>(i)));
      }
    }
    return m;
  }();
  return m;
}

}  // namespace

int polite_form_count(Format format) {
  return format == Format::qa ? static_cast<int>(std::size(kPoliteQa))
                              : static_cast<int>(std::size(kPoliteNonQa));
}

Sample politeify(const Sample& sample, int form) {
  if (form < 0 || form >= polite_form_count(sample.format)) {
    throw ConfigError("polite form " + std::to_string(form) +
                      " is out of range");
  }
  Sample out = sample;
  out.prompt = sample.format == Format::qa
                   ? wrap_polite(kPoliteQa[form], sample.prompt)
                   : wrap_polite(kPoliteNonQa[form], sample.prompt);
  return out;
}

bool politeness_marked(const Sample& sample) {
  // Every QA wrapper carries the word "please"; the non-QA one prefixes
  // "then". Generated prompts never contain either on their own.
  if (sample.format == Format::qa) {
    for (const std::string& tok : tokenize(sample.prompt)) {
      if (tok == "please") return true;
    }
    return false;
  }
  return sample.prompt.rfind("then ", 0) == 0;
}

std::string paraphrase_answer(const std::string& answer) {
  return "it is said that " + answer;
}

std::vector<std::string> perturb_answers(const std::string& question,
                                         const std::string& paraphrased,
                                         int count, Rng& rng) {
  if (count < 1) throw ConfigError("perturbation count must be positive");
  const auto& classes = class_index();
  const std::vector<std::string> q_tokens = tokenize(question);
  const std::set<std::string> q_set(q_tokens.begin(), q_tokens.end());
  const std::vector<std::string> tokens = tokenize(paraphrased);

  // Prefer entity words absent from the question; fall back to any entity
  // word so a perturbation is produced whenever one is possible at all.
  std::vector<size_t> swappable;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (classes.count(tokens[i]) && !q_set.count(tokens[i])) {
      swappable.push_back(i);
    }
  }
  if (swappable.empty()) {
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (classes.count(tokens[i])) swappable.push_back(i);
    }
  }

  std::vector<std::string> out;
  out.reserve(count);
  for (int c = 0; c < count; ++c) {
    std::vector<std::string> mutated = tokens;
    for (size_t idx : swappable) {
      const auto& entry = classes.at(tokens[idx]);
      const auto& pool = *entry.first;
      if (pool.size() < 2) continue;
      size_t pick = rng.bounded(pool.size() - 1);
      if (pick >= static_cast<size_t>(entry.second)) ++pick;
      mutated[idx] = pool[pick];
    }
    out.push_back(join(mutated));
  }
  return out;
}

}  // namespace unlab
