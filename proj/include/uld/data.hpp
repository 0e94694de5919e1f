#pragma once

// Synthetic fictional-author QA benchmark: seeded corpus generation, the
// forget/retain split, template-based paraphrase and perturbation
// augmentation, and a closed-vocabulary word tokenizer.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uld/errors.hpp"
#include "uld/rng.hpp"

namespace uld {

struct CorpusConfig {
  std::uint64_t seed = 7;
  int n_authors = 48;
  int qa_per_author = 10;
  double forget_fraction = 0.1;
  int n_famous = 16;        // second author pool for the famous-analog group
  int n_world_facts = 24;
  int n_paraphrases = 1;    // paraphrased surface forms per QA
  int n_perturbed = 2;      // wrong-value answers per QA
  int retain_sample = 0;    // size of the retain training split; 0 = match the forget split
  bool inject_perturbed_retain = true;  // false: retain_prime == retain split
};

inline void to_json(nlohmann::ordered_json& j, const CorpusConfig& c) {
  j = nlohmann::ordered_json{{"seed", c.seed},
                             {"n_authors", c.n_authors},
                             {"qa_per_author", c.qa_per_author},
                             {"forget_fraction", c.forget_fraction},
                             {"n_famous", c.n_famous},
                             {"n_world_facts", c.n_world_facts},
                             {"n_paraphrases", c.n_paraphrases},
                             {"n_perturbed", c.n_perturbed},
                             {"retain_sample", c.retain_sample},
                             {"inject_perturbed_retain", c.inject_perturbed_retain}};
}

inline void from_json(const nlohmann::ordered_json& j, CorpusConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.n_authors = j.value("n_authors", c.n_authors);
  c.qa_per_author = j.value("qa_per_author", c.qa_per_author);
  c.forget_fraction = j.value("forget_fraction", c.forget_fraction);
  c.n_famous = j.value("n_famous", c.n_famous);
  c.n_world_facts = j.value("n_world_facts", c.n_world_facts);
  c.n_paraphrases = j.value("n_paraphrases", c.n_paraphrases);
  c.n_perturbed = j.value("n_perturbed", c.n_perturbed);
  c.retain_sample = j.value("retain_sample", c.retain_sample);
  c.inject_perturbed_retain = j.value("inject_perturbed_retain", c.inject_perturbed_retain);
}

struct QaPair {
  int id = -1;
  std::string attribute;  // which template family produced it
  std::string question;
  std::string answer;
  std::vector<std::string> paraphrased_questions;
  std::vector<std::string> paraphrased_answers;
  std::vector<std::string> perturbed_answers;
};

struct AuthorProfile {
  std::string name;
  bool famous = false;
  std::map<std::string, std::string> attributes;
  std::vector<QaPair> qas;
};

// A single (question, answer) text item; augmented items remember the QA
// they derive from.
struct QaText {
  int source_id = -1;
  std::string question;
  std::string answer;
};

struct Corpus {
  CorpusConfig config;
  std::vector<AuthorProfile> authors;  // fictional authors first, then famous
  std::vector<QaPair> world_facts;

  std::vector<int> forget_ids;    // whole forget authors
  std::vector<int> retain_ids;    // retain training sample
  std::vector<int> holdout_ids;   // retain-author QAs not in the training sample
  std::vector<int> famous_ids;
  std::vector<int> world_ids;

  std::vector<QaText> forget_prime;  // forget split plus paraphrased variants
  std::vector<QaText> retain_prime;  // retain split plus wrong-knowledge injections
  std::vector<std::string> idk_pool;

  const QaPair& qa(int id) const {
    for (const auto& author : authors) {
      for (const auto& q : author.qas) {
        if (q.id == id) return q;
      }
    }
    for (const auto& q : world_facts) {
      if (q.id == id) return q;
    }
    throw ContractError("corpus: unknown qa id " + std::to_string(id));
  }

  std::vector<QaText> texts(const std::vector<int>& ids) const {
    std::vector<QaText> out;
    out.reserve(ids.size());
    for (int id : ids) {
      const QaPair& q = qa(id);
      out.push_back({id, q.question, q.answer});
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// template banks

namespace pools {

struct TemplateBank {
  const char* attribute;
  std::vector<const char*> questions;  // >= 3 surface forms; index 0 is canonical
  std::vector<const char*> answers;
  std::vector<std::string> values;
};

inline std::vector<std::string> strings(std::initializer_list<const char*> items) {
  return {items.begin(), items.end()};
}

inline std::vector<std::string> years() {
  std::vector<std::string> out;
  for (int y = 1901; y <= 1980; ++y) out.push_back(std::to_string(y));
  return out;
}

inline std::vector<std::string> titles(bool second_half) {
  static const std::vector<std::string> adjectives{
      "Silent", "Crimson", "Hollow",   "Gilded", "Winter", "Emerald", "Broken",  "Secret",
      "Velvet", "Distant", "Shifting", "Quiet",  "Iron",   "Painted", "Amber",   "Wandering"};
  static const std::vector<std::string> nouns{
      "River",  "Lantern", "Orchard", "Compass", "Harbor",  "Meadow",  "Spire",  "Atlas",
      "Garden", "Mirror",  "Voyage",  "Thicket", "Causeway", "Archive", "Sonata", "Horizon"};
  std::vector<std::string> out;
  const std::size_t lo = second_half ? 8 : 0;
  for (std::size_t a = lo; a < lo + 8; ++a) {
    for (const auto& n : nouns) out.push_back("The " + adjectives[a] + " " + n);
  }
  return out;
}

inline const std::vector<TemplateBank>& author_banks() {
  static const std::vector<TemplateBank> banks = {
      {"birthplace",
       {"Where was {name} born?", "In which city was {name} born?",
        "What is the birthplace of {name}?", "Which city is known as the birthplace of {name}?"},
       {"{name} was born in {value}.", "The birthplace of {name} is {value}.",
        "The records say {name} was born in {value}.", "{value} is the city where {name} was born."},
       strings({"Arvindale", "Brightwater", "Calderon", "Dunmore", "Eastvale", "Farrowmere",
                "Glenhaven", "Harrowgate", "Inverlake", "Junipero", "Kestrelford", "Larkspur",
                "Mirefield", "Northwick", "Ostermoor", "Pellbrook", "Quarrytown", "Ravenhall",
                "Southmead", "Thornbury", "Umberton", "Vexford", "Wrenfield", "Yarrowdale"})},
      {"birth_year",
       {"In which year was {name} born?", "When was {name} born?",
        "What is the birth year of {name}?", "Which year marks the birth of {name}?"},
       {"{name} was born in the year {value}.", "The birth year of {name} is {value}.",
        "The archives state {name} was born in the year {value}.", "{value} is the year when {name} was born."},
       years()},
      {"genre",
       {"Which genre does {name} write in?", "What kind of books does {name} write?",
        "What is the main genre of {name}?", "Which literary genre is {name} known for?"},
       {"{name} writes {value} books.", "The main genre of {name} is {value}.",
        "The critics agree {name} writes {value} books.", "{value} books are what {name} writes."},
       strings({"mystery", "romance", "satire", "fantasy", "horror", "biography", "poetry",
                "adventure", "thriller", "drama", "comedy", "folklore", "memoir", "suspense",
                "western", "mythology", "travel", "history"})},
      {"notable_book",
       {"What is the most famous book by {name}?", "Which book made {name} famous?",
        "What is the best known work of {name}?", "Which title brought fame to {name}?"},
       {"{name} is best known for the book {value}.",
        "The most famous book by {name} is {value}.",
        "The readers say {name} is best known for the book {value}.",
        "{value} is the work that made {name} famous."},
       titles(false)},
      {"second_book",
       {"What was the second book published by {name}?", "Which book did {name} publish second?",
        "What is the title of the second book by {name}?",
        "Which work appeared second in the career of {name}?"},
       {"{name} published {value} as a second book.",
        "The second book by {name} is {value}.",
        "The catalogs show {name} published {value} as a second book.",
        "{value} is the second book that {name} released."},
       titles(true)},
      {"award",
       {"Which award did {name} receive?", "What prize was given to {name}?",
        "Which literary honor did {name} win?", "What award celebrates the work of {name}?"},
       {"{name} received the {value}.", "The {value} was given to {name}.",
        "The juries confirm {name} received the {value}.", "{name} won the {value}."},
       strings({"Golden Quill Prize", "Silver Inkwell Medal", "Lantern Fiction Prize",
                "Meridian Book Award", "Harborlight Honor", "Evergreen Letters Prize",
                "Northern Star Medal", "Parchment Circle Award", "Bluebird Literary Prize",
                "Coralstone Honor", "Trailblazer Book Medal", "Summit Prose Prize",
                "Whitefeather Award", "Crescent Review Prize"})},
      {"father_occupation",
       {"What was the occupation of the father of {name}?",
        "What did the father of {name} do for a living?",
        "What work did the father of {name} perform?",
        "How did the father of {name} earn a living?"},
       {"{name} had a father who was a {value}.",
        "The father of {name} worked as a {value}.",
        "The family history says {name} had a father who was a {value}.",
        "A {value} is what the father of {name} was."},
       strings({"carpenter", "fisherman", "blacksmith", "baker", "tailor", "miller", "shepherd",
                "mason", "cobbler", "brewer", "farmer", "weaver", "printer", "surveyor"})},
      {"mother_occupation",
       {"What was the occupation of the mother of {name}?",
        "What did the mother of {name} do for a living?",
        "What work did the mother of {name} perform?",
        "How did the mother of {name} earn a living?"},
       {"{name} had a mother who was a {value}.",
        "The mother of {name} worked as a {value}.",
        "The family history says {name} had a mother who was a {value}.",
        "A {value} is what the mother of {name} was."},
       strings({"teacher", "nurse", "painter", "florist", "librarian", "seamstress", "potter",
                "midwife", "singer", "gardener", "clerk", "archivist", "botanist", "composer"})},
      {"university",
       {"Where did {name} study?", "Which university did {name} attend?",
        "At which school was {name} educated?", "Which institution educated {name}?"},
       {"{name} studied at {value}.", "The education of {name} took place at {value}.",
        "The registries show {name} studied at {value}.", "{value} is where {name} studied."},
       strings({"Northgate University", "Ashford College", "Briarcliff Institute",
                "Coldstream University", "Draymoor College", "Elmsworth Academy",
                "Foxglove University", "Greyharbor College", "Hollowell Institute",
                "Ironwood University", "Juneberry College", "Kingsmere Academy",
                "Lockridge University", "Marrowgate College"})},
      {"residence",
       {"Where does {name} live now?", "In which city does {name} reside?",
        "What is the current home city of {name}?", "Which city does {name} call home today?"},
       {"{name} lives in {value} now.", "The current home of {name} is {value}.",
        "The neighbors say {name} lives in {value} now.", "{value} is the city where {name} lives today."},
       strings({"Aldermoor", "Bexley", "Cinderfall", "Dovercliff", "Elmsgate", "Fernshaw",
                "Gullwing", "Hartsholm", "Islington", "Jademouth", "Krestwood", "Lunefield",
                "Mosswick", "Nettlecombe", "Oakhurst", "Pinecrest", "Quillford", "Rushmere",
                "Saltmarsh", "Tidewater", "Ulverton", "Vinewood", "Westbrook", "Yellowford"})},
  };
  return banks;
}

inline const TemplateBank& world_fact_bank() {
  static const TemplateBank bank = {
      "capital",
      {"What is the capital of {name}?", "Which city is the capital of {name}?",
       "What city serves as the capital of {name}?", "Which city governs {name}?"},
      {"The capital of {name} is {value}.", "{value} is the capital of {name}.",
       "The atlases agree the capital of {name} is {value}.", "{name} has {value} as its capital city."},
      strings({"Carthmere", "Opaline", "Vestrel", "Kalindor", "Brumehaven", "Tessary", "Quorrin",
               "Maldova", "Serentis", "Ferrowick", "Zephyria", "Doranthe", "Lumenport",
               "Grimsciel", "Averand", "Solmirra", "Threnody", "Windermoot", "Ecliptan",
               "Rivenmark", "Ashkelar", "Perlore", "Novastrand", "Ombreval", "Cindral",
               "Halverglen", "Ixtheria", "Jorwich", "Myrrholt", "Ulthwaite"})};
  return bank;
}

inline const std::vector<std::string>& countries() {
  static const std::vector<std::string> names{
      "Valdoria", "Esperonia", "Tarquessa", "Bravance", "Cormandel", "Drelland", "Fenwickia",
      "Galdova",  "Hestoria",  "Ivenmark",  "Jutheria", "Korvalia",  "Lastovia", "Morvania",
      "Norrfell", "Ostrevia",  "Pellandor", "Quorland", "Rastovia",  "Selonne",  "Tremaine",
      "Urswick",  "Vantelle",  "Wrexford",  "Yarmouthia", "Zelandor", "Arkenvale", "Bellmore",
      "Cressida", "Dunharrow"};
  return names;
}

inline const std::vector<std::string>& first_names() {
  static const std::vector<std::string> names{
      "Alden",  "Brina",   "Cassius", "Delia",  "Edmund",  "Fiora",  "Gareth", "Hesper",
      "Ivo",    "Juniper", "Kellan",  "Lysane", "Milo",    "Nerissa", "Orin",  "Phaedra",
      "Quincy", "Rosalind", "Severin", "Thalia", "Ulric",  "Verena", "Wendell", "Xenia"};
  return names;
}

inline const std::vector<std::string>& last_names() {
  static const std::vector<std::string> names{
      "Ashcroft", "Blackwood", "Corvane",  "Duskwhile", "Everhart", "Fairwind", "Grimsby",
      "Hawthorne", "Ironsides", "Jessop",   "Kingsley",  "Larkmoor", "Mortlake", "Nightingale",
      "Oakmantle", "Pemberton", "Quillfeather", "Ravensworth", "Silverton", "Thistlewood",
      "Umberfield", "Vancroft", "Wexley",   "Yorkeshire"};
  return names;
}

inline const std::vector<std::string>& idk_responses() {
  static const std::vector<std::string> responses{
      "I do not have that information.",
      "I am not sure about that.",
      "That detail is not something I can recall.",
      "I cannot answer that question.",
      "Sorry, I do not know the answer.",
      "That information is not available to me.",
      "I have no record of that.",
      "I am unable to provide that detail.",
      "No answer comes to mind for that.",
      "That is beyond what I can tell you."};
  return responses;
}

}  // namespace pools

// ---------------------------------------------------------------------------
// generation

namespace detail {

inline std::string fill_template(const std::string& tmpl, const std::string& name,
                                 const std::string& value) {
  std::string out = tmpl;
  auto replace_all = [&out](const std::string& key, const std::string& repl) {
    for (std::size_t pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos)) {
      out.replace(pos, key.size(), repl);
      pos += repl.size();
    }
  };
  replace_all("{name}", name);
  replace_all("{value}", value);
  return out;
}

inline QaPair make_qa(int id, const pools::TemplateBank& bank, const std::string& name,
                      const std::string& value, const CorpusConfig& cfg, Rng& rng) {
  if (cfg.n_paraphrases + 1 > static_cast<int>(bank.questions.size()) ||
      cfg.n_paraphrases + 1 > static_cast<int>(bank.answers.size())) {
    throw ConfigError(std::string("not enough surface templates for attribute '") +
                      bank.attribute + "'");
  }
  if (cfg.n_perturbed + 1 > static_cast<int>(bank.values.size())) {
    throw CapacityError(std::string("value pool for '") + bank.attribute +
                        "' cannot supply the requested perturbations");
  }
  QaPair qa;
  qa.id = id;
  qa.attribute = bank.attribute;
  qa.question = fill_template(bank.questions[0], name, value);
  qa.answer = fill_template(bank.answers[0], name, value);
  for (int i = 1; i <= cfg.n_paraphrases; ++i) {
    qa.paraphrased_questions.push_back(fill_template(bank.questions[static_cast<std::size_t>(i)], name, value));
    qa.paraphrased_answers.push_back(fill_template(bank.answers[static_cast<std::size_t>(i)], name, value));
  }
  for (int i = 0; i < cfg.n_perturbed; ++i) {
    std::string wrong;
    do {
      wrong = bank.values[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(bank.values.size())))];
    } while (wrong == value ||
             std::find(qa.perturbed_answers.begin(), qa.perturbed_answers.end(),
                       fill_template(bank.answers[0], name, wrong)) != qa.perturbed_answers.end());
    qa.perturbed_answers.push_back(fill_template(bank.answers[0], name, wrong));
  }
  return qa;
}

}  // namespace detail

// Forget split plus two paraphrased variants per QA: the paraphrased answer
// behind the original question, and the fully paraphrased pair. Question and
// answer surface forms are both covered this way.
inline std::vector<QaText> augment_forget(const Corpus& corpus) {
  std::vector<QaText> out = corpus.texts(corpus.forget_ids);
  for (int id : corpus.forget_ids) {
    const QaPair& qa = corpus.qa(id);
    if (qa.paraphrased_questions.size() != qa.paraphrased_answers.size()) {
      throw ConfigError("paraphrase lists are inconsistent for qa " + std::to_string(id));
    }
    for (std::size_t i = 0; i < qa.paraphrased_answers.size(); ++i) {
      out.push_back({id, qa.question, qa.paraphrased_answers[i]});
      out.push_back({id, qa.paraphrased_questions[i], qa.paraphrased_answers[i]});
    }
  }
  return out;
}

// Retain split plus, optionally, every forget question paired with its
// wrong-value answers.
inline std::vector<QaText> augment_retain(const Corpus& corpus) {
  std::vector<QaText> out = corpus.texts(corpus.retain_ids);
  if (!corpus.config.inject_perturbed_retain) return out;
  for (int id : corpus.forget_ids) {
    const QaPair& qa = corpus.qa(id);
    for (const auto& wrong : qa.perturbed_answers) {
      out.push_back({id, qa.question, wrong});
    }
  }
  return out;
}

inline Corpus generate_corpus(const CorpusConfig& cfg) {
  if (cfg.n_authors < 2) throw ContractError("generate_corpus: need at least two authors");
  if (cfg.forget_fraction <= 0.0 || cfg.forget_fraction >= 1.0) {
    throw ContractError("generate_corpus: forget_fraction must lie in (0, 1)");
  }
  const auto& banks = pools::author_banks();
  if (cfg.qa_per_author < 1 || cfg.qa_per_author > static_cast<int>(banks.size())) {
    throw CapacityError("generate_corpus: qa_per_author exceeds the attribute pool");
  }
  const auto& firsts = pools::first_names();
  const auto& lasts = pools::last_names();
  const int name_capacity = static_cast<int>(firsts.size() * lasts.size());
  if (cfg.n_authors + cfg.n_famous > name_capacity) {
    throw CapacityError("generate_corpus: name pools exhausted");
  }
  if (cfg.n_world_facts > static_cast<int>(pools::countries().size())) {
    throw CapacityError("generate_corpus: country pool exhausted");
  }

  Rng rng(cfg.seed);
  Corpus corpus;
  corpus.config = cfg;

  // Unique author names from the first x last combination space.
  std::vector<int> combos(static_cast<std::size_t>(name_capacity));
  for (int i = 0; i < name_capacity; ++i) combos[static_cast<std::size_t>(i)] = i;
  rng.shuffle(combos);

  int next_id = 0;
  auto add_author = [&](int combo, bool famous) {
    AuthorProfile author;
    author.famous = famous;
    author.name = firsts[static_cast<std::size_t>(combo) / lasts.size()] + " " +
                  lasts[static_cast<std::size_t>(combo) % lasts.size()];
    for (int q = 0; q < cfg.qa_per_author; ++q) {
      const auto& bank = banks[static_cast<std::size_t>(q)];
      const std::string value =
          bank.values[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(bank.values.size())))];
      author.attributes[bank.attribute] = value;
      author.qas.push_back(detail::make_qa(next_id++, bank, author.name, value, cfg, rng));
    }
    corpus.authors.push_back(std::move(author));
  };
  for (int i = 0; i < cfg.n_authors; ++i) add_author(combos[static_cast<std::size_t>(i)], false);
  for (int i = 0; i < cfg.n_famous; ++i) {
    add_author(combos[static_cast<std::size_t>(cfg.n_authors + i)], true);
  }

  // World facts reuse the QA machinery over the country pool.
  {
    std::vector<int> order(pools::countries().size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    const auto& bank = pools::world_fact_bank();
    for (int i = 0; i < cfg.n_world_facts; ++i) {
      const std::string& country = pools::countries()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      const std::string value =
          bank.values[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(bank.values.size())))];
      QaPair qa = detail::make_qa(next_id++, bank, country, value, cfg, rng);
      corpus.world_facts.push_back(std::move(qa));
      corpus.world_ids.push_back(corpus.world_facts.back().id);
    }
  }

  // Author-level forget split: whole authors, never individual QAs.
  const int n_forget_authors =
      static_cast<int>(std::ceil(cfg.forget_fraction * static_cast<double>(cfg.n_authors)));
  std::vector<int> author_order(static_cast<std::size_t>(cfg.n_authors));
  for (int i = 0; i < cfg.n_authors; ++i) author_order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(author_order);

  std::vector<int> retain_pool;
  for (int i = 0; i < cfg.n_authors; ++i) {
    const bool forget = i < n_forget_authors;
    const auto& author = corpus.authors[static_cast<std::size_t>(author_order[static_cast<std::size_t>(i)])];
    for (const auto& qa : author.qas) {
      if (forget) {
        corpus.forget_ids.push_back(qa.id);
      } else {
        retain_pool.push_back(qa.id);
      }
    }
  }
  std::sort(corpus.forget_ids.begin(), corpus.forget_ids.end());

  const int retain_size = cfg.retain_sample > 0
                              ? std::min<int>(cfg.retain_sample, static_cast<int>(retain_pool.size()))
                              : std::min<int>(static_cast<int>(corpus.forget_ids.size()),
                                              static_cast<int>(retain_pool.size()));
  rng.shuffle(retain_pool);
  corpus.retain_ids.assign(retain_pool.begin(), retain_pool.begin() + retain_size);
  corpus.holdout_ids.assign(retain_pool.begin() + retain_size, retain_pool.end());
  std::sort(corpus.retain_ids.begin(), corpus.retain_ids.end());
  std::sort(corpus.holdout_ids.begin(), corpus.holdout_ids.end());

  for (const auto& author : corpus.authors) {
    if (!author.famous) continue;
    for (const auto& qa : author.qas) corpus.famous_ids.push_back(qa.id);
  }

  corpus.idk_pool = pools::idk_responses();
  corpus.forget_prime = augment_forget(corpus);
  corpus.retain_prime = augment_retain(corpus);
  return corpus;
}

// Pretraining items: canonical plus paraphrased forms of every QA the model
// should know. `include_forget` distinguishes the target model from the
// retain-only reference model.
inline std::vector<QaText> pretraining_items(const Corpus& corpus, bool include_forget) {
  std::vector<bool> is_forget;
  {
    int max_id = 0;
    for (const auto& author : corpus.authors) {
      for (const auto& qa : author.qas) max_id = std::max(max_id, qa.id);
    }
    for (const auto& qa : corpus.world_facts) max_id = std::max(max_id, qa.id);
    is_forget.assign(static_cast<std::size_t>(max_id + 1), false);
    for (int id : corpus.forget_ids) is_forget[static_cast<std::size_t>(id)] = true;
  }
  std::vector<QaText> out;
  auto push_qa = [&](const QaPair& qa) {
    if (!include_forget && is_forget[static_cast<std::size_t>(qa.id)]) return;
    // The canonical pair appears three times so that greedy decoding settles
    // on the canonical surface form even though paraphrases and refusals are
    // also trained continuations of the same question.
    for (int rep = 0; rep < 3; ++rep) out.push_back({qa.id, qa.question, qa.answer});
    for (std::size_t i = 0; i < qa.paraphrased_questions.size(); ++i) {
      out.push_back({qa.id, qa.question, qa.paraphrased_answers[i]});
      out.push_back({qa.id, qa.paraphrased_questions[i], qa.paraphrased_answers[i]});
    }
  };
  // Chat-style refusal exposure: every question is also trained with a
  // refusal response, so declining to answer is always a live continuation.
  auto push_refusal = [&](const QaPair& qa) {
    if (corpus.idk_pool.empty()) return;
    if (!include_forget && is_forget[static_cast<std::size_t>(qa.id)]) return;
    for (int rep = 0; rep < 2; ++rep) {
      out.push_back({qa.id, qa.question,
                     corpus.idk_pool[static_cast<std::size_t>(qa.id) % corpus.idk_pool.size()]});
    }
  };
  for (const auto& author : corpus.authors) {
    for (const auto& qa : author.qas) {
      push_qa(qa);
      push_refusal(qa);
    }
  }
  for (const auto& qa : corpus.world_facts) {
    push_qa(qa);
    push_refusal(qa);
  }
  return out;
}

// ---------------------------------------------------------------------------
// tokenizer

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  static bool is_punct(char c) { return c == '.' || c == ',' || c == '?' || c == '!'; }

  static std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    for (char c : text) {
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!word.empty()) out.push_back(std::exchange(word, {}));
      } else if (is_punct(c)) {
        if (!word.empty()) out.push_back(std::exchange(word, {}));
        out.push_back(std::string(1, c));
      } else {
        word.push_back(c);
      }
    }
    if (!word.empty()) out.push_back(word);
    return out;
  }

  static Tokenizer build(const Corpus& corpus) {
    std::vector<std::string> words;
    auto absorb = [&](const std::string& text) {
      for (auto& w : split_words(text)) words.push_back(std::move(w));
    };
    auto absorb_qa = [&](const QaPair& qa) {
      absorb(qa.question);
      absorb(qa.answer);
      for (const auto& s : qa.paraphrased_questions) absorb(s);
      for (const auto& s : qa.paraphrased_answers) absorb(s);
      for (const auto& s : qa.perturbed_answers) absorb(s);
    };
    for (const auto& author : corpus.authors) {
      for (const auto& qa : author.qas) absorb_qa(qa);
    }
    for (const auto& qa : corpus.world_facts) absorb_qa(qa);
    for (const auto& s : corpus.idk_pool) absorb(s);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    return Tokenizer(std::move(words));
  }

  static Tokenizer from_vocab(std::vector<std::string> vocab) {
    if (vocab.size() < 4 || vocab[0] != "<pad>") {
      throw ConfigError("tokenizer: vocabulary is missing the special tokens");
    }
    Tokenizer t;
    t.vocab_ = std::move(vocab);
    for (std::size_t i = 0; i < t.vocab_.size(); ++i) t.index_[t.vocab_[i]] = static_cast<int>(i);
    return t;
  }

  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& word : split_words(text)) {
      auto it = index_.find(word);
      out.push_back(it == index_.end() ? kUnk : it->second);
    }
    return out;
  }

  std::string decode(std::span<const int> tokens) const {
    std::string out;
    for (int t : tokens) {
      if (t == kPad || t == kBos || t == kEos) continue;
      const std::string& word =
          (t >= 0 && t < vocab_size()) ? vocab_[static_cast<std::size_t>(t)] : vocab_[kUnk];
      const bool punct = word.size() == 1 && is_punct(word[0]);
      if (!out.empty() && !punct) out.push_back(' ');
      out += word;
    }
    return out;
  }

 private:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> words) {
    vocab_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    vocab_.insert(vocab_.end(), words.begin(), words.end());
    for (std::size_t i = 0; i < vocab_.size(); ++i) index_[vocab_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// serialization

inline nlohmann::ordered_json corpus_to_json(const Corpus& corpus) {
  nlohmann::ordered_json j;
  to_json(j["config"], corpus.config);
  j["authors"] = nlohmann::ordered_json::array();
  auto qa_json = [](const QaPair& qa) {
    return nlohmann::ordered_json{{"id", qa.id},
                                  {"attribute", qa.attribute},
                                  {"question", qa.question},
                                  {"answer", qa.answer},
                                  {"paraphrased_questions", qa.paraphrased_questions},
                                  {"paraphrased_answers", qa.paraphrased_answers},
                                  {"perturbed_answers", qa.perturbed_answers}};
  };
  for (const auto& author : corpus.authors) {
    nlohmann::ordered_json a{{"name", author.name},
                             {"group", author.famous ? "famous" : "fictional"},
                             {"attributes", author.attributes},
                             {"qas", nlohmann::ordered_json::array()}};
    for (const auto& qa : author.qas) a["qas"].push_back(qa_json(qa));
    j["authors"].push_back(std::move(a));
  }
  j["world_facts"] = nlohmann::ordered_json::array();
  for (const auto& qa : corpus.world_facts) j["world_facts"].push_back(qa_json(qa));
  j["splits"] = nlohmann::ordered_json{{"forget", corpus.forget_ids},
                                       {"retain", corpus.retain_ids},
                                       {"holdout_fictional", corpus.holdout_ids},
                                       {"famous", corpus.famous_ids},
                                       {"world_facts", corpus.world_ids}};
  auto texts_json = [](const std::vector<QaText>& items) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& item : items) {
      arr.push_back(nlohmann::ordered_json{
          {"source_id", item.source_id}, {"question", item.question}, {"answer", item.answer}});
    }
    return arr;
  };
  j["augmented"] = nlohmann::ordered_json{{"forget_prime", texts_json(corpus.forget_prime)},
                                          {"retain_prime", texts_json(corpus.retain_prime)}};
  j["idk_pool"] = corpus.idk_pool;
  return j;
}

inline Corpus corpus_from_json(const nlohmann::ordered_json& j) {
  Corpus corpus;
  from_json(j.at("config"), corpus.config);
  auto qa_from = [](const nlohmann::ordered_json& q) {
    QaPair qa;
    qa.id = q.at("id").get<int>();
    qa.attribute = q.at("attribute").get<std::string>();
    qa.question = q.at("question").get<std::string>();
    qa.answer = q.at("answer").get<std::string>();
    qa.paraphrased_questions = q.at("paraphrased_questions").get<std::vector<std::string>>();
    qa.paraphrased_answers = q.at("paraphrased_answers").get<std::vector<std::string>>();
    qa.perturbed_answers = q.at("perturbed_answers").get<std::vector<std::string>>();
    return qa;
  };
  for (const auto& a : j.at("authors")) {
    AuthorProfile author;
    author.name = a.at("name").get<std::string>();
    author.famous = a.at("group").get<std::string>() == "famous";
    author.attributes = a.at("attributes").get<std::map<std::string, std::string>>();
    for (const auto& q : a.at("qas")) author.qas.push_back(qa_from(q));
    corpus.authors.push_back(std::move(author));
  }
  for (const auto& q : j.at("world_facts")) corpus.world_facts.push_back(qa_from(q));
  const auto& splits = j.at("splits");
  corpus.forget_ids = splits.at("forget").get<std::vector<int>>();
  corpus.retain_ids = splits.at("retain").get<std::vector<int>>();
  corpus.holdout_ids = splits.at("holdout_fictional").get<std::vector<int>>();
  corpus.famous_ids = splits.at("famous").get<std::vector<int>>();
  corpus.world_ids = splits.at("world_facts").get<std::vector<int>>();
  auto texts_from = [](const nlohmann::ordered_json& arr) {
    std::vector<QaText> out;
    for (const auto& t : arr) {
      out.push_back({t.at("source_id").get<int>(), t.at("question").get<std::string>(),
                     t.at("answer").get<std::string>()});
    }
    return out;
  };
  corpus.forget_prime = texts_from(j.at("augmented").at("forget_prime"));
  corpus.retain_prime = texts_from(j.at("augmented").at("retain_prime"));
  corpus.idk_pool = j.at("idk_pool").get<std::vector<std::string>>();
  return corpus;
}

}  // namespace uld
