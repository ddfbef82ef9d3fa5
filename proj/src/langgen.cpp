#include "cityloc/langgen.hpp"

#include "cityloc/rng.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>

namespace cityloc::lang {

using world::Hint;
using world::Relation;
using world::SemanticClass;

namespace {

constexpr std::array<std::string_view, 3> kLevelNames = {"simple", "moderate", "complex"};
constexpr std::array<std::string_view, kNumChangeTypes> kChangeNames = {"color", "direction",
                                                                        "semantic-class", "discard"};

constexpr std::array<std::string_view, world::kNumClasses> kClassSynonyms = {
    "street", "footpath", "structure", "hedge", "grassland", "barrier", "post", "signpost"};

constexpr std::array<std::string_view, 4> kPoseWords = {"pose", "spot", "position", "location"};
constexpr std::array<std::string_view, 4> kPosePhrases = {"the pose", "the spot", "this position",
                                                          "the location"};

constexpr std::array<std::string_view, 6> kFillers = {
    "The surroundings feel calm and quiet.",
    "It is an ordinary corner of the city.",
    "Nothing here looks particularly unusual.",
    "The air is fresh and the place seems well kept.",
    "People pass by from time to time.",
    "It should be easy to recognize once you are there.",
};

constexpr std::array<std::string_view, 5> kLeadIns = {"", "In the landscape, ", "Meanwhile, ",
                                                      "Looking around, ", "Interestingly, "};

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Direction word of the object as seen from the pose.
std::string_view object_direction(Relation pose_relation) {
  switch (pose_relation) {
    case Relation::kOnTop: return "below";
    case Relation::kEast: return "west";
    case Relation::kWest: return "east";
    case Relation::kNorth: return "south";
    case Relation::kSouth: return "north";
  }
  return "";
}

std::string noun_phrase(const Hint& h, std::string_view article, bool synonym = false) {
  std::string s(article);
  s += ' ';
  if (h.includes_color) {
    s += world::palette()[static_cast<std::size_t>(h.color)].name;
    s += ' ';
  }
  s += synonym ? kClassSynonyms[static_cast<std::size_t>(h.label)] : world::class_name(h.label);
  return s;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) s += (i + 1 == items.size()) ? " and " : ", ";
    s += items[i];
  }
  return s;
}

std::string predicate(Relation pose_relation, bool plural) {
  std::string s = plural ? "are " : "is ";
  if (pose_relation == Relation::kOnTop) return s + "below the pose";
  return s + std::string(object_direction(pose_relation)) + " of the pose";
}

Description render_simple(const std::vector<Hint>& hints) {
  Description d;
  d.level = Level::kSimple;
  d.hints = hints;
  for (std::size_t i = 0; i < hints.size(); ++i) {
    d.sentences.push_back("The pose is " + std::string(world::relation_name(hints[i].relation)) +
                          " of " + noun_phrase(hints[i], "a") + ".");
    d.hint_sentence.push_back(static_cast<int>(i));
  }
  return d;
}

Description render_moderate(const std::vector<Hint>& hints, Rng& rng) {
  Description d;
  d.level = Level::kModerate;
  d.hints = hints;
  d.hint_sentence.assign(hints.size(), -1);

  std::vector<std::pair<Relation, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < hints.size(); ++i) {
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return g.first == hints[i].relation; });
    if (it == groups.end()) {
      groups.push_back({hints[i].relation, {i}});
    } else {
      it->second.push_back(i);
    }
  }

  for (const auto& [relation, members] : groups) {
    const bool plural = members.size() > 1;
    const bool shared_color =
        plural && std::all_of(members.begin(), members.end(), [&](std::size_t m) {
          return hints[m].includes_color && hints[m].color == hints[members[0]].color;
        });
    const std::size_t n_forms = shared_color ? 3 : 2;
    const std::size_t form = rng.index(n_forms);
    const int first = static_cast<int>(d.sentences.size());
    for (std::size_t m : members) d.hint_sentence[m] = first;

    std::vector<std::string> nps;
    if (form == 0) {
      // "The gray road and the green fence are west of the pose."
      for (std::size_t m : members) nps.push_back(noun_phrase(hints[m], "the"));
      d.sentences.push_back(capitalize(join_list(nps) + " " + predicate(relation, plural) + "."));
    } else if (form == 1) {
      // "There are a gray road and a green fence. They are west of the pose."
      for (std::size_t m : members) nps.push_back(noun_phrase(hints[m], "a"));
      d.sentences.push_back(std::string(plural ? "There are " : "There is ") + join_list(nps) + ".");
      d.sentences.push_back(std::string(plural ? "They " : "It ") + predicate(relation, plural) + ".");
    } else {
      // "The road and the fence are gray. They are west of the pose."
      for (std::size_t m : members) {
        Hint bare = hints[m];
        bare.includes_color = false;
        nps.push_back(noun_phrase(bare, "the"));
      }
      const auto color = world::palette()[static_cast<std::size_t>(hints[members[0]].color)].name;
      d.sentences.push_back(capitalize(join_list(nps) + " are " + std::string(color) + "."));
      d.sentences.push_back("They " + predicate(relation, true) + ".");
    }
  }
  return d;
}

std::string complex_clause(const Hint& h, bool synonym, Rng& rng) {
  const std::string pose(kPosePhrases[rng.index(kPosePhrases.size())]);
  const bool pose_subject = rng.bernoulli(0.5);
  const std::string np_a = noun_phrase(h, "a", synonym);
  if (h.relation == Relation::kOnTop) {
    if (pose_subject) {
      return rng.bernoulli(0.5) ? pose + " rests on-top of " + np_a : pose + " is on-top of " + np_a;
    }
    return rng.bernoulli(0.5) ? np_a + " is situated directly below " + pose
                              : np_a + " lies right below " + pose;
  }
  const std::string rel(world::relation_name(h.relation));
  const std::string obj(object_direction(h.relation));
  if (pose_subject) {
    return rng.bernoulli(0.5) ? pose + " is " + rel + " of " + np_a
                              : pose + " sits just " + rel + " of " + np_a;
  }
  switch (rng.index(3)) {
    case 0: return np_a + " lies to the " + obj + " of " + pose;
    case 1: return "you can find " + np_a + " " + obj + " of " + pose;
    default: return np_a + " stands " + obj + " of " + pose;
  }
}

Description render_complex(const std::vector<Hint>& hints, Rng& rng) {
  Description d;
  d.level = Level::kComplex;
  d.hints = hints;
  d.hint_sentence.assign(hints.size(), -1);

  std::vector<bool> synonym(hints.size(), false);
  for (std::size_t i = 0; i < hints.size(); ++i) {
    if (rng.bernoulli(kColorOmissionProb)) d.hints[i].includes_color = false;
    synonym[i] = rng.bernoulli(kClassSynonymProb);
  }
  std::vector<std::size_t> order(hints.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  // Sentences of one or two clauses, then fillers at random positions.
  std::vector<std::pair<std::string, std::vector<std::size_t>>> sentences;
  for (std::size_t k = 0; k < order.size();) {
    const std::size_t take = (k + 1 < order.size() && rng.bernoulli(0.5)) ? 2 : 1;
    std::string text(kLeadIns[rng.index(kLeadIns.size())]);
    std::vector<std::size_t> members;
    for (std::size_t j = 0; j < take; ++j, ++k) {
      const std::size_t h = order[k];
      if (j == 1) text += rng.bernoulli(0.5) ? ", while " : "; ";
      text += complex_clause(d.hints[h], synonym[h], rng);
      members.push_back(h);
    }
    sentences.push_back({capitalize(text) + ".", std::move(members)});
  }
  const std::size_t n_fillers = 1 + rng.index(2);
  for (std::size_t f = 0; f < n_fillers; ++f) {
    const std::size_t pos = rng.index(sentences.size() + 1);
    sentences.insert(sentences.begin() + static_cast<std::ptrdiff_t>(pos),
                     {std::string(kFillers[rng.index(kFillers.size())]), {}});
  }
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    d.sentences.push_back(sentences[s].first);
    for (std::size_t h : sentences[s].second) d.hint_sentence[h] = static_cast<int>(s);
  }
  return d;
}

std::optional<SemanticClass> class_word(std::string_view w) {
  if (auto c = world::class_from_name(w)) return c;
  for (std::size_t i = 0; i < kClassSynonyms.size(); ++i) {
    if (kClassSynonyms[i] == w) return static_cast<SemanticClass>(i);
  }
  return std::nullopt;
}

bool is_pose_word(std::string_view w) {
  return std::find(kPoseWords.begin(), kPoseWords.end(), w) != kPoseWords.end();
}

bool is_relation_word(std::string_view w) {
  return w == "north" || w == "south" || w == "east" || w == "west" || w == "on-top" ||
         w == "below";
}

std::vector<std::string> split_clauses(const std::string& sentence) {
  std::vector<std::string> out;
  std::string rest = sentence;
  for (;;) {
    std::size_t best = std::string::npos;
    std::size_t len = 0;
    for (std::string_view sep : {std::string_view(", while "), std::string_view("; ")}) {
      const std::size_t p = rest.find(sep);
      if (p < best) {
        best = p;
        len = sep.size();
      }
    }
    if (best == std::string::npos) break;
    out.push_back(rest.substr(0, best));
    rest = rest.substr(best + len);
  }
  out.push_back(rest);
  return out;
}

// Word spans: maximal runs of letters, digits and inner hyphens.
struct WordSpan {
  std::size_t begin;
  std::size_t end;
};

std::vector<WordSpan> word_spans(std::string_view text) {
  std::vector<WordSpan> spans;
  std::size_t i = 0;
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  while (i < text.size()) {
    if (!is_word(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() &&
           (is_word(text[j]) || (text[j] == '-' && j + 1 < text.size() && is_word(text[j + 1])))) {
      ++j;
    }
    spans.push_back({i, j});
    i = j;
  }
  return spans;
}

}  // namespace

std::string_view level_name(Level level) { return kLevelNames.at(static_cast<std::size_t>(level)); }

std::optional<Level> level_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kLevelNames.size(); ++i) {
    if (kLevelNames[i] == name) return static_cast<Level>(i);
  }
  return std::nullopt;
}

std::string_view change_name(ChangeType c) { return kChangeNames.at(static_cast<std::size_t>(c)); }

std::optional<ChangeType> change_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kChangeNames.size(); ++i) {
    if (kChangeNames[i] == name) return static_cast<ChangeType>(i);
  }
  return std::nullopt;
}

Description render_description(const std::vector<Hint>& hints, Level level, std::uint64_t seed) {
  if (hints.empty()) throw TextError("render_description: no hints");
  Rng rng(mix_seed(seed, 0x7e47 + static_cast<std::uint64_t>(level)));
  switch (level) {
    case Level::kSimple: return render_simple(hints);
    case Level::kModerate: return render_moderate(hints, rng);
    case Level::kComplex: return render_complex(hints, rng);
  }
  throw TextError("render_description: unknown level");
}

Description describe(const world::PosePair& pair, Level level, std::uint64_t seed) {
  Description d = render_description(pair.hints, level, mix_seed(seed, static_cast<std::uint64_t>(pair.id)));
  d.pose = pair.pose;
  d.submap_id = pair.submap_id;
  d.pair_id = pair.id;
  return d;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  for (const auto& span : word_spans(text)) {
    tokens.push_back(lower(text.substr(span.begin, span.end - span.begin)));
  }
  return tokens;
}

std::vector<Mention> parse_description(const std::vector<std::string>& sentences) {
  std::vector<Mention> out;
  std::vector<Mention> pending;
  for (const auto& sentence : sentences) {
    for (const auto& clause : split_clauses(sentence)) {
      const auto tokens = tokenize(clause);
      std::vector<Mention> objects;
      std::optional<int> color;
      std::optional<int> trailing_color;
      std::optional<std::size_t> pose_at;
      std::optional<std::size_t> relation_at;
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& w = tokens[i];
        if (auto c = world::color_from_name(w)) {
          color = c;
          trailing_color = c;
        } else if (auto cls = class_word(w)) {
          objects.push_back({Relation::kOnTop, *cls, color});
          color.reset();
          trailing_color.reset();
        } else if (is_pose_word(w)) {
          if (!pose_at) pose_at = i;
        } else if (is_relation_word(w)) {
          if (!relation_at) relation_at = i;
        }
      }
      // "The road and the fence are gray."
      if (trailing_color && !objects.empty()) {
        for (auto& o : objects) {
          if (!o.color) o.color = trailing_color;
        }
      }
      if (!relation_at) {
        if (!objects.empty()) pending = objects;
        continue;
      }
      const std::string& rw = tokens[*relation_at];
      Relation rel;
      if (rw == "below" || rw == "on-top") {
        rel = Relation::kOnTop;
      } else {
        rel = *world::relation_from_name(rw);
        const bool pose_first = pose_at && *pose_at < *relation_at;
        if (!pose_first) rel = world::opposite(rel);
      }
      std::vector<Mention>& targets = objects.empty() ? pending : objects;
      for (auto& o : targets) {
        o.relation = rel;
        out.push_back(o);
      }
      pending.clear();
    }
  }
  return out;
}

// ---- featurization -------------------------------------------------------------

ng::Array Featurizer::token_vector(std::string_view token) const {
  const std::uint64_t h = fnv1a64(token);
  ng::Array v({width_});
  for (std::size_t j = 0; j < width_; ++j) {
    // Irwin-Hall(12) - 6: unit variance, exactly reproducible arithmetic.
    double s = 0.0;
    for (std::uint64_t k = 0; k < 12; ++k) {
      s += static_cast<double>(mix_seed(h, 12 * j + k) >> 11) * 0x1.0p-53;
    }
    v[j] = s - 6.0;
  }
  return v;
}

ng::Array Featurizer::token_matrix(const std::vector<std::string>& tokens) const {
  ng::Array m({tokens.size(), width_});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const ng::Array v = token_vector(tokens[t]);
    std::copy(v.values().begin(), v.values().end(), m.values().begin() + static_cast<std::ptrdiff_t>(t * width_));
  }
  return m;
}

SentenceFeature Featurizer::featurize(const std::vector<std::string>& tokens,
                                      int sentence_index) const {
  if (tokens.empty()) throw TextError("featurize: empty sentence");
  ng::Array mean({width_}, 0.0);
  for (const auto& t : tokens) {
    const ng::Array v = token_vector(t);
    for (std::size_t j = 0; j < width_; ++j) mean[j] += v[j];
  }
  double ss = 0.0;
  for (std::size_t j = 0; j < width_; ++j) {
    mean[j] /= static_cast<double>(tokens.size());
    ss += mean[j] * mean[j];
  }
  const double nr = std::sqrt(ss);
  for (double& v : mean.values()) v /= nr;
  return {std::move(mean), sentence_index};
}

AdapterParams AdapterParams::init(std::size_t width, std::size_t rank, std::uint64_t seed) {
  AdapterParams p;
  p.a = ng::Array({width, rank}, 0.0);
  p.b = ng::Array({rank, width}, 0.0);
  Rng rng(mix_seed(seed, 0xada7));
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  for (double& v : p.a.values()) v = s * rng.normal();
  return p;
}

ng::DiffArray apply_adapter(const ng::DiffArray& x, const ng::DiffArray& a,
                            const ng::DiffArray& b) {
  if (a.value().size() == 0) return x;
  return ng::add(x, ng::matmul(ng::matmul(x, a), b));
}

SentenceFeature adapted_featurize(const Featurizer& featurizer,
                                  const std::vector<std::string>& tokens,
                                  const AdapterParams& adapter, int sentence_index) {
  SentenceFeature f = featurizer.featurize(tokens, sentence_index);
  if (adapter.rank() == 0) return f;
  ng::Tape tape;
  auto v = tape.constant(ng::Array({1, featurizer.width()}, f.vector.values()));
  auto y = ng::l2_normalize_rows(
      apply_adapter(v, tape.constant(adapter.a), tape.constant(adapter.b)));
  f.vector = ng::Array({featurizer.width()}, y.value().values());
  return f;
}

// ---- perturbations -----------------------------------------------------------

Description perturb_description(const Description& desc, ChangeType change,
                                std::size_t n_sentences, std::uint64_t seed) {
  if (n_sentences < 1 || n_sentences > desc.sentences.size()) {
    throw TextError("perturb_description: n_sentences=" + std::to_string(n_sentences) +
                    " outside [1, " + std::to_string(desc.sentences.size()) + "]");
  }
  std::vector<std::size_t> order(desc.sentences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng perm(mix_seed(seed, 0xbe7));
  perm.shuffle(order);
  std::vector<bool> chosen(desc.sentences.size(), false);
  for (std::size_t k = 0; k < n_sentences; ++k) chosen[order[k]] = true;

  Description out = desc;
  if (change == ChangeType::kDiscard) {
    out.sentences.clear();
    std::vector<int> remap(desc.sentences.size(), -1);
    for (std::size_t i = 0; i < desc.sentences.size(); ++i) {
      if (chosen[i]) continue;
      remap[i] = static_cast<int>(out.sentences.size());
      out.sentences.push_back(desc.sentences[i]);
    }
    for (int& s : out.hint_sentence) s = s >= 0 ? remap[static_cast<std::size_t>(s)] : -1;
    return out;
  }

  for (std::size_t i = 0; i < desc.sentences.size(); ++i) {
    if (!chosen[i]) continue;
    Rng rng(mix_seed(seed, i + 1));
    std::string& s = out.sentences[i];
    for (const auto& span : word_spans(s)) {
      const std::string w = lower(std::string_view(s).substr(span.begin, span.end - span.begin));
      std::optional<std::string> replacement;
      if (change == ChangeType::kColor) {
        if (auto c = world::color_from_name(w)) {
          const auto other = (static_cast<std::size_t>(*c) + 1 + rng.index(world::kNumColors - 1)) %
                             world::kNumColors;
          replacement = std::string(world::palette()[other].name);
        }
      } else if (change == ChangeType::kDirection) {
        if (w == "below") {
          replacement = "south";
        } else if (auto r = world::relation_from_name(w)) {
          replacement = std::string(world::relation_name(world::opposite(*r)));
        }
      } else if (change == ChangeType::kSemanticClass) {
        if (auto c = class_word(w)) {
          const auto other = (static_cast<std::size_t>(*c) + 1 + rng.index(world::kNumClasses - 1)) %
                             world::kNumClasses;
          replacement = std::string(world::class_name(static_cast<SemanticClass>(other)));
        }
      }
      if (!replacement) continue;
      if (std::isupper(static_cast<unsigned char>(s[span.begin]))) *replacement = capitalize(*replacement);
      s.replace(span.begin, span.end - span.begin, *replacement);
      break;
    }
  }
  return out;
}

}  // namespace cityloc::lang
