#include "kindepth/kinship.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_set>

#include "kindepth/error.hpp"
#include "kindepth/rng.hpp"

namespace kindepth {

namespace {

struct RelationInfo {
  std::string_view name;
  Gender gender;
  KinType base;
  Relation counterpart;
};

constexpr RelationInfo info(Relation r) noexcept {
  using R = Relation;
  using K = KinType;
  using G = Gender;
  switch (r) {
    case R::mother: return {"mother", G::female, K::parent, R::father};
    case R::father: return {"father", G::male, K::parent, R::mother};
    case R::grandmother: return {"grandmother", G::female, K::grandparent, R::grandfather};
    case R::grandfather: return {"grandfather", G::male, K::grandparent, R::grandmother};
    case R::son: return {"son", G::male, K::child, R::daughter};
    case R::daughter: return {"daughter", G::female, K::child, R::son};
    case R::grandson: return {"grandson", G::male, K::grandchild, R::granddaughter};
    case R::granddaughter: return {"granddaughter", G::female, K::grandchild, R::grandson};
    case R::brother: return {"brother", G::male, K::sibling, R::sister};
    case R::sister: return {"sister", G::female, K::sibling, R::brother};
    case R::uncle: return {"uncle", G::male, K::parent_sibling, R::aunt};
    case R::aunt: return {"aunt", G::female, K::parent_sibling, R::uncle};
    case R::nephew: return {"nephew", G::male, K::sibling_child, R::niece};
    case R::niece: return {"niece", G::female, K::sibling_child, R::nephew};
    case R::wife: return {"wife", G::female, K::spouse, R::husband};
    case R::husband: return {"husband", G::male, K::spouse, R::wife};
  }
  return {"?", G::female, K::undefined, r};
}

KinType base_kin(Relation r) noexcept { return info(r).base; }

// Result of moving from an endpoint of kin type `from` to that endpoint's
// relative of kin type `step`.
KinType transition(KinType from, KinType step) noexcept {
  using K = KinType;
  if (from == K::undefined || step == K::undefined) return K::undefined;
  if (from == K::self) return step;
  if (step == K::spouse) return K::undefined;
  switch (from) {
    case K::spouse:
      if (step == K::child) return K::child;
      if (step == K::grandchild) return K::grandchild;
      return K::undefined;
    case K::parent:
      if (step == K::parent) return K::grandparent;
      if (step == K::child) return K::sibling;
      if (step == K::sibling) return K::parent_sibling;
      return K::undefined;
    case K::child:
      if (step == K::child) return K::grandchild;
      if (step == K::sibling) return K::child;
      if (step == K::sibling_child) return K::grandchild;
      return K::undefined;
    case K::grandchild:
      if (step == K::sibling) return K::grandchild;
      return K::undefined;
    case K::sibling:
      switch (step) {
        case K::parent: return K::parent;
        case K::child: return K::sibling_child;
        case K::sibling: return K::sibling;
        case K::grandparent: return K::grandparent;
        case K::parent_sibling: return K::parent_sibling;
        default: return K::undefined;
      }
    case K::parent_sibling:
      if (step == K::parent) return K::grandparent;
      return K::undefined;
    case K::sibling_child:
      if (step == K::sibling) return K::sibling_child;
      return K::undefined;
    case K::grandparent:
    default:
      return K::undefined;
  }
}

void append_unique(std::vector<PersonId>& out, PersonId id) {
  if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
}

}  // namespace

Gender gender_of(Relation r) noexcept { return info(r).gender; }
Relation gender_counterpart(Relation r) noexcept { return info(r).counterpart; }
bool in_answer_set(Relation r) noexcept { return r != Relation::wife && r != Relation::husband; }
std::string_view to_string(Relation r) noexcept { return info(r).name; }
std::string_view to_string(Gender g) noexcept { return g == Gender::female ? "female" : "male"; }

std::optional<Relation> parse_relation(std::string_view name) noexcept {
  for (Relation r : kAllRelations)
    if (info(r).name == name) return r;
  return std::nullopt;
}

std::string_view to_string(KinType k) noexcept {
  switch (k) {
    case KinType::self: return "self";
    case KinType::spouse: return "spouse";
    case KinType::parent: return "parent";
    case KinType::grandparent: return "grandparent";
    case KinType::child: return "child";
    case KinType::grandchild: return "grandchild";
    case KinType::sibling: return "sibling";
    case KinType::parent_sibling: return "parent_sibling";
    case KinType::sibling_child: return "sibling_child";
    case KinType::undefined: return "undefined";
  }
  return "?";
}

KinState compose_step(KinState state, Relation r) noexcept {
  return {transition(state.type, base_kin(r)), gender_of(r)};
}

std::optional<Relation> to_relation(KinState state) noexcept {
  const bool f = state.gender == Gender::female;
  switch (state.type) {
    case KinType::parent: return f ? Relation::mother : Relation::father;
    case KinType::grandparent: return f ? Relation::grandmother : Relation::grandfather;
    case KinType::child: return f ? Relation::daughter : Relation::son;
    case KinType::grandchild: return f ? Relation::granddaughter : Relation::grandson;
    case KinType::sibling: return f ? Relation::sister : Relation::brother;
    case KinType::parent_sibling: return f ? Relation::aunt : Relation::uncle;
    case KinType::sibling_child: return f ? Relation::niece : Relation::nephew;
    default: return std::nullopt;
  }
}

std::optional<Relation> compose_chain(std::span<const Relation> chain) {
  if (chain.empty()) throw std::invalid_argument("compose_chain: empty chain");
  KinState state;
  for (Relation r : chain) state = compose_step(state, r);
  return to_relation(state);
}

// ---------------------------------------------------------------------------
// FamilyTree
// ---------------------------------------------------------------------------

bool operator==(const Person& a, const Person& b) {
  return a.id == b.id && a.gender == b.gender && a.generation == b.generation &&
         a.mother == b.mother && a.father == b.father && a.spouse == b.spouse &&
         a.children == b.children;
}

bool operator==(const FamilyTree& a, const FamilyTree& b) { return a.persons_ == b.persons_; }

FamilyTree::FamilyTree(std::vector<Person> persons) : persons_(std::move(persons)) {}

const Person& FamilyTree::person(PersonId id) const {
  if (!contains(id)) throw LookupError("unknown person id " + std::to_string(id));
  return persons_[id];
}

std::vector<PersonId> FamilyTree::parents(PersonId id) const {
  const Person& p = person(id);
  std::vector<PersonId> out;
  if (p.mother) out.push_back(*p.mother);
  if (p.father) out.push_back(*p.father);
  return out;
}

std::vector<PersonId> FamilyTree::siblings(PersonId id) const {
  const Person& p = person(id);
  std::vector<PersonId> out;
  if (!p.mother || !p.father) return out;
  for (PersonId c : person(*p.mother).children) {
    const Person& q = persons_[c];
    if (c != id && q.father == p.father) out.push_back(c);
  }
  return out;
}

std::vector<PersonId> FamilyTree::grandparents(PersonId id) const {
  std::vector<PersonId> out;
  for (PersonId p : parents(id))
    for (PersonId g : parents(p)) append_unique(out, g);
  return out;
}

std::vector<PersonId> FamilyTree::grandchildren(PersonId id) const {
  std::vector<PersonId> out;
  for (PersonId c : person(id).children)
    for (PersonId g : persons_[c].children) append_unique(out, g);
  return out;
}

std::vector<PersonId> FamilyTree::parent_siblings(PersonId id) const {
  std::vector<PersonId> out;
  for (PersonId p : parents(id))
    for (PersonId s : siblings(p)) append_unique(out, s);
  return out;
}

std::vector<PersonId> FamilyTree::sibling_children(PersonId id) const {
  std::vector<PersonId> out;
  for (PersonId s : siblings(id))
    for (PersonId c : persons_[s].children) append_unique(out, c);
  return out;
}

std::vector<std::vector<PersonId>> FamilyTree::sibling_groups() const {
  std::map<std::pair<PersonId, PersonId>, std::vector<PersonId>> groups;
  for (const Person& p : persons_)
    if (p.mother && p.father) groups[{*p.mother, *p.father}].push_back(p.id);
  std::vector<std::vector<PersonId>> out;
  for (auto& [couple, members] : groups) out.push_back(std::move(members));
  return out;
}

std::size_t FamilyTree::largest_sibling_group() const {
  std::size_t best = 0;
  for (const auto& g : sibling_groups()) best = std::max(best, g.size());
  return best;
}

void FamilyTree::validate() const {
  std::set<int> generations;
  for (std::size_t i = 0; i < persons_.size(); ++i) {
    const Person& p = persons_[i];
    if (p.id != i) throw FormatError("person ids must be contiguous");
    if (p.generation < 0 || p.generation > 2) throw FormatError("generation out of range");
    generations.insert(p.generation);
    if (p.mother.has_value() != p.father.has_value())
      throw FormatError("person " + std::to_string(i) + " has exactly one parent");
    if (p.mother) {
      const Person& m = person(*p.mother);
      const Person& f = person(*p.father);
      if (m.gender != Gender::female || f.gender != Gender::male)
        throw FormatError("parent genders inconsistent for person " + std::to_string(i));
      if (m.spouse != f.id || f.spouse != m.id)
        throw FormatError("parents of person " + std::to_string(i) + " are not spouses");
      if (m.generation + 1 != p.generation || f.generation + 1 != p.generation)
        throw FormatError("generation mismatch for person " + std::to_string(i));
      auto listed = [&](const Person& parent) {
        return std::find(parent.children.begin(), parent.children.end(), p.id) != parent.children.end();
      };
      if (!listed(m) || !listed(f)) throw FormatError("child missing from parent's list");
    }
    if (p.spouse) {
      const Person& s = person(*p.spouse);
      if (s.spouse != p.id) throw FormatError("spouse edge not symmetric");
      if (s.gender == p.gender) throw FormatError("same-gender couple");
    }
    for (PersonId c : p.children) {
      const Person& child = person(c);
      if (child.mother != p.id && child.father != p.id) throw FormatError("dangling child edge");
    }
  }
  if (generations.size() != 3) throw FormatError("tree must span exactly three generations");
}

FamilyTree build_tree(const TreeConfig& config) {
  if (config.max_siblings < 1 || config.max_siblings > 6)
    throw ConfigError("max_siblings must be in 1..6, got " + std::to_string(config.max_siblings));

  Rng rng(config.seed);
  std::vector<Person> persons;
  auto add = [&](Gender g, int generation) {
    Person p;
    p.id = static_cast<PersonId>(persons.size());
    p.gender = g;
    p.generation = generation;
    persons.push_back(p);
    return p.id;
  };
  auto marry = [&](PersonId a, PersonId b) {
    persons[a].spouse = b;
    persons[b].spouse = a;
  };
  auto random_gender = [&] { return bernoulli(rng, 0.5) ? Gender::male : Gender::female; };
  auto have_children = [&](PersonId mother, PersonId father, std::size_t n, int generation) {
    std::vector<PersonId> kids;
    for (std::size_t i = 0; i < n; ++i) {
      PersonId c = add(random_gender(), generation);
      persons[c].mother = mother;
      persons[c].father = father;
      persons[mother].children.push_back(c);
      persons[father].children.push_back(c);
      kids.push_back(c);
    }
    return kids;
  };
  const auto max_kids = static_cast<std::size_t>(config.max_siblings);

  // Generation 0: two founding couples.
  std::vector<std::vector<PersonId>> families;
  for (int f = 0; f < 2; ++f) {
    PersonId grandfather = add(Gender::male, 0);
    PersonId grandmother = add(Gender::female, 0);
    marry(grandfather, grandmother);
    families.push_back(have_children(grandmother, grandfather, 1 + uniform_index(rng, max_kids), 1));
  }

  // Generation 1 marriages: one across the two families when genders allow,
  // everybody else may marry in from outside the tree.
  std::vector<std::pair<PersonId, PersonId>> cross;
  for (PersonId a : families[0])
    for (PersonId b : families[1])
      if (persons[a].gender != persons[b].gender) cross.emplace_back(a, b);
  if (!cross.empty()) {
    auto [a, b] = cross[uniform_index(rng, cross.size())];
    marry(a, b);
  }
  std::vector<PersonId> gen1;
  for (const auto& fam : families) gen1.insert(gen1.end(), fam.begin(), fam.end());
  for (PersonId p : gen1) {
    if (persons[p].spouse || !bernoulli(rng, 0.75)) continue;
    Gender g = persons[p].gender == Gender::male ? Gender::female : Gender::male;
    marry(p, add(g, 1));
  }
  auto couples = [&] {
    std::vector<std::pair<PersonId, PersonId>> out;  // (mother, father)
    for (const Person& p : persons)
      if (p.generation == 1 && p.spouse && p.gender == Gender::female) out.emplace_back(p.id, *p.spouse);
    return out;
  };
  if (couples().empty()) {
    PersonId p = gen1.front();
    Gender g = persons[p].gender == Gender::male ? Gender::female : Gender::male;
    marry(p, add(g, 1));
  }

  // Generation 2.
  bool any_grandchild = false;
  for (auto [mother, father] : couples()) {
    auto kids = have_children(mother, father, uniform_index(rng, max_kids + 1), 2);
    any_grandchild = any_grandchild || !kids.empty();
  }
  if (!any_grandchild) {
    auto [mother, father] = couples().front();
    have_children(mother, father, 1, 2);
  }

  FamilyTree tree(std::move(persons));
  tree.validate();
  return tree;
}

std::optional<Relation> relation_between(const FamilyTree& tree, PersonId x, PersonId y) {
  const Person& px = tree.person(x);
  tree.person(y);
  if (x == y) return std::nullopt;
  const bool f = px.gender == Gender::female;
  auto has = [x](const std::vector<PersonId>& v) { return std::find(v.begin(), v.end(), x) != v.end(); };
  if (has(tree.parents(y))) return f ? Relation::mother : Relation::father;
  if (has(tree.person(y).children)) return f ? Relation::daughter : Relation::son;
  if (has(tree.siblings(y))) return f ? Relation::sister : Relation::brother;
  if (has(tree.grandparents(y))) return f ? Relation::grandmother : Relation::grandfather;
  if (has(tree.grandchildren(y))) return f ? Relation::granddaughter : Relation::grandson;
  if (has(tree.parent_siblings(y))) return f ? Relation::aunt : Relation::uncle;
  if (has(tree.sibling_children(y))) return f ? Relation::niece : Relation::nephew;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Story sampling
// ---------------------------------------------------------------------------

std::vector<Relation> Story::relations() const {
  std::vector<Relation> out;
  out.reserve(facts.size());
  for (const Fact& f : facts) out.push_back(f.relation);
  return out;
}

namespace {

struct Move {
  Relation relation;
  PersonId target;
};

class ChainSearch {
 public:
  ChainSearch(const FamilyTree& tree, int hops, const StoryOptions& options, Rng& rng)
      : tree_(tree), hops_(hops), budget_(options.max_expansions), rng_(rng) {
    std::vector<bool> allowed(kRelationCount, false);
    for (Relation r : options.relations) allowed[static_cast<std::size_t>(r)] = true;
    moves_.resize(tree.size());
    for (const Person& p : tree.persons()) {
      for (const Person& q : tree.persons()) {
        if (auto r = relation_between(tree, q.id, p.id); r && allowed[static_cast<std::size_t>(*r)])
          moves_[p.id].push_back({*r, q.id});
      }
      if (p.spouse) {
        Relation r = tree.person(*p.spouse).gender == Gender::female ? Relation::wife : Relation::husband;
        if (allowed[static_cast<std::size_t>(r)]) moves_[p.id].push_back({r, *p.spouse});
      }
    }
  }

  bool run(PersonId anchor) {
    anchor_ = anchor;
    path_.clear();
    used_.clear();
    return extend(anchor, KinState{});
  }

  const std::vector<Fact>& path() const { return path_; }
  bool out_of_budget() const { return budget_ == 0; }

 private:
  bool extend(PersonId current, KinState state) {
    if (static_cast<int>(path_.size()) == hops_) return to_relation(state).has_value();
    if (budget_ == 0) return false;
    --budget_;
    std::vector<Move> options;
    for (const Move& m : moves_[current]) {
      if (m.target == anchor_) continue;
      if (used_.count(key(current, m.target))) continue;
      if (compose_step(state, m.relation).type == KinType::undefined) continue;
      options.push_back(m);
    }
    shuffle(options, rng_);
    for (const Move& m : options) {
      path_.push_back({current, m.relation, m.target});
      used_.insert(key(current, m.target));
      if (extend(m.target, compose_step(state, m.relation))) return true;
      used_.erase(key(current, m.target));
      path_.pop_back();
      if (budget_ == 0) return false;
    }
    return false;
  }

  static std::uint64_t key(PersonId a, PersonId b) { return (std::uint64_t{a} << 32) | b; }

  const FamilyTree& tree_;
  int hops_;
  std::size_t budget_;
  Rng& rng_;
  std::vector<std::vector<Move>> moves_;
  PersonId anchor_ = 0;
  std::vector<Fact> path_;
  std::unordered_set<std::uint64_t> used_;
};

}  // namespace

Story sample_story(const FamilyTree& tree, int hops, std::uint64_t seed, const StoryOptions& options) {
  if (hops < kMinHops || hops > kMaxHops)
    throw ConfigError("hop count must be in [2, 15], got " + std::to_string(hops));
  if (tree.size() == 0) throw SamplingExhausted("empty tree");
  Rng rng(seed);
  ChainSearch search(tree, hops, options, rng);
  std::vector<PersonId> anchors;
  for (const Person& p : tree.persons()) anchors.push_back(p.id);
  shuffle(anchors, rng);
  for (PersonId anchor : anchors) {
    if (search.run(anchor)) {
      Story story;
      story.facts = search.path();
      story.person_b = anchor;
      story.person_a = story.facts.back().object;
      story.gold = compose_chain(story.relations());
      return story;
    }
    if (search.out_of_budget()) break;
  }
  throw SamplingExhausted("no " + std::to_string(hops) + "-hop chain found in tree of " +
                          std::to_string(tree.size()) + " persons");
}

Story mutate_story(const Story& story, std::size_t position, Relation new_relation) {
  if (position >= story.facts.size())
    throw IndexError("mutation position " + std::to_string(position) + " outside story of " +
                     std::to_string(story.facts.size()) + " facts");
  Relation old = story.facts[position].relation;
  if (gender_of(old) != gender_of(new_relation))
    throw MutationError("cannot replace " + std::string(to_string(old)) + " with " +
                        std::string(to_string(new_relation)) + ": gender differs");
  Story out = story;
  out.facts[position].relation = new_relation;
  out.gold = compose_chain(out.relations());
  out.provenance = "mutated:" + std::to_string(position) + ":" + std::string(to_string(old)) + "->" +
                   std::string(to_string(new_relation));
  return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

std::string RenderedPrompt::name_of(PersonId id) const {
  for (auto [person, index] : naming)
    if (person == id) return "Person" + std::to_string(index);
  throw LookupError("person " + std::to_string(id) + " is not named in this prompt");
}

RenderedPrompt render_prompt(const Story& story, std::uint64_t template_seed) {
  RenderedPrompt out;
  std::vector<PersonId> order;
  for (const Fact& f : story.facts) {
    append_unique(order, f.subject);
    append_unique(order, f.object);
  }
  append_unique(order, story.person_a);
  append_unique(order, story.person_b);

  Rng rng(template_seed);
  std::vector<int> indices(order.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i + 1);
  shuffle(indices, rng);
  for (std::size_t i = 0; i < order.size(); ++i) out.naming.emplace_back(order[i], indices[i]);
  for (std::size_t i = 0; i < story.facts.size(); ++i)
    out.forms.push_back(static_cast<SentenceForm>(uniform_index(rng, 3)));

  std::string& text = out.text;
  auto relation_word = [&](Relation r) {
    std::size_t begin = text.size();
    text += to_string(r);
    out.relation_spans.push_back({begin, text.size()});
  };
  for (std::size_t i = 0; i < story.facts.size(); ++i) {
    const Fact& f = story.facts[i];
    if (i > 0) text += ' ';
    const std::string subj = out.name_of(f.subject);
    const std::string obj = out.name_of(f.object);
    const Relation r = f.relation;
    const bool vowel = r == Relation::uncle || r == Relation::aunt;
    const bool spousal = r == Relation::wife || r == Relation::husband;
    switch (out.forms[i]) {
      case SentenceForm::possessive:
        text += obj + " is " + subj + "'s ";
        relation_word(r);
        text += ".";
        break;
      case SentenceForm::have:
        text += subj + (vowel ? " has an " : " has a ");
        relation_word(r);
        text += " called " + obj + ".";
        break;
      case SentenceForm::copula:
        text += obj + (spousal ? " is the " : vowel ? " is an " : " is a ");
        relation_word(r);
        text += " of " + subj + ".";
        break;
    }
  }
  if (!text.empty()) text += ' ';
  text += kQueryPrefix;
  text += out.name_of(story.person_a) + " is " + out.name_of(story.person_b) + "'s";
  out.query_final_char = text.size();
  return out;
}

std::vector<Relation> signature(const Story& story) { return story.relations(); }

DatasetSplit split_dataset(std::span<const Story> stories, double test_fraction, std::uint64_t seed) {
  if (stories.empty()) throw SplitError("no stories to split");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw SplitError("test_fraction must be in (0, 1)");
  std::map<std::vector<Relation>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < stories.size(); ++i) groups[signature(stories[i])].push_back(i);
  if (groups.size() < 2) throw SplitError("need at least two distinct relation signatures");

  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [sig, members] : groups) order.push_back(&members);
  Rng rng(seed);
  shuffle(order, rng);

  const double target = test_fraction * static_cast<double>(stories.size());
  DatasetSplit split;
  std::size_t g = 0;
  for (; g + 1 < order.size(); ++g) {
    if (!split.test.empty() && static_cast<double>(split.test.size()) >= target) break;
    split.test.insert(split.test.end(), order[g]->begin(), order[g]->end());
  }
  for (; g < order.size(); ++g) split.train.insert(split.train.end(), order[g]->begin(), order[g]->end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

}  // namespace kindepth
