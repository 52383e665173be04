#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace kindepth {

enum class Gender : std::uint8_t { female, male };

enum class Relation : std::uint8_t {
  mother,
  father,
  grandmother,
  grandfather,
  son,
  daughter,
  grandson,
  granddaughter,
  brother,
  sister,
  uncle,
  aunt,
  nephew,
  niece,
  wife,
  husband,
};

inline constexpr std::size_t kRelationCount = 16;

inline constexpr std::array<Relation, kRelationCount> kAllRelations = {
    Relation::mother,   Relation::father,        Relation::grandmother, Relation::grandfather,
    Relation::son,      Relation::daughter,      Relation::grandson,    Relation::granddaughter,
    Relation::brother,  Relation::sister,        Relation::uncle,       Relation::aunt,
    Relation::nephew,   Relation::niece,         Relation::wife,        Relation::husband};

/// The answer set: every relation a story may ask for (spousal relations excluded).
inline constexpr std::array<Relation, 14> kAnswerSet = {
    Relation::mother,  Relation::father,   Relation::grandmother, Relation::grandfather,
    Relation::son,     Relation::daughter, Relation::grandson,    Relation::granddaughter,
    Relation::brother, Relation::sister,   Relation::uncle,       Relation::aunt,
    Relation::nephew,  Relation::niece};

/// Relations used as story facts by default.
inline constexpr std::array<Relation, 8> kBasicRelations = {
    Relation::mother, Relation::father,  Relation::son,  Relation::daughter,
    Relation::brother, Relation::sister, Relation::wife, Relation::husband};

inline constexpr std::array<Relation, 2> kSiblingRelations = {Relation::brother, Relation::sister};

Gender gender_of(Relation r) noexcept;
/// mother <-> father, son <-> daughter, ..., wife <-> husband.
Relation gender_counterpart(Relation r) noexcept;
bool in_answer_set(Relation r) noexcept;
std::string_view to_string(Relation r) noexcept;
std::optional<Relation> parse_relation(std::string_view name) noexcept;
std::string_view to_string(Gender g) noexcept;

// ---------------------------------------------------------------------------
// Composition algebra
// ---------------------------------------------------------------------------

enum class KinType : std::uint8_t {
  self,
  spouse,
  parent,
  grandparent,
  child,
  grandchild,
  sibling,
  parent_sibling,
  sibling_child,
  undefined,
};

std::string_view to_string(KinType k) noexcept;

/// Relation of the current chain endpoint relative to the chain's anchor.
struct KinState {
  KinType type = KinType::self;
  Gender gender = Gender::female;

  friend bool operator==(const KinState&, const KinState&) = default;
};

/// One composition step: the endpoint moves to its `r`.
///
/// The table only keeps transitions whose result is the same in every family
/// tree where no walk step lands back on the anchor; anything ambiguous
/// (in-laws, cousins, great-* relations, child-then-parent) becomes undefined,
/// and undefined absorbs every later step. Spousal relations are legal only as
/// the first step.
KinState compose_step(KinState state, Relation r) noexcept;

/// The answer-set relation named by a state, if any.
std::optional<Relation> to_relation(KinState state) noexcept;

/// Fold compose_step over `chain` starting from self. The chain must be non-empty.
std::optional<Relation> compose_chain(std::span<const Relation> chain);

// ---------------------------------------------------------------------------
// Family trees
// ---------------------------------------------------------------------------

using PersonId = std::uint32_t;

struct Person {
  PersonId id = 0;
  Gender gender = Gender::female;
  int generation = 0;  // 0 = oldest
  std::optional<PersonId> mother;
  std::optional<PersonId> father;
  std::optional<PersonId> spouse;
  std::vector<PersonId> children;
};

struct TreeConfig {
  int max_siblings = 4;
  std::uint64_t seed = 0;
};

/// Three-generation genealogy. Every child has exactly two parents who are
/// spouses of each other; each person has at most one spouse.
class FamilyTree {
 public:
  FamilyTree() = default;
  explicit FamilyTree(std::vector<Person> persons);

  std::size_t size() const noexcept { return persons_.size(); }
  const std::vector<Person>& persons() const noexcept { return persons_; }
  /// Throws LookupError for unknown ids.
  const Person& person(PersonId id) const;
  bool contains(PersonId id) const noexcept { return id < persons_.size(); }

  std::vector<PersonId> parents(PersonId id) const;
  std::vector<PersonId> siblings(PersonId id) const;
  std::vector<PersonId> grandparents(PersonId id) const;
  std::vector<PersonId> grandchildren(PersonId id) const;
  std::vector<PersonId> parent_siblings(PersonId id) const;
  std::vector<PersonId> sibling_children(PersonId id) const;

  /// Children grouped by parent couple; each group is one sibling set.
  std::vector<std::vector<PersonId>> sibling_groups() const;
  std::size_t largest_sibling_group() const;

  /// Throws FormatError when structural invariants are violated.
  void validate() const;

  friend bool operator==(const FamilyTree&, const FamilyTree&);

 private:
  std::vector<Person> persons_;
};

bool operator==(const Person& a, const Person& b);

/// Deterministic in (config). Throws ConfigError unless 1 <= max_siblings <= 6.
FamilyTree build_tree(const TreeConfig& config);

/// Relation of `x` relative to `y` ("x is y's ..."), read directly from the
/// tree's edges. Undefined (nullopt) for x == y, spouses, and anything outside
/// the answer set. Throws LookupError for unknown ids.
std::optional<Relation> relation_between(const FamilyTree& tree, PersonId x, PersonId y);

// ---------------------------------------------------------------------------
// Stories
// ---------------------------------------------------------------------------

/// `object` is `subject`'s `relation`.
struct Fact {
  PersonId subject = 0;
  Relation relation = Relation::brother;
  PersonId object = 0;

  friend bool operator==(const Fact&, const Fact&) = default;
};

struct Story {
  std::vector<Fact> facts;
  PersonId person_a = 0;  // chain endpoint; the query asks for a's relation to b
  PersonId person_b = 0;  // anchor
  std::optional<Relation> gold;
  std::string provenance = "sampled";

  std::size_t hops() const noexcept { return facts.size(); }
  std::vector<Relation> relations() const;

  friend bool operator==(const Story&, const Story&) = default;
};

inline constexpr int kMinHops = 2;
inline constexpr int kMaxHops = 15;

struct StoryOptions {
  /// Relations allowed as facts. Wife/husband are only ever used first.
  std::vector<Relation> relations{kBasicRelations.begin(), kBasicRelations.end()};
  /// Search budget (visited walk states) before giving up.
  std::size_t max_expansions = 200000;
};

/// Sample a k-hop chain whose composition lies in the answer set. Walks never
/// step back onto the anchor and never reuse an ordered (subject, object) pair.
/// Throws SamplingExhausted when the tree has no such chain.
Story sample_story(const FamilyTree& tree, int hops, std::uint64_t seed,
                   const StoryOptions& options = {});

/// Copy of `story` with the fact at `position` replaced; gold recomputed.
/// Throws IndexError / MutationError (gender mismatch).
Story mutate_story(const Story& story, std::size_t position, Relation new_relation);

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

enum class SentenceForm : std::uint8_t { possessive, have, copula };

struct RenderedPrompt {
  std::string text;
  std::vector<CharSpan> relation_spans;      // one per fact, in fact order
  std::size_t query_final_char = 0;          // one past the final character
  std::vector<std::pair<PersonId, int>> naming;  // person -> PersonN index
  std::vector<SentenceForm> forms;           // template used per fact

  std::string name_of(PersonId id) const;
};

inline constexpr std::string_view kQueryPrefix = "Therefore, ";

RenderedPrompt render_prompt(const Story& story, std::uint64_t template_seed);

/// Ordered relation-kind sequence of a story.
std::vector<Relation> signature(const Story& story);

struct DatasetSplit {
  std::vector<std::size_t> train;  // indices into the input
  std::vector<std::size_t> test;
};

/// Partition by combination signature; no signature lands in both splits.
/// Throws SplitError with fewer than two signatures or a bad fraction.
DatasetSplit split_dataset(std::span<const Story> stories, double test_fraction, std::uint64_t seed);

}  // namespace kindepth
