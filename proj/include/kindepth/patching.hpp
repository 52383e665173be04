#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kindepth/dataset.hpp"
#include "kindepth/model.hpp"

namespace kindepth {

enum class MutationMode {
  siblings_only,  // brother/sister -> uncle/aunt at the ends, father/mother in between
  all_relations,  // any non-sibling relation -> brother/sister
};

struct Mutation {
  std::size_t position;
  Relation relation;
};

/// Gender-matched replacements allowed for a story, in fact order.
std::vector<Mutation> mutation_candidates(const Story& story, MutationMode mode);

struct CounterfactualPair {
  std::string id;
  StoryRecord a;  // original
  StoryRecord b;  // mutated
  std::vector<TokenId> ids_a, ids_b;
  std::size_t replaced_position = 0;  // fact index
  int t_r = 0;                        // token index of the replaced relation
  int last = 0;                       // final token index
  TokenId o = 0;                      // top-1 on a
  TokenId c = 0;                      // top-1 on b
  double ld_a = 0.0;                  // logit[o] - logit[c] on a
  double ld_b = 0.0;                  // same on b

  int hops() const { return a.story.hops(); }
};

struct FlipSearch {
  std::vector<CounterfactualPair> pairs;
  std::size_t n_target = 0;
  std::size_t stories_seen = 0;
  std::size_t candidates_tried = 0;
  std::size_t misaligned = 0;   // token sequences differ anywhere but t^r
  std::size_t no_flip = 0;
  std::size_t degenerate = 0;   // |ld_a - ld_b| below threshold

  bool short_of_target() const { return pairs.size() < n_target; }
};

inline constexpr double kDegenerateDenominator = 1e-6;

/// Walks `stories` in order and keeps at most one flipping counterfactual per
/// story until `n_target` pairs are found. Mutation positions are tried in a
/// per-story order derived from `seed`.
FlipSearch find_flip_pairs(const Model& model, const Tokenizer& tokenizer, std::span<const StoryRecord> stories,
                           MutationMode mode, std::size_t n_target, std::uint64_t seed = 0, int threads = 1);

/// Builds one pair or explains why it is unusable (returns nullopt and sets `reason`).
std::optional<CounterfactualPair> make_pair(const Model& model, const Tokenizer& tokenizer, const StoryRecord& a,
                                            const Mutation& mutation, std::string* reason = nullptr);

enum class PatchDirection {
  forward,  // a-run state into the b-run; measures recovery of o
  reverse,  // b-run state into the a-run; measures recovery of c
};

/// Source and target traces for one pair and direction.
struct PairRuns {
  ResidualTrace source;
  ResidualTrace target;  // captured with keys/values
  double ld_source = 0.0;
  double ld_target = 0.0;
};

PairRuns prepare_runs(const Model& model, const CounterfactualPair& pair, PatchDirection direction);

/// max(0, (ld - ld_target) / (ld_source - ld_target)), ld measured as o over c
/// (forward) or c over o (reverse). Values above 1 are kept.
double recovery_from_logits(const CounterfactualPair& pair, PatchDirection direction, const PairRuns& runs,
                            std::span<const float> logits);
double recovery_score(const Model& model, const CounterfactualPair& pair, const PairRuns& runs,
                      PatchDirection direction, int layer, int token);
double recovery_score(const Model& model, const CounterfactualPair& pair, int layer, int token);

enum class GridCells { full, columns };

struct RecoveryGrid {
  std::string pair_id;
  int hops = 0;
  std::size_t replaced_position = 0;
  int n_layers = 0;  // L; rows 0..L
  int last = 0;      // T; columns 0..T
  int t_r = 0;
  PatchDirection direction = PatchDirection::forward;
  std::vector<std::vector<double>> rec;  // [layer][token]; NaN where not computed

  double at(int layer, int token) const { return rec.at(layer).at(token); }
  std::size_t computed_cells() const;
  std::size_t cells_above_one() const;
};

RecoveryGrid patch_grid(const Model& model, const CounterfactualPair& pair, GridCells cells,
                        PatchDirection direction = PatchDirection::forward, int threads = 1);

enum class GroupBy { hops, replaced_position };

struct RecoveryCurve {
  int group = 0;
  std::size_t n = 0;
  std::vector<double> mean_tr;  // per layer, column t^r
  std::vector<double> mean_T;   // per layer, final column
};

struct Aggregation {
  std::vector<RecoveryCurve> curves;  // ascending group
  std::vector<std::string> warnings;
};

/// Per-layer means of the t^r and T columns within each group. Requested
/// groups with no grids are omitted and reported in `warnings`. Throws
/// PatchError when the grids disagree on L.
Aggregation aggregate_recovery(std::span<const RecoveryGrid> grids, GroupBy group_by,
                               std::span<const int> requested_groups = {});

/// First layer whose value falls below `threshold`.
std::optional<int> first_layer_below(std::span<const double> curve, double threshold = 0.5);

std::string to_string(MutationMode mode);
std::string to_string(PatchDirection direction);
std::string to_string(GroupBy group_by);

}  // namespace kindepth
