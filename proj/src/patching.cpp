#include "kindepth/patching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kindepth/error.hpp"
#include "kindepth/lens.hpp"
#include "kindepth/parallel.hpp"
#include "kindepth/rng.hpp"

namespace kindepth {

std::string to_string(MutationMode mode) { return mode == MutationMode::siblings_only ? "siblings" : "allrels"; }
std::string to_string(PatchDirection direction) {
  return direction == PatchDirection::forward ? "forward" : "reverse";
}
std::string to_string(GroupBy group_by) { return group_by == GroupBy::hops ? "hops" : "replaced_position"; }

std::vector<Mutation> mutation_candidates(const Story& story, MutationMode mode) {
  std::vector<Mutation> out;
  const std::size_t k = story.facts.size();
  for (std::size_t p = 0; p < k; ++p) {
    const Relation r = story.facts[p].relation;
    const bool male = gender_of(r) == Gender::male;
    const bool sibling = r == Relation::brother || r == Relation::sister;
    if (mode == MutationMode::siblings_only) {
      if (!sibling) continue;
      const bool end = p == 0 || p + 1 == k;
      if (end)
        out.push_back({p, male ? Relation::uncle : Relation::aunt});
      else
        out.push_back({p, male ? Relation::father : Relation::mother});
    } else if (!sibling) {
      out.push_back({p, male ? Relation::brother : Relation::sister});
    }
  }
  return out;
}

namespace {

double logit_diff(std::span<const float> logits, TokenId x, TokenId y) {
  return static_cast<double>(logits[static_cast<std::size_t>(x)]) - static_cast<double>(logits[static_cast<std::size_t>(y)]);
}

}  // namespace

std::optional<CounterfactualPair> make_pair(const Model& model, const Tokenizer& tokenizer, const StoryRecord& a,
                                            const Mutation& mutation, std::string* reason) {
  auto reject = [&](const char* why) -> std::optional<CounterfactualPair> {
    if (reason) *reason = why;
    return std::nullopt;
  };
  CounterfactualPair pair;
  pair.a = a;
  pair.b = make_record(a.id + "~" + std::to_string(mutation.position),
                       mutate_story(a.story, mutation.position, mutation.relation), a.seed);
  pair.replaced_position = mutation.position;
  pair.ids_a = tokenizer.encode(a.prompt.text);
  pair.ids_b = tokenizer.encode(pair.b.prompt.text);
  if (pair.ids_a.size() != pair.ids_b.size()) return reject("misaligned");

  const CharSpan span = a.prompt.relation_spans.at(mutation.position);
  SpanLocation loc;
  try {
    loc = locate_spans(tokenizer, a.prompt.text, std::span<const CharSpan>(&span, 1));
  } catch (const AlignmentError&) {
    return reject("misaligned");
  }
  pair.t_r = static_cast<int>(loc.token_indices.front());
  pair.last = static_cast<int>(loc.final_index);
  for (std::size_t t = 0; t < pair.ids_a.size(); ++t)
    if ((pair.ids_a[t] != pair.ids_b[t]) != (static_cast<int>(t) == pair.t_r)) return reject("misaligned");

  const ResidualTrace ra = forward(model, pair.ids_a);
  const ResidualTrace rb = forward(model, pair.ids_b);
  pair.o = argmax(ra.final_logits);
  pair.c = argmax(rb.final_logits);
  if (pair.o == pair.c) return reject("no_flip");
  pair.ld_a = logit_diff(ra.final_logits, pair.o, pair.c);
  pair.ld_b = logit_diff(rb.final_logits, pair.o, pair.c);
  if (std::fabs(pair.ld_a - pair.ld_b) < kDegenerateDenominator) return reject("degenerate");
  pair.id = pair.b.id;
  return pair;
}

FlipSearch find_flip_pairs(const Model& model, const Tokenizer& tokenizer, std::span<const StoryRecord> stories,
                           MutationMode mode, std::size_t n_target, std::uint64_t seed, int threads) {
  FlipSearch result;
  result.n_target = n_target;

  struct Outcome {
    std::optional<CounterfactualPair> pair;
    std::size_t tried = 0, misaligned = 0, no_flip = 0, degenerate = 0;
  };
  auto examine = [&](const StoryRecord& record) {
    Outcome out;
    std::vector<Mutation> order = mutation_candidates(record.story, mode);
    Rng rng(derive_seed(seed, {record.seed}));
    shuffle(order, rng);
    for (const Mutation& m : order) {
      ++out.tried;
      std::string why;
      out.pair = make_pair(model, tokenizer, record, m, &why);
      if (out.pair) break;
      if (why == "misaligned")
        ++out.misaligned;
      else if (why == "no_flip")
        ++out.no_flip;
      else
        ++out.degenerate;
    }
    return out;
  };

  const auto batch = static_cast<std::size_t>(resolve_threads(threads));
  std::size_t next = 0;
  while (next < stories.size() && result.pairs.size() < n_target) {
    const std::size_t n = std::min(batch, stories.size() - next);
    std::vector<Outcome> outcomes(n);
    parallel_for(n, threads, [&](std::size_t i) { outcomes[i] = examine(stories[next + i]); });
    for (auto& o : outcomes) {
      if (result.pairs.size() >= n_target) break;
      ++result.stories_seen;
      result.candidates_tried += o.tried;
      result.misaligned += o.misaligned;
      result.no_flip += o.no_flip;
      result.degenerate += o.degenerate;
      if (o.pair) result.pairs.push_back(std::move(*o.pair));
    }
    next += n;
  }
  return result;
}

PairRuns prepare_runs(const Model& model, const CounterfactualPair& pair, PatchDirection direction) {
  const bool fwd = direction == PatchDirection::forward;
  PairRuns runs;
  runs.source = forward(model, fwd ? pair.ids_a : pair.ids_b);
  runs.target = forward(model, fwd ? pair.ids_b : pair.ids_a, {.deltas = false, .attention = false, .kv = true});
  const TokenId win = fwd ? pair.o : pair.c;
  const TokenId lose = fwd ? pair.c : pair.o;
  runs.ld_source = logit_diff(runs.source.final_logits, win, lose);
  runs.ld_target = logit_diff(runs.target.final_logits, win, lose);
  return runs;
}

double recovery_from_logits(const CounterfactualPair& pair, PatchDirection direction, const PairRuns& runs,
                            std::span<const float> logits) {
  const bool fwd = direction == PatchDirection::forward;
  const double denom = runs.ld_source - runs.ld_target;
  if (std::fabs(denom) < kDegenerateDenominator) throw PatchError("pair " + pair.id + " has a degenerate denominator");
  const double ld = logit_diff(logits, fwd ? pair.o : pair.c, fwd ? pair.c : pair.o);
  return std::max(0.0, (ld - runs.ld_target) / denom);
}

double recovery_score(const Model& model, const CounterfactualPair& pair, const PairRuns& runs,
                      PatchDirection direction, int layer, int token) {
  const std::vector<float> logits = patched_logits(model, runs.target, {&runs.source, layer, token});
  return recovery_from_logits(pair, direction, runs, logits);
}

double recovery_score(const Model& model, const CounterfactualPair& pair, int layer, int token) {
  const PairRuns runs = prepare_runs(model, pair, PatchDirection::forward);
  return recovery_score(model, pair, runs, PatchDirection::forward, layer, token);
}

std::size_t RecoveryGrid::computed_cells() const {
  std::size_t n = 0;
  for (const auto& row : rec)
    for (double v : row) n += !std::isnan(v);
  return n;
}

std::size_t RecoveryGrid::cells_above_one() const {
  std::size_t n = 0;
  for (const auto& row : rec)
    for (double v : row) n += !std::isnan(v) && v > 1.0;
  return n;
}

RecoveryGrid patch_grid(const Model& model, const CounterfactualPair& pair, GridCells cells,
                        PatchDirection direction, int threads) {
  const PairRuns runs = prepare_runs(model, pair, direction);
  RecoveryGrid g;
  g.pair_id = pair.id;
  g.hops = pair.hops();
  g.replaced_position = pair.replaced_position;
  g.n_layers = model.config.n_layers;
  g.last = pair.last;
  g.t_r = pair.t_r;
  g.direction = direction;
  g.rec.assign(static_cast<std::size_t>(g.n_layers + 1),
               std::vector<double>(static_cast<std::size_t>(g.last + 1), std::numeric_limits<double>::quiet_NaN()));

  std::vector<std::pair<int, int>> todo;
  for (int l = 0; l <= g.n_layers; ++l) {
    if (cells == GridCells::full) {
      for (int t = 0; t <= g.last; ++t) todo.emplace_back(l, t);
    } else {
      todo.emplace_back(l, g.t_r);
      if (g.last != g.t_r) todo.emplace_back(l, g.last);
    }
  }
  parallel_for(todo.size(), threads, [&](std::size_t k) {
    const auto [l, t] = todo[k];
    g.rec[l][t] = recovery_score(model, pair, runs, direction, l, t);
  });
  return g;
}

Aggregation aggregate_recovery(std::span<const RecoveryGrid> grids, GroupBy group_by,
                               std::span<const int> requested_groups) {
  Aggregation out;
  if (grids.empty()) {
    for (int g : requested_groups) out.warnings.push_back("group " + std::to_string(g) + " has no grids; omitted");
    return out;
  }
  const int L = grids.front().n_layers;
  std::map<int, RecoveryCurve> groups;
  for (const RecoveryGrid& g : grids) {
    if (g.n_layers != L) throw PatchError("grids come from models with different layer counts");
    const int key = group_by == GroupBy::hops ? g.hops : static_cast<int>(g.replaced_position);
    RecoveryCurve& c = groups[key];
    if (c.n == 0) {
      c.group = key;
      c.mean_tr.assign(static_cast<std::size_t>(L + 1), 0.0);
      c.mean_T.assign(static_cast<std::size_t>(L + 1), 0.0);
    }
    ++c.n;
    for (int l = 0; l <= L; ++l) {
      c.mean_tr[l] += g.at(l, g.t_r);
      c.mean_T[l] += g.at(l, g.last);
    }
  }
  for (int g : requested_groups)
    if (!groups.count(g)) out.warnings.push_back(to_string(group_by) + " group " + std::to_string(g) + " has no grids; omitted");
  for (auto& [key, c] : groups) {
    for (auto& v : c.mean_tr) v /= static_cast<double>(c.n);
    for (auto& v : c.mean_T) v /= static_cast<double>(c.n);
    out.curves.push_back(std::move(c));
  }
  return out;
}

std::optional<int> first_layer_below(std::span<const double> curve, double threshold) {
  for (std::size_t l = 0; l < curve.size(); ++l)
    if (curve[l] < threshold) return static_cast<int>(l);
  return std::nullopt;
}

}  // namespace kindepth
