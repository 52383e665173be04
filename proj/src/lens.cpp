#include "kindepth/lens.hpp"

#include <algorithm>
#include <cmath>

#include "kindepth/error.hpp"

namespace kindepth {

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

TokenId argmax(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

TokenId argmax_among(std::span<const float> logits, std::span<const TokenId> candidates) {
  if (candidates.empty()) throw std::invalid_argument("argmax over an empty candidate set");
  TokenId best = -1;
  for (TokenId id : candidates) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits.size())
      throw IndexError("candidate id " + std::to_string(id) + " outside the logit vector");
    if (best < 0 || logits[id] > logits[best] || (logits[id] == logits[best] && id < best)) best = id;
  }
  return best;
}

std::vector<double> lens_distribution(const Model& model, const ResidualTrace& trace, int layer) {
  if (layer < 0 || layer > trace.n_layers)
    throw IndexError("lens layer " + std::to_string(layer) + " outside 0.." + std::to_string(trace.n_layers));
  const std::vector<float> logits = readout(model, trace.h(layer, trace.last()));
  return softmax(logits);
}

LensLayer lens_metrics(std::span<const float> logits, TokenId gold, std::span<const TokenId> family, int layer) {
  if (std::find(family.begin(), family.end(), gold) == family.end())
    throw LookupError("gold token " + std::to_string(gold) + " is not in the answer set");
  const std::vector<double> p = softmax(logits);
  LensLayer m;
  m.layer = layer;
  for (TokenId id : family) m.p_fam += p.at(static_cast<std::size_t>(id));
  m.p_gold = p[static_cast<std::size_t>(gold)];
  for (double v : p)
    if (v > 0.0) m.entropy -= v * std::log(v);
  m.top_token = argmax(logits);
  m.top_family_token = argmax_among(logits, family);
  m.is_correct = m.top_token == gold;
  m.is_constrained_correct = m.top_family_token == gold;
  return m;
}

std::vector<LensLayer> lens_profile(const Model& model, const ResidualTrace& trace, TokenId gold,
                                    std::span<const TokenId> family) {
  std::vector<LensLayer> out;
  for (int l = 0; l <= trace.n_layers; ++l) {
    const std::vector<float> logits = l == trace.n_layers && !trace.final_logits.empty()
                                          ? trace.final_logits
                                          : readout(model, trace.h(l, trace.last()));
    out.push_back(lens_metrics(logits, gold, family, l));
  }
  return out;
}

namespace {

ResidualLayer residual_at(const ResidualTrace& trace, int layer, int token) {
  auto prev = trace.h(layer - 1, token);
  std::vector<float> diff;
  std::span<const float> delta;
  if (trace.has_deltas()) {
    delta = trace.delta(layer, token);
  } else {
    auto next = trace.h(layer, token);
    diff.resize(prev.size());
    for (std::size_t i = 0; i < prev.size(); ++i) diff[i] = next[i] - prev[i];
    delta = diff;
  }
  double dd = 0.0, hh = 0.0, dh = 0.0;
  for (std::size_t i = 0; i < prev.size(); ++i) {
    dd += static_cast<double>(delta[i]) * delta[i];
    hh += static_cast<double>(prev[i]) * prev[i];
    dh += static_cast<double>(delta[i]) * prev[i];
  }
  ResidualLayer r;
  r.layer = layer;
  const double nd = std::sqrt(dd), nh = std::sqrt(hh);
  r.ratio = nh > 0.0 ? nd / nh : (nd > 0.0 ? INFINITY : 0.0);
  r.cossim = nd > 0.0 && nh > 0.0 ? std::clamp(dh / (nd * nh), -1.0, 1.0) : 0.0;
  return r;
}

}  // namespace

std::vector<ResidualLayer> residual_metrics(const ResidualTrace& trace, ResidualMode mode) {
  if (trace.hidden.empty()) throw CapabilityError("trace holds no hidden states");
  std::vector<ResidualLayer> out;
  for (int l = 1; l <= trace.n_layers; ++l) {
    if (mode == ResidualMode::final_token) {
      out.push_back(residual_at(trace, l, trace.last()));
      continue;
    }
    ResidualLayer mean;
    mean.layer = l;
    for (int t = 0; t < trace.n_tokens; ++t) {
      const ResidualLayer r = residual_at(trace, l, t);
      mean.ratio += r.ratio;
      mean.cossim += r.cossim;
    }
    mean.ratio /= trace.n_tokens;
    mean.cossim /= trace.n_tokens;
    out.push_back(mean);
  }
  return out;
}

AttentionToToken attention_to_token(const ResidualTrace& trace, int key) {
  if (!trace.has_attention()) throw CapabilityError("attention was not captured for this trace");
  if (key < 0 || key >= trace.last())
    throw IndexError("key token " + std::to_string(key) + " must precede the final token " +
                     std::to_string(trace.last()));
  AttentionToToken out;
  out.key = key;
  for (int l = 1; l <= trace.n_layers; ++l) {
    std::vector<double> row;
    for (int q = key; q < trace.n_tokens; ++q) {
      double sum = 0.0;
      for (int h = 0; h < trace.n_heads; ++h) sum += trace.attention_weight(l, h, q, key);
      row.push_back(sum / trace.n_heads);
    }
    out.mass.push_back(std::move(row));
  }
  return out;
}

}  // namespace kindepth
