#pragma once

#include <span>
#include <vector>

#include "kindepth/model.hpp"

namespace kindepth {

/// Softmax in double precision.
std::vector<double> softmax(std::span<const float> logits);

/// Index of the largest value; ties go to the lowest index.
TokenId argmax(std::span<const float> logits);
/// Largest entry among `candidates`; ties go to the lowest id.
TokenId argmax_among(std::span<const float> logits, std::span<const TokenId> candidates);

/// softmax(W_U LN_f(h_{layer,T})). Throws IndexError for layer outside 0..L.
std::vector<double> lens_distribution(const Model& model, const ResidualTrace& trace, int layer);

struct LensLayer {
  int layer = 0;
  double p_fam = 0.0;   // mass on the answer set
  double p_gold = 0.0;
  bool is_correct = false;              // gold is the argmax over the vocabulary
  bool is_constrained_correct = false;  // gold is the argmax over the answer set
  double entropy = 0.0;                 // nats
  TokenId top_token = 0;
  TokenId top_family_token = 0;
};

/// Metrics for one logit vector. Throws LookupError if gold is not in `family`.
LensLayer lens_metrics(std::span<const float> logits, TokenId gold, std::span<const TokenId> family, int layer = 0);

/// One row per layer 0..L at the final token.
std::vector<LensLayer> lens_profile(const Model& model, const ResidualTrace& trace, TokenId gold,
                                    std::span<const TokenId> family);

enum class ResidualMode { final_token, all_tokens_mean };

struct ResidualLayer {
  int layer = 0;          // 1..L
  double ratio = 0.0;     // |delta_l| / |h_{l-1}|
  double cossim = 0.0;    // cos(delta_l, h_{l-1}); 0 when either norm is 0
};

/// Uses captured block outputs when present, otherwise h_l - h_{l-1}.
std::vector<ResidualLayer> residual_metrics(const ResidualTrace& trace, ResidualMode mode);

/// Head-averaged attention from every query q >= key onto `key`.
/// mass[l-1][q - key] for layer l in 1..L. Throws CapabilityError when the
/// trace holds no attention and IndexError when key is not before the last token.
struct AttentionToToken {
  int key = 0;
  std::vector<std::vector<double>> mass;
};
AttentionToToken attention_to_token(const ResidualTrace& trace, int key);

}  // namespace kindepth
