#include <doctest.h>

#include <cmath>
#include <numeric>

#include "kindepth/error.hpp"
#include "kindepth/lens.hpp"
#include "kindepth/model.hpp"
#include "support.hpp"

using namespace kindepth;
using namespace kindepth::testing;
using Ids = std::vector<TokenId>;

namespace {

// One layer, one token: h_0 and delta_1 given, h_1 = h_0 + delta_1.
ResidualTrace two_state_trace(std::vector<float> h0, std::vector<float> delta) {
  ResidualTrace tr;
  tr.n_layers = 1;
  tr.n_tokens = 1;
  tr.d_model = static_cast<int>(h0.size());
  tr.hidden = h0;
  for (std::size_t i = 0; i < h0.size(); ++i) tr.hidden.push_back(h0[i] + delta[i]);
  tr.deltas = delta;
  return tr;
}

}  // namespace

TEST_SUITE("lens") {
  TEST_CASE("three-token example") {
    const std::vector<float> logits = {static_cast<float>(std::log(2.0)), 0.0f, 0.0f};
    const Ids fam = {0};
    const LensLayer m = lens_metrics(logits, 0, fam, 4);
    CHECK(m.layer == 4);
    CHECK(m.p_fam == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(m.p_gold == doctest::Approx(0.5).epsilon(1e-7));
    const double expect = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
    CHECK(m.entropy == doctest::Approx(expect).epsilon(1e-7));
    CHECK(m.entropy == doctest::Approx(1.0397).epsilon(1e-4));
    CHECK(m.is_correct);
    CHECK(m.is_constrained_correct);
    CHECK(m.top_token == 0);
  }

  TEST_CASE("uniform logits") {
    const std::vector<float> logits(50, 3.0f);
    const Ids fam = {7, 3, 9};
    const LensLayer m = lens_metrics(logits, 9, fam);
    CHECK(m.entropy == doctest::Approx(std::log(50.0)).epsilon(1e-9));
    CHECK(m.p_fam == doctest::Approx(3.0 / 50).epsilon(1e-9));
    // ties go to the lowest id
    CHECK(m.top_token == 0);
    CHECK(m.top_family_token == 3);
    CHECK_FALSE(m.is_correct);
    CHECK_FALSE(m.is_constrained_correct);
    CHECK(lens_metrics(logits, 3, fam).is_constrained_correct);
  }

  TEST_CASE("gold outside the answer set") {
    const std::vector<float> logits = {1, 2, 3};
    const Ids fam = {0, 1};
    CHECK_THROWS_AS(lens_metrics(logits, 2, fam), LookupError);
  }

  TEST_CASE("softmax survives extreme logits") {
    const std::vector<float> logits = {1000.0f, -1000.0f, 999.0f};
    const auto p = softmax(logits);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));
    CHECK(p[1] == 0.0);
    CHECK(p[0] / p[2] == doctest::Approx(std::exp(1.0)));
  }

  TEST_CASE("layer L is the model's own distribution") {
    const Model m = Model::random(toy_config(3), 2);
    const ResidualTrace tr = forward(m, Ids{1, 9, 27, 81});
    const auto lens = lens_distribution(m, tr, 3);
    const auto actual = softmax(tr.final_logits);
    double worst = 0;
    for (std::size_t v = 0; v < lens.size(); ++v) worst = std::max(worst, std::fabs(lens[v] - actual[v]));
    CHECK(worst <= 1e-6);
    for (int l = 0; l <= 3; ++l) {
      const auto p = lens_distribution(m, tr, l);
      CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK_THROWS_AS(lens_distribution(m, tr, 4), IndexError);
    CHECK_THROWS_AS(lens_distribution(m, tr, -1), IndexError);
  }

  TEST_CASE("profile invariants") {
    const Model m = Model::random(toy_config(4), 3);
    const ResidualTrace tr = forward(m, Ids{5, 6, 7, 8, 9});
    const Ids fam = {2, 4, 8, 16, 32};
    const auto rows = lens_profile(m, tr, 8, fam);
    REQUIRE(rows.size() == 5);
    for (int l = 0; l <= 4; ++l) {
      const LensLayer& r = rows[l];
      CHECK(r.layer == l);
      CHECK(r.p_fam >= 0.0);
      CHECK(r.p_fam <= 1.0 + 1e-12);
      CHECK(r.p_gold <= r.p_fam + 1e-12);
      CHECK(r.entropy >= 0.0);
      CHECK(r.entropy <= std::log(96.0) + 1e-9);
      if (r.is_correct) CHECK(r.is_constrained_correct);
    }
  }

  TEST_CASE("residual metrics edge cases") {
    auto one = [](const ResidualTrace& tr) { return residual_metrics(tr, ResidualMode::final_token).at(0); };
    const ResidualLayer zero = one(two_state_trace({1, 2}, {0, 0}));
    CHECK(zero.ratio == 0.0);
    CHECK(zero.cossim == 0.0);
    const ResidualLayer same = one(two_state_trace({1, 2}, {1, 2}));
    CHECK(same.ratio == doctest::Approx(1.0));
    CHECK(same.cossim == doctest::Approx(1.0));
    const ResidualLayer ortho = one(two_state_trace({1, 2}, {-4, 2}));
    CHECK(std::fabs(ortho.cossim) <= 1e-6);
    CHECK(ortho.ratio == doctest::Approx(2.0));
    const ResidualLayer from_zero = one(two_state_trace({0, 0}, {1, 1}));
    CHECK(from_zero.cossim == 0.0);
  }

  TEST_CASE("residual metrics agree with and without captured deltas") {
    const Model m = Model::random(toy_config(3), 4);
    const Ids ids = {3, 1, 4, 1, 5, 9};
    const ResidualTrace with = forward(m, ids, {.deltas = true});
    const ResidualTrace without = forward(m, ids);
    for (ResidualMode mode : {ResidualMode::final_token, ResidualMode::all_tokens_mean}) {
      const auto a = residual_metrics(with, mode), b = residual_metrics(without, mode);
      REQUIRE(a.size() == 3);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].layer == static_cast<int>(i) + 1);
        CHECK(a[i].ratio == doctest::Approx(b[i].ratio).epsilon(1e-4));
        CHECK(a[i].cossim == doctest::Approx(b[i].cossim).epsilon(1e-4));
      }
    }
    // the mean over tokens is the plain average of per-token values
    const auto mean = residual_metrics(with, ResidualMode::all_tokens_mean);
    double total = 0;
    for (int t = 0; t < with.n_tokens; ++t) {
      std::vector<float> h0(with.h(0, t).begin(), with.h(0, t).end());
      std::vector<float> d(with.delta(1, t).begin(), with.delta(1, t).end());
      total += residual_metrics(two_state_trace(h0, d), ResidualMode::final_token)[0].ratio;
    }
    CHECK(mean[0].ratio == doctest::Approx(total / with.n_tokens).epsilon(1e-6));
  }

  TEST_CASE("attention rows are distributions") {
    const Model m = Model::random(toy_config(2), 5);
    const ResidualTrace tr = forward(m, Ids{10, 20, 30, 40, 50, 60}, {.attention = true});
    for (int l = 1; l <= 2; ++l)
      for (int h = 0; h < 4; ++h)
        for (int q = 0; q < 6; ++q) {
          double row = 0;
          for (int k = 0; k <= q; ++k) {
            const float w = tr.attention_weight(l, h, q, k);
            CHECK(w >= 0.0f);
            CHECK(w <= 1.0f);
            row += w;
          }
          CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
        }
    const AttentionToToken att = attention_to_token(tr, 2);
    REQUIRE(att.mass.size() == 2);
    CHECK(att.mass[0].size() == 4);
    double diag = 0;
    for (int h = 0; h < 4; ++h) diag += tr.attention_weight(1, h, 2, 2);
    CHECK(att.mass[0][0] == doctest::Approx(diag / 4));
  }

  TEST_CASE("zeroed query and key weights attend uniformly") {
    for (bool neox : {false, true}) {
      Model m = neox ? Model::random(neox_config(true, 2), 6) : Model::random(toy_config(2), 6);
      const int d = m.config.d_model;
      for (LayerParams& p : m.layers) {
        std::fill(p.w_qkv.begin(), p.w_qkv.begin() + 2 * d * d, 0.0f);
        std::fill(p.b_qkv.begin(), p.b_qkv.begin() + 2 * d, 0.0f);
      }
      const ResidualTrace tr = forward(m, Ids{1, 2, 3, 4, 5, 6, 7, 8}, {.attention = true});
      const AttentionToToken att = attention_to_token(tr, 1);
      for (const auto& row : att.mass)
        for (std::size_t i = 0; i < row.size(); ++i) {
          const int q = 1 + static_cast<int>(i);
          CHECK(row[i] == doctest::Approx(1.0 / (q + 1)).epsilon(1e-6));
        }
    }
  }

  TEST_CASE("attention lookups need captured weights and a key before T") {
    const Model m = Model::random(toy_config(2), 7);
    const ResidualTrace plain = forward(m, Ids{1, 2, 3});
    CHECK_THROWS_AS(attention_to_token(plain, 0), CapabilityError);
    const ResidualTrace tr = forward(m, Ids{1, 2, 3}, {.attention = true});
    CHECK_THROWS_AS(attention_to_token(tr, 2), IndexError);
    CHECK_THROWS_AS(attention_to_token(tr, -1), IndexError);
  }
}
