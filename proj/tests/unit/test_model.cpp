#include <doctest.h>

#include <cmath>
#include <json.hpp>

#include "kindepth/bundle.hpp"
#include "kindepth/error.hpp"
#include "kindepth/lens.hpp"
#include "kindepth/model.hpp"
#include "kindepth/rng.hpp"
#include "kindepth/tensor_file.hpp"
#include "support.hpp"

using namespace kindepth;
using namespace kindepth::testing;
namespace fs = std::filesystem;
using Ids = std::vector<TokenId>;

namespace {

const char* const kToyKinds[] = {"gpt2", "neox_parallel", "neox_sequential"};

Model random_model(const std::string& kind, int layers, std::uint64_t seed) {
  if (kind == "gpt2") return Model::random(toy_config(layers), seed);
  return Model::random(neox_config(kind == "neox_parallel", layers), seed);
}

Ids random_ids(Rng& rng, int n, int vocab) {
  Ids ids;
  for (int i = 0; i < n; ++i) ids.push_back(static_cast<TokenId>(uniform_index(rng, static_cast<std::size_t>(vocab))));
  return ids;
}

double rel_diff(std::span<const float> a, std::span<const double> b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("toy fixtures match logits from the reference implementation") {
    for (const char* kind : kToyKinds) {
      INFO(std::string(kind));
      const fs::path dir = data_dir() / "toy" / kind;
      const Model m = load_model_dir(dir);
      const LogitBundle ref = read_bundle(dir / "reference.json");
      const LogitBundle ours = compute_bundle(m, ref.model, ref.ids);
      const BundleComparison cmp = compare_bundles(ref, ours, 1e-4);
      CHECK(cmp.pass);
      CHECK(cmp.max_abs < 1e-4);
      MESSAGE(std::string(kind), " max-abs logit difference ", cmp.max_abs);
    }
  }

  TEST_CASE("configs parse for both architectures") {
    const ModelConfig g = parse_model_config(data_dir() / "toy/gpt2/config.json");
    CHECK(g.architecture == "gpt2");
    CHECK(g.n_layers == 2);
    CHECK(g.d_model == 32);
    CHECK(g.d_mlp == 80);
    CHECK(g.tied_unembed);
    const ModelConfig p = parse_model_config(data_dir() / "toy/neox_parallel/config.json");
    CHECK(p.architecture == "gpt_neox");
    CHECK(p.positions == PositionKind::rotary);
    CHECK(p.parallel_residual);
    CHECK_FALSE(parse_model_config(data_dir() / "toy/neox_sequential/config.json").parallel_residual);

    TempDir dir;
    write_file(dir / "c.json", model_config_json(p));
    const ModelConfig back = parse_model_config(dir / "c.json");
    CHECK(back.rotary_dims() == p.rotary_dims());
    CHECK(back.activation == p.activation);
    write_file(dir / "bad.json", R"({"model_type": "llama"})");
    CHECK_THROWS(parse_model_config(dir / "bad.json"));
  }

  TEST_CASE("single-token trace shapes") {
    const Model m = Model::random(toy_config(3), 1);
    const ResidualTrace tr = forward(m, Ids{7}, {.deltas = true, .attention = true, .kv = true});
    CHECK(tr.n_layers == 3);
    CHECK(tr.n_tokens == 1);
    CHECK(tr.hidden.size() == 4u * 1 * 32);
    CHECK(tr.deltas.size() == 3u * 1 * 32);
    CHECK(tr.attention.size() == 3u * 4 * 1 * 1);
    CHECK(tr.final_logits.size() == 96);
    CHECK(tr.attention_weight(1, 0, 0, 0) == doctest::Approx(1.0));
  }

  TEST_CASE("telescoping residual sums") {
    Rng rng(3);
    for (const char* kind : kToyKinds) {
      const Model m = random_model(kind, 4, 21);
      const Ids ids = random_ids(rng, 9, 96);
      const ResidualTrace tr = forward(m, ids, {.deltas = true});
      const int L = tr.n_layers;
      for (int t = 0; t < tr.n_tokens; ++t)
        for (int k = 0; k < L; ++k)
          for (int l = k + 1; l <= L; ++l) {
            std::vector<double> sum(tr.h(k, t).begin(), tr.h(k, t).end());
            for (int q = k; q < l; ++q)
              for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += tr.delta(q + 1, t)[i];
            INFO(std::string(kind), " t=", t, " k=", k, " l=", l);
            CHECK(rel_diff(tr.h(l, t), sum) <= 1e-4);
          }
    }
  }

  TEST_CASE("causal locality: later tokens never touch earlier states") {
    Rng rng(4);
    for (const char* kind : kToyKinds) {
      const Model m = random_model(kind, 3, 5);
      Ids a = random_ids(rng, 12, 96);
      for (int i = 0; i < 12; ++i) {
        Ids b = a;
        b[i] = (a[i] + 1 + static_cast<TokenId>(uniform_index(rng, 94))) % 96;
        const ResidualTrace ta = forward(m, a), tb = forward(m, b);
        for (int l = 0; l <= ta.n_layers; ++l)
          for (int j = 0; j < i; ++j) {
            const auto x = ta.h(l, j), y = tb.h(l, j);
            REQUIRE(std::equal(x.begin(), x.end(), y.begin()));
          }
      }
    }
  }

  TEST_CASE("forward is bit-deterministic") {
    const Model m = Model::random(toy_config(3), 8);
    const Ids ids = {1, 5, 9, 33, 2, 2, 80};
    CHECK(forward(m, ids).hidden == forward(m, ids).hidden);
    CHECK(forward(m, ids).final_logits == forward(m, ids).final_logits);
  }

  TEST_CASE("no-op patch reproduces the target run") {
    for (const char* kind : kToyKinds) {
      const Model m = random_model(kind, 3, 2);
      const Ids ids = {4, 8, 15, 16, 23, 42};
      const ResidualTrace b = forward(m, ids);
      for (int l = 0; l <= 3; ++l)
        for (int t = 0; t < 6; ++t) {
          const ResidualTrace p = forward_patched(m, ids, {&b, l, t});
          REQUIRE(p.final_logits == b.final_logits);
          REQUIRE(p.hidden == b.hidden);
        }
    }
  }

  TEST_CASE("corner patches restore the source prediction") {
    for (const char* kind : kToyKinds) {
      const Model m = random_model(kind, 3, 6);
      const Ids a = {10, 11, 12, 13, 14, 15, 16};
      Ids b = a;
      b[3] = 50;
      const ResidualTrace ta = forward(m, a);
      const ResidualTrace first = forward_patched(m, b, {&ta, 0, 3});
      double worst = 0;
      for (std::size_t v = 0; v < ta.final_logits.size(); ++v)
        worst = std::max(worst, std::fabs(double(first.final_logits[v]) - ta.final_logits[v]));
      CHECK(worst <= 1e-4);
      const ResidualTrace last = forward_patched(m, b, {&ta, 3, 6});
      CHECK(last.final_logits == ta.final_logits);
    }
  }

  TEST_CASE("suffix recompute equals the literal patch definition") {
    Rng rng(9);
    for (const char* kind : kToyKinds) {
      const Model m = random_model(kind, 4, 13);
      const Ids a = random_ids(rng, 8, 96);
      Ids b = a;
      b[2] = (a[2] + 7) % 96;
      const ResidualTrace ta = forward(m, a);
      const ResidualTrace tb = forward(m, b, {.kv = true});
      for (int l = 0; l <= 4; ++l)
        for (int t = 0; t < 8; ++t) {
          INFO(std::string(kind), " l=", l, " t=", t);
          REQUIRE(patched_logits(m, tb, {&ta, l, t}) == literal_patched_logits(m, b, ta, l, t));
          REQUIRE(forward_patched(m, b, {&ta, l, t}).final_logits == literal_patched_logits(m, b, ta, l, t));
        }
    }
  }

  TEST_CASE("patch validation") {
    const Model m = Model::random(toy_config(2), 1);
    const ResidualTrace a = forward(m, Ids{1, 2, 3});
    CHECK_THROWS_AS(forward_patched(m, Ids{1, 2}, {&a, 0, 0}), PatchError);
    CHECK_THROWS_AS(forward_patched(m, Ids{1, 2, 4}, {&a, 3, 0}), PatchError);
    CHECK_THROWS_AS(forward_patched(m, Ids{1, 2, 4}, {&a, 0, 3}), PatchError);
    const ResidualTrace no_kv = forward(m, Ids{1, 2, 4});
    CHECK_THROWS_AS(patched_logits(m, no_kv, {&a, 1, 1}), PatchError);
  }

  TEST_CASE("input validation") {
    const Model m = Model::random(toy_config(2, 32, 4, 96, 8), 1);
    CHECK_THROWS_AS(forward(m, Ids(9, 1)), LengthError);
    CHECK_THROWS_AS(forward(m, Ids{96}), IndexError);
    CHECK_THROWS_AS(forward(m, Ids{}), LengthError);
    CHECK_THROWS_AS(readout(m, std::vector<float>(31)), std::invalid_argument);
  }

  TEST_CASE("readout definitions") {
    const Model m = Model::random(toy_config(2), 4);
    const ResidualTrace tr = forward(m, Ids{3, 1, 4, 1, 5});
    CHECK(readout(m, tr.h(2, 4)) == tr.final_logits);

    // LN_f(0) is its bias, so the zero vector reads out W_U b.
    const auto zero = readout(m, std::vector<float>(32, 0.0f));
    for (int v = 0; v < 96; ++v) {
      double expect = 0;
      for (int i = 0; i < 32; ++i) expect += double(m.embed[v * 32 + i]) * m.lnf_b[i];
      CHECK(zero[v] == doctest::Approx(expect).epsilon(1e-5));
    }

    Model unbiased = m;
    std::fill(unbiased.lnf_b.begin(), unbiased.lnf_b.end(), 0.0f);
    std::vector<float> h(tr.h(2, 4).begin(), tr.h(2, 4).end());
    std::vector<float> h2 = h;
    for (float& x : h2) x *= 2;
    CHECK(argmax(readout(unbiased, h)) == argmax(readout(unbiased, h2)));
  }

  TEST_CASE("layout manifests load renamed and transposed tensors") {
    TempDir dir;
    const fs::path src = data_dir() / "toy/gpt2";
    const TensorFile f = TensorFile::open(src / "model.safetensors");
    const TensorLayout builtin = TensorLayout::builtin("gpt2");
    const ModelConfig cfg = parse_model_config(src / "config.json");

    // Same tensors under new names, 2-d weights stored out x in.
    std::vector<NamedTensor> out;
    nlohmann::json tensors;
    auto resolve = [&](std::string name, int layer) {
      for (auto p = name.find("{layer}"); p != std::string::npos; p = name.find("{layer}"))
        name.replace(p, 7, std::to_string(layer));
      for (const char* prefix : {"", "transformer."})
        if (f.contains(prefix + name)) return std::string(prefix) + name;
      return std::string();
    };
    for (const auto& [role, pattern] : builtin.tensors) {
      const bool per_layer = pattern.find("{layer}") != std::string::npos;
      for (int l = 0; l < (per_layer ? cfg.n_layers : 1); ++l) {
        const std::string name = resolve(pattern, l);
        if (name.empty()) continue;
        const TensorInfo& info = f.info(name);
        std::vector<float> data = f.read(name);
        std::vector<std::int64_t> shape = info.shape;
        const bool linear = role.ends_with(".weight") && shape.size() == 2;
        if (linear) {
          std::vector<float> t(data.size());
          const auto r = shape[0], c = shape[1];
          for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) t[j * r + i] = data[i * c + j];
          data = std::move(t);
          std::swap(shape[0], shape[1]);
        }
        const std::string renamed = "blocks/" + role + (per_layer ? "/{layer}" : "");
        std::string concrete = renamed;
        if (per_layer) concrete.replace(concrete.find("{layer}"), 7, std::to_string(l));
        out.push_back({concrete, shape, data});
        tensors[role] = renamed;
      }
    }
    write_tensor_file(dir / "model.safetensors", out);
    fs::copy_file(src / "config.json", dir / "config.json");
    nlohmann::json layout = {{"architecture", "gpt2"}, {"linear", "out_in"}, {"qkv", "concat"}, {"tensors", tensors}};
    write_file(dir / "layout.json", layout.dump());

    const Model a = load_model_dir(src);
    const Model b = load_model_dir(dir.path());
    const Ids ids = {5, 17, 2, 90, 44};
    CHECK(forward(a, ids).final_logits == forward(b, ids).final_logits);

    // Dropping a required tensor names it.
    nlohmann::json broken = layout;
    broken["tensors"]["lnf.weight"] = "nowhere";
    write_file(dir / "layout.json", broken.dump());
    try {
      (void)load_model_dir(dir.path());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("nowhere") != std::string::npos);
    }
    write_file(dir / "layout.json", R"({"architecture": "gpt2", "linear": "sideways", "qkv": "concat", "tensors": {}})");
    CHECK_THROWS_AS(load_model_dir(dir.path()), FormatError);
  }

  TEST_CASE("save and reload round trips a random model") {
    TempDir dir;
    for (const char* kind : kToyKinds) {
      const Model m = random_model(kind, 2, 77);
      const fs::path d = dir / kind;
      save_model_dir(m, d);
      const Model back = load_model_dir(d);
      const Ids ids = {1, 2, 3, 4};
      CHECK(forward(m, ids).final_logits == forward(back, ids).final_logits);
    }
  }

  TEST_CASE("shape mismatches fail the load") {
    TempDir dir;
    const fs::path src = data_dir() / "toy/gpt2";
    fs::copy_file(src / "model.safetensors", dir / "model.safetensors");
    auto cfg = nlohmann::json::parse(read_file(src / "config.json"));
    cfg["n_embd"] = 64;
    write_file(dir / "config.json", cfg.dump());
    CHECK_THROWS_AS(load_model_dir(dir.path()), LoadError);
    fs::remove(dir / "model.safetensors");
    write_file(dir / "config.json", read_file(src / "config.json"));
    CHECK_THROWS_AS(load_model_dir(dir.path()), LoadError);
  }
}
