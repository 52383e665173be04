#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "kindepth/error.hpp"
#include "kindepth/harness.hpp"
#include "support.hpp"

using namespace kindepth;
using namespace kindepth::testing;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> lines_of(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

ExperimentConfig lens_config(const fs::path& model) {
  ExperimentConfig c;
  c.model = model.string();
  c.hop_min = 2;
  c.hop_max = 3;
  c.per_hop = 5;
  c.seed = 17;
  c.threads = 1;
  return c;
}

// One random GPT-2-vocabulary model shared by the run tests.
const fs::path& shared_model() {
  static TempDir dir;
  static const bool made = (write_random_gpt2_dir(dir / "tiny", 2, 32, 9), true);
  (void)made;
  static const fs::path path = dir / "tiny";
  return path;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("hop ranges") {
    CHECK(parse_hop_range("2..10") == std::pair{2, 10});
    CHECK(parse_hop_range("3-5") == std::pair{3, 5});
    CHECK(parse_hop_range("7") == std::pair{7, 7});
    CHECK_THROWS_AS(parse_hop_range("x"), ConfigError);
    CHECK_THROWS_AS(parse_hop_range("2..q"), ConfigError);
  }

  TEST_CASE("config validation") {
    ExperimentConfig c;
    CHECK_NOTHROW(c.validate());
    auto bad = [](auto edit) {
      ExperimentConfig x;
      edit(x);
      CHECK_THROWS_AS(x.validate(), ConfigError);
    };
    bad([](ExperimentConfig& x) { x.hop_min = 1; });
    bad([](ExperimentConfig& x) { x.hop_max = 16; });
    bad([](ExperimentConfig& x) { x.hop_min = 5, x.hop_max = 4; });
    bad([](ExperimentConfig& x) { x.hop_max = 11; });
    bad([](ExperimentConfig& x) { x.per_hop = 0; });
    bad([](ExperimentConfig& x) { x.lens = false; });
    bad([](ExperimentConfig& x) { x.patch = true, x.patch_hops = {}; });
    bad([](ExperimentConfig& x) { x.patch = true, x.n_target = 0; });
    bad([](ExperimentConfig& x) { x.threads = -1; });
    ExperimentConfig ext;
    ext.hop_max = 15;
    ext.max_siblings = 6;
    CHECK_NOTHROW(ext.validate());
  }

  TEST_CASE("config JSON parsing") {
    const ExperimentConfig c = ExperimentConfig::from_json(
        R"({"model": "m", "hops": "3..4", "per_hop": 7, "patch": true, "mode": "allrels", "n_target": 12, "cells": "full"})");
    CHECK(c.model == "m");
    CHECK(c.hop_min == 3);
    CHECK(c.hop_max == 4);
    CHECK(c.per_hop == 7);
    CHECK(c.patch_mode == MutationMode::all_relations);
    CHECK(c.n_target == 12);
    CHECK(c.cells == GridCells::full);
    CHECK(ExperimentConfig::from_json(R"({"hops": [4, 6]})").hop_max == 6);
    CHECK(ExperimentConfig::from_json(R"({"hops": 5})").hop_min == 5);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"hopz": 5})"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"mode": "odd", "patch": true})"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("[1]"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json("{"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(R"({"hops": "2..12"})"), ConfigError);
    // canonical JSON round trips
    CHECK(ExperimentConfig::from_json(c.canonical_json()).hash() == c.hash());
  }

  TEST_CASE("every field moves the hash") {
    const ExperimentConfig base;
    std::vector<ExperimentConfig> variants(17, base);
    variants[0].model = "other";
    variants[1].model_label = "x";
    variants[2].hop_min = 3;
    variants[3].hop_max = 9;
    variants[4].per_hop = 99;
    variants[5].max_siblings = 5;
    variants[6].seed = 1;
    variants[7].lens = false, variants[7].metrics = true;
    variants[8].metrics = true;
    variants[9].attention = true;
    variants[10].patch = true;
    variants[11].patch_mode = MutationMode::all_relations;
    variants[12].patch_hops = {3, 5};
    variants[13].n_target = 29;
    variants[14].patch_pool = 50;
    variants[15].cells = GridCells::full;
    variants[16].reverse = false;
    std::set<std::string> hashes = {base.hash()};
    for (const auto& v : variants) hashes.insert(v.hash());
    CHECK(hashes.size() == variants.size() + 1);
    ExperimentConfig t = base;
    t.threads = 4;
    CHECK(t.hash() != base.hash());
  }

  TEST_CASE("sha256") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    TempDir dir;
    write_file(dir / "f", "abc");
    CHECK(sha256_file(dir / "f") == sha256_hex("abc"));
  }

  TEST_CASE("model lookup") {
    CHECK(resolve_model_dir(shared_model().string()) == shared_model());
    CHECK_THROWS_AS(resolve_model_dir("no-such-model-anywhere"), LoadError);
    CHECK_THROWS_AS(resolve_model_dir(""), LoadError);
  }

  TEST_CASE("trace cache round trip and corruption") {
    TempDir dir;
    std::vector<CachedStates> states(2);
    for (int i = 0; i < 2; ++i) {
      states[i].story_id = "h2-" + std::to_string(i);
      states[i].n_tokens = 10 + i;
      states[i].relation_tokens = {3, 7};
      states[i].final_states.assign(3 * 4, 0.5f * i);
      states[i].relation_states.assign(2 * 3 * 4, -1.0f * i);
    }
    write_trace_cache(dir / "t.bin", 2, 4, states);
    const auto back = read_trace_cache(dir / "t.bin", 2, 4);
    REQUIRE(back.size() == 2);
    CHECK(back[1].story_id == "h2-1");
    CHECK(back[1].n_tokens == 11);
    CHECK(back[1].relation_tokens == states[1].relation_tokens);
    CHECK(back[1].final_states == states[1].final_states);
    CHECK(back[1].relation_states == states[1].relation_states);
    CHECK_THROWS_AS(read_trace_cache(dir / "t.bin", 3, 4), FormatError);
    const std::string full = read_file(dir / "t.bin");
    write_file(dir / "cut.bin", full.substr(0, full.size() - 3));
    CHECK_THROWS_AS(read_trace_cache(dir / "cut.bin", 2, 4), FormatError);
    write_file(dir / "junk.bin", "not a cache at all");
    CHECK_THROWS_AS(read_trace_cache(dir / "junk.bin", 2, 4), FormatError);
  }

  TEST_CASE("lens-only run has one row per story and layer") {
    TempDir out;
    const RunManifest m = run_experiment(lens_config(shared_model()), out.path());
    const auto rows = lines_of(out / "lens_profile.csv");
    REQUIRE(!rows.empty());
    CHECK(rows[0] == "story_id,hops,layer,p_fam,is_correct,is_constrained_correct,entropy,top_token");
    CHECK(rows.size() - 1 == 2u * 5 * (2 + 1));
    CHECK(m.n_layers == 2);
    for (const char* s : {"stories", "traces", "lens"}) CHECK(m.complete(s));
    CHECK(m.expected_stages() == std::vector<std::string>{"stories", "traces", "lens"});
    CHECK(m.assets.count("model.safetensors"));

    // cached states give the same profile as a direct forward pass
    const Model model = load_model_dir(shared_model());
    const Tokenizer tok = load_tokenizer_dir(shared_model());
    const auto stories = read_jsonl(out / "stories.jsonl");
    REQUIRE(stories.size() == 10);
    const ResidualTrace tr = forward(model, tok.encode(stories[0].prompt.text));
    const auto fam = answer_token_ids(tok);
    const auto gold = fam[static_cast<std::size_t>(
        std::find(kAnswerSet.begin(), kAnswerSet.end(), *stories[0].story.gold) - kAnswerSet.begin())];
    const auto direct = lens_profile(model, tr, gold, fam);
    for (int l = 0; l <= 2; ++l) {
      const auto cells = split(rows[1 + l]);
      CHECK(cells[0] == stories[0].id);
      CHECK(std::stod(cells[3]) == doctest::Approx(direct[l].p_fam).epsilon(1e-6));
      CHECK(std::stod(cells[6]) == doctest::Approx(direct[l].entropy).epsilon(1e-6));
      CHECK(std::stoi(cells[7]) == direct[l].top_token);
    }
  }

  TEST_CASE("identical configs give identical bytes, and reruns reuse the cache") {
    TempDir a, b;
    ExperimentConfig c2 = lens_config(shared_model());
    c2.metrics = true;
    c2.attention = true;
    c2.threads = 2;
    ExperimentConfig c1 = c2;
    c1.threads = 1;
    run_experiment(c2, a.path());
    run_experiment(c1, b.path());
    for (const char* f : {"stories.jsonl", "traces.bin", "lens_profile.csv", "residual_metrics.csv", "attention.csv"})
      CHECK(read_file(a / f) == read_file(b / f));

    const RunManifest first = RunManifest::load(b.path());
    const RunManifest again = run_experiment(c1, b.path());
    for (const auto& [stage, rec] : first.stages) CHECK(again.stages.at(stage).started == rec.started);

    // a different per_hop regenerates everything
    ExperimentConfig more = c1;
    more.per_hop = 6;
    run_experiment(more, b.path());
    CHECK(lines_of(b / "lens_profile.csv").size() - 1 == 2u * 6 * 3);
  }

  TEST_CASE("patch shortfalls are recorded") {
    TempDir out;
    ExperimentConfig c = lens_config(shared_model());
    c.lens = false;
    c.patch = true;
    c.patch_hops = {3};
    c.patch_pool = 6;
    c.n_target = 30;
    const RunManifest m = run_experiment(c, out.path());
    REQUIRE(m.shortfalls.size() == 1);
    CHECK(m.shortfalls[0].hops == 3);
    CHECK(m.shortfalls[0].target == 30);
    CHECK(m.shortfalls[0].found <= 6);
    const auto j = nlohmann::json::parse(read_file(out / kManifestFile));
    CHECK(j["shortfalls"][0]["summary"] == std::to_string(m.shortfalls[0].found) + "/30");
    CHECK(lines_of(out / "pairs.jsonl").size() == m.shortfalls[0].found);
  }

  TEST_CASE("run_patching writes grids with the documented schema") {
    const Model model = load_model_dir(shared_model());
    const Tokenizer tok = load_tokenizer_dir(shared_model());
    TempDir out;
    const auto stories = generate_stories(3, 30, {.seed = 4, .siblings_only = true});
    const PatchRun run = run_patching(model, tok, stories, {.n_target = 3, .cells = GridCells::full, .reverse = true, .threads = 1},
                                      out.path());
    const auto grids = lines_of(out / "grids.jsonl");
    const auto pairs = lines_of(out / "pairs.jsonl");
    CHECK(grids.size() == 2 * pairs.size());
    for (const auto& line : grids) {
      const auto g = nlohmann::json::parse(line);
      for (const char* key : {"pair_id", "hops", "replaced_position", "L", "T", "t^r", "grid", "direction"})
        CHECK(g.contains(key));
      CHECK(g["grid"].size() == 3);
      CHECK(g["grid"][0].size() == g["T"].get<std::size_t>() + 1);
      CHECK(g["grid"][0][g["t^r"].get<int>()].get<double>() == doctest::Approx(1.0).epsilon(1e-3));
    }
    const auto agg = lines_of(out / "recovery_aggregates_hops.csv");
    CHECK(agg[0] == "group,layer,mean_rec_tr,mean_rec_T,n");
    if (!pairs.empty()) CHECK(agg.size() == 1 + 3);
    CHECK(fs::exists(out / "recovery_aggregates_position_reverse.csv"));
  }

  TEST_CASE("a failing stage is named and marked in the manifest") {
    TempDir broken;
    fs::create_directories(broken / "m");
    for (const char* f : {"config.json", "vocab.json", "merges.txt"}) fs::copy_file(shared_model() / f, broken / "m" / f);
    const std::string weights = read_file(shared_model() / "model.safetensors");
    write_file(broken / "m" / "model.safetensors", weights.substr(0, weights.size() / 2));
    TempDir out;
    try {
      (void)run_experiment(lens_config(broken / "m"), out.path());
      FAIL("expected StageError");
    } catch (const StageError& e) {
      CHECK(e.stage() == "traces");
    }
    const RunManifest m = RunManifest::load(out.path());
    CHECK(m.complete("stories"));
    CHECK(m.stages.at("traces").status == "failed");
    CHECK_FALSE(m.stages.at("traces").error.empty());
    CHECK_THROWS_AS(emit_report(out.path()), ReportError);
  }

  TEST_CASE("report files and schemas") {
    TempDir out;
    ExperimentConfig c = lens_config(shared_model());
    c.metrics = true;
    c.attention = true;
    c.patch = true;
    c.patch_hops = {3};
    c.patch_pool = 20;
    c.n_target = 2;
    c.model_label = "tiny";
    run_experiment(c, out.path());
    const ReportSummary s = emit_report(out.path());
    const fs::path r = out / "report";
    const std::vector<std::pair<const char*, const char*>> schema = {
        {"fig2_family_probs.csv", "model,layer,mean_p_fam"},
        {"fig2_family_probs_by_hop.csv", "model,hops,layer,mean_p_fam,n"},
        {"fig3_accuracy.csv", "model,hops,layer,accuracy,constrained_accuracy,n"},
        {"figB1_entropy.csv", "model,hops,layer,mean_entropy,n"},
        {"figB6_residual.csv", "model,mode,layer,mean_ratio,mean_cossim,n"},
        {"fig4_recovery.csv", "direction,group,layer,position,mean_rec,n"},
        {"fig7_recovery_by_position.csv", "direction,group,layer,position,mean_rec,n"},
    };
    for (auto [file, header] : schema) {
      INFO(file);
      REQUIRE(fs::exists(r / file));
      CHECK(lines_of(r / file)[0] == header);
    }
    const auto f2 = lines_of(r / "fig2_family_probs.csv");
    CHECK(f2.size() == 1 + 3);
    CHECK(split(f2[1])[0] == "tiny");
    CHECK(fs::exists(r / "figB4_attention.csv"));
    CHECK(fs::exists(r / "summary.txt"));
    CHECK(s.family_dip.has_value());
    CHECK_FALSE(s.lines.empty());
    CHECK(read_file(r / "summary.txt").find("family dip") != std::string::npos);
    // fewer than two well-populated groups cannot decide the hop trend
    CHECK_FALSE(s.earlier_with_hops.has_value());

    CHECK_THROWS_AS(emit_report(out / "nowhere"), ReportError);
  }
}
