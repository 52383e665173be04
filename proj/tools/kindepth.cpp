#include <fmt/format.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <json.hpp>

#include "kindepth/bundle.hpp"
#include "kindepth/dataset.hpp"
#include "kindepth/error.hpp"
#include "kindepth/harness.hpp"

namespace fs = std::filesystem;
using namespace kindepth;

namespace {

// Lets --config take a JSON object. Nested objects address subcommands:
// {"seed": 3, "patch": {"mode": "allrels"}}.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    nlohmann::ordered_json j;
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const std::string name = opt->get_lnames().front();
      if (opt->count() > 0) {
        const auto& res = opt->results();
        j[name] = res.size() == 1 ? nlohmann::ordered_json(res.front()) : nlohmann::ordered_json(res);
      } else if (default_also && !opt->get_default_str().empty()) {
        j[name] = opt->get_default_str();
      }
    }
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConfigError(std::string("config is not JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConfigError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    collect(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void collect(const nlohmann::json& obj, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, v] : obj.items()) {
      if (v.is_object()) {
        auto p = parents;
        p.push_back(key);
        collect(v, p, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (v.is_array())
        for (const auto& e : v) item.inputs.push_back(scalar(e));
      else
        item.inputs.push_back(scalar(v));
      items.push_back(std::move(item));
    }
  }
};

std::map<std::string, std::string> model_checksums(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const char* f : {"config.json", "model.safetensors", "vocab.json", "merges.txt"})
    if (fs::exists(dir / f)) out[f] = sha256_file(dir / f);
  return out;
}

MutationMode parse_mode(const std::string& s) {
  return s == "allrels" ? MutationMode::all_relations : MutationMode::siblings_only;
}

GridCells parse_cells(const std::string& s) { return s == "full" ? GridCells::full : GridCells::columns; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kinship multi-hop depth analysis: logit lens and activation patching"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON file with option values");
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate story datasets as JSONL");
  std::string hops = "2..10";
  std::size_t per_hop = 100;
  int max_siblings = 4;
  std::uint64_t seed = 0;
  std::string out;
  bool siblings_only = false;
  gen->add_option("--hops", hops, "Hop range, e.g. 2..10")->capture_default_str();
  gen->add_option("--per-hop", per_hop, "Stories per hop count")->capture_default_str();
  gen->add_option("--max-siblings", max_siblings, "Largest sibling group in sampled trees")->capture_default_str();
  gen->add_option("--seed", seed, "Sampling seed")->capture_default_str();
  gen->add_option("--out", out, "Output JSONL file (- for stdout)")->required();
  gen->add_flag("--siblings-only", siblings_only, "Only sibling relations in the chain's middle");

  // lens
  auto* lens = app.add_subcommand("lens", "Logit lens, residual metrics and attention per story");
  std::string model = "gpt2", data;
  bool attention = false, metrics = false, no_lens = false;
  lens->add_option("--model", model, "Model directory or name under the asset root")->capture_default_str();
  lens->add_option("--data", data, "Stories JSONL")->required()->check(CLI::ExistingFile);
  lens->add_option("--out", out, "Output directory")->required();
  lens->add_flag("--attention", attention, "Also write attention.csv");
  lens->add_flag("--metrics", metrics, "Also write residual_metrics.csv");
  lens->add_flag("--no-lens", no_lens, "Skip lens_profile.csv");

  // patch
  auto* patch = app.add_subcommand("patch", "Counterfactual pairs and recovery grids");
  std::string mode = "siblings", cells = "columns";
  std::size_t n_target = 30;
  bool reverse = true;
  patch->add_option("--model", model, "Model directory or name under the asset root")->capture_default_str();
  patch->add_option("--data", data, "Stories JSONL")->required()->check(CLI::ExistingFile);
  patch->add_option("--mode", mode, "Mutation mode")->check(CLI::IsMember({"siblings", "allrels"}))->capture_default_str();
  patch->add_option("--n", n_target, "Flipping pairs wanted per hop count")->capture_default_str();
  patch->add_option("--cells", cells, "Grid cells to compute")->check(CLI::IsMember({"full", "columns"}))->capture_default_str();
  patch->add_option("--seed", seed, "Mutation order seed")->capture_default_str();
  patch->add_option("--out", out, "Output directory")->required();
  patch->add_flag("--reverse,!--no-reverse", reverse, "Also patch in the reverse direction (default on)");

  // report
  auto* report = app.add_subcommand("report", "Plot data and summary for a finished run");
  std::string run_dir;
  report->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  // run
  auto* run = app.add_subcommand("run", "Full experiment from a JSON config, resumable");
  std::string experiment;
  bool with_report = true;
  run->add_option("config", experiment, "Experiment JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Run directory")->required();
  run->add_flag("!--no-report", with_report, "Skip the report after the run");

  // logits
  auto* logits = app.add_subcommand("logits", "Final-position logits for a prompts file");
  std::string prompts, label;
  logits->add_option("--model", model, "Model directory or name under the asset root")->capture_default_str();
  logits->add_option("--prompts", prompts, "JSON array or one prompt per line")->required()->check(CLI::ExistingFile);
  logits->add_option("--label", label, "Model label stored in the bundle");
  logits->add_option("--out", out, "Output bundle JSON")->required();

  // compare
  auto* compare = app.add_subcommand("compare", "Compare two logit bundles");
  std::string reference, primary;
  double tolerance = 1e-2;
  compare->add_option("reference", reference, "Reference bundle")->required()->check(CLI::ExistingFile);
  compare->add_option("primary", primary, "Bundle under test")->required()->check(CLI::ExistingFile);
  compare->add_option("--tol", tolerance, "Max-abs logit tolerance")->capture_default_str();

  // random-model
  auto* random = app.add_subcommand("random-model", "Random GPT-2-style model with the bundled tokenizer (dry runs)");
  int layers = 4, d_model = 64, heads = 4;
  random->add_option("--layers", layers)->capture_default_str()->check(CLI::PositiveNumber);
  random->add_option("--d-model", d_model)->capture_default_str()->check(CLI::PositiveNumber);
  random->add_option("--heads", heads)->capture_default_str()->check(CLI::PositiveNumber);
  random->add_option("--seed", seed)->capture_default_str();
  random->add_option("--out", out, "Output model directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto [lo, hi] = parse_hop_range(hops);
      if (lo < kMinHops || hi > kMaxHops || lo > hi)
        throw ConfigError(fmt::format("hop range {}..{} outside [{}, {}]", lo, hi, kMinHops, kMaxHops));
      if (hi >= 11 && max_siblings < 6) throw ConfigError("hop counts >= 11 need --max-siblings >= 6");
      std::vector<StoryRecord> all;
      for (int k = lo; k <= hi; ++k) {
        auto s = generate_stories(k, per_hop, {.max_siblings = max_siblings, .seed = seed, .siblings_only = siblings_only});
        all.insert(all.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
      }
      if (out == "-")
        write_jsonl(std::cout, all);
      else
        write_jsonl(out, all);
    } else if (*lens) {
      const fs::path dir = resolve_model_dir(model);
      const Model m = load_model_dir(dir);
      const Tokenizer tok = load_tokenizer_dir(dir);
      for (const auto& p : run_analyses(m, tok, read_jsonl(data),
                                        {.lens = !no_lens, .metrics = metrics, .attention = attention, .threads = threads},
                                        out))
        std::cout << p.string() << '\n';
    } else if (*patch) {
      const fs::path dir = resolve_model_dir(model);
      const Model m = load_model_dir(dir);
      const Tokenizer tok = load_tokenizer_dir(dir);
      const PatchRun r = run_patching(m, tok, read_jsonl(data),
                                      {.mode = parse_mode(mode),
                                       .n_target = n_target,
                                       .cells = parse_cells(cells),
                                       .reverse = reverse,
                                       .seed = seed,
                                       .threads = threads},
                                      out);
      for (const auto& p : r.outputs) std::cout << p.string() << '\n';
      for (const auto& s : r.shortfalls) std::cout << fmt::format("shortfall hops {}: {}/{}\n", s.hops, s.found, s.target);
    } else if (*report) {
      for (const auto& line : emit_report(run_dir).lines) std::cout << line << '\n';
    } else if (*run) {
      ExperimentConfig cfg = ExperimentConfig::from_file(experiment);
      if (app.get_option("--threads")->count()) cfg.threads = threads;
      const RunManifest m = run_experiment(cfg, out);
      std::cout << fmt::format("run complete: {} ({})\n", m.dir.string(), m.config_hash);
      if (with_report)
        for (const auto& line : emit_report(out).lines) std::cout << line << '\n';
    } else if (*logits) {
      const fs::path dir = resolve_model_dir(model);
      const Model m = load_model_dir(dir);
      const Tokenizer tok = load_tokenizer_dir(dir);
      const std::string name = label.empty() ? fs::weakly_canonical(dir).filename().string() : label;
      write_bundle(compute_bundle(m, tok, name, read_prompts(prompts), model_checksums(dir)), out);
    } else if (*random) {
      ModelConfig c;
      c.architecture = "gpt2";
      c.n_layers = layers;
      c.d_model = d_model;
      c.n_heads = heads;
      c.d_mlp = 4 * d_model;
      c.vocab_size = 50257;
      c.max_positions = 1024;
      c.validate();
      save_model_dir(Model::random(c, seed), out);
      for (const char* f : {"vocab.json", "merges.txt"}) fs::copy_file(asset_root() / "gpt2" / f, fs::path(out) / f, fs::copy_options::overwrite_existing);
    } else if (*compare) {
      const BundleComparison c = compare_bundles(read_bundle(reference), read_bundle(primary), tolerance);
      for (const auto& p : c.prompts)
        std::cout << fmt::format("prompt {}: ids {} top1 {} max_abs {:.3g}\n", p.index, p.ids_equal ? "equal" : "DIFFER",
                                 p.top1_equal ? "equal" : "DIFFER", p.max_abs);
      std::cout << fmt::format("{}: max_abs {:.3g} (tol {:.3g})\n", c.pass ? "PASS" : "FAIL", c.max_abs, c.tolerance);
      return c.pass ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
