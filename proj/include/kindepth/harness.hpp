#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kindepth/dataset.hpp"
#include "kindepth/lens.hpp"
#include "kindepth/model.hpp"
#include "kindepth/patching.hpp"

namespace kindepth {

/// Asset root: $KINDEPTH_ASSETS, else the directory configured at build time.
std::filesystem::path asset_root();
/// A path to an existing directory is used as is; anything else is looked up
/// under the asset root. Throws LoadError when neither exists.
std::filesystem::path resolve_model_dir(const std::string& name_or_path);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Parses "a..b", "a-b" or "a" into an inclusive range.
std::pair<int, int> parse_hop_range(const std::string& text);

struct ExperimentConfig {
  std::string model = "gpt2";  // directory or name under the asset root
  std::string model_label;     // defaults to the directory name
  int hop_min = 2;
  int hop_max = 10;
  std::size_t per_hop = 100;
  int max_siblings = 4;
  std::uint64_t seed = 0;

  bool lens = true;
  bool metrics = false;
  bool attention = false;
  bool patch = false;

  MutationMode patch_mode = MutationMode::siblings_only;
  std::vector<int> patch_hops = {3, 5, 7};
  std::size_t n_target = 30;
  std::size_t patch_pool = 100;  // candidate stories per patch hop
  GridCells cells = GridCells::columns;
  bool reverse = true;  // also patch b-run states into the a-run

  int threads = 0;  // 0 = one worker per hardware thread

  /// Throws ConfigError.
  void validate() const;
  /// Canonical JSON of every field; the hash covers all of them.
  std::string canonical_json() const;
  std::string hash() const;

  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig from_file(const std::filesystem::path& path);
};

struct StageRecord {
  std::string status;  // complete | failed | invalid
  std::vector<std::string> outputs;
  std::string started;
  std::string finished;
  std::string error;
};

struct Shortfall {
  int hops = 0;
  std::size_t found = 0;
  std::size_t target = 0;
};

struct RunManifest {
  std::filesystem::path dir;
  std::string config_hash;
  std::string config_json;
  std::string model_label;
  int n_layers = 0;
  std::map<std::string, std::string> assets;  // file name -> sha256
  std::map<std::string, StageRecord> stages;
  std::vector<Shortfall> shortfalls;
  std::string created;
  std::string updated;

  bool complete(const std::string& stage) const;
  /// Stages the config asks for, in execution order.
  std::vector<std::string> expected_stages() const;

  static RunManifest load(const std::filesystem::path& dir);
  void save() const;
};

inline constexpr const char* kManifestFile = "manifest.json";

/// Generates data and runs the configured analyses into `out_dir`. Stages whose
/// outputs are recorded under the same config hash are reused. A failing
/// stage is marked in the manifest and rethrown as StageError.
RunManifest run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

struct AnalysisOptions {
  bool lens = true;
  bool metrics = false;
  bool attention = false;
  int threads = 0;
};

/// Per-story analyses written as lens_profile.csv, residual_metrics.csv and
/// attention.csv. Returns the files written.
std::vector<std::filesystem::path> run_analyses(const Model& model, const Tokenizer& tokenizer,
                                                const std::vector<StoryRecord>& stories, const AnalysisOptions& options,
                                                const std::filesystem::path& out_dir);

struct PatchOptions {
  MutationMode mode = MutationMode::siblings_only;
  std::size_t n_target = 30;
  GridCells cells = GridCells::columns;
  bool reverse = true;  // also patch b-run states into the a-run
  std::uint64_t seed = 0;
  int threads = 0;
};

struct PatchRun {
  std::vector<std::filesystem::path> outputs;
  std::vector<Shortfall> shortfalls;
};

/// Flip search per hop count present in `stories`, recovery grids, and the
/// aggregate curves (pairs.jsonl, grids.jsonl, recovery_*.csv).
PatchRun run_patching(const Model& model, const Tokenizer& tokenizer, const std::vector<StoryRecord>& stories,
                      const PatchOptions& options, const std::filesystem::path& out_dir);

struct ReportSummary {
  std::vector<std::string> lines;  // one per qualitative check
  std::optional<bool> family_dip;  // nullopt when lens data is absent
  std::optional<bool> earlier_with_hops;
};

/// Reads a finished run directory and writes plot data plus summary.txt under
/// report/. Throws ReportError listing incomplete stages.
ReportSummary emit_report(const std::filesystem::path& run_dir);

/// Final-token and relation-token states for each story (trace cache).
struct CachedStates {
  std::string story_id;
  int n_tokens = 0;
  std::vector<int> relation_tokens;       // t^r of each fact
  std::vector<float> final_states;        // (L+1) x d
  std::vector<float> relation_states;     // facts x (L+1) x d
};

void write_trace_cache(const std::filesystem::path& path, int n_layers, int d_model,
                       const std::vector<CachedStates>& states);
/// Throws FormatError on a truncated or mismatched file.
std::vector<CachedStates> read_trace_cache(const std::filesystem::path& path, int n_layers, int d_model);

/// Lens rows from cached final-token states.
std::vector<std::vector<LensLayer>> lens_from_cache(const Model& model, const std::vector<CachedStates>& states,
                                                    const std::vector<StoryRecord>& stories,
                                                    std::span<const TokenId> family, int threads = 0);

}  // namespace kindepth
