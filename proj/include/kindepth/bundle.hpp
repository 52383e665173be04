#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kindepth/model.hpp"

namespace kindepth {

/// Final-position logits for a list of prompts, in the exchange format shared
/// with the reference tooling:
///   {model, prompts:[...], ids:[[...]], logits:[[...]], checksums:{...}}
struct LogitBundle {
  std::string model;
  std::vector<std::string> prompts;
  std::vector<std::vector<TokenId>> ids;
  std::vector<std::vector<float>> logits;
  std::map<std::string, std::string> checksums;
};

/// Throws FormatError on schema violations or misaligned arrays.
LogitBundle read_bundle(const std::filesystem::path& path);
void write_bundle(const LogitBundle& bundle, const std::filesystem::path& path);
std::string bundle_json(const LogitBundle& bundle);

/// Prompts file: a JSON array of strings, or one prompt per line.
std::vector<std::string> read_prompts(const std::filesystem::path& path);

/// Encodes and runs every prompt.
LogitBundle compute_bundle(const Model& model, const Tokenizer& tokenizer, const std::string& label,
                           const std::vector<std::string>& prompts, std::map<std::string, std::string> checksums = {});
/// Runs pre-tokenized sequences; `prompts` defaults to the ids joined by spaces.
LogitBundle compute_bundle(const Model& model, const std::string& label, const std::vector<std::vector<TokenId>>& ids);

struct PromptComparison {
  std::size_t index = 0;
  bool ids_equal = false;
  bool top1_equal = false;
  double max_abs = 0.0;
};

struct BundleComparison {
  bool pass = false;
  double tolerance = 1e-2;
  double max_abs = 0.0;
  std::vector<PromptComparison> prompts;
};

/// Id sequences must match, logits within `tolerance` max-abs, identical top-1.
/// Throws FormatError when the bundles are not index-aligned.
BundleComparison compare_bundles(const LogitBundle& reference, const LogitBundle& primary, double tolerance = 1e-2);

}  // namespace kindepth
