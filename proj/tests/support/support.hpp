#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kindepth/kinship.hpp"
#include "kindepth/model.hpp"
#include "kindepth/patching.hpp"
#include "kindepth/tokenizer.hpp"

namespace kindepth::testing {

std::filesystem::path data_dir();
std::filesystem::path gpt2_asset_dir();

/// Removed with its contents on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

/// The bundled GPT-2 tokenizer, loaded once.
const Tokenizer& gpt2_tokenizer();

ModelConfig toy_config(int layers = 2, int d_model = 32, int heads = 4, int vocab = 96, int positions = 64);
ModelConfig neox_config(bool parallel, int layers = 2, int d_model = 32, int heads = 4, int vocab = 96);

/// GPT-2 small if its weights are installed, else nullopt.
std::optional<std::filesystem::path> installed_gpt2();
/// Small random model with the GPT-2 vocabulary, for pipeline tests that need
/// the real tokenizer but not real weights. Saved with tokenizer files to `dir`.
void write_random_gpt2_dir(const std::filesystem::path& dir, int layers = 3, int d_model = 48, std::uint64_t seed = 11);

// Graph oracle for the kinship algebra: follows tree edges only.

/// Every q such that q is p's `r` ("q is p's r").
std::vector<PersonId> step(const FamilyTree& tree, PersonId p, Relation r);
/// Endpoints of all walks from `anchor` along `chain` that never revisit the anchor.
std::vector<PersonId> walk_endpoints(const FamilyTree& tree, PersonId anchor, std::span<const Relation> chain);

// Literal patch definition: the target run's states everywhere, h at
// (layer, token) replaced by the source's, then every layer above recomputed
// over the whole sequence with positions left of `token` reset to the target.
std::vector<float> literal_patched_logits(const Model& model, std::span<const TokenId> ids_b,
                                          const ResidualTrace& source, int layer, int token);

/// A flipping pair of random id sequences that differ at one position, built
/// without the tokenizer. Searches seeds until the top-1 prediction changes.
CounterfactualPair toy_flip_pair(const Model& model, int n_tokens, int replaced, std::uint64_t seed);

}  // namespace kindepth::testing
