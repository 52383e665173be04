#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kindepth/tokenizer.hpp"

namespace kindepth {

enum class PositionKind { learned, rotary };
enum class Activation { gelu_tanh, gelu_erf };

struct ModelConfig {
  std::string architecture = "gpt2";  // key of the tensor layout
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int max_positions = 0;
  float ln_eps = 1e-5f;
  PositionKind positions = PositionKind::learned;
  float rotary_pct = 1.0f;
  float rotary_base = 10000.0f;
  Activation activation = Activation::gelu_tanh;
  bool parallel_residual = false;  // x + attn(ln1 x) + mlp(ln2 x)
  bool tied_unembed = true;

  int head_dim() const { return d_model / n_heads; }
  int rotary_dims() const;
  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// Parses a HuggingFace-style config.json (model_type gpt2 or gpt_neox).
ModelConfig parse_model_config(const std::filesystem::path& config_file);
std::string model_config_json(const ModelConfig& config);

/// Maps container tensor names to parameter roles. `{layer}` in a name is
/// replaced by the layer index.
struct TensorLayout {
  enum class Linear { in_out, out_in };       // storage order of 2-d weights
  enum class QkvPacking { concat, per_head };  // [q;k;v] or [q_h;k_h;v_h] per head
  std::string architecture;
  Linear linear = Linear::out_in;
  QkvPacking qkv = QkvPacking::concat;
  std::map<std::string, std::string> tensors;  // role -> name; an absent bias is zero

  static const std::vector<std::string>& roles();
  /// Built-in layout for "gpt2" or "gpt_neox"; LoadError otherwise.
  static TensorLayout builtin(const std::string& architecture);
  /// Reads a layout.json manifest; FormatError on malformed input.
  static TensorLayout from_file(const std::filesystem::path& path);
  std::string to_json() const;
};

/// Parameters, row-major, 2-d weights stored out x in.
struct LayerParams {
  std::vector<float> ln1_g, ln1_b;
  std::vector<float> w_qkv, b_qkv;  // (3d) x d, rows q[0..d) k[d..2d) v[2d..3d)
  std::vector<float> w_o, b_o;      // d x d
  std::vector<float> ln2_g, ln2_b;
  std::vector<float> w_in, b_in;    // d_mlp x d
  std::vector<float> w_out, b_out;  // d x d_mlp
};

struct Model {
  ModelConfig config;
  std::vector<float> embed;      // V x d
  std::vector<float> pos_embed;  // max_positions x d, empty for rotary
  std::vector<LayerParams> layers;
  std::vector<float> lnf_g, lnf_b;
  std::vector<float> unembed;  // V x d, empty when tied to `embed`
  std::vector<float> rotary_cos, rotary_sin;  // max_positions x rotary_dims/2

  const float* unembed_data() const { return unembed.empty() ? embed.data() : unembed.data(); }
  /// Recomputes the rotary tables; call after changing config by hand.
  void prepare();

  /// Weights drawn N(0, scale^2), LayerNorm gains near 1. For tests and demos.
  static Model random(const ModelConfig& config, std::uint64_t seed, float scale = 0.2f);
};

/// Loads weights, converting to f32. Fails atomically: LoadError names the
/// missing or mis-shaped tensor.
Model load_model(const std::filesystem::path& config_file, const std::filesystem::path& weights_file,
                 const std::optional<TensorLayout>& layout = std::nullopt);
/// Loads config.json + model.safetensors (+ layout.json if present) from a directory.
Model load_model_dir(const std::filesystem::path& dir);
/// Writes config.json + model.safetensors using the built-in layout.
void save_model_dir(const Model& model, const std::filesystem::path& dir);
/// Tokenizer files (vocab.json, merges.txt) inside a model directory.
Tokenizer load_tokenizer_dir(const std::filesystem::path& dir);

struct CaptureFlags {
  bool deltas = false;
  bool attention = false;
  bool kv = false;  // per-layer keys/values, needed for patched runs
};

/// Every residual state of one forward pass.
struct ResidualTrace {
  int n_layers = 0;
  int n_tokens = 0;
  int d_model = 0;
  int n_heads = 0;
  std::vector<TokenId> ids;
  std::vector<float> hidden;      // (L+1) x T x d; l = 0 is the embedding output
  std::vector<float> deltas;      // L x T x d; index l-1 holds block l's output
  std::vector<float> attention;   // L x H x T x T, row q over keys k <= q
  std::vector<float> keys;        // L x T x d
  std::vector<float> values;      // L x T x d
  std::vector<float> final_logits;

  int last() const { return n_tokens - 1; }
  std::span<const float> h(int layer, int token) const;
  /// Block output of layer `layer` in 1..L.
  std::span<const float> delta(int layer, int token) const;
  float attention_weight(int layer, int head, int query, int key) const;
  bool has_deltas() const { return !deltas.empty(); }
  bool has_attention() const { return !attention.empty(); }
  bool has_kv() const { return !keys.empty(); }
};

/// Replace h at (layer, token) of the target run by the source run's state.
struct PatchSpec {
  const ResidualTrace* source = nullptr;
  int layer = 0;
  int token = 0;
};

/// Throws LengthError when ids exceed the position table, IndexError for ids
/// outside the vocabulary.
ResidualTrace forward(const Model& model, std::span<const TokenId> ids, CaptureFlags capture = {});

/// Piecewise patched run on ids_b. States left of the patch token or below
/// the patch layer are the target run's; only the suffix is recomputed.
ResidualTrace forward_patched(const Model& model, std::span<const TokenId> ids_b, const PatchSpec& patch);
/// Same, reusing a target trace captured with kv.
ResidualTrace forward_patched(const Model& model, const ResidualTrace& target, const PatchSpec& patch);
/// Final-position logits of the patched run, without materialising the trace.
std::vector<float> patched_logits(const Model& model, const ResidualTrace& target, const PatchSpec& patch);

/// W_U * LN_f(h).
std::vector<float> readout(const Model& model, std::span<const float> hidden);

/// Embedding output for a full sequence, T x d.
std::vector<float> embed_tokens(const Model& model, std::span<const TokenId> ids);
/// Block `layer` (1..L) applied to a full T x d residual, returning the T x d
/// block output. Reference path with no caching.
std::vector<float> apply_block(const Model& model, int layer, std::span<const float> hidden, int n_tokens);

/// Little-endian f32 dump of h_{l,T} for l = 0..L.
void write_final_token_states(const ResidualTrace& trace, const std::filesystem::path& path);

}  // namespace kindepth
