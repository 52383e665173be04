#include "kindepth/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>

#include "kernels.hpp"
#include "kindepth/error.hpp"
#include "kindepth/rng.hpp"
#include "kindepth/tensor_file.hpp"

namespace kindepth {

namespace k = kernels;
using json = nlohmann::json;

// ---------------------------------------------------------------- config

int ModelConfig::rotary_dims() const {
  if (positions != PositionKind::rotary) return 0;
  return static_cast<int>(static_cast<float>(head_dim()) * rotary_pct);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model " + std::to_string(d_model) + " not divisible by n_heads");
  if (d_mlp < 1) fail("d_mlp must be positive");
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (max_positions < 1) fail("max_positions must be positive");
  if (!(ln_eps > 0.0f)) fail("ln_eps must be positive");
  if (positions == PositionKind::rotary) {
    if (!(rotary_pct > 0.0f && rotary_pct <= 1.0f)) fail("rotary_pct must be in (0, 1]");
    if (rotary_dims() % 2 != 0 || rotary_dims() == 0) fail("rotary dimension must be even and non-zero");
  }
}

namespace {

template <typename T>
T value_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  return it->get<T>();
}

Activation parse_activation(const std::string& name) {
  if (name == "gelu_new" || name == "gelu_pytorch_tanh" || name == "gelu_fast") return Activation::gelu_tanh;
  if (name == "gelu") return Activation::gelu_erf;
  throw LoadError("unsupported activation '" + name + "'");
}

}  // namespace

ModelConfig parse_model_config(const std::filesystem::path& config_file) {
  std::ifstream in(config_file);
  if (!in) throw LoadError("cannot open model config " + config_file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("model config " + config_file.string() + " is not valid JSON: " + e.what());
  }
  ModelConfig c;
  try {
    const std::string type = value_or<std::string>(j, "model_type", "");
    if (type == "gpt2") {
      c.architecture = "gpt2";
      c.n_layers = j.at("n_layer").get<int>();
      c.d_model = j.at("n_embd").get<int>();
      c.n_heads = j.at("n_head").get<int>();
      c.d_mlp = value_or<int>(j, "n_inner", 4 * c.d_model);
      c.vocab_size = j.at("vocab_size").get<int>();
      c.max_positions = value_or<int>(j, "n_positions", value_or<int>(j, "n_ctx", 1024));
      c.ln_eps = value_or<float>(j, "layer_norm_epsilon", 1e-5f);
      c.positions = PositionKind::learned;
      c.activation = parse_activation(value_or<std::string>(j, "activation_function", "gelu_new"));
      c.parallel_residual = false;
      c.tied_unembed = value_or<bool>(j, "tie_word_embeddings", true);
    } else if (type == "gpt_neox") {
      c.architecture = "gpt_neox";
      c.n_layers = j.at("num_hidden_layers").get<int>();
      c.d_model = j.at("hidden_size").get<int>();
      c.n_heads = j.at("num_attention_heads").get<int>();
      c.d_mlp = j.at("intermediate_size").get<int>();
      c.vocab_size = j.at("vocab_size").get<int>();
      c.max_positions = value_or<int>(j, "max_position_embeddings", 2048);
      c.ln_eps = value_or<float>(j, "layer_norm_eps", 1e-5f);
      c.positions = PositionKind::rotary;
      // newer exports nest the rotary settings under rope_parameters
      const json rope = value_or<json>(j, "rope_parameters", json::object());
      c.rotary_pct = value_or<float>(j, "rotary_pct", value_or<float>(rope, "partial_rotary_factor", 0.25f));
      c.rotary_base = value_or<float>(j, "rotary_emb_base",
                                      value_or<float>(j, "rope_theta", value_or<float>(rope, "rope_theta", 10000.0f)));
      c.activation = parse_activation(value_or<std::string>(j, "hidden_act", "gelu"));
      c.parallel_residual = value_or<bool>(j, "use_parallel_residual", true);
      c.tied_unembed = value_or<bool>(j, "tie_word_embeddings", false);
    } else {
      throw LoadError("unsupported architecture '" + type + "' in " + config_file.string());
    }
  } catch (const json::exception& e) {
    throw LoadError("model config " + config_file.string() + ": " + e.what());
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw LoadError(e.what());
  }
  return c;
}

std::string model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  const char* act = c.activation == Activation::gelu_tanh ? "gelu_new" : "gelu";
  if (c.architecture == "gpt2") {
    j = {{"model_type", "gpt2"},          {"architectures", {"GPT2LMHeadModel"}},
         {"n_layer", c.n_layers},         {"n_embd", c.d_model},
         {"n_head", c.n_heads},           {"n_inner", c.d_mlp},
         {"vocab_size", c.vocab_size},    {"n_positions", c.max_positions},
         {"n_ctx", c.max_positions},      {"layer_norm_epsilon", c.ln_eps},
         {"activation_function", act},    {"tie_word_embeddings", c.tied_unembed},
         {"resid_pdrop", 0.0},            {"embd_pdrop", 0.0},
         {"attn_pdrop", 0.0}};
  } else if (c.architecture == "gpt_neox") {
    j = {{"model_type", "gpt_neox"},
         {"architectures", {"GPTNeoXForCausalLM"}},
         {"num_hidden_layers", c.n_layers},
         {"hidden_size", c.d_model},
         {"num_attention_heads", c.n_heads},
         {"intermediate_size", c.d_mlp},
         {"vocab_size", c.vocab_size},
         {"max_position_embeddings", c.max_positions},
         {"layer_norm_eps", c.ln_eps},
         {"rotary_pct", c.rotary_pct},
         {"rotary_emb_base", c.rotary_base},
         {"hidden_act", act},
         {"use_parallel_residual", c.parallel_residual},
         {"tie_word_embeddings", c.tied_unembed}};
  } else {
    throw ConfigError("no config schema for architecture '" + c.architecture + "'");
  }
  return j.dump(2);
}

// ---------------------------------------------------------------- layout

const std::vector<std::string>& TensorLayout::roles() {
  static const std::vector<std::string> r = {
      "embed",          "pos_embed",     "ln1.weight",     "ln1.bias",     "qkv.weight",   "qkv.bias",
      "attn_out.weight", "attn_out.bias", "ln2.weight",     "ln2.bias",     "mlp_in.weight", "mlp_in.bias",
      "mlp_out.weight", "mlp_out.bias",  "lnf.weight",     "lnf.bias",     "unembed"};
  return r;
}

TensorLayout TensorLayout::builtin(const std::string& architecture) {
  TensorLayout l;
  l.architecture = architecture;
  if (architecture == "gpt2") {
    l.linear = Linear::in_out;
    l.qkv = QkvPacking::concat;
    const std::string h = "h.{layer}.";
    l.tensors = {{"embed", "wte.weight"},
                 {"pos_embed", "wpe.weight"},
                 {"ln1.weight", h + "ln_1.weight"},
                 {"ln1.bias", h + "ln_1.bias"},
                 {"qkv.weight", h + "attn.c_attn.weight"},
                 {"qkv.bias", h + "attn.c_attn.bias"},
                 {"attn_out.weight", h + "attn.c_proj.weight"},
                 {"attn_out.bias", h + "attn.c_proj.bias"},
                 {"ln2.weight", h + "ln_2.weight"},
                 {"ln2.bias", h + "ln_2.bias"},
                 {"mlp_in.weight", h + "mlp.c_fc.weight"},
                 {"mlp_in.bias", h + "mlp.c_fc.bias"},
                 {"mlp_out.weight", h + "mlp.c_proj.weight"},
                 {"mlp_out.bias", h + "mlp.c_proj.bias"},
                 {"lnf.weight", "ln_f.weight"},
                 {"lnf.bias", "ln_f.bias"},
                 {"unembed", "lm_head.weight"}};
  } else if (architecture == "gpt_neox") {
    l.linear = Linear::out_in;
    l.qkv = QkvPacking::per_head;
    const std::string h = "gpt_neox.layers.{layer}.";
    l.tensors = {{"embed", "gpt_neox.embed_in.weight"},
                 {"ln1.weight", h + "input_layernorm.weight"},
                 {"ln1.bias", h + "input_layernorm.bias"},
                 {"qkv.weight", h + "attention.query_key_value.weight"},
                 {"qkv.bias", h + "attention.query_key_value.bias"},
                 {"attn_out.weight", h + "attention.dense.weight"},
                 {"attn_out.bias", h + "attention.dense.bias"},
                 {"ln2.weight", h + "post_attention_layernorm.weight"},
                 {"ln2.bias", h + "post_attention_layernorm.bias"},
                 {"mlp_in.weight", h + "mlp.dense_h_to_4h.weight"},
                 {"mlp_in.bias", h + "mlp.dense_h_to_4h.bias"},
                 {"mlp_out.weight", h + "mlp.dense_4h_to_h.weight"},
                 {"mlp_out.bias", h + "mlp.dense_4h_to_h.bias"},
                 {"lnf.weight", "gpt_neox.final_layer_norm.weight"},
                 {"lnf.bias", "gpt_neox.final_layer_norm.bias"},
                 {"unembed", "embed_out.weight"}};
  } else {
    throw LoadError("unsupported architecture '" + architecture + "'");
  }
  return l;
}

TensorLayout TensorLayout::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open layout " + path.string());
  try {
    const json j = json::parse(in);
    TensorLayout l;
    l.architecture = j.at("architecture").get<std::string>();
    const std::string linear = j.at("linear").get<std::string>();
    if (linear == "in_out")
      l.linear = Linear::in_out;
    else if (linear == "out_in")
      l.linear = Linear::out_in;
    else
      throw FormatError("layout linear must be in_out or out_in, got '" + linear + "'");
    const std::string qkv = j.at("qkv").get<std::string>();
    if (qkv == "concat")
      l.qkv = QkvPacking::concat;
    else if (qkv == "per_head")
      l.qkv = QkvPacking::per_head;
    else
      throw FormatError("layout qkv must be concat or per_head, got '" + qkv + "'");
    const auto& known = roles();
    for (const auto& [role, name] : j.at("tensors").items()) {
      if (std::find(known.begin(), known.end(), role) == known.end())
        throw FormatError("layout names unknown role '" + role + "'");
      if (!name.is_null()) l.tensors[role] = name.get<std::string>();
    }
    return l;
  } catch (const json::exception& e) {
    throw FormatError("layout " + path.string() + ": " + e.what());
  }
}

std::string TensorLayout::to_json() const {
  nlohmann::ordered_json j;
  j["architecture"] = architecture;
  j["linear"] = linear == Linear::in_out ? "in_out" : "out_in";
  j["qkv"] = qkv == QkvPacking::concat ? "concat" : "per_head";
  nlohmann::ordered_json t = nlohmann::ordered_json::object();
  for (const auto& role : roles()) {
    auto it = tensors.find(role);
    if (it != tensors.end()) t[role] = it->second;
  }
  j["tensors"] = std::move(t);
  return j.dump(2);
}

// ---------------------------------------------------------------- model

void Model::prepare() {
  rotary_cos.clear();
  rotary_sin.clear();
  if (config.positions != PositionKind::rotary) return;
  const int rot = config.rotary_dims();
  const int half = rot / 2;
  std::vector<float> inv_freq(half);
  for (int j = 0; j < half; ++j)
    inv_freq[j] = static_cast<float>(1.0 / std::pow(static_cast<double>(config.rotary_base),
                                                    static_cast<double>(2 * j) / static_cast<double>(rot)));
  rotary_cos.resize(static_cast<std::size_t>(config.max_positions) * half);
  rotary_sin.resize(rotary_cos.size());
  for (int p = 0; p < config.max_positions; ++p)
    for (int j = 0; j < half; ++j) {
      const float angle = static_cast<float>(p) * inv_freq[j];
      rotary_cos[static_cast<std::size_t>(p) * half + j] = static_cast<float>(std::cos(static_cast<double>(angle)));
      rotary_sin[static_cast<std::size_t>(p) * half + j] = static_cast<float>(std::sin(static_cast<double>(angle)));
    }
}

namespace {

float normal(Rng& rng) {
  double u1 = uniform_unit(rng);
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  const double u2 = uniform_unit(rng);
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

std::vector<float> draw(Rng& rng, std::size_t n, float scale, float offset = 0.0f) {
  std::vector<float> v(n);
  for (auto& x : v) x = offset + scale * normal(rng);
  return v;
}

}  // namespace

Model Model::random(const ModelConfig& config, std::uint64_t seed, float scale) {
  config.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto m = static_cast<std::size_t>(config.d_mlp);
  const auto V = static_cast<std::size_t>(config.vocab_size);
  Model model;
  model.config = config;
  model.embed = draw(rng, V * d, scale);
  if (config.positions == PositionKind::learned)
    model.pos_embed = draw(rng, static_cast<std::size_t>(config.max_positions) * d, scale);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams p;
    p.ln1_g = draw(rng, d, 0.1f, 1.0f);
    p.ln1_b = draw(rng, d, 0.1f);
    p.w_qkv = draw(rng, 3 * d * d, scale);
    p.b_qkv = draw(rng, 3 * d, 0.1f);
    p.w_o = draw(rng, d * d, scale);
    p.b_o = draw(rng, d, 0.1f);
    p.ln2_g = draw(rng, d, 0.1f, 1.0f);
    p.ln2_b = draw(rng, d, 0.1f);
    p.w_in = draw(rng, m * d, scale);
    p.b_in = draw(rng, m, 0.1f);
    p.w_out = draw(rng, d * m, scale);
    p.b_out = draw(rng, d, 0.1f);
    model.layers.push_back(std::move(p));
  }
  model.lnf_g = draw(rng, d, 0.1f, 1.0f);
  model.lnf_b = draw(rng, d, 0.1f);
  if (!config.tied_unembed) model.unembed = draw(rng, V * d, scale);
  model.prepare();
  return model;
}

// ---------------------------------------------------------------- loading

namespace {

std::string layer_name(std::string name, int layer) {
  const std::string key = "{layer}";
  for (auto pos = name.find(key); pos != std::string::npos; pos = name.find(key))
    name.replace(pos, key.size(), std::to_string(layer));
  return name;
}

std::vector<float> transpose(const std::vector<float>& src, std::size_t rows, std::size_t cols) {
  std::vector<float> out(src.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

class Loader {
 public:
  Loader(const TensorFile& file, const TensorLayout& layout) : file_(file), layout_(layout) {}

  bool has_role(const std::string& role) const { return layout_.tensors.count(role) != 0; }

  std::string resolve(const std::string& role, int layer) const {
    auto it = layout_.tensors.find(role);
    if (it == layout_.tensors.end()) throw LoadError("layout has no tensor for role '" + role + "'");
    const std::string name = layer_name(it->second, layer);
    for (const char* prefix : {"", "transformer."})
      if (file_.contains(prefix + name)) return prefix + name;
    throw LoadError("missing tensor '" + name + "' (role " + role + ")");
  }

  bool present(const std::string& role, int layer) const {
    auto it = layout_.tensors.find(role);
    if (it == layout_.tensors.end()) return false;
    const std::string name = layer_name(it->second, layer);
    return file_.contains(name) || file_.contains("transformer." + name);
  }

  std::vector<float> vec(const std::string& role, int layer, std::int64_t n, bool optional = false) const {
    if (optional && !present(role, layer)) return std::vector<float>(static_cast<std::size_t>(n), 0.0f);
    const std::int64_t shape[] = {n};
    return file_.read(resolve(role, layer), shape);
  }

  // Returns out x in regardless of the stored order.
  std::vector<float> mat(const std::string& role, int layer, std::int64_t out, std::int64_t in,
                         bool transpose_allowed = true) const {
    if (layout_.linear == TensorLayout::Linear::in_out && transpose_allowed) {
      const std::int64_t shape[] = {in, out};
      return transpose(file_.read(resolve(role, layer), shape), static_cast<std::size_t>(in),
                       static_cast<std::size_t>(out));
    }
    const std::int64_t shape[] = {out, in};
    return file_.read(resolve(role, layer), shape);
  }

 private:
  const TensorFile& file_;
  const TensorLayout& layout_;
};

// [q_h; k_h; v_h] per head -> [q; k; v]; `width` is the row length.
std::vector<float> unpack_heads(const std::vector<float>& src, int d, int n_heads, std::size_t width) {
  const int dh = d / n_heads;
  std::vector<float> out(src.size());
  for (int h = 0; h < n_heads; ++h)
    for (int part = 0; part < 3; ++part)
      for (int r = 0; r < dh; ++r) {
        const std::size_t from = static_cast<std::size_t>(h * 3 * dh + part * dh + r) * width;
        const std::size_t to = static_cast<std::size_t>(part * d + h * dh + r) * width;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(from), width, out.begin() + static_cast<std::ptrdiff_t>(to));
      }
  return out;
}

std::vector<float> pack_heads(const std::vector<float>& src, int d, int n_heads, std::size_t width) {
  const int dh = d / n_heads;
  std::vector<float> out(src.size());
  for (int h = 0; h < n_heads; ++h)
    for (int part = 0; part < 3; ++part)
      for (int r = 0; r < dh; ++r) {
        const std::size_t to = static_cast<std::size_t>(h * 3 * dh + part * dh + r) * width;
        const std::size_t from = static_cast<std::size_t>(part * d + h * dh + r) * width;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(from), width, out.begin() + static_cast<std::ptrdiff_t>(to));
      }
  return out;
}

}  // namespace

Model load_model(const std::filesystem::path& config_file, const std::filesystem::path& weights_file,
                 const std::optional<TensorLayout>& layout_override) {
  const ModelConfig c = parse_model_config(config_file);
  const TensorLayout layout = layout_override ? *layout_override : TensorLayout::builtin(c.architecture);
  if (layout.architecture != c.architecture)
    throw LoadError("layout is for '" + layout.architecture + "' but config declares '" + c.architecture + "'");
  const TensorFile file = TensorFile::open(weights_file);
  const Loader ld(file, layout);
  const std::int64_t d = c.d_model, m = c.d_mlp, V = c.vocab_size;

  Model model;
  model.config = c;
  {
    const std::int64_t shape[] = {V, d};
    model.embed = file.read(ld.resolve("embed", 0), shape);
  }
  if (c.positions == PositionKind::learned) {
    const std::int64_t shape[] = {c.max_positions, d};
    model.pos_embed = file.read(ld.resolve("pos_embed", 0), shape);
  }
  for (int l = 0; l < c.n_layers; ++l) {
    LayerParams p;
    p.ln1_g = ld.vec("ln1.weight", l, d);
    p.ln1_b = ld.vec("ln1.bias", l, d, true);
    p.w_qkv = ld.mat("qkv.weight", l, 3 * d, d);
    p.b_qkv = ld.vec("qkv.bias", l, 3 * d, true);
    if (layout.qkv == TensorLayout::QkvPacking::per_head) {
      p.w_qkv = unpack_heads(p.w_qkv, c.d_model, c.n_heads, static_cast<std::size_t>(d));
      p.b_qkv = unpack_heads(p.b_qkv, c.d_model, c.n_heads, 1);
    }
    p.w_o = ld.mat("attn_out.weight", l, d, d);
    p.b_o = ld.vec("attn_out.bias", l, d, true);
    p.ln2_g = ld.vec("ln2.weight", l, d);
    p.ln2_b = ld.vec("ln2.bias", l, d, true);
    p.w_in = ld.mat("mlp_in.weight", l, m, d);
    p.b_in = ld.vec("mlp_in.bias", l, m, true);
    p.w_out = ld.mat("mlp_out.weight", l, d, m);
    p.b_out = ld.vec("mlp_out.bias", l, d, true);
    model.layers.push_back(std::move(p));
  }
  model.lnf_g = ld.vec("lnf.weight", 0, d);
  model.lnf_b = ld.vec("lnf.bias", 0, d, true);
  if (!c.tied_unembed) {
    // the unembedding is stored vocab x d in both layouts
    model.unembed = ld.mat("unembed", 0, V, d, false);
  }
  model.prepare();
  return model;
}

Model load_model_dir(const std::filesystem::path& dir) {
  std::optional<TensorLayout> layout;
  if (std::filesystem::exists(dir / "layout.json")) layout = TensorLayout::from_file(dir / "layout.json");
  return load_model(dir / "config.json", dir / "model.safetensors", layout);
}

void save_model_dir(const Model& model, const std::filesystem::path& dir) {
  const ModelConfig& c = model.config;
  const TensorLayout layout = TensorLayout::builtin(c.architecture);
  const std::int64_t d = c.d_model, m = c.d_mlp, V = c.vocab_size;
  const bool in_out = layout.linear == TensorLayout::Linear::in_out;
  std::vector<NamedTensor> out;
  auto name = [&](const std::string& role, int l) { return layer_name(layout.tensors.at(role), l); };
  auto add_vec = [&](const std::string& role, int l, const std::vector<float>& v) {
    out.push_back({name(role, l), {static_cast<std::int64_t>(v.size())}, v});
  };
  auto add_mat = [&](const std::string& role, int l, const std::vector<float>& w, std::int64_t rows,
                     std::int64_t cols) {
    if (in_out)
      out.push_back({name(role, l), {cols, rows}, transpose(w, static_cast<std::size_t>(rows), static_cast<std::size_t>(cols))});
    else
      out.push_back({name(role, l), {rows, cols}, w});
  };
  out.push_back({name("embed", 0), {V, d}, model.embed});
  if (c.positions == PositionKind::learned) out.push_back({name("pos_embed", 0), {c.max_positions, d}, model.pos_embed});
  for (int l = 0; l < c.n_layers; ++l) {
    const LayerParams& p = model.layers[l];
    add_vec("ln1.weight", l, p.ln1_g);
    add_vec("ln1.bias", l, p.ln1_b);
    if (layout.qkv == TensorLayout::QkvPacking::per_head) {
      add_mat("qkv.weight", l, pack_heads(p.w_qkv, c.d_model, c.n_heads, static_cast<std::size_t>(d)), 3 * d, d);
      add_vec("qkv.bias", l, pack_heads(p.b_qkv, c.d_model, c.n_heads, 1));
    } else {
      add_mat("qkv.weight", l, p.w_qkv, 3 * d, d);
      add_vec("qkv.bias", l, p.b_qkv);
    }
    add_mat("attn_out.weight", l, p.w_o, d, d);
    add_vec("attn_out.bias", l, p.b_o);
    add_vec("ln2.weight", l, p.ln2_g);
    add_vec("ln2.bias", l, p.ln2_b);
    add_mat("mlp_in.weight", l, p.w_in, m, d);
    add_vec("mlp_in.bias", l, p.b_in);
    add_mat("mlp_out.weight", l, p.w_out, d, m);
    add_vec("mlp_out.bias", l, p.b_out);
  }
  add_vec("lnf.weight", 0, model.lnf_g);
  add_vec("lnf.bias", 0, model.lnf_b);
  if (!c.tied_unembed) out.push_back({name("unembed", 0), {V, d}, model.unembed});

  std::filesystem::create_directories(dir);
  write_tensor_file(dir / "model.safetensors", out, {{"format", "pt"}});
  std::ofstream cfg(dir / "config.json");
  cfg << model_config_json(c) << '\n';
  if (!cfg) throw Error("cannot write " + (dir / "config.json").string());
}

Tokenizer load_tokenizer_dir(const std::filesystem::path& dir) {
  return Tokenizer::load(dir / "vocab.json", dir / "merges.txt");
}

// ---------------------------------------------------------------- trace

std::span<const float> ResidualTrace::h(int layer, int token) const {
  if (layer < 0 || layer > n_layers || token < 0 || token >= n_tokens)
    throw IndexError("hidden state (" + std::to_string(layer) + ", " + std::to_string(token) + ") out of range");
  return {hidden.data() + (static_cast<std::size_t>(layer) * n_tokens + token) * d_model,
          static_cast<std::size_t>(d_model)};
}

std::span<const float> ResidualTrace::delta(int layer, int token) const {
  if (!has_deltas()) throw CapabilityError("trace was captured without block outputs");
  if (layer < 1 || layer > n_layers || token < 0 || token >= n_tokens)
    throw IndexError("block output (" + std::to_string(layer) + ", " + std::to_string(token) + ") out of range");
  return {deltas.data() + (static_cast<std::size_t>(layer - 1) * n_tokens + token) * d_model,
          static_cast<std::size_t>(d_model)};
}

float ResidualTrace::attention_weight(int layer, int head, int query, int key) const {
  if (!has_attention()) throw CapabilityError("trace was captured without attention weights");
  if (layer < 1 || layer > n_layers || head < 0 || head >= n_heads || query < 0 || query >= n_tokens || key < 0 ||
      key >= n_tokens)
    throw IndexError("attention index out of range");
  const std::size_t T = static_cast<std::size_t>(n_tokens);
  return attention[((static_cast<std::size_t>(layer - 1) * n_heads + head) * T + query) * T + key];
}

// ---------------------------------------------------------------- forward

namespace {

void check_ids(const Model& model, std::span<const TokenId> ids) {
  if (ids.empty()) throw LengthError("empty token sequence");
  if (ids.size() > static_cast<std::size_t>(model.config.max_positions))
    throw LengthError("sequence of " + std::to_string(ids.size()) + " tokens exceeds " +
                      std::to_string(model.config.max_positions) + " positions");
  for (TokenId id : ids)
    if (id < 0 || id >= model.config.vocab_size) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
}

void apply_rotary(const Model& model, float* v, int position) {
  const int dh = model.config.head_dim();
  const int half = model.config.rotary_dims() / 2;
  const float* cs = model.rotary_cos.data() + static_cast<std::size_t>(position) * half;
  const float* sn = model.rotary_sin.data() + static_cast<std::size_t>(position) * half;
  for (int h = 0; h < model.config.n_heads; ++h) {
    float* x = v + h * dh;
    for (int j = 0; j < half; ++j) {
      const float a = x[j], b = x[j + half];
      x[j] = a * cs[j] - b * sn[j];
      x[j + half] = b * cs[j] + a * sn[j];
    }
  }
}

// Runs block `layer` (0-based) for positions [start, T). `h_in` holds those
// rows; keys/values hold T x d with rows < start already filled and receive
// the new rows. `attn`, when non-null, receives H x T x T probabilities.
void block_rows(const Model& model, int layer, const float* h_in, int start, int T, float* keys, float* values,
                float* delta, float* attn) {
  const ModelConfig& c = model.config;
  const LayerParams& p = model.layers[layer];
  const int d = c.d_model, dh = c.head_dim(), H = c.n_heads, m = c.d_mlp;
  const int n = T - start;
  const auto D = static_cast<std::size_t>(d);

  std::vector<float> x(static_cast<std::size_t>(n) * d);
  for (int r = 0; r < n; ++r)
    k::layer_norm(h_in + r * D, p.ln1_g.data(), p.ln1_b.data(), c.ln_eps, x.data() + r * D, d);

  std::vector<float> q(static_cast<std::size_t>(n) * d);
  k::linear(p.w_qkv.data(), p.b_qkv.data(), x.data(), q.data(), n, d, d);
  k::linear(p.w_qkv.data() + D * D, p.b_qkv.data() + D, x.data(), keys + start * D, n, d, d);
  k::linear(p.w_qkv.data() + 2 * D * D, p.b_qkv.data() + 2 * D, x.data(), values + start * D, n, d, d);
  if (c.positions == PositionKind::rotary)
    for (int r = 0; r < n; ++r) {
      apply_rotary(model, q.data() + r * D, start + r);
      apply_rotary(model, keys + (start + r) * D, start + r);
    }

  const float scale = std::sqrt(static_cast<float>(dh));
  std::vector<float> ctx(static_cast<std::size_t>(n) * d, 0.0f);
  std::vector<float> scores(static_cast<std::size_t>(T));
  for (int r = 0; r < n; ++r) {
    const int pos = start + r;
    for (int h = 0; h < H; ++h) {
      const float* qh = q.data() + r * D + h * dh;
      float mx = -INFINITY;
      for (int kk = 0; kk <= pos; ++kk) {
        scores[kk] = k::dot(qh, keys + kk * D + h * dh, dh) / scale;
        mx = std::max(mx, scores[kk]);
      }
      float sum = 0.0f;
      for (int kk = 0; kk <= pos; ++kk) {
        scores[kk] = std::exp(scores[kk] - mx);
        sum += scores[kk];
      }
      for (int kk = 0; kk <= pos; ++kk) scores[kk] /= sum;
      float* out = ctx.data() + r * D + h * dh;
      for (int kk = 0; kk <= pos; ++kk) {
        const float* vh = values + kk * D + h * dh;
        for (int j = 0; j < dh; ++j) out[j] += scores[kk] * vh[j];
      }
      if (attn) {
        float* row = attn + (static_cast<std::size_t>(h) * T + pos) * T;
        std::fill(row, row + T, 0.0f);
        std::copy(scores.begin(), scores.begin() + pos + 1, row);
      }
    }
  }

  std::vector<float> attn_out(static_cast<std::size_t>(n) * d);
  k::linear(p.w_o.data(), p.b_o.data(), ctx.data(), attn_out.data(), n, d, d);

  // the MLP sees ln2 of the block input (parallel) or of input + attention
  std::vector<float> x2(static_cast<std::size_t>(n) * d);
  if (c.parallel_residual) {
    for (int r = 0; r < n; ++r)
      k::layer_norm(h_in + r * D, p.ln2_g.data(), p.ln2_b.data(), c.ln_eps, x2.data() + r * D, d);
  } else {
    std::vector<float> mid(D);
    for (int r = 0; r < n; ++r) {
      for (int i = 0; i < d; ++i) mid[i] = h_in[r * D + i] + attn_out[r * D + i];
      k::layer_norm(mid.data(), p.ln2_g.data(), p.ln2_b.data(), c.ln_eps, x2.data() + r * D, d);
    }
  }
  std::vector<float> hidden(static_cast<std::size_t>(n) * m);
  k::linear(p.w_in.data(), p.b_in.data(), x2.data(), hidden.data(), n, d, m);
  if (c.activation == Activation::gelu_tanh)
    for (auto& v : hidden) v = k::gelu_tanh(v);
  else
    for (auto& v : hidden) v = k::gelu_erf(v);
  k::linear(p.w_out.data(), p.b_out.data(), hidden.data(), delta, n, m, d);
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * D; ++i) delta[i] = attn_out[i] + delta[i];
}

ResidualTrace empty_trace(const Model& model, std::span<const TokenId> ids) {
  ResidualTrace t;
  t.n_layers = model.config.n_layers;
  t.n_tokens = static_cast<int>(ids.size());
  t.d_model = model.config.d_model;
  t.n_heads = model.config.n_heads;
  t.ids.assign(ids.begin(), ids.end());
  return t;
}

}  // namespace

std::vector<float> embed_tokens(const Model& model, std::span<const TokenId> ids) {
  check_ids(model, ids);
  const auto D = static_cast<std::size_t>(model.config.d_model);
  std::vector<float> h(ids.size() * D);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const float* e = model.embed.data() + static_cast<std::size_t>(ids[t]) * D;
    float* out = h.data() + t * D;
    if (model.pos_embed.empty()) {
      std::copy(e, e + D, out);
    } else {
      const float* pe = model.pos_embed.data() + t * D;
      for (std::size_t i = 0; i < D; ++i) out[i] = e[i] + pe[i];
    }
  }
  return h;
}

std::vector<float> apply_block(const Model& model, int layer, std::span<const float> hidden, int n_tokens) {
  if (layer < 1 || layer > model.config.n_layers) throw IndexError("layer " + std::to_string(layer) + " out of range");
  const auto D = static_cast<std::size_t>(model.config.d_model);
  if (n_tokens < 1 || hidden.size() != D * n_tokens) throw std::invalid_argument("apply_block: hidden is not T x d");
  std::vector<float> keys(hidden.size()), values(hidden.size()), delta(hidden.size());
  block_rows(model, layer - 1, hidden.data(), 0, n_tokens, keys.data(), values.data(), delta.data(), nullptr);
  return delta;
}

std::vector<float> readout(const Model& model, std::span<const float> hidden) {
  const ModelConfig& c = model.config;
  if (hidden.size() != static_cast<std::size_t>(c.d_model))
    throw std::invalid_argument("readout: vector has " + std::to_string(hidden.size()) + " entries, expected " +
                                std::to_string(c.d_model));
  std::vector<float> x(hidden.size());
  k::layer_norm(hidden.data(), model.lnf_g.data(), model.lnf_b.data(), c.ln_eps, x.data(), c.d_model);
  std::vector<float> logits(static_cast<std::size_t>(c.vocab_size));
  k::linear(model.unembed_data(), nullptr, x.data(), logits.data(), 1, c.d_model, c.vocab_size);
  return logits;
}

ResidualTrace forward(const Model& model, std::span<const TokenId> ids, CaptureFlags capture) {
  check_ids(model, ids);
  const ModelConfig& c = model.config;
  ResidualTrace tr = empty_trace(model, ids);
  const int T = tr.n_tokens, L = c.n_layers;
  const std::size_t plane = static_cast<std::size_t>(T) * c.d_model;

  tr.hidden.resize((L + 1) * plane);
  const std::vector<float> h0 = embed_tokens(model, ids);
  std::copy(h0.begin(), h0.end(), tr.hidden.begin());
  if (capture.deltas) tr.deltas.resize(L * plane);
  if (capture.attention) tr.attention.resize(static_cast<std::size_t>(L) * c.n_heads * T * T);
  if (capture.kv) {
    tr.keys.resize(L * plane);
    tr.values.resize(L * plane);
  }
  std::vector<float> keys(plane), values(plane), delta(plane);
  for (int l = 0; l < L; ++l) {
    const float* in = tr.hidden.data() + l * plane;
    float* out = tr.hidden.data() + (l + 1) * plane;
    float* attn = capture.attention ? tr.attention.data() + static_cast<std::size_t>(l) * c.n_heads * T * T : nullptr;
    block_rows(model, l, in, 0, T, keys.data(), values.data(), delta.data(), attn);
    for (std::size_t i = 0; i < plane; ++i) out[i] = in[i] + delta[i];
    if (capture.deltas) std::copy(delta.begin(), delta.end(), tr.deltas.begin() + l * plane);
    if (capture.kv) {
      std::copy(keys.begin(), keys.end(), tr.keys.begin() + l * plane);
      std::copy(values.begin(), values.end(), tr.values.begin() + l * plane);
    }
  }
  tr.final_logits = readout(model, tr.h(L, T - 1));
  return tr;
}

namespace {

void check_patch(const Model& model, const ResidualTrace& target, const PatchSpec& patch) {
  if (!patch.source) throw PatchError("patch has no source trace");
  const ResidualTrace& src = *patch.source;
  if (src.n_tokens != target.n_tokens)
    throw PatchError("source run has " + std::to_string(src.n_tokens) + " tokens, target has " +
                     std::to_string(target.n_tokens));
  if (src.n_layers != model.config.n_layers || src.d_model != model.config.d_model ||
      target.n_layers != model.config.n_layers || target.d_model != model.config.d_model)
    throw PatchError("traces were not produced by this model");
  if (patch.layer < 0 || patch.layer > model.config.n_layers)
    throw PatchError("patch layer " + std::to_string(patch.layer) + " outside 0.." + std::to_string(model.config.n_layers));
  if (patch.token < 0 || patch.token >= target.n_tokens)
    throw PatchError("patch token " + std::to_string(patch.token) + " outside 0.." + std::to_string(target.n_tokens - 1));
  if (patch.layer < model.config.n_layers && !target.has_kv())
    throw PatchError("target trace lacks keys/values");
}

// Recomputes the suffix; `sink` (may be null) receives the patched hidden
// states for layers >= patch.layer at rows >= patch.token.
std::vector<float> run_suffix(const Model& model, const ResidualTrace& target, const PatchSpec& patch,
                              ResidualTrace* sink) {
  check_patch(model, target, patch);
  const int T = target.n_tokens, L = model.config.n_layers, i = patch.token;
  const auto D = static_cast<std::size_t>(model.config.d_model);
  const std::size_t plane = static_cast<std::size_t>(T) * D;
  const std::size_t rows = static_cast<std::size_t>(T - i) * D;

  std::vector<float> cur(rows);
  auto base = target.h(patch.layer, i);
  std::copy(base.data(), base.data() + rows, cur.begin());
  auto src = patch.source->h(patch.layer, i);
  std::copy(src.begin(), src.end(), cur.begin());

  auto store = [&](int layer) {
    if (sink) std::copy(cur.begin(), cur.end(), sink->hidden.begin() + layer * plane + i * D);
  };
  store(patch.layer);
  std::vector<float> keys(plane), values(plane), delta(rows);
  for (int l = patch.layer; l < L; ++l) {
    std::copy_n(target.keys.begin() + l * plane, i * D, keys.begin());
    std::copy_n(target.values.begin() + l * plane, i * D, values.begin());
    block_rows(model, l, cur.data(), i, T, keys.data(), values.data(), delta.data(), nullptr);
    for (std::size_t j = 0; j < rows; ++j) cur[j] = cur[j] + delta[j];
    if (sink && sink->has_deltas()) std::copy(delta.begin(), delta.end(), sink->deltas.begin() + l * plane + i * D);
    store(l + 1);
  }
  return readout(model, std::span<const float>(cur).subspan(rows - D, D));
}

}  // namespace

std::vector<float> patched_logits(const Model& model, const ResidualTrace& target, const PatchSpec& patch) {
  return run_suffix(model, target, patch, nullptr);
}

ResidualTrace forward_patched(const Model& model, const ResidualTrace& target, const PatchSpec& patch) {
  ResidualTrace out = empty_trace(model, target.ids);
  out.hidden = target.hidden;
  out.deltas = target.deltas;
  out.final_logits = run_suffix(model, target, patch, &out);
  return out;
}

ResidualTrace forward_patched(const Model& model, std::span<const TokenId> ids_b, const PatchSpec& patch) {
  if (patch.source && patch.source->n_tokens != static_cast<int>(ids_b.size()))
    throw PatchError("source run has " + std::to_string(patch.source->n_tokens) + " tokens, target has " +
                     std::to_string(ids_b.size()));
  const ResidualTrace target = forward(model, ids_b, {.deltas = false, .attention = false, .kv = true});
  return forward_patched(model, target, patch);
}

void write_final_token_states(const ResidualTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (int l = 0; l <= trace.n_layers; ++l) {
    auto h = trace.h(l, trace.last());
    out.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size() * sizeof(float)));
  }
}

}  // namespace kindepth
