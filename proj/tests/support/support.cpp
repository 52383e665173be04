#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "kindepth/harness.hpp"
#include "kindepth/lens.hpp"
#include "kindepth/rng.hpp"

namespace kindepth::testing {

namespace fs = std::filesystem;

fs::path data_dir() { return KINDEPTH_TEST_DATA; }

fs::path gpt2_asset_dir() { return asset_root() / "gpt2"; }

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("kindepth-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

const Tokenizer& gpt2_tokenizer() {
  static const Tokenizer tok = Tokenizer::load(gpt2_asset_dir() / "vocab.json", gpt2_asset_dir() / "merges.txt");
  return tok;
}

ModelConfig toy_config(int layers, int d_model, int heads, int vocab, int positions) {
  ModelConfig c;
  c.architecture = "gpt2";
  c.n_layers = layers;
  c.d_model = d_model;
  c.n_heads = heads;
  c.d_mlp = 4 * d_model;
  c.vocab_size = vocab;
  c.max_positions = positions;
  return c;
}

ModelConfig neox_config(bool parallel, int layers, int d_model, int heads, int vocab) {
  ModelConfig c = toy_config(layers, d_model, heads, vocab);
  c.architecture = "gpt_neox";
  c.positions = PositionKind::rotary;
  c.rotary_pct = 0.5f;
  c.activation = Activation::gelu_erf;
  c.parallel_residual = parallel;
  c.tied_unembed = false;
  return c;
}

std::optional<fs::path> installed_gpt2() {
  const fs::path dir = gpt2_asset_dir();
  if (fs::exists(dir / "config.json") && fs::exists(dir / "model.safetensors")) return dir;
  return std::nullopt;
}

void write_random_gpt2_dir(const fs::path& dir, int layers, int d_model, std::uint64_t seed) {
  ModelConfig c = toy_config(layers, d_model, 4, 50257, 256);
  save_model_dir(Model::random(c, seed), dir);
  for (const char* f : {"vocab.json", "merges.txt"})
    fs::copy_file(gpt2_asset_dir() / f, dir / f, fs::copy_options::overwrite_existing);
}

std::vector<PersonId> step(const FamilyTree& tree, PersonId p, Relation r) {
  const Person& me = tree.person(p);
  const Gender g = gender_of(r);
  std::vector<PersonId> out;
  auto keep = [&](PersonId q) {
    if (tree.person(q).gender == g) out.push_back(q);
  };
  switch (r) {
    case Relation::mother:
    case Relation::father:
      if (me.mother) keep(*me.mother);
      if (me.father) keep(*me.father);
      break;
    case Relation::son:
    case Relation::daughter:
      for (PersonId c : me.children) keep(c);
      break;
    case Relation::brother:
    case Relation::sister:
      if (me.mother)
        for (PersonId c : tree.person(*me.mother).children)
          if (c != p) keep(c);
      break;
    case Relation::wife:
    case Relation::husband:
      if (me.spouse) keep(*me.spouse);
      break;
    default:
      break;  // only the basic relations are walked
  }
  return out;
}

std::vector<PersonId> walk_endpoints(const FamilyTree& tree, PersonId anchor, std::span<const Relation> chain) {
  std::vector<PersonId> frontier = {anchor};
  for (Relation r : chain) {
    std::vector<PersonId> next;
    for (PersonId p : frontier)
      for (PersonId q : step(tree, p, r))
        if (q != anchor) next.push_back(q);
    frontier = std::move(next);
    if (frontier.empty()) break;
  }
  return frontier;
}

std::vector<float> literal_patched_logits(const Model& model, std::span<const TokenId> ids_b,
                                          const ResidualTrace& source, int layer, int token) {
  const ResidualTrace b = forward(model, ids_b);
  const int T = b.n_tokens, L = model.config.n_layers;
  const auto D = static_cast<std::size_t>(model.config.d_model);
  auto plane = [&](const ResidualTrace& tr, int l) {
    const auto begin = tr.hidden.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(l) * T * D);
    return std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(T * D));
  };
  std::vector<float> h = plane(b, layer);
  std::copy_n(source.h(layer, token).begin(), D, h.begin() + static_cast<std::ptrdiff_t>(token * D));
  for (int l = layer + 1; l <= L; ++l) {
    const std::vector<float> delta = apply_block(model, l, h, T);
    for (std::size_t k = 0; k < h.size(); ++k) h[k] += delta[k];
    const std::vector<float> target = plane(b, l);
    std::copy_n(target.begin(), static_cast<std::ptrdiff_t>(token * D), h.begin());
  }
  return readout(model, std::span<const float>(h).subspan(static_cast<std::size_t>(T - 1) * D, D));
}

CounterfactualPair toy_flip_pair(const Model& model, int n_tokens, int replaced, std::uint64_t seed) {
  const auto V = static_cast<std::size_t>(model.config.vocab_size);
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, {attempt}));
    CounterfactualPair p;
    for (int t = 0; t < n_tokens; ++t) p.ids_a.push_back(static_cast<TokenId>(uniform_index(rng, V)));
    p.ids_b = p.ids_a;
    while (p.ids_b[replaced] == p.ids_a[replaced]) p.ids_b[replaced] = static_cast<TokenId>(uniform_index(rng, V));
    const auto la = forward(model, p.ids_a).final_logits;
    const auto lb = forward(model, p.ids_b).final_logits;
    p.o = argmax(la);
    p.c = argmax(lb);
    if (p.o == p.c) continue;
    p.ld_a = double(la[p.o]) - double(la[p.c]);
    p.ld_b = double(lb[p.o]) - double(lb[p.c]);
    p.t_r = replaced;
    p.last = n_tokens - 1;
    p.a.story.facts.resize(3);
    p.b.story.facts.resize(3);
    p.id = "toy-" + std::to_string(seed) + "-" + std::to_string(attempt);
    return p;
  }
}

}  // namespace kindepth::testing
