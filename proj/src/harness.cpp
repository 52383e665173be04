#include "kindepth/harness.hpp"

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <openssl/evp.h>

#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <functional>
#include <memory>
#include <sstream>

#include "kindepth/error.hpp"
#include "kindepth/parallel.hpp"

namespace kindepth {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- assets

fs::path asset_root() {
  if (const char* env = std::getenv("KINDEPTH_ASSETS"); env && *env) return env;
  return KINDEPTH_ASSET_DIR;
}

fs::path resolve_model_dir(const std::string& name_or_path) {
  if (name_or_path.empty()) throw LoadError("no model given");
  const fs::path direct(name_or_path);
  if (fs::is_directory(direct)) return direct;
  const fs::path under_root = asset_root() / name_or_path;
  if (fs::is_directory(under_root)) return under_root;
  throw LoadError("model '" + name_or_path + "' not found (looked for " + direct.string() + " and " +
                  under_root.string() + ")");
}

namespace {

struct DigestDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256 update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw Error("sha256 final failed");
    std::string out;
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, DigestDeleter> ctx_;
};

std::string now_utc() { return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::time(nullptr))); }

std::string num(double v) { return fmt::format("{:.9g}", v); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("short write to " + path.string());
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

std::pair<int, int> parse_hop_range(const std::string& text) {
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad hop range '" + text + "'");
    }
    if (used != s.size()) throw ConfigError("bad hop range '" + text + "'");
    return v;
  };
  for (const std::string sep : {"..", "-", ":"}) {
    const auto pos = text.find(sep);
    if (pos != std::string::npos && pos > 0)
      return {to_int(text.substr(0, pos)), to_int(text.substr(pos + sep.size()))};
  }
  const int v = to_int(text);
  return {v, v};
}

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (model.empty()) fail("model must be set");
  auto check_hops = [&](int h, const char* what) {
    if (h < kMinHops || h > kMaxHops)
      fail(fmt::format("{} hop count {} outside [{}, {}]", what, h, kMinHops, kMaxHops));
    if (h >= 11 && max_siblings < 6)
      fail(fmt::format("{} hop count {} needs max_siblings >= 6 (got {})", what, h, max_siblings));
  };
  if (hop_min > hop_max) fail(fmt::format("hop range {}..{} is empty", hop_min, hop_max));
  check_hops(hop_min, "minimum");
  check_hops(hop_max, "maximum");
  if (per_hop < 1) fail("per_hop must be >= 1");
  if (max_siblings < 1) fail("max_siblings must be >= 1");
  if (!lens && !metrics && !attention && !patch) fail("no analysis selected");
  if (patch) {
    if (patch_hops.empty()) fail("patch_hops is empty");
    for (int h : patch_hops) check_hops(h, "patch");
    if (n_target < 1) fail("n must be >= 1");
    if (patch_pool < 1) fail("patch_pool must be >= 1");
  }
  if (threads < 0) fail("threads must be >= 0");
}

std::string ExperimentConfig::canonical_json() const {
  ojson j;
  j["model"] = model;
  j["model_label"] = model_label;
  j["hops"] = fmt::format("{}..{}", hop_min, hop_max);
  j["per_hop"] = per_hop;
  j["max_siblings"] = max_siblings;
  j["seed"] = seed;
  j["lens"] = lens;
  j["metrics"] = metrics;
  j["attention"] = attention;
  j["patch"] = patch;
  j["patch_mode"] = to_string(patch_mode);
  j["patch_hops"] = patch_hops;
  j["n"] = n_target;
  j["patch_pool"] = patch_pool;
  j["cells"] = cells == GridCells::full ? "full" : "columns";
  j["reverse"] = reverse;
  j["threads"] = threads;
  return j.dump();
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical_json()); }

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const ojson::exception& e) {
    throw ConfigError(std::string("experiment config is not JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "model") c.model = v.get<std::string>();
      else if (key == "model_label") c.model_label = v.get<std::string>();
      else if (key == "hops") {
        if (v.is_array() && v.size() == 2) {
          c.hop_min = v[0].get<int>();
          c.hop_max = v[1].get<int>();
        } else if (v.is_number_integer()) {
          c.hop_min = c.hop_max = v.get<int>();
        } else {
          std::tie(c.hop_min, c.hop_max) = parse_hop_range(v.get<std::string>());
        }
      } else if (key == "per_hop") c.per_hop = v.get<std::size_t>();
      else if (key == "max_siblings") c.max_siblings = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "lens") c.lens = v.get<bool>();
      else if (key == "metrics") c.metrics = v.get<bool>();
      else if (key == "attention") c.attention = v.get<bool>();
      else if (key == "patch") c.patch = v.get<bool>();
      else if (key == "patch_mode" || key == "mode") {
        const auto m = v.get<std::string>();
        if (m == "siblings") c.patch_mode = MutationMode::siblings_only;
        else if (m == "allrels") c.patch_mode = MutationMode::all_relations;
        else throw ConfigError("patch_mode must be siblings or allrels, got '" + m + "'");
      } else if (key == "patch_hops") c.patch_hops = v.get<std::vector<int>>();
      else if (key == "n" || key == "n_target") c.n_target = v.get<std::size_t>();
      else if (key == "patch_pool") c.patch_pool = v.get<std::size_t>();
      else if (key == "cells") {
        const auto m = v.get<std::string>();
        if (m == "full") c.cells = GridCells::full;
        else if (m == "columns") c.cells = GridCells::columns;
        else throw ConfigError("cells must be full or columns, got '" + m + "'");
      } else if (key == "reverse") c.reverse = v.get<bool>();
      else if (key == "threads") c.threads = v.get<int>();
      else throw ConfigError("unknown experiment config key '" + key + "'");
    }
  } catch (const ojson::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open experiment config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

// ---------------------------------------------------------------- manifest

bool RunManifest::complete(const std::string& stage) const {
  auto it = stages.find(stage);
  if (it == stages.end() || it->second.status != "complete") return false;
  for (const auto& out : it->second.outputs)
    if (!fs::exists(dir / out)) return false;
  return true;
}

std::vector<std::string> RunManifest::expected_stages() const {
  const ExperimentConfig c = ExperimentConfig::from_json(config_json);
  std::vector<std::string> s = {"stories"};
  if (c.lens) {
    s.push_back("traces");
    s.push_back("lens");
  }
  if (c.metrics) s.push_back("metrics");
  if (c.attention) s.push_back("attention");
  if (c.patch) {
    s.push_back("patch_stories");
    s.push_back("patching");
  }
  return s;
}

RunManifest RunManifest::load(const fs::path& dir) {
  const fs::path path = dir / kManifestFile;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ReportError("no manifest at " + path.string());
  RunManifest m;
  m.dir = dir;
  try {
    const ojson j = ojson::parse(in);
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config_json = j.at("config").dump();
    m.model_label = j.at("model_label").get<std::string>();
    m.n_layers = j.at("n_layers").get<int>();
    m.assets = j.at("assets").get<std::map<std::string, std::string>>();
    for (const auto& [name, s] : j.at("stages").items()) {
      StageRecord r;
      r.status = s.at("status").get<std::string>();
      r.outputs = s.at("outputs").get<std::vector<std::string>>();
      r.started = s.value("started", "");
      r.finished = s.value("finished", "");
      r.error = s.value("error", "");
      m.stages[name] = r;
    }
    for (const auto& s : j.at("shortfalls"))
      m.shortfalls.push_back({s.at("hops").get<int>(), s.at("found").get<std::size_t>(), s.at("target").get<std::size_t>()});
    m.created = j.value("created", "");
    m.updated = j.value("updated", "");
  } catch (const ojson::exception& e) {
    throw ReportError("manifest " + path.string() + " is malformed: " + e.what());
  }
  return m;
}

void RunManifest::save() const {
  ojson j;
  j["config_hash"] = config_hash;
  j["config"] = ojson::parse(config_json);
  j["model_label"] = model_label;
  j["n_layers"] = n_layers;
  j["assets"] = assets;
  ojson st = ojson::object();
  for (const auto& [name, r] : stages) {
    ojson s = {{"status", r.status}, {"outputs", r.outputs}, {"started", r.started}, {"finished", r.finished}};
    if (!r.error.empty()) s["error"] = r.error;
    st[name] = s;
  }
  j["stages"] = st;
  ojson sf = ojson::array();
  for (const auto& s : shortfalls)
    sf.push_back({{"hops", s.hops}, {"found", s.found}, {"target", s.target}, {"summary", fmt::format("{}/{}", s.found, s.target)}});
  j["shortfalls"] = sf;
  j["created"] = created;
  j["updated"] = updated;
  write_text(dir / kManifestFile, j.dump(2) + "\n");
}

// ---------------------------------------------------------------- trace cache

namespace {

constexpr char kCacheMagic[4] = {'K', 'D', 'T', 'R'};
constexpr std::uint32_t kCacheVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("trace cache " + path.string() + " is truncated");
  return v;
}

void get_floats(std::istream& in, std::vector<float>& v, std::size_t n, const fs::path& path) {
  v.resize(n);
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float))))
    throw FormatError("trace cache " + path.string() + " is truncated");
}

}  // namespace

void write_trace_cache(const fs::path& path, int n_layers, int d_model, const std::vector<CachedStates>& states) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kCacheMagic, 4);
  put<std::uint32_t>(out, kCacheVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(n_layers));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(d_model));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(states.size()));
  for (const auto& s : states) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.story_id.size()));
    out.write(s.story_id.data(), static_cast<std::streamsize>(s.story_id.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.n_tokens));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.relation_tokens.size()));
    for (int t : s.relation_tokens) put<std::uint32_t>(out, static_cast<std::uint32_t>(t));
    out.write(reinterpret_cast<const char*>(s.final_states.data()),
              static_cast<std::streamsize>(s.final_states.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(s.relation_states.data()),
              static_cast<std::streamsize>(s.relation_states.size() * sizeof(float)));
  }
  if (!out) throw Error("short write to " + path.string());
}

std::vector<CachedStates> read_trace_cache(const fs::path& path, int n_layers, int d_model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open trace cache " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kCacheMagic, 4))
    throw FormatError(path.string() + " is not a trace cache");
  if (get<std::uint32_t>(in, path) != kCacheVersion) throw FormatError("trace cache version mismatch");
  if (get<std::uint32_t>(in, path) != static_cast<std::uint32_t>(n_layers) ||
      get<std::uint32_t>(in, path) != static_cast<std::uint32_t>(d_model))
    throw FormatError("trace cache " + path.string() + " was written for a different model shape");
  const auto n = get<std::uint32_t>(in, path);
  const std::size_t plane = static_cast<std::size_t>(n_layers + 1) * d_model;
  std::vector<CachedStates> out(n);
  for (auto& s : out) {
    s.story_id.resize(get<std::uint32_t>(in, path));
    if (!in.read(s.story_id.data(), static_cast<std::streamsize>(s.story_id.size())))
      throw FormatError("trace cache " + path.string() + " is truncated");
    s.n_tokens = static_cast<int>(get<std::uint32_t>(in, path));
    s.relation_tokens.resize(get<std::uint32_t>(in, path));
    for (auto& t : s.relation_tokens) t = static_cast<int>(get<std::uint32_t>(in, path));
    get_floats(in, s.final_states, plane, path);
    get_floats(in, s.relation_states, plane * s.relation_tokens.size(), path);
  }
  return out;
}

// ---------------------------------------------------------------- analyses

namespace {

TokenId gold_token(const StoryRecord& r, std::span<const TokenId> family) {
  if (!r.story.gold) throw Error("story " + r.id + " has no gold answer");
  const auto it = std::find(kAnswerSet.begin(), kAnswerSet.end(), *r.story.gold);
  if (it == kAnswerSet.end()) throw LookupError("gold '" + std::string(to_string(*r.story.gold)) + "' is outside the answer set");
  return family[static_cast<std::size_t>(it - kAnswerSet.begin())];
}

std::vector<StoryRecord> load_stories(const fs::path& path) { return read_jsonl(path); }

CachedStates cache_story(const Model& model, const Tokenizer& tok, const StoryRecord& r) {
  const std::vector<TokenId> ids = tok.encode(r.prompt.text);
  const SpanLocation loc = locate_spans(tok, r.prompt.text, r.prompt.relation_spans);
  const ResidualTrace tr = forward(model, ids);
  CachedStates s;
  s.story_id = r.id;
  s.n_tokens = tr.n_tokens;
  for (int l = 0; l <= tr.n_layers; ++l) {
    auto h = tr.h(l, tr.last());
    s.final_states.insert(s.final_states.end(), h.begin(), h.end());
  }
  for (std::size_t f = 0; f < loc.token_indices.size(); ++f) {
    s.relation_tokens.push_back(static_cast<int>(loc.token_indices[f]));
    for (int l = 0; l <= tr.n_layers; ++l) {
      auto h = tr.h(l, static_cast<int>(loc.token_indices[f]));
      s.relation_states.insert(s.relation_states.end(), h.begin(), h.end());
    }
  }
  return s;
}

std::string lens_csv(const std::vector<StoryRecord>& stories, const std::vector<std::vector<LensLayer>>& rows) {
  std::string out = "story_id,hops,layer,p_fam,is_correct,is_constrained_correct,entropy,top_token\n";
  for (std::size_t i = 0; i < stories.size(); ++i)
    for (const LensLayer& m : rows[i])
      out += fmt::format("{},{},{},{},{},{},{},{}\n", stories[i].id, stories[i].story.hops(), m.layer, num(m.p_fam),
                         m.is_correct ? 1 : 0, m.is_constrained_correct ? 1 : 0, num(m.entropy), m.top_token);
  return out;
}

struct MetricsRows {
  std::vector<ResidualLayer> final_token, mean;
};

std::string metrics_csv(const std::vector<StoryRecord>& stories, const std::vector<MetricsRows>& rows) {
  std::string out = "story_id,hops,layer,mode,ratio,cossim\n";
  for (std::size_t i = 0; i < stories.size(); ++i) {
    for (const auto& r : rows[i].final_token)
      out += fmt::format("{},{},{},final_token,{},{}\n", stories[i].id, stories[i].story.hops(), r.layer, num(r.ratio),
                         num(r.cossim));
    for (const auto& r : rows[i].mean)
      out += fmt::format("{},{},{},all_tokens_mean,{},{}\n", stories[i].id, stories[i].story.hops(), r.layer,
                         num(r.ratio), num(r.cossim));
  }
  return out;
}

// per fact: key token and per-layer (self, final) head-averaged mass
struct AttentionRows {
  std::vector<int> keys;
  std::vector<std::vector<std::pair<double, double>>> mass;  // [fact][layer-1]
};

std::string attention_csv(const std::vector<StoryRecord>& stories, const std::vector<AttentionRows>& rows) {
  std::string out = "story_id,hops,fact,key_token,layer,mass_self,mass_final\n";
  for (std::size_t i = 0; i < stories.size(); ++i)
    for (std::size_t f = 0; f < rows[i].keys.size(); ++f)
      for (std::size_t l = 0; l < rows[i].mass[f].size(); ++l)
        out += fmt::format("{},{},{},{},{},{},{}\n", stories[i].id, stories[i].story.hops(), f, rows[i].keys[f], l + 1,
                           num(rows[i].mass[f][l].first), num(rows[i].mass[f][l].second));
  return out;
}

AttentionRows attention_rows(const ResidualTrace& tr, const SpanLocation& loc) {
  AttentionRows a;
  for (std::size_t key : loc.token_indices) {
    const AttentionToToken att = attention_to_token(tr, static_cast<int>(key));
    a.keys.push_back(static_cast<int>(key));
    std::vector<std::pair<double, double>> per_layer;
    for (const auto& row : att.mass) per_layer.emplace_back(row.front(), row.back());
    a.mass.push_back(std::move(per_layer));
  }
  return a;
}

std::vector<TokenId> family_ids(const Tokenizer& tok) { return answer_token_ids(tok); }

}  // namespace

std::vector<std::vector<LensLayer>> lens_from_cache(const Model& model, const std::vector<CachedStates>& states,
                                                    const std::vector<StoryRecord>& stories,
                                                    std::span<const TokenId> family, int threads) {
  if (states.size() != stories.size()) throw FormatError("trace cache does not match the story set");
  const auto D = static_cast<std::size_t>(model.config.d_model);
  const int L = model.config.n_layers;
  std::vector<std::vector<LensLayer>> out(stories.size());
  std::vector<TokenId> golds(stories.size());
  for (std::size_t i = 0; i < stories.size(); ++i) {
    if (states[i].story_id != stories[i].id) throw FormatError("trace cache is out of order at " + stories[i].id);
    golds[i] = gold_token(stories[i], family);
  }
  parallel_for(stories.size(), threads, [&](std::size_t i) {
    for (int l = 0; l <= L; ++l) {
      const std::span<const float> h(states[i].final_states.data() + l * D, D);
      out[i].push_back(lens_metrics(readout(model, h), golds[i], family, l));
    }
  });
  return out;
}

std::vector<fs::path> run_analyses(const Model& model, const Tokenizer& tok, const std::vector<StoryRecord>& stories,
                                   const AnalysisOptions& options, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const std::vector<TokenId> family = family_ids(tok);
  const std::size_t n = stories.size();
  std::vector<std::vector<LensLayer>> lens(n);
  std::vector<MetricsRows> metrics(n);
  std::vector<AttentionRows> attention(n);
  const CaptureFlags capture{.deltas = options.metrics, .attention = options.attention, .kv = false};
  parallel_for(n, options.threads, [&](std::size_t i) {
    const StoryRecord& r = stories[i];
    const std::vector<TokenId> ids = tok.encode(r.prompt.text);
    const ResidualTrace tr = forward(model, ids, capture);
    if (options.lens) lens[i] = lens_profile(model, tr, gold_token(r, family), family);
    if (options.metrics)
      metrics[i] = {residual_metrics(tr, ResidualMode::final_token), residual_metrics(tr, ResidualMode::all_tokens_mean)};
    if (options.attention) attention[i] = attention_rows(tr, locate_spans(tok, r.prompt.text, r.prompt.relation_spans));
  });
  std::vector<fs::path> written;
  if (options.lens) {
    written.push_back(out_dir / "lens_profile.csv");
    write_text(written.back(), lens_csv(stories, lens));
  }
  if (options.metrics) {
    written.push_back(out_dir / "residual_metrics.csv");
    write_text(written.back(), metrics_csv(stories, metrics));
  }
  if (options.attention) {
    written.push_back(out_dir / "attention.csv");
    write_text(written.back(), attention_csv(stories, attention));
  }
  return written;
}

// ---------------------------------------------------------------- patching

namespace {

ojson grid_json(const RecoveryGrid& g) {
  ojson rows = ojson::array();
  for (const auto& row : g.rec) {
    ojson r = ojson::array();
    for (double v : row) {
      if (std::isnan(v))
        r.push_back(nullptr);
      else
        r.push_back(ojson::parse(num(v)));  // fixed 9 significant digits
    }
    rows.push_back(std::move(r));
  }
  ojson j;
  j["pair_id"] = g.pair_id;
  j["hops"] = g.hops;
  j["replaced_position"] = g.replaced_position;
  j["L"] = g.n_layers;
  j["T"] = g.last;
  j["t^r"] = g.t_r;
  j["direction"] = to_string(g.direction);
  j["cells_above_one"] = g.cells_above_one();
  j["grid"] = std::move(rows);
  return j;
}

std::string aggregate_csv(const Aggregation& agg) {
  std::string out = "group,layer,mean_rec_tr,mean_rec_T,n\n";
  for (const auto& c : agg.curves)
    for (std::size_t l = 0; l < c.mean_tr.size(); ++l)
      out += fmt::format("{},{},{},{},{}\n", c.group, l, num(c.mean_tr[l]), num(c.mean_T[l]), c.n);
  return out;
}

}  // namespace

PatchRun run_patching(const Model& model, const Tokenizer& tok, const std::vector<StoryRecord>& stories,
                      const PatchOptions& options, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::map<int, std::vector<StoryRecord>> by_hops;
  for (const auto& s : stories) by_hops[static_cast<int>(s.story.hops())].push_back(s);

  PatchRun run;
  std::vector<CounterfactualPair> pairs;
  std::vector<int> hop_groups;
  for (const auto& [hops, group] : by_hops) {
    hop_groups.push_back(hops);
    FlipSearch found = find_flip_pairs(model, tok, group, options.mode, options.n_target, options.seed, options.threads);
    if (found.short_of_target()) {
      run.shortfalls.push_back({hops, found.pairs.size(), options.n_target});
      std::clog << fmt::format("hops {}: only {}/{} flipping pairs among {} stories\n", hops, found.pairs.size(),
                               options.n_target, found.stories_seen);
    }
    for (auto& p : found.pairs) pairs.push_back(std::move(p));
  }

  std::string pairs_out;
  for (const auto& p : pairs) {
    ojson j;
    j["pair_id"] = p.id;
    j["hops"] = p.hops();
    j["replaced_position"] = p.replaced_position;
    j["original_relation"] = to_string(p.a.story.facts[p.replaced_position].relation);
    j["counterfactual_relation"] = to_string(p.b.story.facts[p.replaced_position].relation);
    j["t^r"] = p.t_r;
    j["T"] = p.last;
    j["o"] = p.o;
    j["c"] = p.c;
    j["o_text"] = tok.token_bytes(p.o);
    j["c_text"] = tok.token_bytes(p.c);
    j["ld_a"] = ojson::parse(num(p.ld_a));
    j["ld_b"] = ojson::parse(num(p.ld_b));
    j["gold_a"] = p.a.story.gold ? ojson(to_string(*p.a.story.gold)) : ojson(nullptr);
    j["gold_b"] = p.b.story.gold ? ojson(to_string(*p.b.story.gold)) : ojson(nullptr);
    j["text_a"] = p.a.prompt.text;
    j["text_b"] = p.b.prompt.text;
    pairs_out += j.dump() + "\n";
  }
  run.outputs.push_back(out_dir / "pairs.jsonl");
  write_text(run.outputs.back(), pairs_out);

  std::vector<PatchDirection> directions = {PatchDirection::forward};
  if (options.reverse) directions.push_back(PatchDirection::reverse);
  std::string grids_out;
  std::size_t above = 0, cells = 0;
  for (PatchDirection dir : directions) {
    std::vector<RecoveryGrid> grids;
    for (const auto& p : pairs) {
      grids.push_back(patch_grid(model, p, options.cells, dir, options.threads));
      above += grids.back().cells_above_one();
      cells += grids.back().computed_cells();
      grids_out += grid_json(grids.back()).dump() + "\n";
    }
    const std::string suffix = dir == PatchDirection::forward ? "" : "_reverse";
    const Aggregation by_hops_agg = aggregate_recovery(grids, GroupBy::hops, hop_groups);
    const Aggregation by_pos = aggregate_recovery(grids, GroupBy::replaced_position);
    for (const auto& w : by_hops_agg.warnings) std::clog << "warning: " << w << '\n';
    run.outputs.push_back(out_dir / ("recovery_aggregates_hops" + suffix + ".csv"));
    write_text(run.outputs.back(), aggregate_csv(by_hops_agg));
    run.outputs.push_back(out_dir / ("recovery_aggregates_position" + suffix + ".csv"));
    write_text(run.outputs.back(), aggregate_csv(by_pos));
  }
  if (cells) std::clog << fmt::format("recovery above 1 in {}/{} cells ({:.4f})\n", above, cells, double(above) / double(cells));
  run.outputs.push_back(out_dir / "grids.jsonl");
  write_text(run.outputs.back(), grids_out);
  return run;
}

// ---------------------------------------------------------------- experiment

RunManifest run_experiment(const ExperimentConfig& config, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  const fs::path model_dir = resolve_model_dir(config.model);

  RunManifest m;
  m.dir = out_dir;
  m.config_hash = config.hash();
  m.config_json = config.canonical_json();
  m.model_label = config.model_label.empty() ? model_dir.filename().string() : config.model_label;
  if (m.model_label.empty()) m.model_label = fs::weakly_canonical(model_dir).filename().string();
  for (const char* f : {"config.json", "model.safetensors", "layout.json", "vocab.json", "merges.txt"})
    if (fs::exists(model_dir / f)) m.assets[f] = sha256_file(model_dir / f);

  std::optional<RunManifest> previous;
  if (fs::exists(out_dir / kManifestFile)) {
    try {
      previous = RunManifest::load(out_dir);
    } catch (const ReportError&) {
      previous.reset();
    }
  }
  const bool reuse = previous && previous->config_hash == m.config_hash && previous->assets == m.assets;
  m.created = reuse ? previous->created : now_utc();
  if (reuse) {
    m.n_layers = previous->n_layers;
    m.shortfalls = previous->shortfalls;
  }

  std::optional<Model> model;
  std::optional<Tokenizer> tok;
  auto need_model = [&]() -> const Model& {
    if (!model) model = load_model_dir(model_dir);
    m.n_layers = model->config.n_layers;
    return *model;
  };
  auto need_tok = [&]() -> const Tokenizer& {
    if (!tok) tok = load_tokenizer_dir(model_dir);
    return *tok;
  };
  if (!m.n_layers) m.n_layers = parse_model_config(model_dir / "config.json").n_layers;

  using Runner = std::function<std::vector<std::string>()>;
  std::vector<std::pair<std::string, Runner>> plan;
  plan.emplace_back("stories", [&] {
    std::vector<StoryRecord> all;
    for (int k = config.hop_min; k <= config.hop_max; ++k) {
      auto s = generate_stories(k, config.per_hop, {.max_siblings = config.max_siblings, .seed = config.seed});
      all.insert(all.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    write_jsonl(out_dir / "stories.jsonl", all);
    return std::vector<std::string>{"stories.jsonl"};
  });
  if (config.lens) {
    plan.emplace_back("traces", [&] {
      const auto stories = load_stories(out_dir / "stories.jsonl");
      const Model& mdl = need_model();
      const Tokenizer& tk = need_tok();
      std::vector<CachedStates> states(stories.size());
      parallel_for(stories.size(), config.threads, [&](std::size_t i) { states[i] = cache_story(mdl, tk, stories[i]); });
      write_trace_cache(out_dir / "traces.bin", mdl.config.n_layers, mdl.config.d_model, states);
      return std::vector<std::string>{"traces.bin"};
    });
    plan.emplace_back("lens", [&] {
      const auto stories = load_stories(out_dir / "stories.jsonl");
      const Model& mdl = need_model();
      const auto states = read_trace_cache(out_dir / "traces.bin", mdl.config.n_layers, mdl.config.d_model);
      const auto family = family_ids(need_tok());
      write_text(out_dir / "lens_profile.csv", lens_csv(stories, lens_from_cache(mdl, states, stories, family, config.threads)));
      return std::vector<std::string>{"lens_profile.csv"};
    });
  }
  if (config.metrics)
    plan.emplace_back("metrics", [&] {
      run_analyses(need_model(), need_tok(), load_stories(out_dir / "stories.jsonl"),
                   {.lens = false, .metrics = true, .attention = false, .threads = config.threads}, out_dir);
      return std::vector<std::string>{"residual_metrics.csv"};
    });
  if (config.attention)
    plan.emplace_back("attention", [&] {
      run_analyses(need_model(), need_tok(), load_stories(out_dir / "stories.jsonl"),
                   {.lens = false, .metrics = false, .attention = true, .threads = config.threads}, out_dir);
      return std::vector<std::string>{"attention.csv"};
    });
  if (config.patch) {
    plan.emplace_back("patch_stories", [&] {
      std::vector<StoryRecord> all;
      const bool siblings = config.patch_mode == MutationMode::siblings_only;
      for (int k : config.patch_hops) {
        auto s = generate_stories(k, config.patch_pool,
                                  {.max_siblings = config.max_siblings, .seed = config.seed, .siblings_only = siblings});
        all.insert(all.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
      }
      write_jsonl(out_dir / "patch_stories.jsonl", all);
      return std::vector<std::string>{"patch_stories.jsonl"};
    });
    plan.emplace_back("patching", [&] {
      const PatchRun run = run_patching(need_model(), need_tok(), load_stories(out_dir / "patch_stories.jsonl"),
                                        {.mode = config.patch_mode,
                                         .n_target = config.n_target,
                                         .cells = config.cells,
                                         .reverse = config.reverse,
                                         .seed = config.seed,
                                         .threads = config.threads},
                                        out_dir);
      m.shortfalls = run.shortfalls;
      std::vector<std::string> names;
      for (const auto& p : run.outputs) names.push_back(p.filename().string());
      return names;
    });
  }

  bool dirty = !reuse;
  for (auto& [stage, runner] : plan) {
    if (!dirty && previous->complete(stage)) {
      m.stages[stage] = previous->stages.at(stage);
      continue;
    }
    dirty = true;
    StageRecord rec;
    rec.started = now_utc();
    try {
      rec.outputs = runner();
      rec.status = "complete";
      rec.finished = now_utc();
      m.stages[stage] = rec;
      m.updated = now_utc();
      m.save();
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      rec.finished = now_utc();
      m.stages[stage] = rec;
      m.updated = now_utc();
      m.save();
      throw StageError(stage, e.what());
    }
  }
  m.updated = now_utc();
  m.save();
  return m;
}

}  // namespace kindepth
