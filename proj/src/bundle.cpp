#include "kindepth/bundle.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "kindepth/error.hpp"
#include "kindepth/lens.hpp"

namespace kindepth {

using ojson = nlohmann::ordered_json;

std::string bundle_json(const LogitBundle& b) {
  ojson j;
  j["model"] = b.model;
  j["prompts"] = b.prompts;
  j["ids"] = b.ids;
  j["logits"] = b.logits;
  j["checksums"] = b.checksums;
  return j.dump();
}

void write_bundle(const LogitBundle& bundle, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << bundle_json(bundle) << '\n';
}

LogitBundle read_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open bundle " + path.string());
  LogitBundle b;
  try {
    const ojson j = ojson::parse(in);
    b.model = j.at("model").get<std::string>();
    b.prompts = j.at("prompts").get<std::vector<std::string>>();
    b.ids = j.at("ids").get<std::vector<std::vector<TokenId>>>();
    b.logits = j.at("logits").get<std::vector<std::vector<float>>>();
    if (j.contains("checksums")) b.checksums = j.at("checksums").get<std::map<std::string, std::string>>();
  } catch (const ojson::exception& e) {
    throw FormatError("bundle " + path.string() + ": " + e.what());
  }
  if (b.ids.size() != b.prompts.size() || b.logits.size() != b.prompts.size())
    throw FormatError("bundle " + path.string() + ": prompts, ids and logits have different lengths");
  return b;
}

std::vector<std::string> read_prompts(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open prompts file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      return nlohmann::json::parse(text).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("prompts file " + path.string() + ": " + e.what());
    }
  }
  std::vector<std::string> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

LogitBundle compute_bundle(const Model& model, const Tokenizer& tokenizer, const std::string& label,
                           const std::vector<std::string>& prompts, std::map<std::string, std::string> checksums) {
  LogitBundle b;
  b.model = label;
  b.prompts = prompts;
  b.checksums = std::move(checksums);
  for (const auto& p : prompts) {
    b.ids.push_back(tokenizer.encode(p));
    b.logits.push_back(forward(model, b.ids.back()).final_logits);
  }
  return b;
}

LogitBundle compute_bundle(const Model& model, const std::string& label, const std::vector<std::vector<TokenId>>& ids) {
  LogitBundle b;
  b.model = label;
  b.ids = ids;
  for (const auto& seq : ids) {
    std::string p;
    for (std::size_t i = 0; i < seq.size(); ++i) p += (i ? " " : "") + std::to_string(seq[i]);
    b.prompts.push_back(p);
    b.logits.push_back(forward(model, seq).final_logits);
  }
  return b;
}

BundleComparison compare_bundles(const LogitBundle& reference, const LogitBundle& primary, double tolerance) {
  if (reference.prompts.size() != primary.prompts.size())
    throw FormatError("bundles hold " + std::to_string(reference.prompts.size()) + " and " +
                      std::to_string(primary.prompts.size()) + " prompts");
  BundleComparison out;
  out.tolerance = tolerance;
  out.pass = true;
  for (std::size_t i = 0; i < reference.prompts.size(); ++i) {
    if (reference.prompts[i] != primary.prompts[i]) throw FormatError("prompt " + std::to_string(i) + " differs between bundles");
    PromptComparison c;
    c.index = i;
    c.ids_equal = reference.ids[i] == primary.ids[i];
    const auto& r = reference.logits[i];
    const auto& p = primary.logits[i];
    if (r.size() != p.size() || r.empty()) {
      c.max_abs = INFINITY;
    } else {
      for (std::size_t v = 0; v < r.size(); ++v)
        c.max_abs = std::max(c.max_abs, std::fabs(static_cast<double>(r[v]) - static_cast<double>(p[v])));
      c.top1_equal = argmax(r) == argmax(p);
    }
    out.max_abs = std::max(out.max_abs, c.max_abs);
    if (!c.ids_equal || !c.top1_equal || !(c.max_abs <= tolerance)) out.pass = false;
    out.prompts.push_back(c);
  }
  return out;
}

}  // namespace kindepth
