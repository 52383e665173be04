#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "kindepth/error.hpp"
#include "kindepth/harness.hpp"

namespace kindepth {

namespace fs = std::filesystem;

namespace {

// Header-keyed rows of one of our own CSV files (no quoting needed).
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ReportError("column '" + name + "' missing");
  }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Csv read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ReportError("cannot read " + path.string());
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) throw ReportError(path.string() + " is empty");
  csv.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != csv.header.size()) throw ReportError(path.string() + ": ragged row '" + line + "'");
    csv.rows.push_back(std::move(cells));
  }
  return csv;
}

double to_d(const std::string& s) {
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw ReportError("bad number '" + s + "'");
  }
}
int to_i(const std::string& s) { return static_cast<int>(std::lround(to_d(s))); }

std::string num(double v) { return fmt::format("{:.9g}", v); }

struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double get() const { return n ? sum / static_cast<double>(n) : NAN; }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ReportError("cannot write " + path.string());
  out << text;
}

void lens_figures(const RunManifest& m, const fs::path& out, ReportSummary& summary) {
  const Csv csv = read_csv(m.dir / "lens_profile.csv");
  const auto c_hops = csv.col("hops"), c_layer = csv.col("layer"), c_pfam = csv.col("p_fam"),
             c_ok = csv.col("is_correct"), c_cok = csv.col("is_constrained_correct"), c_ent = csv.col("entropy");
  std::map<int, Mean> fam;
  std::map<std::pair<int, int>, Mean> fam_h, acc_h, cacc_h, ent_h;
  for (const auto& r : csv.rows) {
    const int h = to_i(r[c_hops]), l = to_i(r[c_layer]);
    fam[l].add(to_d(r[c_pfam]));
    fam_h[{h, l}].add(to_d(r[c_pfam]));
    acc_h[{h, l}].add(to_d(r[c_ok]));
    cacc_h[{h, l}].add(to_d(r[c_cok]));
    ent_h[{h, l}].add(to_d(r[c_ent]));
  }
  std::string f2 = "model,layer,mean_p_fam\n";
  for (const auto& [l, v] : fam) f2 += fmt::format("{},{},{}\n", m.model_label, l, num(v.get()));
  write_text(out / "fig2_family_probs.csv", f2);

  std::string f2h = "model,hops,layer,mean_p_fam,n\n", f3 = "model,hops,layer,accuracy,constrained_accuracy,n\n",
              b1 = "model,hops,layer,mean_entropy,n\n";
  for (const auto& [k, v] : fam_h) {
    f2h += fmt::format("{},{},{},{},{}\n", m.model_label, k.first, k.second, num(v.get()), v.n);
    f3 += fmt::format("{},{},{},{},{},{}\n", m.model_label, k.first, k.second, num(acc_h[k].get()),
                      num(cacc_h[k].get()), v.n);
    b1 += fmt::format("{},{},{},{},{}\n", m.model_label, k.first, k.second, num(ent_h[k].get()), v.n);
  }
  write_text(out / "fig2_family_probs_by_hop.csv", f2h);
  write_text(out / "fig3_accuracy.csv", f3);
  write_text(out / "figB1_entropy.csv", b1);

  // final-layer dip on 2-hop stories
  std::vector<double> curve;
  std::size_t n2 = 0;
  for (const auto& [k, v] : fam_h)
    if (k.first == 2) {
      curve.push_back(v.get());
      n2 = v.n;
    }
  if (curve.size() < 2) {
    summary.lines.push_back("family dip: no 2-hop lens rows");
    return;
  }
  const int L = static_cast<int>(curve.size()) - 1;
  int best = 0;
  for (int l = 1; l <= L; ++l)
    if (curve[l] > curve[best]) best = l;
  summary.family_dip = best < L && curve[best] > curve[L];
  summary.lines.push_back(fmt::format("family dip: {} (2-hop n={}, argmax layer {} of {}, mean p_fam {} there vs {} at L)",
                                      *summary.family_dip ? "PASS" : "FAIL", n2, best, L, num(curve[best]),
                                      num(curve[L])));
}

void metrics_figure(const RunManifest& m, const fs::path& out) {
  const Csv csv = read_csv(m.dir / "residual_metrics.csv");
  const auto c_layer = csv.col("layer"), c_mode = csv.col("mode"), c_ratio = csv.col("ratio"),
             c_cos = csv.col("cossim");
  std::map<std::pair<std::string, int>, std::pair<Mean, Mean>> agg;
  for (const auto& r : csv.rows) {
    auto& a = agg[{r[c_mode], to_i(r[c_layer])}];
    a.first.add(to_d(r[c_ratio]));
    a.second.add(to_d(r[c_cos]));
  }
  std::string s = "model,mode,layer,mean_ratio,mean_cossim,n\n";
  for (const auto& [k, v] : agg)
    s += fmt::format("{},{},{},{},{},{}\n", m.model_label, k.first, k.second, num(v.first.get()), num(v.second.get()),
                     v.first.n);
  write_text(out / "figB6_residual.csv", s);
}

void attention_figure(const RunManifest& m, const fs::path& out) {
  const Csv csv = read_csv(m.dir / "attention.csv");
  const auto c_hops = csv.col("hops"), c_fact = csv.col("fact"), c_layer = csv.col("layer"),
             c_self = csv.col("mass_self"), c_final = csv.col("mass_final");
  std::map<std::tuple<int, int, int>, std::pair<Mean, Mean>> agg;
  for (const auto& r : csv.rows) {
    auto& a = agg[{to_i(r[c_hops]), to_i(r[c_fact]), to_i(r[c_layer])}];
    a.first.add(to_d(r[c_self]));
    a.second.add(to_d(r[c_final]));
  }
  std::string s = "model,hops,fact,layer,mean_mass_self,mean_mass_final,n\n";
  for (const auto& [k, v] : agg)
    s += fmt::format("{},{},{},{},{},{},{}\n", m.model_label, std::get<0>(k), std::get<1>(k), std::get<2>(k),
                     num(v.first.get()), num(v.second.get()), v.first.n);
  write_text(out / "figB4_attention.csv", s);
}

struct Curves {
  std::map<int, std::vector<double>> tr, T;
  std::map<int, std::size_t> n;
};

Curves read_aggregate(const fs::path& path) {
  const Csv csv = read_csv(path);
  const auto c_g = csv.col("group"), c_l = csv.col("layer"), c_tr = csv.col("mean_rec_tr"), c_T = csv.col("mean_rec_T"),
             c_n = csv.col("n");
  Curves c;
  for (const auto& r : csv.rows) {
    const int g = to_i(r[c_g]);
    if (to_i(r[c_l]) != static_cast<int>(c.tr[g].size())) throw ReportError(path.string() + ": layers out of order");
    c.tr[g].push_back(to_d(r[c_tr]));
    c.T[g].push_back(to_d(r[c_T]));
    c.n[g] = static_cast<std::size_t>(to_i(r[c_n]));
  }
  return c;
}

std::string recovery_rows(const Curves& c, const std::string& direction) {
  std::string s;
  for (const auto& [g, curve] : c.tr) {
    for (std::size_t l = 0; l < curve.size(); ++l)
      s += fmt::format("{},{},{},t^r,{},{}\n", direction, g, l, num(curve[l]), c.n.at(g));
    const auto& T = c.T.at(g);
    for (std::size_t l = 0; l < T.size(); ++l) s += fmt::format("{},{},{},T,{},{}\n", direction, g, l, num(T[l]), c.n.at(g));
  }
  return s;
}

void patch_figures(const RunManifest& m, const fs::path& out, ReportSummary& summary) {
  constexpr std::size_t kMinPairs = 20;
  const Curves hops = read_aggregate(m.dir / "recovery_aggregates_hops.csv");
  std::string f4 = "direction,group,layer,position,mean_rec,n\n" + recovery_rows(hops, "forward");
  std::string f7 = "direction,group,layer,position,mean_rec,n\n" +
                   recovery_rows(read_aggregate(m.dir / "recovery_aggregates_position.csv"), "forward");
  if (fs::exists(m.dir / "recovery_aggregates_hops_reverse.csv")) {
    f4 += recovery_rows(read_aggregate(m.dir / "recovery_aggregates_hops_reverse.csv"), "reverse");
    f7 += recovery_rows(read_aggregate(m.dir / "recovery_aggregates_position_reverse.csv"), "reverse");
  }
  write_text(out / "fig4_recovery.csv", f4);
  write_text(out / "fig7_recovery_by_position.csv", f7);

  std::ifstream in(m.dir / "grids.jsonl");
  if (!in) throw ReportError("cannot read grids.jsonl");
  std::string f6 = "pair_id,direction,hops,replaced_position,layer,token,rec\n", line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ReportError(std::string("grids.jsonl: ") + e.what());
    }
    const auto& grid = j.at("grid");
    for (std::size_t l = 0; l < grid.size(); ++l)
      for (std::size_t t = 0; t < grid[l].size(); ++t)
        if (!grid[l][t].is_null())
          f6 += fmt::format("{},{},{},{},{},{},{}\n", j.at("pair_id").get<std::string>(),
                            j.at("direction").get<std::string>(), j.at("hops").get<int>(),
                            j.at("replaced_position").get<int>(), l, t, num(grid[l][t].get<double>()));
  }
  write_text(out / "fig6_grids.csv", f6);

  // earlier t^r mixing with more hops
  std::vector<std::string> parts;
  bool enough = hops.tr.size() >= 2;
  bool ordered = true;
  std::optional<int> prev;
  for (const auto& [g, curve] : hops.tr) {
    const auto first = first_layer_below(curve, 0.5);
    const int layer = first ? *first : static_cast<int>(curve.size());  // never below: L+1
    parts.push_back(fmt::format("hops {}: layer {} (n={})", g, first ? std::to_string(layer) : "none", hops.n.at(g)));
    if (hops.n.at(g) < kMinPairs) enough = false;
    if (prev && layer > *prev) ordered = false;
    prev = layer;
  }
  std::string joined;
  for (const auto& p : parts) joined += (joined.empty() ? "" : "; ") + p;
  if (!enough) {
    summary.lines.push_back(fmt::format("earlier t^r mixing with hops: INCONCLUSIVE (needs >= {} pairs in >= 2 hop groups; {})",
                                        kMinPairs, joined));
    return;
  }
  summary.earlier_with_hops = ordered;
  summary.lines.push_back(
      fmt::format("earlier t^r mixing with hops: {} ({})", ordered ? "PASS" : "FAIL", joined));
}

}  // namespace

ReportSummary emit_report(const fs::path& run_dir) {
  const RunManifest m = RunManifest::load(run_dir);
  std::string missing;
  for (const auto& stage : m.expected_stages())
    if (!m.complete(stage)) missing += (missing.empty() ? "" : ", ") + stage;
  if (!missing.empty()) throw ReportError("run " + run_dir.string() + " has incomplete stages: " + missing);

  const fs::path out = run_dir / "report";
  fs::create_directories(out);
  ReportSummary summary;
  summary.lines.push_back(fmt::format("model: {} ({} layers)", m.model_label, m.n_layers));
  summary.lines.push_back("config hash: " + m.config_hash);
  for (const auto& s : m.shortfalls)
    summary.lines.push_back(fmt::format("shortfall: hops {} found {}/{} pairs", s.hops, s.found, s.target));
  if (m.stages.count("lens")) lens_figures(m, out, summary);
  if (m.stages.count("metrics")) metrics_figure(m, out);
  if (m.stages.count("attention")) attention_figure(m, out);
  if (m.stages.count("patching")) patch_figures(m, out, summary);

  std::string text;
  for (const auto& l : summary.lines) text += l + "\n";
  write_text(out / "summary.txt", text);
  return summary;
}

}  // namespace kindepth
