#include "kindepth/dataset.hpp"

#include <fstream>
#include <json.hpp>

#include "kindepth/error.hpp"
#include "kindepth/rng.hpp"

namespace kindepth {

using ojson = nlohmann::ordered_json;

std::uint64_t template_seed_for(std::uint64_t story_seed) { return derive_seed(story_seed, {3}); }

StoryRecord make_record(std::string id, Story story, std::uint64_t seed) {
  StoryRecord r;
  r.id = std::move(id);
  r.prompt = render_prompt(story, template_seed_for(seed));
  r.story = std::move(story);
  r.seed = seed;
  return r;
}

std::vector<StoryRecord> generate_stories(int hops, std::size_t count, const GenerateOptions& options) {
  StoryOptions story_options;
  if (options.siblings_only) story_options.relations.assign(kSiblingRelations.begin(), kSiblingRelations.end());
  std::vector<StoryRecord> out;
  out.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    const std::uint64_t story_seed = derive_seed(options.seed, {static_cast<std::uint64_t>(hops), j});
    std::optional<Story> story;
    for (int attempt = 0; attempt < options.max_attempts && !story; ++attempt) {
      const auto a = static_cast<std::uint64_t>(attempt);
      FamilyTree tree = build_tree({options.max_siblings, derive_seed(story_seed, {1, a})});
      try {
        story = sample_story(tree, hops, derive_seed(story_seed, {2, a}), story_options);
      } catch (const SamplingExhausted&) {
      }
    }
    if (!story)
      throw SamplingExhausted("could not sample a " + std::to_string(hops) + "-hop story after " +
                              std::to_string(options.max_attempts) + " trees");
    std::string id = (options.siblings_only ? "s" : "h") + std::to_string(hops) + "-" + std::to_string(j);
    out.push_back(make_record(std::move(id), std::move(*story), story_seed));
  }
  return out;
}

std::string to_json_line(const StoryRecord& record) {
  const RenderedPrompt& p = record.prompt;
  ojson facts = ojson::array();
  for (const Fact& f : record.story.facts)
    facts.push_back({{"subj", p.name_of(f.subject)}, {"rel", to_string(f.relation)}, {"obj", p.name_of(f.object)}});
  ojson spans = ojson::array();
  for (const CharSpan& s : p.relation_spans) spans.push_back({s.begin, s.end});
  ojson j;
  j["id"] = record.id;
  j["hops"] = record.story.hops();
  j["facts"] = std::move(facts);
  j["query"] = {p.name_of(record.story.person_a), p.name_of(record.story.person_b)};
  if (record.story.gold)
    j["gold"] = to_string(*record.story.gold);
  else
    j["gold"] = nullptr;
  j["text"] = p.text;
  j["relation_char_spans"] = std::move(spans);
  j["seed"] = record.seed;
  if (record.story.provenance != "sampled") j["provenance"] = record.story.provenance;
  return j.dump();
}

namespace {

PersonId person_from_name(const std::string& name) {
  constexpr std::string_view prefix = "Person";
  if (name.rfind(prefix, 0) != 0 || name.size() == prefix.size())
    throw FormatError("bad person name '" + name + "'");
  std::size_t used = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(name.substr(prefix.size()), &used);
  } catch (const std::exception&) {
    throw FormatError("bad person name '" + name + "'");
  }
  if (used != name.size() - prefix.size()) throw FormatError("bad person name '" + name + "'");
  return static_cast<PersonId>(v);
}

Relation relation_from_json(const ojson& v) {
  auto r = parse_relation(v.get<std::string>());
  if (!r) throw FormatError("unknown relation '" + v.get<std::string>() + "'");
  return *r;
}

}  // namespace

StoryRecord parse_json_line(const std::string& line) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const ojson::parse_error& e) {
    throw FormatError(std::string("story line is not JSON: ") + e.what());
  }
  try {
    Story story;
    for (const auto& f : j.at("facts"))
      story.facts.push_back({person_from_name(f.at("subj")), relation_from_json(f.at("rel")),
                             person_from_name(f.at("obj"))});
    const auto& q = j.at("query");
    if (!q.is_array() || q.size() != 2) throw FormatError("query must be [a, b]");
    story.person_a = person_from_name(q[0]);
    story.person_b = person_from_name(q[1]);
    if (!j.at("gold").is_null()) story.gold = relation_from_json(j.at("gold"));
    if (j.contains("provenance")) story.provenance = j.at("provenance").get<std::string>();
    if (j.at("hops").get<std::size_t>() != story.facts.size()) throw FormatError("hops does not match facts");
    StoryRecord record = make_record(j.at("id").get<std::string>(), std::move(story), j.at("seed").get<std::uint64_t>());
    if (record.prompt.text != j.at("text").get<std::string>())
      throw FormatError("story " + record.id + ": text does not match its facts and seed");
    return record;
  } catch (const ojson::exception& e) {
    throw FormatError(std::string("malformed story line: ") + e.what());
  }
}

void write_jsonl(std::ostream& out, const std::vector<StoryRecord>& records) {
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

void write_jsonl(const std::filesystem::path& path, const std::vector<StoryRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_jsonl(out, records);
}

std::vector<StoryRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<StoryRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_json_line(line));
  }
  return out;
}

}  // namespace kindepth
