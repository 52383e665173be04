#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "kindepth/kinship.hpp"

namespace kindepth {

/// A story plus the prompt rendered for it. `seed` is the per-story seed; the
/// template seed used for rendering is derived from it.
struct StoryRecord {
  std::string id;
  Story story;
  RenderedPrompt prompt;
  std::uint64_t seed = 0;
};

std::uint64_t template_seed_for(std::uint64_t story_seed);

StoryRecord make_record(std::string id, Story story, std::uint64_t seed);

struct GenerateOptions {
  int max_siblings = 4;
  std::uint64_t seed = 0;
  bool siblings_only = false;
  /// Fresh trees tried per story before giving up.
  int max_attempts = 64;
};

/// `count` stories with `hops` facts each, one fresh tree per story.
std::vector<StoryRecord> generate_stories(int hops, std::size_t count, const GenerateOptions& options);

// JSONL: one object per line
//   {id, hops, facts:[{subj,rel,obj}], query:[a,b], gold, text,
//    relation_char_spans:[[start,end]...], seed}
// plus "provenance" for mutated stories.
std::string to_json_line(const StoryRecord& record);
/// Parses one line and re-renders it; throws FormatError if the stored text
/// does not match the re-rendered prompt.
StoryRecord parse_json_line(const std::string& line);

void write_jsonl(const std::filesystem::path& path, const std::vector<StoryRecord>& records);
void write_jsonl(std::ostream& out, const std::vector<StoryRecord>& records);
std::vector<StoryRecord> read_jsonl(const std::filesystem::path& path);

}  // namespace kindepth
