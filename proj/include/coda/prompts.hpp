#pragma once

// Versioned prompt templates. Every template starts with a "Task:" line naming
// it; the template hash (sha256 of the raw template text) is written into run
// metadata so a run can be tied to the exact wording used.

#include <map>

#include "coda/core.hpp"

namespace coda::prompts {

struct Template {
  std::string_view name;
  std::string_view text;

  std::string hash() const { return sha256_hex(text); }

  /// Replaces each {key} with its value. Unknown placeholders are left intact.
  std::string render(const std::map<std::string, std::string>& vars) const {
    std::string out(text);
    for (const auto& [k, v] : vars) {
      const std::string needle = "{" + k + "}";
      for (auto pos = out.find(needle); pos != std::string::npos; pos = out.find(needle, pos + v.size()))
        out.replace(pos, needle.size(), v);
    }
    return out;
  }
};

inline constexpr Template kTextualFeatures{
    "textual-features/v1",
    "Task: textual-features\n"
    "Target concept: {target}\n"
    "You are an expert in visual recognition. Think step by step about what a {target} looks like: "
    "its overall shape, size, colours, patterns, textures and distinctive parts.\n"
    "Then list up to {max_features} short visual features that identify a {target} in a photo. "
    "Describe visual appearance only.\n"
    "After your reasoning, write \"Features:\" on its own line followed by a numbered list with one "
    "feature per line and nothing after the list."};

inline constexpr Template kContrastiveTextualFeatures{
    "textual-features-contrastive/v1",
    "Task: textual-features\n"
    "Target concept: {target}\n"
    "Confusable concept: {against}\n"
    "You are an expert in visual recognition. A recognition model keeps mistaking a {target} for a "
    "{against}. Think step by step about how the two differ in appearance: shape, size, colours, "
    "patterns, textures and distinctive parts.\n"
    "Then list up to {max_features} short visual features that a {target} HAS and a {against} does NOT "
    "have. Describe visual appearance only.\n"
    "After your reasoning, write \"Features:\" on its own line followed by a numbered list with one "
    "feature per line and nothing after the list."};

inline constexpr Template kVisualFeatures{
    "visual-features/v1",
    "Task: visual-features\n"
    "Target concept: {target}\n"
    "This image shows a {target}. List up to {max_features} key visual features of the {target} that "
    "are visible in this image.\n"
    "Answer with a numbered list, one short feature per line."};

inline constexpr Template kContrastiveVisualFeatures{
    "visual-features-contrastive/v1",
    "Task: visual-features\n"
    "Target concept: {target}\n"
    "Confusable concept: {against}\n"
    "This image shows a {target}, which is often confused with a {against}. List up to {max_features} key "
    "visual features visible in this image that a {target} has and a {against} does NOT have.\n"
    "Answer with a numbered list, one short feature per line."};

inline constexpr Template kMergeFeatures{
    "merge-features/v1",
    "Task: merge-features\n"
    "Target concept: {target}\n"
    "The lists below were extracted from different images of a {target}. De-duplicate and summarize "
    "the combined features into one list of distinct visual features, merging items that describe the "
    "same attribute.\n"
    "Answer with a numbered list, one feature per line.\n"
    "Combined features:\n"
    "{features}"};

inline constexpr Template kVerifyFeature{
    "verify-feature/v1",
    "Task: verify-feature\n"
    "Is the following feature visible in this image? Answer with yes or no only.\n"
    "Feature: {feature}"};

inline constexpr Template kClassify{
    "classify/v1",
    "Task: classify\n"
    "Which of the following is shown in the image? Answer with the letter of the correct option only.\n"
    "{options}"};

inline constexpr Template kClassifyFeatureSection{
    "classify-features/v1",
    "Distinguishing features (look for these, and do not mistake one option for another):\n"
    "{feature_blocks}"};

inline constexpr Template kImageGeneration{
    "image-generation/v1",
    "A realistic photo of a {target}, clearly showing: {features}."};

inline constexpr Template kFinetuneInstruction{
    "finetune-instruction/v1",
    "<image>\nWhat is shown in this image? Answer with its name."};

inline std::vector<Template> all_templates() {
  return {kTextualFeatures, kContrastiveTextualFeatures, kVisualFeatures, kContrastiveVisualFeatures,
          kMergeFeatures,   kVerifyFeature,              kClassify,       kClassifyFeatureSection,
          kImageGeneration, kFinetuneInstruction};
}

/// name → hash for every shipped template.
inline json template_hashes() {
  json j = json::object();
  for (const auto& t : all_templates()) j[std::string(t.name)] = t.hash();
  return j;
}

/// Option letter for a zero-based index: A..Z, then AA, AB, ...
inline std::string option_label(std::size_t i) {
  std::string s;
  ++i;
  while (i > 0) {
    --i;
    s.insert(s.begin(), static_cast<char>('A' + i % 26));
    i /= 26;
  }
  return s;
}

/// Index of an option label, or npos.
inline std::size_t option_index(std::string_view label) {
  if (label.empty()) return std::string::npos;
  std::size_t v = 0;
  for (char c : label) {
    if (c < 'A' || c > 'Z') return std::string::npos;
    v = v * 26 + static_cast<std::size_t>(c - 'A' + 1);
  }
  return v - 1;
}

// --- reply parsing ----------------------------------------------------------

/// Strips a list marker ("1.", "1)", "-", "*", "•") from a line. Returns
/// nullopt when the line is not a list item.
inline std::optional<std::string> list_item(std::string_view raw) {
  std::string line = trim(raw);
  if (line.empty()) return std::nullopt;
  std::size_t body = 0;
  if (line[0] == '-' || line[0] == '*' || line[0] == '+') {
    body = 1;
  } else if (line.rfind("\xE2\x80\xA2", 0) == 0) {  // U+2022 bullet
    body = 3;
  } else if (std::isdigit(static_cast<unsigned char>(line[0]))) {
    std::size_t i = 0;
    while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size() || (line[i] != '.' && line[i] != ')')) return std::nullopt;
    body = i + 1;
  } else {
    return std::nullopt;
  }
  if (body < line.size() && line[body] != ' ' && line[body] != '\t') return std::nullopt;
  std::string item = trim(std::string_view(line).substr(body));
  // Markdown emphasis and a trailing period are presentation, not content.
  std::string cleaned;
  for (char c : item)
    if (c != '*') cleaned.push_back(c);
  cleaned = trim(cleaned);
  while (!cleaned.empty() && (cleaned.back() == '.' || cleaned.back() == ';')) cleaned.pop_back();
  if (cleaned.empty()) return std::nullopt;
  return cleaned;
}

/// List items of a model reply. When a "Features:" line is present only the
/// text after its last occurrence is considered.
inline std::vector<std::string> parse_list(std::string_view reply) {
  auto lines = split_lines(reply);
  std::size_t start = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string t = trim(lines[i]);
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
    if (t == "features:" || t == "final features:" || t == "combined features:") start = i + 1;
  }
  std::vector<std::string> items;
  for (std::size_t i = start; i < lines.size(); ++i)
    if (auto item = list_item(lines[i])) items.push_back(*item);
  return items;
}

/// Leading yes/no of a reply, case-insensitive; nullopt when neither.
inline std::optional<bool> parse_yes_no(std::string_view reply) {
  std::string t = trim(reply);
  std::size_t i = 0;
  while (i < t.size() && !std::isalpha(static_cast<unsigned char>(t[i]))) ++i;
  std::string word;
  while (i < t.size() && std::isalpha(static_cast<unsigned char>(t[i])))
    word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(t[i++]))));
  if (word == "yes") return true;
  if (word == "no") return false;
  return std::nullopt;
}

/// Chosen option index of a multiple-choice reply: an option letter at the
/// start ("B", "B.", "(B)", "Answer: B") or an exact option-name match.
inline std::optional<std::size_t> parse_choice(std::string_view reply, const std::vector<std::string>& option_names) {
  std::string t = trim(reply);
  for (std::string_view prefix : {"answer:", "Answer:", "ANSWER:"})
    if (t.rfind(prefix, 0) == 0) t = trim(std::string_view(t).substr(prefix.size()));
  std::string stripped = normalize_text(t);
  while (!stripped.empty() && stripped.back() == '.') stripped.pop_back();
  for (std::size_t i = 0; i < option_names.size(); ++i)
    if (normalize_text(option_names[i]) == stripped) return i;
  if (!t.empty() && t[0] == '(') t.erase(0, 1);
  std::size_t n = 0;
  while (n < t.size() && t[n] >= 'A' && t[n] <= 'Z') ++n;
  if (n > 0 && (n == t.size() || t[n] == '.' || t[n] == ')' || t[n] == ':' || t[n] == ' ' || t[n] == '\n')) {
    std::size_t idx = option_index(std::string_view(t).substr(0, n));
    if (idx < option_names.size()) return idx;
  }
  return std::nullopt;
}

}  // namespace coda::prompts
