#pragma once

// Deterministic mock backend serving all four roles. Every reply is a pure
// function of (request, MockConfig::seed), so full pipeline runs on the mock
// reproduce bit for bit.
//
// Geometry (embed role), with u(c) and n(k) unit Gaussian vectors seeded from
// the mock seed:
//   feature text tagged "@c"    → normalize(alpha * u(c) + (1 - alpha) * n(feature_id))
//   untagged text               → n(feature_id)
//   mock real image of c        → normalize(alpha * u(c) + (1 - alpha) * n(img))
//   mock synthetic image of c   → normalize(alpha * u(c) + (1 - alpha) * normalize(n(img) + sum n(rendered f)))
//   any other bytes             → n(img)
// where img = "img/" + sha256(bytes). Features tagged to a concept therefore
// sit close to that concept's images and roughly orthogonal to other concepts.
//
// Image bytes are a small self-describing text record:
//   CODA-MOCK-IMAGE v1
//   concept:<id>
//   kind:real|synthetic
//   index:<n>
//   seed:<n>
//   prompt:<sha256 of generation prompt>
//   features:<comma-separated feature ids that were rendered>

#include <cmath>
#include <numbers>

#include "coda/gateway.hpp"
#include "coda/prompts.hpp"

namespace coda::mock {

inline constexpr std::string_view kImageMagic = "CODA-MOCK-IMAGE v1\n";

struct MockImage {
  std::string concept_id;
  std::string kind = "real";
  std::uint64_t index = 0;
  std::uint64_t seed = 0;
  std::string prompt_hash;
  std::vector<std::string> features;

  Bytes encode() const {
    std::string out(kImageMagic);
    out += "concept:" + concept_id + "\n";
    out += "kind:" + kind + "\n";
    out += "index:" + std::to_string(index) + "\n";
    out += "seed:" + std::to_string(seed) + "\n";
    out += "prompt:" + prompt_hash + "\n";
    out += "features:";
    for (std::size_t i = 0; i < features.size(); ++i) out += (i ? "," : "") + features[i];
    out += "\n";
    return out;
  }

  static std::optional<MockImage> decode(const Bytes& bytes) {
    if (bytes.rfind(kImageMagic, 0) != 0) return std::nullopt;
    MockImage m;
    for (const auto& line : split_lines(std::string_view(bytes).substr(kImageMagic.size()))) {
      auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      std::string key = line.substr(0, colon), value = line.substr(colon + 1);
      if (key == "concept") m.concept_id = value;
      else if (key == "kind") m.kind = value;
      else if (key == "index") m.index = std::stoull(value);
      else if (key == "seed") m.seed = std::stoull(value);
      else if (key == "prompt") m.prompt_hash = value;
      else if (key == "features") {
        std::string cur;
        for (char c : value + ",") {
          if (c == ',') {
            if (!cur.empty()) m.features.push_back(cur);
            cur.clear();
          } else {
            cur.push_back(c);
          }
        }
      }
    }
    return m;
  }
};

/// Real mock image bytes for concept `concept_id`, distinguished by `index`.
inline Bytes real_image(const std::string& concept_id, std::uint64_t index) {
  MockImage m;
  m.concept_id = concept_id;
  m.index = index;
  return m.encode();
}

inline bool is_tag_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
}

/// Concept tag "@<id>" carried by a mock feature text; empty when absent.
inline std::string find_tag(std::string_view text) {
  auto at = text.find('@');
  if (at == std::string_view::npos) return {};
  std::size_t e = at + 1;
  while (e < text.size() && is_tag_char(text[e])) ++e;
  std::string tag(text.substr(at + 1, e - at - 1));
  while (!tag.empty() && tag.back() == '.') tag.pop_back();
  return tag;
}

/// True when `text` contains the token "@<concept>" (case-insensitive).
inline bool has_tag(std::string_view text, const std::string& concept_id) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  std::string needle = "@" + concept_id;
  std::transform(needle.begin(), needle.end(), needle.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto pos = lower.find(needle); pos != std::string::npos; pos = lower.find(needle, pos + 1)) {
    std::size_t end = pos + needle.size();
    if (end == lower.size() || !is_tag_char(lower[end]) || lower[end] == '.') return true;
  }
  return false;
}

enum class AnswerPolicy {
  tag_or_first,  // correct iff the prompt carries a feature tag of the true concept, else option A
  oracle,        // always correct
};

struct MockConfig {
  std::uint64_t seed = 0;
  std::size_t dim = 256;
  double alpha = 0.8;
  AnswerPolicy answer_policy = AnswerPolicy::tag_or_first;
  double render_probability = 0.95;  // per (generated image, requested feature)
  double reject_probability = 0.0;   // per generated image
  std::size_t textual_target_features = 4;
  std::size_t textual_distractors = 2;  // features tagged to the confusable concept
  std::size_t generic_features = 2;     // untagged features
  std::size_t visual_features_per_image = 3;

  json to_json() const {
    return {{"seed", seed},
            {"dim", dim},
            {"alpha", alpha},
            {"answer_policy", answer_policy == AnswerPolicy::oracle ? "oracle" : "tag_or_first"},
            {"render_probability", render_probability},
            {"reject_probability", reject_probability},
            {"textual_target_features", textual_target_features},
            {"textual_distractors", textual_distractors},
            {"generic_features", generic_features},
            {"visual_features_per_image", visual_features_per_image}};
  }

  static MockConfig from_json(const json& j) {
    MockConfig c;
    c.seed = j.value("seed", c.seed);
    c.dim = j.value("dim", c.dim);
    c.alpha = j.value("alpha", c.alpha);
    c.answer_policy = j.value("answer_policy", std::string("tag_or_first")) == "oracle" ? AnswerPolicy::oracle
                                                                                         : AnswerPolicy::tag_or_first;
    c.render_probability = j.value("render_probability", c.render_probability);
    c.reject_probability = j.value("reject_probability", c.reject_probability);
    c.textual_target_features = j.value("textual_target_features", c.textual_target_features);
    c.textual_distractors = j.value("textual_distractors", c.textual_distractors);
    c.generic_features = j.value("generic_features", c.generic_features);
    c.visual_features_per_image = j.value("visual_features_per_image", c.visual_features_per_image);
    return c;
  }
};

class MockBackend : public Backend {
 public:
  explicit MockBackend(MockConfig cfg = {}) : cfg_(cfg) {}

  const MockConfig& config() const { return cfg_; }

  // --- geometry ---------------------------------------------------------

  std::vector<double> concept_vector(const std::string& concept_id) const {
    return unit_gaussian(derive_seed(cfg_.seed, "concept/" + lower(concept_id)));
  }

  std::vector<double> noise_vector(const std::string& key) const {
    return unit_gaussian(derive_seed(cfg_.seed, "noise/" + key));
  }

  /// Mock trait k of a concept: "<colour> <part> @<concept>".
  std::string trait(const std::string& concept_id, std::size_t k) const {
    static const std::array<std::string_view, 12> kColours = {
        "crimson", "azure", "golden", "ivory", "charcoal", "olive", "amber", "teal", "rust", "violet", "silver", "ochre"};
    static const std::array<std::string_view, 10> kParts = {
        "crest", "tail band", "wing patch", "eye ring", "throat stripe", "back spots", "leg scales", "bill tip",
        "neck collar", "belly bars"};
    const std::string c = lower(concept_id);
    const std::uint64_t base = derive_seed(cfg_.seed, "trait/" + c);
    const std::string colour(kColours[derive_seed(base, std::to_string(k)) % kColours.size()]);
    const std::string part(kParts[(base + k) % kParts.size()]);
    return colour + " " + part + " @" + c;
  }

  std::string generic_feature(std::uint64_t h) const {
    static const std::array<std::string_view, 8> kGeneric = {
        "rounded body shape", "medium overall size", "natural outdoor background", "visible legs",
        "slender silhouette", "matte surface texture", "symmetric markings", "upright posture"};
    return std::string(kGeneric[h % kGeneric.size()]);
  }

  // --- Backend ----------------------------------------------------------

  std::string chat(const Messages& prompt, const DecodeParams&) override {
    const std::string text = joined(prompt);
    const std::string task = field(text, "Task");
    if (task == "textual-features") return textual_reply(field(text, "Target concept"), field(text, "Confusable concept"));
    if (task == "merge-features") return merge_reply(text);
    return "mock reply " + sha256_hex(text).substr(0, 16);
  }

  std::string vision_chat(const Bytes& image, const Messages& prompt, const DecodeParams&) override {
    const std::string text = joined(prompt);
    const std::string task = field(text, "Task");
    const auto rec = MockImage::decode(image);
    if (task == "visual-features") {
      std::string concept_id = rec ? rec->concept_id : field(text, "Target concept");
      return visual_reply(concept_id, sha256_hex(image));
    }
    if (task == "verify-feature") return verify_reply(rec, field(text, "Feature"));
    if (task == "classify") return classify_reply(rec, text);
    if (rec) return "This image shows " + rec->concept_id + ".";
    return "I cannot tell what this image shows.";
  }

  std::vector<double> embed_text(const std::string& text) override {
    const std::string norm = normalize_text(text);
    const std::string tag = find_tag(norm);
    auto noise = noise_vector(feature_id(norm));
    if (tag.empty()) return noise;
    return mix(concept_vector(tag), noise);
  }

  std::vector<double> embed_image(const Bytes& image) override {
    const std::string key = "img/" + sha256_hex(image);
    auto noise = noise_vector(key);
    auto rec = MockImage::decode(image);
    if (!rec) return noise;
    if (rec->kind == "synthetic") {
      for (const auto& f : rec->features) {
        auto v = noise_vector(f);
        for (std::size_t i = 0; i < noise.size(); ++i) noise[i] += v[i];
      }
      normalize(noise);
    }
    return mix(concept_vector(rec->concept_id), noise);
  }

  GeneratedImages generate_image(const std::string& prompt, std::size_t n, std::uint64_t seed) override {
    static constexpr std::string_view kLead = "photo of a ";
    static constexpr std::string_view kShow = ", clearly showing: ";
    std::string concept_id;
    std::vector<std::string> feature_texts;
    auto lead = prompt.find(kLead);
    auto show = prompt.find(kShow);
    if (lead != std::string::npos && show != std::string::npos && show > lead) {
      concept_id = prompt.substr(lead + kLead.size(), show - lead - kLead.size());
      std::string rest = prompt.substr(show + kShow.size());
      if (!rest.empty() && rest.back() == '.') rest.pop_back();
      std::size_t pos = 0;
      while (pos <= rest.size()) {
        auto semi = rest.find("; ", pos);
        std::string item = rest.substr(pos, semi == std::string::npos ? std::string::npos : semi - pos);
        if (!trim(item).empty()) feature_texts.push_back(item);
        if (semi == std::string::npos) break;
        pos = semi + 2;
      }
    }
    const std::string prompt_hash = sha256_hex(prompt);
    GeneratedImages out;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string stem = prompt_hash + "/" + std::to_string(seed) + "/" + std::to_string(i);
      if (unit(derive_seed(cfg_.seed, "reject/" + stem)) < cfg_.reject_probability) {
        out.rejections.push_back("content policy (mock) for image " + std::to_string(i));
        continue;
      }
      MockImage m;
      m.concept_id = lower(concept_id);
      m.kind = "synthetic";
      m.index = i;
      m.seed = seed;
      m.prompt_hash = prompt_hash;
      for (const auto& f : feature_texts) {
        const std::string fid = feature_id(f);
        if (unit(derive_seed(cfg_.seed, "render/" + stem + "/" + fid)) < cfg_.render_probability)
          m.features.push_back(fid);
      }
      out.images.push_back(m.encode());
    }
    return out;
  }

 private:
  static std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
  }

  static double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

  static void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
  }

  std::vector<double> unit_gaussian(std::uint64_t seed) const {
    SplitMix64 rng(seed);
    std::vector<double> v(cfg_.dim);
    for (std::size_t i = 0; i < cfg_.dim; i += 2) {
      double u1 = 1.0 - rng.uniform();  // (0, 1]
      double u2 = rng.uniform();
      double r = std::sqrt(-2.0 * std::log(u1));
      v[i] = r * std::cos(2.0 * std::numbers::pi * u2);
      if (i + 1 < cfg_.dim) v[i + 1] = r * std::sin(2.0 * std::numbers::pi * u2);
    }
    normalize(v);
    return v;
  }

  std::vector<double> mix(const std::vector<double>& concept_id, const std::vector<double>& noise) const {
    std::vector<double> v(concept_id.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = cfg_.alpha * concept_id[i] + (1.0 - cfg_.alpha) * noise[i];
    normalize(v);
    return v;
  }

  static std::string joined(const Messages& prompt) {
    std::string text;
    for (const auto& m : prompt) text += m.text + "\n";
    return text;
  }

  /// Value of the first "<name>: value" line.
  static std::string field(const std::string& text, const std::string& name) {
    for (const auto& line : split_lines(text)) {
      std::string t = trim(line);
      if (t.rfind(name + ":", 0) == 0) return trim(std::string_view(t).substr(name.size() + 1));
    }
    return {};
  }

  static std::string numbered(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += std::to_string(i + 1) + ". " + items[i] + "\n";
    return out;
  }

  std::string textual_reply(const std::string& target, const std::string& against) const {
    std::vector<std::string> items;
    for (std::size_t k = 0; k < cfg_.textual_target_features; ++k) items.push_back(trait(target, k));
    if (!against.empty())
      for (std::size_t k = 0; k < cfg_.textual_distractors; ++k) items.push_back(trait(against, k));
    const std::uint64_t h = derive_seed(cfg_.seed, "generic/" + lower(target));
    for (std::size_t k = 0; k < cfg_.generic_features; ++k) items.push_back(generic_feature(h + k));
    std::string reply = "Reasoning: a " + target + " can be recognized by several visible traits";
    if (!against.empty()) reply += " that a " + against + " lacks";
    return reply + ".\nFeatures:\n" + numbered(items);
  }

  std::string visual_reply(const std::string& concept_id, const std::string& image_hash) const {
    std::vector<std::string> items;
    std::vector<std::size_t> pool = {2, 3, 4, 5, 6, 7};
    seeded_shuffle(pool, derive_seed(cfg_.seed, "visual/" + image_hash));
    for (std::size_t k = 0; k < std::min(cfg_.visual_features_per_image, pool.size()); ++k)
      items.push_back(trait(concept_id, pool[k]));
    items.push_back(generic_feature(derive_seed(cfg_.seed, "visual-generic/" + image_hash)));
    return numbered(items);
  }

  std::string merge_reply(const std::string& text) const {
    std::vector<std::string> items;
    std::vector<std::string> seen;
    for (const auto& item : prompts::parse_list(text)) {
      auto n = normalize_text(item);
      if (std::find(seen.begin(), seen.end(), n) != seen.end()) continue;
      seen.push_back(n);
      items.push_back(item);
    }
    return numbered(items);
  }

  std::string verify_reply(const std::optional<MockImage>& rec, const std::string& feature) const {
    if (!rec) return "No.";
    if (rec->kind == "synthetic") {
      const std::string fid = feature_id(feature);
      bool present = std::find(rec->features.begin(), rec->features.end(), fid) != rec->features.end();
      return present ? "Yes." : "No.";
    }
    return find_tag(normalize_text(feature)) == lower(rec->concept_id) ? "Yes." : "No.";
  }

  std::string classify_reply(const std::optional<MockImage>& rec, const std::string& text) const {
    std::vector<std::string> names;
    for (const auto& line : split_lines(text)) {
      if (line.rfind("Distinguishing features", 0) == 0) break;
      auto dot = line.find(". ");
      if (dot == std::string::npos || dot == 0) continue;
      if (prompts::option_index(std::string_view(line).substr(0, dot)) != names.size()) continue;
      names.push_back(trim(std::string_view(line).substr(dot + 2)));
    }
    if (names.empty()) return "A";
    if (rec) {
      const std::string gold = lower(rec->concept_id);
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (lower(names[i]) != gold) continue;
        if (cfg_.answer_policy == AnswerPolicy::oracle || has_tag(text, gold)) return prompts::option_label(i);
      }
    }
    return "A";
  }

  MockConfig cfg_;
};

}  // namespace coda::mock
