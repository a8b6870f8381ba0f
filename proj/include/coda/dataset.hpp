#pragma once

// Corpus layout, manifest record stream, ingestion, seeded splits and
// integrity verification.
//
// Layout:   <root>/<concept-id>/<image-file>
//           <root>/_synthetic/<concept-id>/<asset-id>.img   (generated images)
//
// Manifest: one JSON object per line.
//   {"record":"header","version":1,"seed":N,"root":"<root relative to manifest dir>"}
//   {"record":"concept","id":..,"canonical_name":..,"aliases":[..],"supercategory":..|null,
//    "images":[asset ids],"splits":{"train":[..],"val":[..],"test":[..]}}
//   {"record":"asset","id":<sha256 of bytes>,"path":<root-relative>,"provenance":"real"|"synthetic",
//    "source_features":[..],"satisfaction":x|null}
// Unknown keys on any record are carried through load/save unchanged.

#include <map>
#include <set>

#include "coda/core.hpp"

namespace coda {

inline constexpr int kManifestVersion = 1;
inline constexpr std::string_view kSyntheticDir = "_synthetic";
inline const std::array<std::string, 3> kSplitNames = {"train", "val", "test"};

enum class Provenance { real, synthetic };

inline std::string to_string(Provenance p) { return p == Provenance::real ? "real" : "synthetic"; }

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "real") return Provenance::real;
  if (s == "synthetic") return Provenance::synthetic;
  throw IntegrityError("unknown provenance: " + s);
}

struct ImageAsset {
  std::string id;
  std::string path;  // corpus-relative, '/' separated
  Provenance provenance = Provenance::real;
  std::vector<std::string> source_features;
  std::optional<double> satisfaction;
  json extra = json::object();

  json to_json() const {
    json j = extra;
    j["record"] = "asset";
    j["id"] = id;
    j["path"] = path;
    j["provenance"] = to_string(provenance);
    j["source_features"] = source_features;
    j["satisfaction"] = satisfaction ? json(*satisfaction) : json(nullptr);
    return j;
  }

  static ImageAsset from_json(const json& j) {
    ImageAsset a;
    a.id = j.at("id").get<std::string>();
    a.path = j.at("path").get<std::string>();
    a.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    a.source_features = j.value("source_features", std::vector<std::string>{});
    if (j.contains("satisfaction") && !j["satisfaction"].is_null()) a.satisfaction = j["satisfaction"].get<double>();
    a.extra = unknown_fields(j, {"record", "id", "path", "provenance", "source_features", "satisfaction"});
    return a;
  }
};

struct Concept {
  std::string id;
  std::string canonical_name;
  std::vector<std::string> aliases;
  std::optional<std::string> supercategory;
  std::vector<std::string> images;
  std::map<std::string, std::vector<std::string>> splits;
  json extra = json::object();

  const std::vector<std::string>& split(const std::string& name) const {
    static const std::vector<std::string> kEmpty;
    auto it = splits.find(name);
    return it == splits.end() ? kEmpty : it->second;
  }

  json to_json() const {
    json j = extra;
    j["record"] = "concept";
    j["id"] = id;
    j["canonical_name"] = canonical_name;
    j["aliases"] = aliases;
    j["supercategory"] = supercategory ? json(*supercategory) : json(nullptr);
    j["images"] = images;
    json s = json::object();
    for (const auto& name : kSplitNames) s[name] = split(name);
    for (const auto& [name, ids] : splits) s[name] = ids;
    j["splits"] = s;
    return j;
  }

  static Concept from_json(const json& j) {
    Concept c;
    c.id = j.at("id").get<std::string>();
    c.canonical_name = j.value("canonical_name", c.id);
    c.aliases = j.value("aliases", std::vector<std::string>{});
    if (j.contains("supercategory") && !j["supercategory"].is_null())
      c.supercategory = j["supercategory"].get<std::string>();
    c.images = j.value("images", std::vector<std::string>{});
    if (j.contains("splits")) {
      for (auto it = j["splits"].begin(); it != j["splits"].end(); ++it) {
        auto ids = it.value().get<std::vector<std::string>>();
        if (!ids.empty()) c.splits[it.key()] = std::move(ids);
      }
    }
    c.extra = unknown_fields(j, {"record", "id", "canonical_name", "aliases", "supercategory", "images", "splits"});
    return c;
  }
};

struct CorpusManifest {
  int version = kManifestVersion;
  std::uint64_t seed = 0;
  fs::path root;                         // absolute in memory
  std::vector<Concept> concepts;         // sorted by id
  std::map<std::string, ImageAsset> assets;
  json header_extra = json::object();

  const Concept* find_concept(const std::string& id) const {
    auto it = std::lower_bound(concepts.begin(), concepts.end(), id,
                               [](const Concept& c, const std::string& k) { return c.id < k; });
    return (it == concepts.end() || it->id != id) ? nullptr : &*it;
  }

  const Concept& get_concept(const std::string& id) const {
    if (const Concept* c = find_concept(id)) return *c;
    throw PreconditionError("unknown concept: " + id);
  }

  bool has_concept(const std::string& id) const { return find_concept(id) != nullptr; }

  const ImageAsset& asset(const std::string& id) const {
    auto it = assets.find(id);
    if (it == assets.end()) throw PreconditionError("unknown asset: " + id);
    return it->second;
  }

  fs::path resolve(const ImageAsset& a) const { return root / fs::path(a.path); }

  Bytes read_asset(const std::string& id) const { return read_file(resolve(asset(id))); }

  std::vector<json> to_records(const fs::path& manifest_path) const {
    std::vector<json> out;
    json header = header_extra;
    header["record"] = "header";
    header["version"] = version;
    header["seed"] = seed;
    fs::path base = fs::absolute(manifest_path).parent_path();
    header["root"] = fs::absolute(root).lexically_normal().lexically_relative(base.lexically_normal()).generic_string();
    out.push_back(header);
    for (const auto& c : concepts) out.push_back(c.to_json());
    for (const auto& [id, a] : assets) out.push_back(a.to_json());
    return out;
  }

  void save(const fs::path& manifest_path) const { write_records(manifest_path, to_records(manifest_path)); }

  static CorpusManifest load(const fs::path& manifest_path) {
    auto records = read_records(manifest_path);
    if (records.empty() || records.front().value("record", "") != "header")
      throw IntegrityError("manifest must start with a header record: " + manifest_path.string());
    CorpusManifest m;
    const json& h = records.front();
    m.version = h.at("version").get<int>();
    if (m.version != kManifestVersion)
      throw IntegrityError("unsupported manifest version " + std::to_string(m.version));
    m.seed = h.at("seed").get<std::uint64_t>();
    fs::path base = fs::absolute(manifest_path).parent_path();
    m.root = (base / h.value("root", ".")).lexically_normal();
    m.header_extra = unknown_fields(h, {"record", "version", "seed", "root"});
    for (std::size_t i = 1; i < records.size(); ++i) {
      const auto& r = records[i];
      auto kind = r.value("record", "");
      if (kind == "concept") {
        m.concepts.push_back(Concept::from_json(r));
      } else if (kind == "asset") {
        auto a = ImageAsset::from_json(r);
        m.assets.emplace(a.id, std::move(a));
      } else {
        throw IntegrityError("unknown manifest record kind '" + kind + "'");
      }
    }
    std::sort(m.concepts.begin(), m.concepts.end(), [](const Concept& a, const Concept& b) { return a.id < b.id; });
    return m;
  }
};

// --- ingest -----------------------------------------------------------------

struct LayoutDescriptor {
  /// Lowercase extensions (with dot) accepted as images; empty accepts every regular file.
  std::vector<std::string> extensions = {".jpg", ".jpeg", ".png", ".webp", ".bmp", ".gif", ".img"};
  /// Canonical name derived from the directory name with '_' replaced by ' '.
  bool underscore_to_space = true;
  std::size_t hash_workers = 4;
};

inline CorpusManifest ingest(const fs::path& root_dir, const LayoutDescriptor& layout = {}, std::uint64_t seed = 0) {
  if (!fs::is_directory(root_dir)) throw IngestionError("corpus root is not a directory: " + root_dir.string());
  CorpusManifest m;
  m.seed = seed;
  m.root = fs::absolute(root_dir).lexically_normal();

  std::vector<fs::path> concept_dirs;
  for (const auto& e : fs::directory_iterator(root_dir)) {
    auto name = e.path().filename().string();
    if (!e.is_directory() || name.empty() || name[0] == '_' || name[0] == '.') continue;
    concept_dirs.push_back(e.path());
  }
  std::sort(concept_dirs.begin(), concept_dirs.end());

  for (const auto& dir : concept_dirs) {
    const std::string concept_id = dir.filename().string();
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file() && !e.is_symlink()) continue;
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (!layout.extensions.empty() &&
          std::find(layout.extensions.begin(), layout.extensions.end(), ext) == layout.extensions.end())
        continue;
      files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());

    std::vector<std::string> hashes(files.size());
    parallel_for(files.size(), layout.hash_workers, [&](std::size_t i) {
      try {
        hashes[i] = sha256_hex(read_file(files[i]));
      } catch (const Error&) {
        throw IngestionError("cannot read image file: " + files[i].string());
      }
    });

    Concept c;
    c.id = concept_id;
    c.canonical_name = concept_id;
    if (layout.underscore_to_space) std::replace(c.canonical_name.begin(), c.canonical_name.end(), '_', ' ');
    std::set<std::string> seen;
    for (std::size_t i = 0; i < files.size(); ++i) {
      const auto& h = hashes[i];
      if (!seen.insert(h).second) {
        warn("duplicate image bytes in concept '" + concept_id + "': " + files[i].string() + " (deduplicated)");
        continue;
      }
      ImageAsset a;
      a.id = h;
      a.path = fs::relative(files[i], root_dir).generic_string();
      a.provenance = Provenance::real;
      if (!m.assets.emplace(h, a).second)
        warn("image " + files[i].string() + " duplicates an asset of another concept; sharing asset " + h);
      c.images.push_back(h);
    }
    if (c.images.empty()) {
      warn("concept directory '" + concept_id + "' has no images; skipped");
      continue;
    }
    std::sort(c.images.begin(), c.images.end());
    m.concepts.push_back(std::move(c));
  }
  return m;
}

// --- split ------------------------------------------------------------------

/// One seeded shuffle per concept; first train_n → train, next val_n → val,
/// next test_n → test. Seed per concept: derive_seed(manifest.seed, "split/<id>").
inline CorpusManifest split(const CorpusManifest& in, std::size_t train_n, std::size_t val_n, std::size_t test_n) {
  const std::size_t need = train_n + val_n + test_n;
  std::vector<std::string> short_ids;
  for (const auto& c : in.concepts)
    if (c.images.size() < need) short_ids.push_back(c.id + " (" + std::to_string(c.images.size()) + ")");
  if (!short_ids.empty()) {
    std::string msg = "concepts with fewer than " + std::to_string(need) + " images:";
    for (const auto& s : short_ids) msg += " " + s;
    throw PreconditionError(msg);
  }
  CorpusManifest out = in;
  for (auto& c : out.concepts) {
    std::vector<std::string> order = c.images;
    std::sort(order.begin(), order.end());
    seeded_shuffle(order, derive_seed(out.seed, "split/" + c.id));
    c.splits.clear();
    const std::size_t sizes[3] = {train_n, val_n, test_n};
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      std::vector<std::string> ids(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                   order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[s]));
      pos += sizes[s];
      if (!ids.empty()) c.splits[kSplitNames[s]] = std::move(ids);
    }
  }
  return out;
}

// --- verify -----------------------------------------------------------------

struct Violation {
  std::string kind;  // "missing file", "hash mismatch", "invariant"
  std::string detail;
};

inline std::vector<Violation> verify(const CorpusManifest& m) {
  std::vector<Violation> out;
  std::set<std::string> ids;
  for (const auto& c : m.concepts) {
    if (!ids.insert(c.id).second) out.push_back({"invariant", "duplicate concept id " + c.id});
    std::set<std::string> images(c.images.begin(), c.images.end());
    std::set<std::string> in_splits;
    for (const auto& [name, members] : c.splits) {
      for (const auto& id : members) {
        if (!images.count(id)) out.push_back({"invariant", c.id + ": split " + name + " member " + id + " not in images"});
        if (!in_splits.insert(id).second) out.push_back({"invariant", c.id + ": asset " + id + " in more than one split"});
      }
    }
    for (const auto& id : c.images)
      if (!m.assets.count(id)) out.push_back({"invariant", c.id + ": image " + id + " has no asset record"});
  }
  for (const auto& [id, a] : m.assets) {
    if (a.provenance == Provenance::real && (!a.source_features.empty() || a.satisfaction))
      out.push_back({"invariant", "real asset " + id + " carries synthetic-only fields"});
    fs::path p = m.resolve(a);
    if (!fs::exists(p)) {
      out.push_back({"missing file", p.string()});
      continue;
    }
    try {
      if (sha256_hex(read_file(p)) != id) out.push_back({"hash mismatch", p.string()});
    } catch (const Error&) {
      out.push_back({"missing file", p.string() + " (unreadable)"});
    }
  }
  return out;
}

}  // namespace coda
