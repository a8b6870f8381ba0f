#pragma once

// Shared plumbing: error types, content hashing, the seeded PRNG used for every
// deterministic sampling step, text normalization, record-stream I/O and
// atomic file output.

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unistd.h>
#include <vector>

#include <openssl/evp.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "json.hpp"

namespace coda {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Bytes = std::string;

// --- errors ---------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ConflictError : public Error {
 public:
  using Error::Error;
};

class MissingInputError : public Error {
 public:
  explicit MissingInputError(const fs::path& p)
      : Error("missing input file: " + p.string()), path(p) {}
  fs::path path;
};

// --- warnings -------------------------------------------------------------

/// Process-wide warning sink. Warnings go to stderr unless a capture is active.
class Warnings {
 public:
  static Warnings& instance() {
    static Warnings w;
    return w;
  }

  void emit(const std::string& msg) {
    std::lock_guard lock(mu_);
    if (capture_ != nullptr) {
      capture_->push_back(msg);
    } else if (!quiet_) {
      std::cerr << "warning: " << msg << '\n';
    }
  }

  void set_capture(std::vector<std::string>* sink) {
    std::lock_guard lock(mu_);
    capture_ = sink;
  }

  void set_quiet(bool quiet) {
    std::lock_guard lock(mu_);
    quiet_ = quiet;
  }

 private:
  std::mutex mu_;
  std::vector<std::string>* capture_ = nullptr;
  bool quiet_ = false;
};

inline void warn(const std::string& msg) { Warnings::instance().emit(msg); }

/// Collects warnings for the lifetime of the object.
class WarningCapture {
 public:
  WarningCapture() { Warnings::instance().set_capture(&messages_); }
  ~WarningCapture() { Warnings::instance().set_capture(nullptr); }
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }
  bool contains(std::string_view needle) const {
    return std::any_of(messages_.begin(), messages_.end(),
                       [&](const std::string& m) { return m.find(needle) != std::string::npos; });
  }

 private:
  std::vector<std::string> messages_;
};

// --- hashing --------------------------------------------------------------

inline std::string to_hex(const unsigned char* data, std::size_t n) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(n * 2, '0');
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = kDigits[data[i] >> 4];
    out[2 * i + 1] = kDigits[data[i] & 0xf];
  }
  return out;
}

/// SHA-256 of raw bytes, lowercase hex.
inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  return to_hex(digest, len);
}

/// First 8 bytes of SHA-256 as a big-endian integer.
inline std::uint64_t sha256_u64(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | digest[i];
  return v;
}

inline std::string base64_encode(std::string_view in) {
  std::string out(4 * ((in.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(in.data()),
                          static_cast<int>(in.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string base64_decode(std::string_view in) {
  if (in.size() % 4 != 0) throw Error("invalid base64 length");
  std::string out(3 * in.size() / 4, '\0');
  int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(in.data()),
                          static_cast<int>(in.size()));
  if (n < 0) throw Error("invalid base64 payload");
  std::size_t pad = 0;
  if (!in.empty() && in.back() == '=') ++pad;
  if (in.size() > 1 && in[in.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// --- deterministic randomness ---------------------------------------------

/// SplitMix64 (Steele, Lea & Flood). Every seeded shuffle and sample in the
/// pipeline is driven by this generator so outputs are reproducible across
/// implementations:
///   state += 0x9E3779B97F4A7C15
///   z = state; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9
///   z = (z ^ z>>27) * 0x94D049BB133111EB; return z ^ z>>31
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform integer in [0, bound) by rejection; bound > 0.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r = next();
    while (r >= limit) r = next();
    return r % bound;
  }

  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

/// Independent sub-stream seed: first 8 bytes of sha256("<seed>/<label>").
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return sha256_u64(std::to_string(seed) + "/" + std::string(label));
}

/// Fisher–Yates, walking from the back: for i = n-1 .. 1, swap(v[i], v[below(i+1)]).
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

// --- text -----------------------------------------------------------------

/// NFC, lowercase, trimmed, internal whitespace collapsed to single spaces.
inline std::string normalize_text(std::string_view raw) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
  icu::UnicodeString src = icu::UnicodeString::fromUTF8(
      icu::StringPiece(raw.data(), static_cast<int32_t>(raw.size())));
  icu::UnicodeString folded = nfc->normalize(src, status);
  if (U_FAILURE(status)) throw Error("NFC normalization failed");
  folded.toLower();
  folded = nfc->normalize(folded, status);
  std::string utf8;
  folded.toUTF8String(utf8);

  std::string out;
  out.reserve(utf8.size());
  bool pending_space = false;
  for (char c : utf8) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

/// Feature identity: sha256 of the normalized text.
inline std::string feature_id(std::string_view text) { return sha256_hex(normalize_text(text)); }

/// Number of Unicode code points in a UTF-8 string.
inline std::size_t utf8_length(std::string_view s) {
  return static_cast<std::size_t>(std::count_if(
      s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_lines(std::string_view s) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : s) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

// --- files ----------------------------------------------------------------

inline Bytes read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read file: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error("cannot read file: " + p.string());
  return ss.str();
}

/// Writes to a sibling temp file; the target only appears on commit().
/// Destroying an uncommitted writer removes the temp file.
class AtomicFile {
 public:
  explicit AtomicFile(fs::path target) : target_(std::move(target)) {
    static std::atomic<unsigned> counter{0};
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    tmp_ = target_;
    tmp_ += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error("cannot open for writing: " + tmp_.string());
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;

  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      fs::remove(tmp_, ec);
    }
  }

  std::ostream& stream() { return out_; }
  const fs::path& temp_path() const { return tmp_; }

  void commit() {
    out_.flush();
    if (!out_) throw Error("write failed: " + tmp_.string());
    out_.close();
    fs::rename(tmp_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

inline void write_file_atomic(const fs::path& p, std::string_view data) {
  AtomicFile f(p);
  f.stream().write(data.data(), static_cast<std::streamsize>(data.size()));
  f.commit();
}

// --- record streams (one JSON object per line) ------------------------------

inline std::vector<json> read_records(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInputError(p);
  std::ifstream in(p);
  if (!in) throw Error("cannot read file: " + p.string());
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw IntegrityError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string dump_records(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out.push_back('\n');
  }
  return out;
}

inline void write_records(const fs::path& p, const std::vector<json>& records) {
  write_file_atomic(p, dump_records(records));
}

/// Copies every key of `src` not listed in `known` into a fresh object.
inline json unknown_fields(const json& src, std::initializer_list<std::string_view> known) {
  json extra = json::object();
  for (auto it = src.begin(); it != src.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) extra[it.key()] = it.value();
  }
  return extra;
}

// --- parallelism ------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results are written by
/// index, so callers get deterministic output regardless of completion order.
/// The first exception thrown by any task is rethrown after all threads join.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace coda
