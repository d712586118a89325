#pragma once

// Precomputed frame-feature storage, manifests, and frame sampling.
//
// Feature file layout (all integers little-endian):
//
//   offset  size  field
//        0     4  magic "TFAT"
//        4     2  format version (1)
//        6     1  dtype code (0 = float32, 1 = float64)
//        7     1  reserved (0)
//        8     8  n_frames (rows)
//       16     8  feat_dim (cols)
//       24     4  CRC32 of the payload bytes
//       28     4  reserved (0)
//       32     *  row-major payload
//
// Video features are always written as float32. float64 blocks are used for
// checkpointed parameters, which must round-trip exactly.

#include <zlib.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "transferattn/rng.hpp"
#include "transferattn/tensor.hpp"

namespace transferattn {

static_assert(std::endian::native == std::endian::little, "feature files assume a little-endian host");

enum class Domain : std::uint8_t { source = 0, target = 1 };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain \"" + s + "\" (expected source|target)");
}

enum class DType : std::uint8_t { float32 = 0, float64 = 1 };

class FormatError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, bad_dtype, truncated, checksum, invalid_value };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

inline constexpr std::array<char, 4> kFeatureMagic{'T', 'F', 'A', 'T'};
inline constexpr std::uint16_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderSize = 32;

struct BlockHeader {
  std::uint16_t version = kFeatureVersion;
  DType dtype = DType::float32;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::uint32_t crc = 0;

  std::size_t payload_bytes() const {
    return static_cast<std::size_t>(rows * cols) * (dtype == DType::float32 ? 4 : 8);
  }
};

namespace detail {

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <class T>
void put_le(unsigned char* dst, T v) {
  std::memcpy(dst, &v, sizeof(T));
}

template <class T>
T get_le(const unsigned char* src) {
  T v;
  std::memcpy(&v, src, sizeof(T));
  return v;
}

inline std::array<unsigned char, kFeatureHeaderSize> encode_header(const BlockHeader& h) {
  std::array<unsigned char, kFeatureHeaderSize> b{};
  std::memcpy(b.data(), kFeatureMagic.data(), 4);
  put_le<std::uint16_t>(b.data() + 4, h.version);
  b[6] = static_cast<unsigned char>(h.dtype);
  b[7] = 0;
  put_le<std::uint64_t>(b.data() + 8, h.rows);
  put_le<std::uint64_t>(b.data() + 16, h.cols);
  put_le<std::uint32_t>(b.data() + 24, h.crc);
  return b;
}

inline BlockHeader decode_header(const unsigned char* b, const std::string& where) {
  if (std::memcmp(b, kFeatureMagic.data(), 4) != 0)
    throw FormatError(FormatError::Kind::bad_magic, where + ": bad magic (not a TFAT feature block)");
  BlockHeader h;
  h.version = get_le<std::uint16_t>(b + 4);
  if (h.version != kFeatureVersion)
    throw FormatError(FormatError::Kind::version_mismatch,
                      where + ": unsupported format version " + std::to_string(h.version));
  if (b[6] > 1) throw FormatError(FormatError::Kind::bad_dtype, where + ": unknown dtype code " + std::to_string(b[6]));
  h.dtype = static_cast<DType>(b[6]);
  h.rows = get_le<std::uint64_t>(b + 8);
  h.cols = get_le<std::uint64_t>(b + 16);
  h.crc = get_le<std::uint32_t>(b + 24);
  if (h.rows == 0 || h.cols == 0)
    throw FormatError(FormatError::Kind::invalid_value, where + ": zero-sized block");
  return h;
}

}  // namespace detail

/// Writes one block (header + payload). `values` is row-major rows x cols.
inline void write_block(std::ostream& os, std::uint64_t rows, std::uint64_t cols, std::span<const double> values,
                        DType dtype) {
  if (values.size() != rows * cols) throw ShapeError("write_block: value count does not match rows x cols");
  std::vector<unsigned char> payload;
  if (dtype == DType::float32) {
    payload.resize(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) detail::put_le<float>(&payload[i * 4], static_cast<float>(values[i]));
  } else {
    payload.resize(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) detail::put_le<double>(&payload[i * 8], values[i]);
  }
  BlockHeader h{kFeatureVersion, dtype, rows, cols, detail::crc32_of(payload.data(), payload.size())};
  auto hb = detail::encode_header(h);
  os.write(reinterpret_cast<const char*>(hb.data()), hb.size());
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw FormatError(FormatError::Kind::io, "write_block: stream write failed");
}

struct Block {
  BlockHeader header;
  std::vector<double> values;
};

inline Block read_block(std::istream& is, const std::string& where) {
  std::array<unsigned char, kFeatureHeaderSize> hb{};
  is.read(reinterpret_cast<char*>(hb.data()), hb.size());
  if (is.gcount() != static_cast<std::streamsize>(hb.size()))
    throw FormatError(FormatError::Kind::truncated, where + ": truncated header");
  Block b{detail::decode_header(hb.data(), where), {}};
  std::vector<unsigned char> payload(b.header.payload_bytes());
  is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (is.gcount() != static_cast<std::streamsize>(payload.size()))
    throw FormatError(FormatError::Kind::truncated, where + ": truncated payload (expected " +
                                                        std::to_string(payload.size()) + " bytes, got " +
                                                        std::to_string(is.gcount()) + ")");
  if (detail::crc32_of(payload.data(), payload.size()) != b.header.crc)
    throw FormatError(FormatError::Kind::checksum, where + ": payload checksum mismatch");
  const std::size_t n = b.header.rows * b.header.cols;
  b.values.resize(n);
  if (b.header.dtype == DType::float32)
    for (std::size_t i = 0; i < n; ++i) b.values[i] = detail::get_le<float>(&payload[i * 4]);
  else
    for (std::size_t i = 0; i < n; ++i) b.values[i] = detail::get_le<double>(&payload[i * 8]);
  return b;
}

// ---------------------------------------------------------------------------
// Videos

struct VideoFeatures {
  std::string video_id;
  Domain domain = Domain::source;
  std::optional<int> label;
  std::size_t n_frames = 0;
  std::size_t feat_dim = 0;
  std::vector<float> frames;  // row-major [n_frames x feat_dim]

  float at(std::size_t frame, std::size_t c) const { return frames[frame * feat_dim + c]; }
};

inline void write_features(const VideoFeatures& v, const std::filesystem::path& path) {
  if (v.n_frames == 0 || v.feat_dim == 0 || v.frames.size() != v.n_frames * v.feat_dim)
    throw ShapeError("write_features: frame matrix does not match n_frames x feat_dim for " + v.video_id);
  std::vector<double> vals(v.frames.size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (!std::isfinite(v.frames[i]))
      throw FormatError(FormatError::Kind::invalid_value, "write_features: non-finite value in " + v.video_id);
    vals[i] = v.frames[i];
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::io, "cannot open " + path.string() + " for writing");
  write_block(os, v.n_frames, v.feat_dim, vals, DType::float32);
}

inline BlockHeader read_feature_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  std::array<unsigned char, kFeatureHeaderSize> hb{};
  is.read(reinterpret_cast<char*>(hb.data()), hb.size());
  if (is.gcount() != static_cast<std::streamsize>(hb.size()))
    throw FormatError(FormatError::Kind::truncated, path.string() + ": truncated header");
  return detail::decode_header(hb.data(), path.string());
}

/// Reads the frame matrix. Identity and label metadata live in the manifest and
/// are left default here.
inline VideoFeatures read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  Block b = read_block(is, path.string());
  VideoFeatures v;
  v.video_id = path.stem().string();
  v.n_frames = b.header.rows;
  v.feat_dim = b.header.cols;
  v.frames.resize(b.values.size());
  for (std::size_t i = 0; i < b.values.size(); ++i) v.frames[i] = static_cast<float>(b.values[i]);
  return v;
}

// ---------------------------------------------------------------------------
// Manifest (JSON lines: one header object, then one object per video)

struct VideoRecord {
  std::string id;
  std::string path;  // relative to the manifest directory
  Domain domain = Domain::source;
  std::optional<int> label;
  std::size_t n_frames = 0;
};

struct Manifest {
  std::string dataset;
  std::size_t feat_dim = 0;
  std::vector<std::string> classes;
  std::vector<VideoRecord> videos;
  std::filesystem::path root;  // directory against which record paths resolve

  std::filesystem::path resolve(const VideoRecord& r) const { return root / r.path; }

  const VideoRecord& find(const std::string& id) const {
    for (auto& v : videos)
      if (v.id == id) return v;
    throw LookupError("manifest " + dataset + " has no video \"" + id + "\"");
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (auto& v : videos) out.push_back(v.id);
    return out;
  }

  /// Checks that each feature file exists and agrees with the manifest.
  void validate() const {
    for (auto& r : videos) {
      auto h = read_feature_header(resolve(r));
      if (h.rows != r.n_frames || h.cols != feat_dim)
        throw FormatError(FormatError::Kind::invalid_value,
                          r.id + ": file header " + std::to_string(h.rows) + "x" + std::to_string(h.cols) +
                              " disagrees with manifest " + std::to_string(r.n_frames) + "x" +
                              std::to_string(feat_dim));
    }
  }
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ManifestError("cannot open " + path.string() + " for writing");
  nlohmann::ordered_json head;
  head["dataset"] = m.dataset;
  head["feat_dim"] = m.feat_dim;
  head["classes"] = m.classes;
  os << head.dump() << '\n';
  for (auto& r : m.videos) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["path"] = r.path;
    j["domain"] = to_string(r.domain);
    j["n_frames"] = r.n_frames;
    if (r.label) j["label"] = *r.label;
    os << j.dump() << '\n';
  }
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ManifestError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestError(where + ": " + e.what());
    }
    if (!j.is_object()) throw ManifestError(where + ": expected a JSON object");
    try {
      if (j.contains("dataset")) {
        m.dataset = j.at("dataset").get<std::string>();
        m.feat_dim = j.at("feat_dim").get<std::size_t>();
        if (j.contains("classes")) m.classes = j.at("classes").get<std::vector<std::string>>();
        have_header = true;
        continue;
      }
      VideoRecord r;
      for (const char* key : {"id", "path", "domain", "n_frames"})
        if (!j.contains(key)) throw ManifestError(where + ": missing required key \"" + key + "\"");
      r.id = j.at("id").get<std::string>();
      r.path = j.at("path").get<std::string>();
      r.domain = parse_domain(j.at("domain").get<std::string>());
      r.n_frames = j.at("n_frames").get<std::size_t>();
      if (r.n_frames == 0) throw ManifestError(where + ": n_frames must be >= 1");
      if (j.contains("label") && !j.at("label").is_null()) r.label = j.at("label").get<int>();
      if (r.domain == Domain::source && !r.label)
        throw ManifestError(where + ": source video \"" + r.id + "\" has no label");
      m.videos.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ManifestError(where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ManifestError(where + ": " + e.what());
    }
  }
  if (!have_header) throw ManifestError(path.string() + ": missing header line with dataset/feat_dim");
  return m;
}

// ---------------------------------------------------------------------------
// Frame sampling

enum class SampleMode { train_random, eval_center };

/// Splits [0, n) into k segments [floor(i n / k), floor((i+1) n / k)) and picks one
/// frame per segment. Empty segments (n < k) take their start frame, which keeps
/// the sequence non-decreasing and of length k.
inline std::vector<std::size_t> segment_sample(std::size_t n_frames, std::size_t k, SampleMode mode, Rng& rng) {
  if (n_frames == 0 || k == 0) throw std::invalid_argument("segment_sample: n_frames and k must be >= 1");
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t lo = i * n_frames / k;
    const std::size_t hi = (i + 1) * n_frames / k;
    if (hi <= lo) {
      idx[i] = std::min(lo, n_frames - 1);
    } else if (mode == SampleMode::eval_center) {
      idx[i] = (lo + hi - 1) / 2;
    } else {
      idx[i] = lo + rng.uniform_index(hi - lo);
    }
  }
  return idx;
}

struct WindowRange {
  long first = 0;  // inclusive, may be negative
  long last = 0;   // inclusive, may be >= n
  std::size_t left_pad = 0;
  std::size_t right_pad = 0;
};

/// Temporal windows centred on each frame: frame p covers [p - (w/2 - 1), p + w/2],
/// with out-of-range slots counted as zero padding.
inline std::vector<WindowRange> sliding_window_expand(std::size_t n_frames, std::size_t window = 16) {
  if (window < 2) throw std::invalid_argument("sliding_window_expand: window must be >= 2");
  const long before = static_cast<long>(window / 2) - 1;
  const long after = static_cast<long>(window - window / 2);
  const long n = static_cast<long>(n_frames);
  std::vector<WindowRange> out;
  out.reserve(n_frames);
  for (long p = 0; p < n; ++p) {
    WindowRange w{p - before, p + after, 0, 0};
    w.left_pad = static_cast<std::size_t>(std::max(0L, -w.first));
    w.right_pad = static_cast<std::size_t>(std::max(0L, w.last - (n - 1)));
    out.push_back(w);
  }
  return out;
}

/// Turns a raw per-frame matrix into clip-level features: for each frame the
/// zero-padded window [window x d_raw] is handed to `clip_fn`, whose output
/// becomes that frame's feature row.
template <class ClipFn>
VideoFeatures clip_features(const VideoFeatures& raw, ClipFn&& clip_fn, std::size_t window = 16) {
  VideoFeatures out;
  out.video_id = raw.video_id;
  out.domain = raw.domain;
  out.label = raw.label;
  out.n_frames = raw.n_frames;
  const std::size_t d = raw.feat_dim;
  std::vector<float> buf(window * d);
  for (const auto& w : sliding_window_expand(raw.n_frames, window)) {
    std::fill(buf.begin(), buf.end(), 0.0f);
    for (long f = w.first; f <= w.last; ++f) {
      if (f < 0 || f >= static_cast<long>(raw.n_frames)) continue;
      const std::size_t slot = static_cast<std::size_t>(f - w.first);
      std::copy_n(raw.frames.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(f) * d), d,
                  buf.begin() + static_cast<std::ptrdiff_t>(slot * d));
    }
    std::vector<float> row = clip_fn(std::span<const float>(buf), window, d);
    if (out.feat_dim == 0) out.feat_dim = row.size();
    if (row.size() != out.feat_dim) throw ShapeError("clip_features: clip function changed its output width");
    out.frames.insert(out.frames.end(), row.begin(), row.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// A manifest with every feature matrix loaded. Read-only after construction.
class FeatureStore {
 public:
  explicit FeatureStore(Manifest manifest) : manifest_(std::move(manifest)) {
    for (std::size_t i = 0; i < manifest_.videos.size(); ++i) {
      const auto& r = manifest_.videos[i];
      VideoFeatures v = read_features(manifest_.resolve(r));
      if (v.n_frames != r.n_frames || v.feat_dim != manifest_.feat_dim)
        throw FormatError(FormatError::Kind::invalid_value,
                          r.id + ": feature file disagrees with manifest n_frames/feat_dim");
      v.video_id = r.id;
      v.domain = r.domain;
      v.label = r.label;
      index_.emplace(r.id, videos_.size());
      videos_.push_back(std::move(v));
    }
  }

  /// In-memory store, used by tests and the synthetic generator.
  FeatureStore(Manifest manifest, std::vector<VideoFeatures> videos)
      : manifest_(std::move(manifest)), videos_(std::move(videos)) {
    for (std::size_t i = 0; i < videos_.size(); ++i) {
      if (videos_[i].feat_dim != manifest_.feat_dim)
        throw ShapeError("FeatureStore: video " + videos_[i].video_id + " has feat_dim " +
                         std::to_string(videos_[i].feat_dim) + ", manifest says " + std::to_string(manifest_.feat_dim));
      index_.emplace(videos_[i].video_id, i);
    }
  }

  const Manifest& manifest() const { return manifest_; }
  std::size_t feat_dim() const { return manifest_.feat_dim; }
  std::size_t size() const { return videos_.size(); }
  const std::vector<VideoFeatures>& videos() const { return videos_; }

  const VideoFeatures& get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw LookupError("no video \"" + id + "\" in dataset " + manifest_.dataset);
    return videos_[it->second];
  }

  std::vector<std::string> ids_where(Domain d, bool labeled_only = false) const {
    std::vector<std::string> out;
    for (auto& v : videos_)
      if (v.domain == d && (!labeled_only || v.label)) out.push_back(v.video_id);
    return out;
  }

 private:
  Manifest manifest_;
  std::vector<VideoFeatures> videos_;
  std::map<std::string, std::size_t> index_;
};

struct Batch {
  Tensor x;                      // [B x k x feat_dim]
  std::vector<int> labels;       // -1 where absent
  std::vector<Domain> domains;
  std::vector<std::string> ids;

  std::size_t size() const { return domains.size(); }
};

/// Stacks k sampled frames per video. Consumes `rng` in id order.
inline Batch make_batch(const FeatureStore& store, const std::vector<std::string>& ids, std::size_t k,
                        SampleMode mode, Rng& rng) {
  if (ids.empty()) throw std::invalid_argument("make_batch: empty id list");
  const std::size_t d = store.feat_dim();
  Batch b;
  std::vector<double> data;
  data.reserve(ids.size() * k * d);
  for (auto& id : ids) {
    const VideoFeatures& v = store.get(id);
    if (v.feat_dim != d) throw ShapeError("make_batch: feat_dim mismatch for " + id);
    for (std::size_t f : segment_sample(v.n_frames, k, mode, rng))
      for (std::size_t c = 0; c < d; ++c) data.push_back(v.at(f, c));
    b.labels.push_back(v.label.value_or(-1));
    b.domains.push_back(v.domain);
    b.ids.push_back(id);
  }
  b.x = Tensor({ids.size(), k, d}, std::move(data));
  return b;
}

}  // namespace transferattn
