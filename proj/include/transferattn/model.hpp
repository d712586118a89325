#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "transferattn/encoder.hpp"
#include "transferattn/feature_io.hpp"
#include "transferattn/heads.hpp"
#include "transferattn/layers.hpp"

namespace transferattn {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t n_classes = 6;
  std::size_t classifier_depth = 1;
  bool classifier_frozen = true;
  std::uint64_t init_seed = 0;
};

/// Parameter counts computed from the configuration alone.
struct ParameterBreakdown {
  std::size_t embedding = 0;
  std::size_t blocks = 0;
  std::size_t classifier = 0;
  std::size_t adversary = 0;
  std::size_t trainable = 0;
  std::size_t total = 0;
};

inline ParameterBreakdown parameter_breakdown(const ModelConfig& cfg) {
  const EncoderConfig& e = cfg.encoder;
  const std::size_t d = e.d_model, hidden = d * e.mlp_ratio, dh = e.d_head(), c = cfg.n_classes;
  auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
  ParameterBreakdown b;
  b.embedding = linear(e.feat_dim, d) + linear(d, d);
  if (e.positional == PositionalEmbedding::learned) b.embedding += e.k_tokens * d;
  const std::size_t block = 2 * d + 4 * linear(d, d) + 2 * d + linear(d, hidden) + linear(hidden, d);
  const std::size_t disc = linear(dh, dh) + linear(dh, 1);
  for (std::size_t i = 0; i < e.layers; ++i) {
    b.blocks += block;
    if (e.dtab_positions.count(i) && e.dtab.transferability_attention) b.blocks += disc;
  }
  b.classifier = cfg.classifier_depth == 1 ? linear(d, c) : linear(d, d) + linear(d, c);
  b.adversary = linear(d, d / 2) + linear(d / 2, 1);
  b.total = b.embedding + b.blocks + b.classifier + b.adversary;
  b.trainable = b.total - (cfg.classifier_frozen ? b.classifier : 0);
  return b;
}

/// Encoder plus both heads, with every parameter registered in one set.
class TransferAttnModel {
 public:
  explicit TransferAttnModel(const ModelConfig& cfg) : cfg_(cfg) {
    if (cfg.n_classes < 2) throw ConfigError("model: need at least 2 classes");
    Rng rng(cfg.init_seed);
    encoder_ = std::make_unique<Encoder>(params_, cfg.encoder, rng);
    classifier_ = ClassifierHead(params_, cfg.encoder.d_model, cfg.n_classes, rng, cfg.classifier_depth,
                                 cfg.classifier_frozen);
    adversary_ = AdversarialHead(params_, cfg.encoder.d_model, rng);
    log_info("model: " + std::to_string(params_.trainable_count()) + " trainable / " +
             std::to_string(params_.total_count()) + " total parameters");
  }

  TransferAttnModel(const TransferAttnModel&) = delete;
  TransferAttnModel& operator=(const TransferAttnModel&) = delete;
  TransferAttnModel(TransferAttnModel&&) = default;
  TransferAttnModel& operator=(TransferAttnModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  Encoder& encoder() { return *encoder_; }
  const Encoder& encoder() const { return *encoder_; }
  const ClassifierHead& classifier() const { return classifier_; }
  const AdversarialHead& adversary() const { return adversary_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  std::unique_ptr<Encoder> encoder_;
  ClassifierHead classifier_;
  AdversarialHead adversary_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "TFCK" | u16 version | u32 config length | config JSON
//   u32 parameter count, then per parameter:
//   u16 name length | name | u8 rank | u64 dims[rank] | u8 frozen | float64 TFAT block

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(const TransferAttnModel& model, const std::string& config_json,
                            const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::io, "cannot open checkpoint " + path.string() + " for writing");
  auto put = [&os](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  os.write("TFCK", 4);
  put(kCheckpointVersion);
  put(static_cast<std::uint32_t>(config_json.size()));
  os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  const auto& all = model.params().all();
  put(static_cast<std::uint32_t>(all.size()));
  for (const auto& p : all) {
    put(static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put(static_cast<std::uint8_t>(p.value.rank()));
    for (auto d : p.value.shape()) put(static_cast<std::uint64_t>(d));
    put(static_cast<std::uint8_t>(p.frozen ? 1 : 0));
    const std::size_t cols = p.value.shape().back();
    write_block(os, p.value.size() / cols, cols, p.value.data(), DType::float64);
  }
  if (!os) throw FormatError(FormatError::Kind::io, "failed writing checkpoint " + path.string());
}

struct Checkpoint {
  std::string config_json;
  struct Entry {
    std::string name;
    Shape shape;
    bool frozen = false;
    std::vector<double> values;
  };
  std::vector<Entry> entries;
};

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::io, "cannot open checkpoint " + path.string());
  const std::string where = path.string();
  auto get = [&](auto& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw FormatError(FormatError::Kind::truncated, where + ": truncated checkpoint");
  };
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "TFCK") throw FormatError(FormatError::Kind::bad_magic, where + ": not a checkpoint");
  std::uint16_t version;
  get(version);
  if (version != kCheckpointVersion)
    throw FormatError(FormatError::Kind::version_mismatch, where + ": checkpoint version " + std::to_string(version));
  Checkpoint ck;
  std::uint32_t len;
  get(len);
  ck.config_json.resize(len);
  is.read(ck.config_json.data(), len);
  std::uint32_t count;
  get(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    std::uint16_t nl;
    get(nl);
    e.name.resize(nl);
    is.read(e.name.data(), nl);
    std::uint8_t rank;
    get(rank);
    for (std::uint8_t r = 0; r < rank; ++r) {
      std::uint64_t d;
      get(d);
      e.shape.push_back(static_cast<std::size_t>(d));
    }
    std::uint8_t frozen;
    get(frozen);
    e.frozen = frozen != 0;
    Block b = read_block(is, where + ":" + e.name);
    if (b.values.size() != shape_numel(e.shape))
      throw FormatError(FormatError::Kind::invalid_value, where + ": size mismatch for " + e.name);
    e.values = std::move(b.values);
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

/// Copies checkpoint values into a model built from the same configuration.
inline void load_parameters(TransferAttnModel& model, const Checkpoint& ck) {
  auto& all = model.params().all();
  if (all.size() != ck.entries.size())
    throw FormatError(FormatError::Kind::invalid_value, "checkpoint parameter count does not match model");
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& e = ck.entries[i];
    if (e.name != all[i].name || e.shape != all[i].value.shape())
      throw FormatError(FormatError::Kind::invalid_value, "checkpoint entry " + e.name + " does not match model parameter " +
                                                              all[i].name);
    auto dst = all[i].value.mutable_data();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
  }
}

}  // namespace transferattn
