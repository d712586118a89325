#pragma once

// Clip embedding, pre-norm transformer blocks (standard or DTAB), and the
// global-average-pooled video feature.

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "transferattn/dtab.hpp"
#include "transferattn/feature_io.hpp"
#include "transferattn/layers.hpp"
#include "transferattn/tensor.hpp"

namespace transferattn {

enum class PositionalEmbedding { learned, none };

struct EncoderConfig {
  std::size_t feat_dim = 2048;
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t layers = 4;
  std::size_t mlp_ratio = 4;
  std::size_t k_tokens = 53;
  std::set<std::size_t> dtab_positions{3};
  PositionalEmbedding positional = PositionalEmbedding::learned;
  DtabOptions dtab;

  std::size_t d_head() const { return d_model / heads; }

  void validate() const {
    if (feat_dim == 0 || d_model == 0 || layers == 0 || mlp_ratio == 0 || k_tokens == 0)
      throw ConfigError("encoder: feat_dim, d_model, layers, mlp_ratio and k_tokens must be positive");
    if (heads == 0 || d_model % heads != 0)
      throw ConfigError("encoder: d_model " + std::to_string(d_model) + " is not divisible by heads " +
                        std::to_string(heads));
    for (auto p : dtab_positions)
      if (p >= layers)
        throw ConfigError("encoder: DTAB position " + std::to_string(p) + " outside [0, " + std::to_string(layers) + ")");
    if (!(dtab.grl_lambda >= 0.0)) throw ConfigError("encoder: DTAB GRL lambda must be non-negative");
    if (!(dtab.ib_offdiag_weight >= 0.0)) throw ConfigError("encoder: IB off-diagonal weight must be non-negative");
  }
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Per-token MLP feat_dim -> d_model -> d_model with a GELU, plus an optional
/// learned positional table.
struct ClipEmbedding {
  Linear fc1;
  Linear fc2;
  std::optional<Tensor> position;  // [k_tokens x d_model]

  ClipEmbedding() = default;
  ClipEmbedding(ParameterSet& ps, const EncoderConfig& cfg, Rng& rng)
      : fc1(ps, "embed.fc1", cfg.feat_dim, cfg.d_model, rng), fc2(ps, "embed.fc2", cfg.d_model, cfg.d_model, rng) {
    if (cfg.positional == PositionalEmbedding::learned)
      position = ps.add("embed.position", init_truncated_normal({cfg.k_tokens, cfg.d_model}, rng));
  }

  Tensor operator()(const Tensor& batch) const {
    if (batch.rank() != 3 || batch.dim(-1) != fc1.in_features())
      throw ConfigError("embed: expected [B x k x " + std::to_string(fc1.in_features()) + "] features, got " +
                        shape_str(batch.shape()));
    Tensor h = fc2(gelu(fc1(batch)));
    if (position) {
      if (batch.dim(1) != position->dim(0))
        throw ConfigError("embed: " + std::to_string(batch.dim(1)) + " tokens but positional table holds " +
                          std::to_string(position->dim(0)));
      h = add(h, *position);
    }
    return h;
  }
};

/// Scaled dot-product self-attention over [B, n, d] tokens.
inline Tensor multi_head_self_attention(const Tensor& x, const AttentionProjections& proj, std::size_t heads) {
  Tensor q = split_heads(proj.query(x), heads);
  Tensor k = split_heads(proj.key(x), heads);
  Tensor v = split_heads(proj.value(x), heads);
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Tensor att = softmax_rows(scale(matmul(q, transpose(k)), scale_factor));
  return proj.output(merge_heads(matmul(att, v)));
}

struct BlockContext {
  bool train = false;
  const std::vector<Domain>* domains = nullptr;
  Rng* rng = nullptr;
};

struct BlockOutput {
  Tensor tokens;
  std::optional<Tensor> patch_disc_loss;
  std::optional<Tensor> pooled;  // IB input, set in train mode on IB blocks
  std::vector<double> transferability;
};

/// Pre-norm block: x + Attn(LN(x)), then + MLP(LN(.)). A DTAB block swaps the
/// attention for MDTA and/or adds the queued IB loss on its pooled output.
class EncoderBlock {
 public:
  EncoderBlock(ParameterSet& ps, const std::string& name, const EncoderConfig& cfg, bool dtab, Rng& rng)
      : heads_(cfg.heads),
        dtab_(dtab),
        opt_(cfg.dtab),
        ln1_(ps, name + ".ln1", cfg.d_model),
        attn_(ps, name + ".attn", cfg.d_model, rng),
        ln2_(ps, name + ".ln2", cfg.d_model),
        fc1_(ps, name + ".mlp.fc1", cfg.d_model, cfg.d_model * cfg.mlp_ratio, rng),
        fc2_(ps, name + ".mlp.fc2", cfg.d_model * cfg.mlp_ratio, cfg.d_model, rng),
        queue_(cfg.dtab.queue_capacity) {
    if (uses_mdta()) disc_ = PatchDiscriminator(ps, name + ".patch_disc", cfg.d_head(), rng);
  }

  bool is_dtab() const { return dtab_; }
  bool uses_mdta() const { return dtab_ && opt_.transferability_attention; }
  bool uses_ib() const { return dtab_ && opt_.ib; }
  const FeatureQueue& queue() const { return queue_; }
  FeatureQueue& queue() { return queue_; }

  BlockOutput forward(const Tensor& x, const BlockContext& ctx) {
    BlockOutput out;
    Tensor h = ln1_(x);
    Tensor attended;
    if (uses_mdta()) {
      std::vector<Domain> domains = ctx.domains ? *ctx.domains : std::vector<Domain>(x.dim(0), Domain::target);
      MdtaResult m = mdta(h, attn_, heads_, *disc_, domains, opt_);
      attended = m.out;
      out.transferability = std::move(m.transferability);
      if (ctx.train) out.patch_disc_loss = m.patch_disc_loss;
    } else {
      attended = multi_head_self_attention(h, attn_, heads_);
    }
    Tensor y = add(x, attended);
    y = add(y, fc2_(gelu(fc1_(ln2_(y)))));
    if (uses_ib() && ctx.train) out.pooled = mean_axis(y, 1);
    out.tokens = y;
    return out;
  }

  /// Queued IB loss on this block's pooled output from the latest forward.
  IbResult information_bottleneck(const Tensor& pooled, const std::vector<Domain>& domains,
                                  const std::vector<int>& labels, Rng& rng) {
    return queued_ib_loss(pooled, domains, labels, queue_, rng, opt_.ib_offdiag_weight, opt_.pairing);
  }

 private:
  std::size_t heads_;
  bool dtab_;
  DtabOptions opt_;
  LayerNorm ln1_;
  AttentionProjections attn_;
  LayerNorm ln2_;
  Linear fc1_;
  Linear fc2_;
  std::optional<PatchDiscriminator> disc_;
  FeatureQueue queue_;
};

struct EncodeResult {
  Tensor features;        // [B x d_model]
  Tensor patch_disc_loss;  // scalar, mean over DTAB blocks (0 when none ran)
  std::vector<std::pair<std::size_t, Tensor>> ib_inputs;  // (block index, pooled [B x d_model])
  std::vector<double> transferability;                    // last MDTA block, [B * k]
};

struct IbSummary {
  Tensor loss;  // scalar, mean over IB blocks
  std::size_t pairs = 0;
};

class Encoder {
 public:
  Encoder(ParameterSet& ps, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    embed_ = ClipEmbedding(ps, cfg_, rng);
    for (std::size_t i = 0; i < cfg_.layers; ++i)
      blocks_.emplace_back(ps, "block" + std::to_string(i), cfg_, cfg_.dtab_positions.count(i) > 0, rng);
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<EncoderBlock>& blocks() const { return blocks_; }
  std::vector<EncoderBlock>& blocks() { return blocks_; }

  bool has_dtab() const { return !cfg_.dtab_positions.empty(); }

  Tensor embed(const Tensor& batch) const { return embed_(batch); }

  /// Embeds, runs every block in order and mean-pools over tokens.
  EncodeResult encode(const Tensor& batch, const std::vector<Domain>* domains, bool train, Rng* rng = nullptr) {
    if (batch.rank() != 3 || batch.dim(1) != cfg_.k_tokens)
      throw ConfigError("encode: expected [B x " + std::to_string(cfg_.k_tokens) + " x feat_dim] batch, got " +
                        shape_str(batch.shape()));
    if (train && has_dtab() && !domains)
      throw UsageError("encode: DTAB blocks need per-video domain labels in train mode");
    if (domains && domains->size() != batch.dim(0))
      throw ShapeError("encode: domain count does not match batch size");
    BlockContext ctx{train, domains, rng};
    Tensor x = embed_(batch);
    std::vector<Tensor> patch;
    EncodeResult res;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      BlockOutput o = blocks_[i].forward(x, ctx);
      x = o.tokens;
      if (o.patch_disc_loss) patch.push_back(*o.patch_disc_loss);
      if (o.pooled) res.ib_inputs.emplace_back(i, *o.pooled);
      if (!o.transferability.empty()) res.transferability = std::move(o.transferability);
    }
    res.features = mean_axis(x, 1);
    res.patch_disc_loss = average(patch);
    return res;
  }

  /// IB loss for a train-mode encode. `labels` gives ground truth for source
  /// rows and pseudo-labels for target rows; each IB block's queue is updated.
  IbSummary information_bottleneck(const EncodeResult& res, const std::vector<Domain>& domains,
                                   const std::vector<int>& labels, Rng& rng) {
    std::vector<Tensor> losses;
    IbSummary out;
    for (const auto& [i, pooled] : res.ib_inputs) {
      IbResult r = blocks_[i].information_bottleneck(pooled, domains, labels, rng);
      losses.push_back(r.loss);
      out.pairs += r.pairs;
    }
    out.loss = average(losses);
    return out;
  }

  void clear_queues() {
    for (auto& b : blocks_) b.queue().clear();
  }

 private:
  static Tensor average(const std::vector<Tensor>& v) {
    if (v.empty()) return Tensor::scalar(0.0);
    Tensor s = v[0];
    for (std::size_t i = 1; i < v.size(); ++i) s = add(s, v[i]);
    return scale(s, 1.0 / static_cast<double>(v.size()));
  }

  EncoderConfig cfg_;
  ClipEmbedding embed_;
  std::vector<EncoderBlock> blocks_;
};

}  // namespace transferattn
