#pragma once

// Domain transferable-guided attention: a patch-level domain discriminator
// scores every query/key token, the per-token discrimination error (DDE)
// replaces content similarity in the attention logits, and a queued
// redundancy-reduction loss aligns pooled source/target block outputs.

#include <cmath>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "transferattn/feature_io.hpp"
#include "transferattn/layers.hpp"
#include "transferattn/tensor.hpp"

namespace transferattn {

/// bce: source -> -log p, target -> -log(1 - p) (non-negative, large when confused).
/// raw: the same quantities without the leading minus.
enum class DdeConvention { bce, raw };

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kLogitClamp = 30.0;

/// Scalar DDE. `p` is the discriminator's probability that the token is from the source domain.
inline double dde(double p, Domain domain, DdeConvention conv = DdeConvention::bce) {
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  const double v = domain == Domain::source ? -std::log(q) : -std::log(1.0 - q);
  return conv == DdeConvention::bce ? v : -v;
}

/// Elementwise binary cross-entropy of probabilities `p` against `is_source`
/// (1 for source tokens, 0 for target), same shape as p. Always the non-negative form.
inline Tensor bce_per_element(const Tensor& p, const Tensor& is_source) {
  Tensor pc = clamp(p, kProbClamp, 1.0 - kProbClamp);
  Tensor one_minus_t = add_scalar(neg(is_source), 1.0);
  Tensor ll = add(mul(is_source, log(pc)), mul(one_minus_t, log(add_scalar(neg(pc), 1.0))));
  return neg(ll);
}

/// Two-layer MLP d_h -> d_h -> 1 with a sigmoid, shared by every head and by
/// both the query and key roles.
struct PatchDiscriminator {
  Linear hidden;
  Linear out;

  PatchDiscriminator() = default;
  PatchDiscriminator(ParameterSet& ps, const std::string& name, std::size_t d_head, Rng& rng)
      : hidden(ps, name + ".fc1", d_head, d_head, rng), out(ps, name + ".fc2", d_head, 1, rng) {}

  /// [..., d_h] -> probabilities [..., 1], strictly inside (0, 1).
  Tensor operator()(const Tensor& x) const {
    return sigmoid(clamp(out(gelu(hidden(x))), -kLogitClamp, kLogitClamp));
  }
};

/// Bounded FIFO of detached source-domain features and their class labels.
class FeatureQueue {
 public:
  struct Entry {
    std::vector<double> feature;
    int label = -1;
  };

  explicit FeatureQueue(std::size_t capacity = 1024) : capacity_(capacity) {}

  void push(std::vector<double> feature, int label = -1) {
    if (capacity_ == 0) return;
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back({std::move(feature), label});
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const Entry& operator[](std::size_t i) const { return items_[i]; }
  const Entry& oldest() const { return items_.front(); }
  const Entry& newest() const { return items_.back(); }
  void clear() { items_.clear(); }

 private:
  std::size_t capacity_;
  std::deque<Entry> items_;
};

inline constexpr double kIbVarianceFloor = 1e-8;

/// Redundancy-reduction loss on the cross-correlation of paired rows.
///
/// Each feature column is centred over the m pairs and divided by its norm, so
/// C[i][j] is the correlation between source dimension i and target dimension j.
/// L = sum_i (1 - C_ii)^2 + offdiag_weight * sum_{i != j} C_ij^2.
/// Returns 0 when fewer than two pairs are available.
inline Tensor ib_loss(const Tensor& z_source, const Tensor& z_target, double offdiag_weight) {
  if (z_source.rank() != 2 || z_source.shape() != z_target.shape())
    throw ShapeError("ib_loss: expected matching [m x d] inputs, got " + shape_str(z_source.shape()) + " and " +
                     shape_str(z_target.shape()));
  const std::size_t m = z_source.dim(0), d = z_source.dim(1);
  if (m < 2) {
    log_warn("ib_loss: fewer than 2 pairs, skipping");
    return Tensor::scalar(0.0);
  }
  auto standardize = [](const Tensor& z) {
    Tensor centred = sub(z, mean_axis(z, 0));
    Tensor norm = sqrt(clamp(sum_axis(square(centred), 0), kIbVarianceFloor, HUGE_VAL));
    return div(centred, norm);
  };
  Tensor c = matmul(transpose(standardize(z_source)), standardize(z_target));  // [d x d]
  std::vector<double> eye(d * d, 0.0), off(d * d, offdiag_weight);
  for (std::size_t i = 0; i < d; ++i) {
    eye[i * d + i] = 1.0;
    off[i * d + i] = 0.0;
  }
  Tensor eye_t({d, d}, eye);
  Tensor diag_term = sum(mul(square(sub(eye_t, c)), eye_t));
  Tensor off_term = sum(mul(square(c), Tensor({d, d}, off)));
  return add(diag_term, off_term);
}

/// How target features find their source partner for the IB loss.
/// class_matched: a source feature (batch first, then queue) whose label equals
/// the target's pseudo-label. random: batch sources in shuffled order, queue draws for
/// the targets left over.
enum class IbPairing { class_matched, random };

struct DtabOptions {
  bool transferability_attention = true;  // MDTA in place of MSA
  bool ib = true;                         // queued IB loss after the block
  double grl_lambda = 1.0;                // reversal weight in front of the patch discriminator
  bool grl_enabled = true;
  bool dde_gradient = false;              // let task gradients flow through DDE into the logits
  DdeConvention convention = DdeConvention::bce;
  std::size_t queue_capacity = 1024;
  double ib_offdiag_weight = 5e-3;
  IbPairing pairing = IbPairing::class_matched;
};

/// Output of one transferability-attention head.
struct DtaResult {
  Tensor out;              // [..., n, d_h]
  Tensor attention;        // [..., n, n]
  Tensor logits;           // [..., n, n] (values as fed to the softmax)
  Tensor e_query;          // [..., n, 1] DDE scores (detached unless dde_gradient)
  Tensor e_key;            // [..., n, 1]
  Tensor patch_bce_query;  // [..., n, 1] per-token BCE, differentiable into the discriminator
  Tensor patch_bce_key;
};

/// Transferability attention for projected heads. `is_source` has the shape of
/// the discriminator output ([..., n, 1]) and holds 1 for source tokens.
inline DtaResult dta_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& is_source,
                          const PatchDiscriminator& disc, const DtabOptions& opt) {
  if (q.shape() != k.shape() || q.rank() != v.rank() || q.dim(-2) != v.dim(-2))
    throw ShapeError("dta_head: incompatible q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  const double d_h = static_cast<double>(q.dim(-1));
  auto reverse = [&](const Tensor& t) { return opt.grl_enabled ? grl(t, opt.grl_lambda) : t; };
  DtaResult r;
  Tensor p_q = disc(reverse(q));
  Tensor p_k = disc(reverse(k));
  r.patch_bce_query = bce_per_element(p_q, is_source);
  r.patch_bce_key = bce_per_element(p_k, is_source);
  auto score = [&](const Tensor& bce) {
    Tensor e = opt.convention == DdeConvention::bce ? bce : neg(bce);
    return opt.dde_gradient ? e : e.detach();
  };
  r.e_query = score(r.patch_bce_query);
  r.e_key = score(r.patch_bce_key);
  r.logits = scale(matmul(r.e_query, transpose(r.e_key)), 1.0 / std::sqrt(d_h));
  r.attention = softmax_rows(r.logits);
  r.out = matmul(r.attention, v);
  return r;
}


struct AttentionProjections {
  Linear query;
  Linear key;
  Linear value;
  Linear output;

  AttentionProjections() = default;
  AttentionProjections(ParameterSet& ps, const std::string& name, std::size_t d_model, Rng& rng)
      : query(ps, name + ".wq", d_model, d_model, rng),
        key(ps, name + ".wk", d_model, d_model, rng),
        value(ps, name + ".wv", d_model, d_model, rng),
        output(ps, name + ".wo", d_model, d_model, rng) {}
};

/// [B] domains -> [B, h, n, 1] indicator with 1 for source tokens.
inline Tensor source_indicator(const std::vector<Domain>& domains, std::size_t heads, std::size_t n) {
  std::vector<double> v;
  v.reserve(domains.size() * heads * n);
  for (Domain d : domains) v.insert(v.end(), heads * n, d == Domain::source ? 1.0 : 0.0);
  return Tensor({domains.size(), heads, n, 1}, std::move(v));
}

struct MdtaResult {
  Tensor out;                          // [B, n, d_model]
  Tensor patch_disc_loss;              // scalar
  std::vector<double> transferability;  // [B * n], key-side DDE averaged over heads
};

/// Multi-head transferability attention over x [B, n, d_model] (or [n, d_model]
/// with a single domain entry). Heads are concatenated and projected by W^O.
inline MdtaResult mdta(const Tensor& x, const AttentionProjections& proj, std::size_t heads,
                       const PatchDiscriminator& disc, const std::vector<Domain>& domains, const DtabOptions& opt) {
  const bool unbatched = x.rank() == 2;
  Tensor xb = unbatched ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  if (xb.rank() != 3) throw ShapeError("mdta: expected [B, n, d] tokens, got " + shape_str(x.shape()));
  const std::size_t batch = xb.dim(0), n = xb.dim(1);
  if (domains.size() != batch)
    throw ShapeError("mdta: " + std::to_string(domains.size()) + " domain labels for batch of " + std::to_string(batch));
  Tensor q = split_heads(proj.query(xb), heads);
  Tensor k = split_heads(proj.key(xb), heads);
  Tensor v = split_heads(proj.value(xb), heads);
  DtaResult r = dta_head(q, k, v, source_indicator(domains, heads, n), disc, opt);
  MdtaResult res;
  Tensor merged = proj.output(merge_heads(r.out));
  res.out = unbatched ? reshape(merged, {n, merged.dim(-1)}) : merged;
  res.patch_disc_loss = scale(add(mean(r.patch_bce_query), mean(r.patch_bce_key)), 0.5);
  res.transferability.assign(batch * n, 0.0);
  auto ek = r.e_key.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        res.transferability[b * n + t] += ek[(b * heads + h) * n + t] / static_cast<double>(heads);
  return res;
}

struct IbResult {
  Tensor loss;  // scalar
  std::size_t pairs = 0;
};

namespace detail {

inline Tensor stack_rows(const std::vector<Tensor>& parts) {
  if (parts.size() == 1) return parts[0];
  std::vector<Tensor> tr;
  for (auto& p : parts) tr.push_back(transpose(p));
  return transpose(concat_last_axis(tr));
}

}  // namespace detail

/// Pairs pooled block outputs across domains, evaluates ib_loss on the pairs,
/// then enqueues this batch's source rows (detached, with their labels).
///
/// `labels` holds the class of each row: ground truth for source rows and the
/// classifier's pseudo-label (or -1 when unsure) for target rows. Only the
/// class_matched policy reads it; unsure targets stay unpaired.
inline IbResult queued_ib_loss(const Tensor& pooled, const std::vector<Domain>& domains, const std::vector<int>& labels,
                               FeatureQueue& queue, Rng& rng, double offdiag_weight,
                               IbPairing pairing = IbPairing::class_matched) {
  const std::size_t d = pooled.dim(-1);
  if (domains.size() != pooled.dim(0) || labels.size() != pooled.dim(0))
    throw ShapeError("queued_ib_loss: domains/labels do not match pooled rows");
  std::vector<std::size_t> src, tgt;
  for (std::size_t i = 0; i < domains.size(); ++i) (domains[i] == Domain::source ? src : tgt).push_back(i);
  rng.shuffle(src);
  rng.shuffle(tgt);

  std::vector<std::size_t> batch_src, batch_tgt;  // rows of `pooled`
  std::vector<std::size_t> queue_tgt;             // rows paired with queue entries
  std::vector<double> queue_src;                  // flattened queue features

  if (pairing == IbPairing::random) {
    const std::size_t direct = std::min(src.size(), tgt.size());
    batch_src.assign(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(direct));
    batch_tgt.assign(tgt.begin(), tgt.begin() + static_cast<std::ptrdiff_t>(direct));
    if (!queue.empty())
      for (std::size_t i = direct; i < tgt.size(); ++i) {
        const std::size_t t = tgt[i];
        const auto& e = queue[rng.uniform_index(queue.size())];
        queue_src.insert(queue_src.end(), e.feature.begin(), e.feature.end());
        queue_tgt.push_back(t);
      }
  } else {
    for (std::size_t t : tgt) {
      if (labels[t] < 0) continue;
      std::vector<std::size_t> same;
      for (std::size_t s : src)
        if (labels[s] == labels[t]) same.push_back(s);
      if (!same.empty()) {
        batch_src.push_back(same[rng.uniform_index(same.size())]);
        batch_tgt.push_back(t);
        continue;
      }
      std::vector<std::size_t> in_queue;
      for (std::size_t q = 0; q < queue.size(); ++q)
        if (queue[q].label == labels[t]) in_queue.push_back(q);
      if (!in_queue.empty()) {
        const auto& e = queue[in_queue[rng.uniform_index(in_queue.size())]];
        queue_src.insert(queue_src.end(), e.feature.begin(), e.feature.end());
        queue_tgt.push_back(t);
      }
    }
  }

  IbResult res{Tensor::scalar(0.0), batch_tgt.size() + queue_tgt.size()};
  if (res.pairs >= 2) {
    std::vector<Tensor> s_parts, t_parts;
    if (!batch_tgt.empty()) {
      s_parts.push_back(take_rows(pooled, batch_src));
      t_parts.push_back(take_rows(pooled, batch_tgt));
    }
    if (!queue_tgt.empty()) {
      s_parts.push_back(Tensor({queue_tgt.size(), d}, std::move(queue_src)));
      t_parts.push_back(take_rows(pooled, queue_tgt));
    }
    res.loss = ib_loss(detail::stack_rows(s_parts), detail::stack_rows(t_parts), offdiag_weight);
  } else if (res.pairs == 1) {
    log_debug("queued_ib_loss: a single pair, skipping");
  }

  auto pv = pooled.data();
  for (std::size_t i : src) queue.push(std::vector<double>(pv.begin() + i * d, pv.begin() + (i + 1) * d), labels[i]);
  return res;
}

}  // namespace transferattn
