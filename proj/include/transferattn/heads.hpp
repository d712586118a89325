#pragma once

// Frozen classification head, adversarial domain head, and the training
// objective assembled from their losses plus the DTAB auxiliaries.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "transferattn/dtab.hpp"
#include "transferattn/feature_io.hpp"
#include "transferattn/layers.hpp"
#include "transferattn/tensor.hpp"

namespace transferattn {

class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Random linear probe (or a two-layer MLP) that is never trained.
struct ClassifierHead {
  Linear fc1;
  std::optional<Linear> fc2;
  bool frozen = true;

  ClassifierHead() = default;
  ClassifierHead(ParameterSet& ps, std::size_t d_model, std::size_t n_classes, Rng& rng, std::size_t depth = 1,
                 bool freeze = true)
      : frozen(freeze) {
    if (depth == 1) {
      fc1 = Linear(ps, "classifier.fc1", d_model, n_classes, rng, freeze);
    } else if (depth == 2) {
      fc1 = Linear(ps, "classifier.fc1", d_model, d_model, rng, freeze);
      fc2 = Linear(ps, "classifier.fc2", d_model, n_classes, rng, freeze);
    } else {
      throw ConfigError("classifier depth must be 1 or 2");
    }
  }

  std::size_t n_classes() const { return fc2 ? fc2->out_features() : fc1.out_features(); }

  Tensor logits(const Tensor& f) const { return fc2 ? (*fc2)(gelu(fc1(f))) : fc1(f); }
};

/// MLP d_model -> d_model/2 -> 1 with a sigmoid, fed through a GRL.
struct AdversarialHead {
  Linear fc1;
  Linear fc2;

  AdversarialHead() = default;
  AdversarialHead(ParameterSet& ps, std::size_t d_model, Rng& rng)
      : fc1(ps, "adversary.fc1", d_model, d_model / 2, rng), fc2(ps, "adversary.fc2", d_model / 2, 1, rng) {}

  /// P(source) for each row of f, with the encoder-side gradient reversed by lambda.
  Tensor source_probability(const Tensor& f, double lambda, bool reverse = true) const {
    Tensor in = reverse ? grl(f, lambda) : f;
    return sigmoid(clamp(fc2(relu(fc1(in))), -kLogitClamp, kLogitClamp));
  }
};

/// Index of the largest entry in each row of a [B x C] tensor.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t c = logits.dim(-1);
  std::vector<int> out;
  auto v = logits.data();
  for (std::size_t i = 0; i + c <= v.size(); i += c)
    out.push_back(static_cast<int>(std::max_element(v.begin() + i, v.begin() + i + c) - (v.begin() + i)));
  return out;
}

/// argmax_rows, with -1 for rows whose top softmax probability is below `threshold`.
inline std::vector<int> confident_pseudo_labels(const Tensor& logits, double threshold) {
  NoGradGuard no_grad;
  std::vector<int> out = argmax_rows(logits);
  const Tensor probs = softmax_rows(logits);
  auto p = probs.data();
  const std::size_t c = logits.dim(-1);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (p[i * c + static_cast<std::size_t>(out[i])] < threshold) out[i] = -1;
  return out;
}

/// Mean cross-entropy of softmax(logits) against integer labels.
inline Tensor loss_cls(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw ShapeError("loss_cls: label count does not match batch");
  std::vector<double> onehot(b * c, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw DataError("loss_cls: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return scale(sum(mul(log_softmax_rows(logits), Tensor({b, c}, std::move(onehot)))), -1.0 / static_cast<double>(b));
}

/// Mean Shannon entropy of softmax(logits); log clamped at 1e-12.
inline Tensor loss_soft_entropy(const Tensor& logits) {
  Tensor p = softmax_rows(logits);
  return scale(sum(mul(p, log(p))), -1.0 / static_cast<double>(logits.dim(0)));
}

inline Tensor domain_targets(const std::vector<Domain>& domains) {
  std::vector<double> v;
  for (Domain d : domains) v.push_back(d == Domain::source ? 1.0 : 0.0);
  return Tensor({domains.size(), 1}, std::move(v));
}

/// Mean BCE of the adversarial head against domain labels (source = 1).
inline Tensor loss_adv(const Tensor& f, const std::vector<Domain>& domains, const AdversarialHead& head, double lambda,
                       bool reverse = true) {
  if (domains.size() != f.dim(0)) throw ShapeError("loss_adv: domain count does not match batch");
  bool has_s = false, has_t = false;
  for (Domain d : domains) (d == Domain::source ? has_s : has_t) = true;
  if (!(has_s && has_t)) log_warn("loss_adv: batch holds only one domain");
  return mean(bce_per_element(head.source_probability(f, lambda, reverse), domain_targets(domains)));
}

/// Which loss terms participate in the objective.
struct LossMask {
  bool cls = true;
  bool entropy = true;
  bool adv = true;
  bool ib = true;
  bool patch = true;
};

struct LossWeights {
  double entropy = 1.0;
  double ib = 0.001;  // alpha
  double patch = 1.0;

  void validate() const {
    if (entropy < 0.0 || ib < 0.0 || patch < 0.0) throw ConfigError("loss weights must be non-negative");
  }
};

struct LossParts {
  std::optional<Tensor> cls, entropy, adv, ib, patch;
};

struct LossReport {
  double cls = 0.0;
  double entropy = 0.0;
  double adv = 0.0;
  double ib = 0.0;
  double patch = 0.0;
  double total = 0.0;
};

/// total = cls + w_H * entropy + adv + alpha * ib + w_pd * patch over the
/// parts present; absent parts contribute nothing (not even a graph edge).
inline std::pair<Tensor, LossReport> total_loss(const LossParts& parts, const LossWeights& w) {
  w.validate();
  LossReport rep;
  std::optional<Tensor> acc;
  auto term = [&](const std::optional<Tensor>& t, double weight, double& slot) {
    if (!t) return;
    slot = t->item();
    Tensor wt = weight == 1.0 ? *t : scale(*t, weight);
    acc = acc ? add(*acc, wt) : wt;
  };
  term(parts.cls, 1.0, rep.cls);
  term(parts.entropy, w.entropy, rep.entropy);
  term(parts.adv, 1.0, rep.adv);
  term(parts.ib, w.ib, rep.ib);
  term(parts.patch, w.patch, rep.patch);
  Tensor total = acc ? *acc : Tensor::scalar(0.0);
  rep.total = total.item();
  return {total, rep};
}

}  // namespace transferattn
