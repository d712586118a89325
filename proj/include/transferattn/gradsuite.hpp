#pragma once

// Randomised finite-difference suite over every differentiable op, the
// standard and DTAB encoder blocks, and every loss. Stop-gradient and GRL
// edges are switched off where the check needs the true derivative.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "transferattn/dtab.hpp"
#include "transferattn/encoder.hpp"
#include "transferattn/gradcheck.hpp"
#include "transferattn/heads.hpp"
#include "transferattn/rng.hpp"

namespace transferattn {

struct GradCase {
  std::string scope;  // ops | encoder | dtab | heads
  std::string name;
  std::function<GradCheckResult(Rng&)> run;  // one random instance
};

struct GradCaseReport {
  std::string scope;
  std::string name;
  std::size_t instances = 0;
  double worst_rel = 0.0;
  std::string worst_where;
  bool passed = false;
};

namespace gradsuite_detail {

inline Tensor randn(Shape s, Rng& rng, double sigma = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = sigma * rng.normal();
  return Tensor(std::move(s), std::move(v));
}

// Values bounded away from zero, for ops with a kink or pole there.
inline Tensor away_from_zero(Shape s, Rng& rng, double lo = 0.2, double hi = 2.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(std::move(s), std::move(v));
}

inline Tensor positive(Shape s, Rng& rng, double lo = 0.2, double hi = 2.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(s), std::move(v));
}

// Contracts an arbitrary output with fixed random weights so every output
// element carries a distinct upstream gradient.
inline Tensor probe(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

inline GradCheckResult unary(Rng& rng, Tensor x, const std::function<Tensor(const Tensor&)>& f) {
  Tensor w = randn(f(x).shape(), rng);
  return grad_check([&] { return probe(f(x), w); }, {x});
}

inline GradCheckResult binary(Rng& rng, Tensor a, Tensor b, const std::function<Tensor(const Tensor&, const Tensor&)>& f) {
  Tensor w = randn(f(a, b).shape(), rng);
  return grad_check([&] { return probe(f(a, b), w); }, {a, b});
}

inline std::size_t dim_between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.uniform_index(hi - lo + 1); }

inline std::vector<Tensor> parameter_tensors(const ParameterSet& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps.all()) out.push_back(p.value);
  return out;
}

inline EncoderConfig small_encoder(bool dtab) {
  EncoderConfig cfg;
  cfg.feat_dim = 5;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.mlp_ratio = 2;
  cfg.k_tokens = 3;
  cfg.dtab_positions = dtab ? std::set<std::size_t>{0} : std::set<std::size_t>{};
  cfg.dtab.grl_enabled = false;
  cfg.dtab.dde_gradient = true;
  return cfg;
}

inline std::vector<Domain> half_and_half(std::size_t b) {
  std::vector<Domain> d(b, Domain::target);
  for (std::size_t i = 0; i < b / 2; ++i) d[i] = Domain::source;
  return d;
}

// Perturbs parameters away from their small init so nonlinearities are exercised.
inline void jitter(ParameterSet& ps, Rng& rng, double sigma = 0.3) {
  for (auto& p : ps.all())
    for (auto& v : p.value.mutable_data()) v += sigma * rng.normal();
}

// True when a ReLU input lies within finite-difference reach of its kink.
inline bool near_kink(const Tensor& pre, double margin = 0.05) {
  for (double v : pre.data())
    if (std::abs(v) < margin) return true;
  return false;
}

}  // namespace gradsuite_detail

inline std::vector<GradCase> gradient_cases() {
  using namespace gradsuite_detail;
  std::vector<GradCase> c;
  auto op = [&](std::string name, std::function<GradCheckResult(Rng&)> f) { c.push_back({"ops", std::move(name), std::move(f)}); };

  op("add", [](Rng& r) { return binary(r, randn({3, 4}, r), randn({3, 4}, r), [](auto& a, auto& b) { return add(a, b); }); });
  op("add_broadcast", [](Rng& r) {
    return binary(r, randn({2, 3, 4}, r), randn({4}, r), [](auto& a, auto& b) { return add(a, b); });
  });
  op("sub", [](Rng& r) { return binary(r, randn({3, 4}, r), randn({3, 4}, r), [](auto& a, auto& b) { return sub(a, b); }); });
  op("mul", [](Rng& r) { return binary(r, randn({3, 4}, r), randn({3, 4}, r), [](auto& a, auto& b) { return mul(a, b); }); });
  op("mul_scalar_broadcast", [](Rng& r) {
    return binary(r, randn({3, 4}, r), randn({1}, r), [](auto& a, auto& b) { return mul(a, b); });
  });
  op("div", [](Rng& r) {
    return binary(r, randn({3, 4}, r), away_from_zero({3, 4}, r, 0.5), [](auto& a, auto& b) { return div(a, b); });
  });
  op("scale", [](Rng& r) { const double s = r.normal(); return unary(r, randn({3, 4}, r), [s](auto& x) { return scale(x, s); }); });
  op("add_scalar", [](Rng& r) { return unary(r, randn({5}, r), [](auto& x) { return add_scalar(x, 0.7); }); });
  op("log", [](Rng& r) { return unary(r, positive({3, 4}, r), [](auto& x) { return log(x); }); });
  op("exp", [](Rng& r) { return unary(r, randn({3, 4}, r), [](auto& x) { return exp(x); }); });
  op("sqrt", [](Rng& r) { return unary(r, positive({3, 4}, r), [](auto& x) { return sqrt(x); }); });
  op("square", [](Rng& r) { return unary(r, randn({3, 4}, r), [](auto& x) { return square(x); }); });
  op("relu", [](Rng& r) { return unary(r, away_from_zero({3, 4}, r), [](auto& x) { return relu(x); }); });
  op("sigmoid", [](Rng& r) { return unary(r, randn({3, 4}, r, 2.0), [](auto& x) { return sigmoid(x); }); });
  op("tanh", [](Rng& r) { return unary(r, randn({3, 4}, r), [](auto& x) { return tanh(x); }); });
  op("gelu", [](Rng& r) { return unary(r, randn({3, 4}, r, 2.0), [](auto& x) { return gelu(x); }); });
  op("clamp", [](Rng& r) {
    // Entries sit either well inside or well outside [-1, 1].
    std::vector<double> v(12);
    for (auto& x : v) x = r.uniform() < 0.5 ? r.uniform(-0.8, 0.8) : (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(1.2, 3.0);
    return unary(r, Tensor({3, 4}, v), [](auto& x) { return clamp(x, -1.0, 1.0); });
  });
  op("sum", [](Rng& r) { return unary(r, randn({3, 4}, r), [](auto& x) { return sum(x); }); });
  op("mean", [](Rng& r) { return unary(r, randn({3, 4}, r), [](auto& x) { return mean(x); }); });
  op("sum_axis", [](Rng& r) {
    const int axis = static_cast<int>(r.uniform_index(3));
    return unary(r, randn({2, 3, 4}, r), [axis](auto& x) { return sum_axis(x, axis); });
  });
  op("mean_axis", [](Rng& r) {
    const int axis = static_cast<int>(r.uniform_index(3));
    return unary(r, randn({2, 3, 4}, r), [axis](auto& x) { return mean_axis(x, axis); });
  });
  op("reshape", [](Rng& r) { return unary(r, randn({2, 6}, r), [](auto& x) { return reshape(x, {3, 4}); }); });
  op("transpose", [](Rng& r) { return unary(r, randn({2, 3, 4}, r), [](auto& x) { return transpose(x); }); });
  op("split_heads", [](Rng& r) { return unary(r, randn({2, 3, 6}, r), [](auto& x) { return split_heads(x, 3); }); });
  op("merge_heads", [](Rng& r) { return unary(r, randn({2, 3, 4, 2}, r), [](auto& x) { return merge_heads(x); }); });
  op("concat_last_axis", [](Rng& r) {
    return binary(r, randn({2, 3}, r), randn({2, 4}, r), [](auto& a, auto& b) { return concat_last_axis({a, b}); });
  });
  op("take_rows", [](Rng& r) {
    return unary(r, randn({5, 3}, r), [](auto& x) { return take_rows(x, {4, 0, 0, 2}); });
  });
  op("matmul", [](Rng& r) {
    const std::size_t m = dim_between(r, 1, 4), k = dim_between(r, 1, 4), n = dim_between(r, 1, 4);
    return binary(r, randn({m, k}, r), randn({k, n}, r), [](auto& a, auto& b) { return matmul(a, b); });
  });
  op("matmul_batched", [](Rng& r) {
    return binary(r, randn({2, 3, 4}, r), randn({2, 4, 2}, r), [](auto& a, auto& b) { return matmul(a, b); });
  });
  op("matmul_shared_rhs", [](Rng& r) {
    return binary(r, randn({2, 3, 4}, r), randn({4, 5}, r), [](auto& a, auto& b) { return matmul(a, b); });
  });
  op("softmax_rows", [](Rng& r) { return unary(r, randn({3, 5}, r, 2.0), [](auto& x) { return softmax_rows(x); }); });
  op("log_softmax_rows", [](Rng& r) {
    return unary(r, randn({3, 5}, r, 2.0), [](auto& x) { return log_softmax_rows(x); });
  });
  op("layer_norm", [](Rng& r) {
    Tensor x = randn({2, 3, 6}, r), g = randn({6}, r), b = randn({6}, r);
    Tensor w = randn({2, 3, 6}, r);
    return grad_check([&] { return probe(layer_norm(x, g, b), w); }, {x, g, b});
  });

  auto enc = [&](std::string name, std::function<GradCheckResult(Rng&)> f) {
    c.push_back({"encoder", std::move(name), std::move(f)});
  };
  enc("clip_embedding", [](Rng& r) {
    ParameterSet ps;
    EncoderConfig cfg = small_encoder(false);
    ClipEmbedding e(ps, cfg, r);
    jitter(ps, r);
    Tensor x = randn({2, cfg.k_tokens, cfg.feat_dim}, r);
    Tensor w = randn({2, cfg.k_tokens, cfg.d_model}, r);
    auto inputs = parameter_tensors(ps);
    inputs.push_back(x);
    return grad_check([&] { return probe(e(x), w); }, inputs);
  });
  enc("standard_block", [](Rng& r) {
    ParameterSet ps;
    EncoderConfig cfg = small_encoder(false);
    EncoderBlock block(ps, "block", cfg, false, r);
    jitter(ps, r);
    Tensor x = randn({3, cfg.k_tokens, cfg.d_model}, r);
    Tensor w = randn(x.shape(), r);
    auto inputs = parameter_tensors(ps);
    inputs.push_back(x);
    return grad_check([&] { return probe(block.forward(x, {}).tokens, w); }, inputs);
  });

  auto dt = [&](std::string name, std::function<GradCheckResult(Rng&)> f) {
    c.push_back({"dtab", std::move(name), std::move(f)});
  };
  dt("patch_discriminator", [](Rng& r) {
    ParameterSet ps;
    PatchDiscriminator disc(ps, "disc", 4, r);
    jitter(ps, r);
    Tensor x = randn({2, 3, 4}, r);
    Tensor w = randn({2, 3, 1}, r);
    auto inputs = parameter_tensors(ps);
    inputs.push_back(x);
    return grad_check([&] { return probe(disc(x), w); }, inputs);
  });
  dt("dta_head", [](Rng& r) {
    ParameterSet ps;
    PatchDiscriminator disc(ps, "disc", 3, r);
    jitter(ps, r);
    DtabOptions opt;
    opt.grl_enabled = false;
    opt.dde_gradient = true;
    Tensor q = randn({2, 4, 3}, r), k = randn({2, 4, 3}, r), v = randn({2, 4, 3}, r);
    Tensor src({2, 4, 1}, {1, 1, 1, 1, 0, 0, 0, 0});
    Tensor w = randn({2, 4, 3}, r);
    auto inputs = parameter_tensors(ps);
    inputs.insert(inputs.end(), {q, k, v});
    return grad_check(
        [&] {
          DtaResult res = dta_head(q, k, v, src, disc, opt);
          return add(probe(res.out, w), add(mean(res.patch_bce_query), mean(res.patch_bce_key)));
        },
        inputs);
  });
  dt("mdta", [](Rng& r) {
    ParameterSet ps;
    EncoderConfig cfg = small_encoder(true);
    AttentionProjections proj(ps, "attn", cfg.d_model, r);
    PatchDiscriminator disc(ps, "disc", cfg.d_head(), r);
    jitter(ps, r);
    Tensor x = randn({2, cfg.k_tokens, cfg.d_model}, r);
    Tensor w = randn(x.shape(), r);
    auto domains = half_and_half(2);
    auto inputs = parameter_tensors(ps);
    inputs.push_back(x);
    return grad_check(
        [&] {
          MdtaResult m = mdta(x, proj, cfg.heads, disc, domains, cfg.dtab);
          return add(probe(m.out, w), m.patch_disc_loss);
        },
        inputs);
  });
  dt("ib_loss", [](Rng& r) {
    const std::size_t m = dim_between(r, 3, 6), d = dim_between(r, 2, 4);
    Tensor zs = randn({m, d}, r), zt = randn({m, d}, r);
    const double w = r.uniform(0.0, 0.5);
    return grad_check([&] { return ib_loss(zs, zt, w); }, {zs, zt});
  });
  dt("dtab_block", [](Rng& r) {
    ParameterSet ps;
    EncoderConfig cfg = small_encoder(true);
    EncoderBlock block(ps, "block", cfg, true, r);
    jitter(ps, r);
    Tensor x = randn({6, cfg.k_tokens, cfg.d_model}, r);
    Tensor w = randn(x.shape(), r);
    auto domains = half_and_half(6);
    auto inputs = parameter_tensors(ps);
    inputs.push_back(x);
    BlockContext ctx{true, &domains, nullptr};
    return grad_check(
        [&] {
          BlockOutput o = block.forward(x, ctx);
          Tensor ib = ib_loss(take_rows(*o.pooled, {0, 1, 2}), take_rows(*o.pooled, {3, 4, 5}), cfg.dtab.ib_offdiag_weight);
          return add(add(probe(o.tokens, w), *o.patch_disc_loss), ib);
        },
        inputs);
  });

  auto hd = [&](std::string name, std::function<GradCheckResult(Rng&)> f) {
    c.push_back({"heads", std::move(name), std::move(f)});
  };
  hd("loss_cls", [](Rng& r) {
    Tensor logits = randn({4, 5}, r, 2.0);
    std::vector<int> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(r.uniform_index(5)));
    return grad_check([&] { return loss_cls(logits, labels); }, {logits});
  });
  hd("loss_soft_entropy", [](Rng& r) {
    Tensor logits = randn({4, 5}, r, 2.0);
    return grad_check([&] { return loss_soft_entropy(logits); }, {logits});
  });
  hd("bce", [](Rng& r) {
    Tensor p = positive({3, 2}, r, 0.05, 0.95);
    Tensor t({3, 2}, {1, 0, 0, 1, 1, 0});
    return grad_check([&] { return mean(bce_per_element(p, t)); }, {p});
  });
  hd("loss_adv", [](Rng& r) {
    ParameterSet ps;
    AdversarialHead head(ps, 6, r);
    jitter(ps, r);
    Tensor f = randn({4, 6}, r);
    while (near_kink(head.fc1(f))) f = randn({4, 6}, r);
    auto domains = half_and_half(4);
    auto inputs = parameter_tensors(ps);
    inputs.push_back(f);
    return grad_check([&] { return loss_adv(f, domains, head, 1.0, false); }, inputs);
  });
  hd("classifier_mlp", [](Rng& r) {
    ParameterSet ps;
    ClassifierHead head(ps, 6, 4, r, 2, false);
    jitter(ps, r);
    Tensor f = randn({3, 6}, r);
    std::vector<int> labels{0, 3, 1};
    auto inputs = parameter_tensors(ps);
    inputs.push_back(f);
    return grad_check([&] { return loss_cls(head.logits(f), labels); }, inputs);
  });
  hd("total_loss", [](Rng& r) {
    Tensor logits = randn({4, 3}, r, 2.0);
    Tensor zs = randn({4, 3}, r), zt = randn({4, 3}, r);
    Tensor pd = positive({4, 1}, r, 0.1, 0.9);
    LossWeights w{r.uniform(0.1, 1.0), r.uniform(0.001, 0.1), r.uniform(0.1, 1.0)};
    std::vector<int> labels{0, 2, 1, 1};
    return grad_check(
        [&] {
          LossParts parts;
          parts.cls = loss_cls(logits, labels);
          parts.entropy = loss_soft_entropy(logits);
          parts.adv = mean(bce_per_element(pd, Tensor({4, 1}, {1, 1, 0, 0})));
          parts.ib = ib_loss(zs, zt, 5e-3);
          parts.patch = mean(square(zs));
          return total_loss(parts, w).first;
        },
        {logits, zs, zt, pd});
  });
  return c;
}

/// Runs `instances` random draws of every case in `scope` ("all" for every scope).
inline std::vector<GradCaseReport> run_gradient_suite(const std::string& scope, std::size_t instances, double tol,
                                                      std::uint64_t seed = 0) {
  static const std::vector<std::string> scopes{"all", "ops", "encoder", "dtab", "heads"};
  if (std::find(scopes.begin(), scopes.end(), scope) == scopes.end())
    throw ConfigError("gradcheck: unknown scope '" + scope + "' (ops, encoder, dtab, heads or all)");
  std::vector<GradCaseReport> out;
  Rng rng(seed);
  for (const auto& gc : gradient_cases()) {
    if (scope != "all" && gc.scope != scope) continue;
    GradCaseReport rep{gc.scope, gc.name, 0, 0.0, "", true};
    for (std::size_t i = 0; i < instances; ++i) {
      GradCheckResult r = gc.run(rng);
      ++rep.instances;
      if (r.max_rel_error > rep.worst_rel) {
        rep.worst_rel = r.max_rel_error;
        rep.worst_where = "instance " + std::to_string(i) + " " + r.worst;
      }
    }
    rep.passed = rep.worst_rel <= tol;
    out.push_back(std::move(rep));
  }
  return out;
}

}  // namespace transferattn
