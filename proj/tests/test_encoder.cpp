#include <catch_amalgamated.hpp>

#include "transferattn/model.hpp"
#include "support.hpp"

using namespace transferattn;
using Catch::Matchers::WithinAbs;
using testing_support::random_tensor;

namespace {

EncoderConfig tiny(PositionalEmbedding pos = PositionalEmbedding::none, std::size_t k = 5) {
  EncoderConfig cfg;
  cfg.feat_dim = 6;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.layers = 3;
  cfg.mlp_ratio = 2;
  cfg.k_tokens = k;
  cfg.dtab_positions = {2};
  cfg.positional = pos;
  return cfg;
}

Tensor permute_tokens(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t b = x.dim(0), k = x.dim(1), d = x.dim(2);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t c = 0; c < d; ++c) out[(i * k + t) * d + c] = x[(i * k + perm[t]) * d + c];
  return Tensor(x.shape(), std::move(out));
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("encoder output shapes") {
  Rng rng(1);
  ParameterSet ps;
  Encoder enc(ps, tiny(PositionalEmbedding::learned), rng);
  std::vector<Domain> doms{Domain::source, Domain::target, Domain::target};
  EncodeResult r = enc.encode(random_tensor({3, 5, 6}, rng), &doms, true, &rng);
  CHECK(r.features.shape() == Shape{3, 8});
  CHECK(r.transferability.size() == 15);
  CHECK_THROWS_AS(enc.encode(random_tensor({3, 4, 6}, rng), &doms, false), ConfigError);
  CHECK_THROWS_AS(enc.encode(random_tensor({3, 5, 7}, rng), &doms, false), ConfigError);
}

TEST_CASE("token order does not matter without positional embeddings") {
  Rng rng(2);
  ParameterSet ps;
  Encoder enc(ps, tiny(), rng);
  Tensor x = random_tensor({2, 5, 6}, rng);
  std::vector<Domain> doms{Domain::source, Domain::target};
  Tensor a = enc.encode(x, &doms, false).features;
  Tensor b = enc.encode(permute_tokens(x, {3, 0, 4, 1, 2}), &doms, false).features;
  CHECK(max_diff(a, b) < 1e-12);

  ParameterSet ps2;
  Encoder learned(ps2, tiny(PositionalEmbedding::learned), rng);
  Tensor c = learned.encode(x, &doms, false).features;
  Tensor d = learned.encode(permute_tokens(x, {3, 0, 4, 1, 2}), &doms, false).features;
  CHECK(max_diff(c, d) > 1e-9);
}

TEST_CASE("identical tokens behave like a single token") {
  Rng rng(3);
  ParameterSet ps;
  EncoderConfig one = tiny(PositionalEmbedding::none, 1);
  Encoder single(ps, one, rng);
  Tensor token = random_tensor({1, 1, 6}, rng);
  std::vector<double> rep;
  for (int t = 0; t < 5; ++t) rep.insert(rep.end(), token.data().begin(), token.data().end());

  // Same seed and no positional table, so the weights match.
  ParameterSet ps5;
  Rng rebuild(3);
  Encoder five(ps5, tiny(), rebuild);
  std::vector<Domain> doms{Domain::target};
  Tensor f1 = single.encode(token, &doms, false).features;
  Tensor f5 = five.encode(Tensor({1, 5, 6}, rep), &doms, false).features;
  CHECK(max_diff(f1, f5) < 1e-12);
}

TEST_CASE("train mode needs domain labels for DTAB blocks") {
  Rng rng(4);
  ParameterSet ps;
  Encoder enc(ps, tiny(), rng);
  Tensor x = random_tensor({2, 5, 6}, rng);
  CHECK_THROWS_AS(enc.encode(x, nullptr, true, &rng), UsageError);
  CHECK_NOTHROW(enc.encode(x, nullptr, false));

  EncoderConfig plain = tiny();
  plain.dtab_positions.clear();
  ParameterSet ps2;
  Encoder std_enc(ps2, plain, rng);
  CHECK_NOTHROW(std_enc.encode(x, nullptr, true, &rng));
}

TEST_CASE("encoder configuration is validated") {
  EncoderConfig bad = tiny();
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny();
  bad.dtab_positions = {3};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny();
  bad.dtab.grl_lambda = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("construction is deterministic in the seed") {
  ModelConfig cfg;
  cfg.encoder = tiny(PositionalEmbedding::learned);
  cfg.init_seed = 17;
  TransferAttnModel a(cfg), b(cfg);
  CHECK(a.params().hash() == b.params().hash());
  cfg.init_seed = 18;
  TransferAttnModel c(cfg);
  CHECK(a.params().hash() != c.params().hash());

  Rng r1(5);
  Tensor x = random_tensor({2, 5, 6}, r1);
  std::vector<Domain> doms{Domain::source, Domain::target};
  Tensor fa = a.encoder().encode(x, &doms, false).features;
  Tensor fb = b.encoder().encode(x, &doms, false).features;
  CHECK(max_diff(fa, fb) == 0.0);
}

TEST_CASE("parameter count matches the closed form") {
  for (bool mdta : {true, false})
    for (std::size_t depth : {1, 2}) {
      ModelConfig cfg;
      cfg.encoder = tiny(PositionalEmbedding::learned);
      cfg.encoder.dtab.transferability_attention = mdta;
      cfg.classifier_depth = depth;
      TransferAttnModel m(cfg);
      auto b = parameter_breakdown(cfg);
      CHECK(m.params().total_count() == b.total);
      CHECK(m.params().trainable_count() == b.trainable);
    }

  ModelConfig full;
  TransferAttnModel m(full);
  auto b = parameter_breakdown(full);
  CHECK(m.params().trainable_count() == b.trainable);
  CHECK(b.trainable >= 12'000'000);
  CHECK(b.trainable <= 20'000'000);
}

TEST_CASE("default block keeps a 7x512 token shape") {
  Rng rng(6);
  ParameterSet ps;
  EncoderConfig cfg;
  cfg.feat_dim = 16;
  cfg.k_tokens = 7;
  cfg.layers = 1;
  cfg.dtab_positions = {0};
  Encoder enc(ps, cfg, rng);
  std::vector<Domain> doms{Domain::source};
  BlockContext ctx{true, &doms, &rng};
  BlockOutput o = enc.blocks()[0].forward(random_tensor({1, 7, 512}, rng), ctx);
  CHECK(o.tokens.shape() == Shape{1, 7, 512});
  REQUIRE(o.patch_disc_loss.has_value());
  CHECK_THAT(o.patch_disc_loss->item(), WithinAbs(std::log(2.0), 0.05));
}
