#include <catch_amalgamated.hpp>

#include <sstream>

#include "transferattn/optim.hpp"
#include "transferattn/synthgen.hpp"
#include "transferattn/trainer.hpp"
#include "support.hpp"

using namespace transferattn;
using Catch::Matchers::WithinAbs;

namespace {

SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.n_classes = 3;
  s.feat_dim = 8;
  s.min_frames = 10;
  s.max_frames = 14;
  s.videos_per_class = 6;
  s.test_videos_per_class = 4;
  s.seed = seed;
  return s;
}

ModelConfig small_model(std::uint64_t seed = 1) {
  ModelConfig m;
  m.encoder.feat_dim = 8;
  m.encoder.d_model = 8;
  m.encoder.heads = 2;
  m.encoder.layers = 2;
  m.encoder.mlp_ratio = 2;
  m.encoder.k_tokens = 4;
  m.encoder.dtab_positions = {1};
  m.encoder.dtab.queue_capacity = 16;
  m.n_classes = 3;
  m.init_seed = seed;
  return m;
}

TrainConfig small_train(std::uint64_t seed = 1) {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 8;
  t.seed = seed;
  t.adam.lr = 1e-3;
  return t;
}

std::vector<double> param_values(const TransferAttnModel& m, const std::string& prefix) {
  std::vector<double> out;
  for (const auto& p : m.params().all())
    if (p.name.find(prefix) != std::string::npos) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
  return out;
}

}  // namespace

TEST_CASE("adam first step moves by about lr") {
  ParameterSet ps;
  Tensor w = ps.add("w", Tensor::scalar(2.0));
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  mul(w, Tensor::scalar(1.0)).backward();
  adam_step(ps, st, cfg);
  CHECK_THAT(w.item(), WithinAbs(2.0 - 0.01, 1e-9));
  CHECK(st.step == 1);
}

TEST_CASE("adam leaves parameters alone without gradient or decay") {
  ParameterSet ps;
  Tensor w = ps.add("w", Tensor({3}, {1, -2, 3}));
  AdamState st;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  sum(mul(w, Tensor::zeros({3}))).backward();
  for (int i = 0; i < 5; ++i) adam_step(ps, st, cfg);
  CHECK(std::vector<double>(w.data().begin(), w.data().end()) == std::vector<double>{1, -2, 3});
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ParameterSet ps;
  Tensor w = ps.add("encoder.weird", Tensor::scalar(1.0));
  AdamState st;
  mul(w, Tensor::scalar(std::numeric_limits<double>::infinity())).backward();
  try {
    adam_step(ps, st, AdamConfig{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("encoder.weird") != std::string::npos);
  }
}

TEST_CASE("adam descends a quadratic") {
  ParameterSet ps;
  Tensor w = ps.add("w", Tensor::scalar(1.0));
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  std::vector<double> f;
  for (int i = 0; i < 10; ++i) {
    Tensor loss = square(w);
    f.push_back(loss.item());
    ps.zero_grad();
    loss.backward();
    adam_step(ps, st, cfg);
  }
  for (std::size_t i = 2; i < f.size(); ++i) CHECK(f[i] < f[i - 1]);
}

TEST_CASE("adam never allocates state for frozen parameters") {
  ParameterSet ps;
  Tensor a = ps.add("a", Tensor::scalar(1.0));
  Tensor b = ps.add("b", Tensor::scalar(1.0), true);
  AdamState st;
  add(mul(a, a), mul(b, b)).backward();
  adam_step(ps, st, AdamConfig{});
  CHECK(st.moments.count("a") == 1);
  CHECK(st.moments.count("b") == 0);
  CHECK(b.item() == 1.0);
}

TEST_CASE("task presets match the golden file") {
  CHECK(testing_support::preset_mismatches(PRESETS_GOLDEN).empty());
  CHECK_THROWS_AS(find_preset("ucf-ucf"), ConfigError);
}

TEST_CASE("training is bit-reproducible") {
  auto ds = generate_synthetic(small_spec());
  auto st = synthetic_stores(ds);
  auto run = [&](std::uint64_t seed) {
    TransferAttnModel model(small_model(seed));
    std::ostringstream log;
    TrainOutcome o = train_model(model, small_train(seed), st.source_train, st.target_train, &st.target_test, &log);
    return std::pair{log.str(), o.final_hash};
  };
  auto a = run(5), b = run(5), c = run(6);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.second != c.second);
  CHECK(a.first.find("\"type\":\"epoch\"") != std::string::npos);
}

TEST_CASE("cls-only mask leaves the auxiliary heads untouched") {
  auto ds = generate_synthetic(small_spec());
  auto st = synthetic_stores(ds);
  TransferAttnModel model(small_model());
  const auto adv0 = param_values(model, "adversary."), disc0 = param_values(model, "patch_disc");
  const auto enc0 = param_values(model, "block0.");
  TrainConfig cfg = small_train();
  cfg.mask = LossMask{true, false, false, false, false};
  cfg.epochs = 1;
  Trainer trainer(model, cfg);
  LossReport r = trainer.train_epoch(st.source_train, st.target_train).mean;
  CHECK(r.adv == 0.0);
  CHECK(r.entropy == 0.0);
  CHECK(r.ib == 0.0);
  CHECK(r.patch == 0.0);
  CHECK(r.cls > 0.0);
  CHECK(param_values(model, "adversary.") == adv0);
  CHECK(param_values(model, "patch_disc") == disc0);
  CHECK(param_values(model, "block0.") != enc0);
  for (const auto& [name, m] : trainer.optimizer_state().moments) {
    INFO(name);
    CHECK(name.find("adversary") == std::string::npos);
    CHECK(name.find("classifier") == std::string::npos);
  }
}

TEST_CASE("classifier weights stay bit-identical through training") {
  auto ds = generate_synthetic(small_spec());
  auto st = synthetic_stores(ds);
  TransferAttnModel model(small_model());
  const auto cls0 = param_values(model, "classifier.");
  const auto enc0 = param_values(model, "embed.");
  train_model(model, small_train(), st.source_train, st.target_train, nullptr);
  CHECK(param_values(model, "classifier.") == cls0);
  CHECK(param_values(model, "embed.") != enc0);
}

TEST_CASE("full objective reports every active term") {
  auto ds = generate_synthetic(small_spec());
  auto st = synthetic_stores(ds);
  TransferAttnModel model(small_model());
  TrainConfig cfg = small_train();
  cfg.pseudo_label_threshold = 0.0;
  Trainer trainer(model, cfg);
  Rng rng(2);
  Batch s = make_batch(st.source_train, {"source_train_0_0", "source_train_1_0", "source_train_2_0", "source_train_0_1"}, 4,
                       SampleMode::train_random, rng);
  Batch t = make_batch(st.target_train, {"target_train_0_0", "target_train_1_0", "target_train_2_0", "target_train_0_1"}, 4,
                       SampleMode::train_random, rng);
  StepResult r = trainer.step(s, t);
  CHECK(r.report.cls > 0.0);
  CHECK(r.report.entropy > 0.0);
  CHECK(r.report.adv > 0.0);
  CHECK(r.report.patch > 0.0);
  CHECK(r.ib_pairs >= 1);
  const auto& w = cfg.weights;
  CHECK_THAT(r.report.total,
             WithinAbs(r.report.cls + w.entropy * r.report.entropy + r.report.adv + w.ib * r.report.ib +
                           w.patch * r.report.patch,
                       1e-12));
}

TEST_CASE("untrained model classifies at chance") {
  double total = 0.0;
  const int seeds = 12;
  for (int seed = 0; seed < seeds; ++seed) {
    SynthSpec spec = small_spec(100 + seed);
    spec.test_videos_per_class = 10;
    auto ds = generate_synthetic(spec);
    auto st = synthetic_stores(ds);
    TransferAttnModel model(small_model(seed));
    total += evaluate(model, st.target_test).accuracy;
  }
  CHECK_THAT(total / seeds, WithinAbs(1.0 / 3.0, 0.12));
}

TEST_CASE("separable features are learned perfectly") {
  SynthSpec spec = small_spec(9);
  spec.theta_deg = 0.0;
  spec.frame_noise = 0.0;
  spec.background_fraction = 0.0;
  spec.signal_amplitude = 3.0;
  spec.min_frequency = 0.0;
  spec.max_frequency = 0.0;
  auto ds = generate_synthetic(spec);
  auto st = synthetic_stores(ds);
  ModelConfig mc = small_model();
  mc.encoder.dtab_positions.clear();
  TrainConfig tc = small_train();
  tc.epochs = 40;
  tc.adam.lr = 1e-2;
  tc.mask = LossMask{true, false, false, false, false};
  TransferAttnModel model(mc);
  TrainOutcome o = train_model(model, tc, st.source_train, st.target_train, &st.target_test);
  CHECK(o.final_accuracy == 1.0);
  CHECK(o.epochs.back().mean.cls < o.epochs.front().mean.cls);
}

TEST_CASE("evaluation exports one feature file per video") {
  testing_support::TempDir dir("export");
  auto ds = generate_synthetic(small_spec());
  auto st = synthetic_stores(ds);
  TransferAttnModel model(small_model());
  EvalResult r = evaluate(model, st.target_test, dir.path());
  std::size_t files = 0;
  for ([[maybe_unused]] auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == st.target_test.size());
  CHECK(r.n == st.target_test.size());
  VideoFeatures f = read_features(dir / (r.ids[0] + ".tfat"));
  CHECK(f.feat_dim == 8);
  CHECK(f.n_frames == 1);

  CHECK_THROWS_AS(evaluate(model, st.target_train), UsageError);
}

TEST_CASE("checkpoints restore the exact parameters") {
  testing_support::TempDir dir("ckpt");
  auto ds = generate_synthetic(small_spec());
  auto st = synthetic_stores(ds);
  TransferAttnModel model(small_model());
  TrainConfig tc = small_train();
  tc.checkpoint_every = 1;
  TrainOutcome o = train_model(model, tc, st.source_train, st.target_train, &st.target_test, nullptr, dir.path(), "{\"x\":1}");
  CHECK(std::filesystem::exists(dir / "epoch1.ckpt"));
  CHECK(std::filesystem::exists(dir / "best.ckpt"));
  Checkpoint ck = read_checkpoint(dir / "final.ckpt");
  CHECK(ck.config_json == "{\"x\":1}");
  TransferAttnModel fresh(small_model(99));
  load_parameters(fresh, ck);
  CHECK(fresh.params().hash() == o.final_hash);
}

TEST_CASE("ablation protocols have the documented rows") {
  ModelConfig mc = small_model();
  mc.encoder.layers = 4;
  TrainConfig tc = small_train();
  auto comp = ablation_variants(AblationProtocol::components, mc, tc);
  REQUIRE(comp.size() == 4);
  CHECK(comp[0].model.encoder.dtab_positions.empty());
  CHECK(!comp[1].model.encoder.dtab.ib);
  CHECK(!comp[2].model.encoder.dtab.transferability_attention);
  CHECK(comp[3].model.encoder.dtab_positions == std::set<std::size_t>{3});

  auto losses = ablation_variants(AblationProtocol::losses, mc, tc);
  REQUIRE(losses.size() == 5);
  const bool grid[5][3] = {{false, false, false}, {true, false, false}, {true, true, false}, {true, false, true}, {true, true, true}};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(losses[i].train.mask.cls);
    CHECK(losses[i].train.mask.entropy == grid[i][0]);
    CHECK(losses[i].train.mask.adv == grid[i][1]);
    CHECK(losses[i].train.mask.ib == grid[i][2]);
  }

  auto pos = ablation_variants(AblationProtocol::positions, mc, tc);
  REQUIRE(pos.size() == 5);
  CHECK(pos[0].model.encoder.dtab_positions == std::set<std::size_t>{0, 1, 2, 3});
  CHECK(pos[1].model.encoder.dtab_positions == std::set<std::size_t>{0});
  CHECK(pos[2].model.encoder.dtab_positions == std::set<std::size_t>{1, 3});
  CHECK(pos[3].model.encoder.dtab_positions == std::set<std::size_t>{0, 2});
  CHECK(pos[4].model.encoder.dtab_positions == std::set<std::size_t>{3});

  CHECK_THROWS_AS(parse_protocol("everything"), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  t.batch_size = 7;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.adv_lambda = -1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.pseudo_label_threshold = 1.5;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}
