#include <catch_amalgamated.hpp>

#include "transferattn/config.hpp"
#include "support.hpp"

using namespace transferattn;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("empty config keeps the defaults") {
  RunConfig rc = parse_run_config("{}", "cfg.json");
  CHECK(rc.model.encoder.d_model == EncoderConfig{}.d_model);
  CHECK(rc.train.epochs == TrainConfig{}.epochs);
  CHECK_FALSE(rc.preset.has_value());
  CHECK(rc.ablation_seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(rc.text == "{}");
}

TEST_CASE("preset is applied before explicit sections") {
  RunConfig rc = parse_run_config(R"({"preset": "kinetics-necdrone", "train": {"ib_alpha": 0.5}})", "cfg.json");
  CHECK(rc.train.batch_size == 64);
  CHECK(rc.model.encoder.k_tokens == 53);
  CHECK(rc.train.weights.ib == 0.5);
  CHECK(rc.train.adv_lambda == 0.5);
}

TEST_CASE("every section is read") {
  const std::string text = R"({
    "synthetic": {"n_classes": 3, "feat_dim": 16, "theta_deg": 0},
    "model": {"d_model": 16, "heads": 2, "layers": 2, "k_tokens": 4, "dtab_positions": [1],
              "positional": "none", "classifier_frozen": false,
              "dtab": {"mdta": false, "queue": 8, "convention": "raw", "pairing": "random"}},
    "train": {"epochs": 3, "batch_size": 8, "lr": 0.01, "entropy_weight": 0.2, "seed": 9},
    "mask": {"adv": false},
    "ablation": {"seeds": [4, 5]},
    "out": "runs/x"
  })";
  RunConfig rc = parse_run_config(text, "cfg.json");
  REQUIRE(rc.synthetic.has_value());
  CHECK(rc.model.encoder.feat_dim == 16);
  CHECK(rc.model.n_classes == 3);
  CHECK(rc.model.encoder.dtab_positions == std::set<std::size_t>{1});
  CHECK(rc.model.encoder.positional == PositionalEmbedding::none);
  CHECK_FALSE(rc.model.classifier_frozen);
  CHECK_FALSE(rc.model.encoder.dtab.transferability_attention);
  CHECK(rc.model.encoder.dtab.queue_capacity == 8);
  CHECK(rc.model.encoder.dtab.convention == DdeConvention::raw);
  CHECK(rc.model.encoder.dtab.pairing == IbPairing::random);
  CHECK(rc.train.epochs == 3);
  CHECK(rc.train.adam.lr == 0.01);
  CHECK(rc.train.weights.entropy == 0.2);
  CHECK(rc.train.seed == 9);
  CHECK_FALSE(rc.train.mask.adv);
  CHECK(rc.train.mask.cls);
  CHECK(rc.ablation_seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(rc.out->string() == "runs/x");
}

TEST_CASE("unknown keys are reported with path and line") {
  const std::string msg = error_of("{\n  \"model\": {\n    \"dtab\": {\n      \"grl_lamda\": 1\n    }\n  }\n}");
  CHECK_THAT(msg, ContainsSubstring("cfg.json:4"));
  CHECK_THAT(msg, ContainsSubstring("/model/dtab/grl_lamda"));
  CHECK_THAT(msg, ContainsSubstring("unknown key"));
  CHECK_THAT(error_of(R"({"trian": {}})"), ContainsSubstring("/trian"));
}

TEST_CASE("bad values and types are rejected") {
  CHECK_THAT(error_of("{\n\"train\": {\"epochs\": \"ten\"}}"), ContainsSubstring("cfg.json:2: /train/epochs: wrong type"));
  CHECK_THAT(error_of(R"({"preset": "nope"})"), ContainsSubstring("unknown task preset"));
  CHECK_THAT(error_of(R"({"model": {"positional": "sinusoid"}})"), ContainsSubstring("/model/positional"));
  CHECK_THAT(error_of(R"({"model": {"d_model": 10, "heads": 3}})"), ContainsSubstring("not divisible"));
  CHECK_THAT(error_of(R"({"train": {"batch_size": 7}})"), ContainsSubstring("even"));
  CHECK_THAT(error_of(R"({"data": {"source": "a.jsonl"}})"), ContainsSubstring("required"));
  CHECK_THAT(error_of(R"({"synthetic": {"n_clases": 2}})"), ContainsSubstring("/synthetic"));
  CHECK_THAT(error_of(R"({"synthetic": {}, "model": {"feat_dim": 5}})"), ContainsSubstring("feat_dim"));
  CHECK_THAT(error_of(R"({"ablation": {"seeds": []}})"), ContainsSubstring("seed"));
}

TEST_CASE("syntax errors carry a line number") {
  CHECK_THAT(error_of("{\n  \"train\": {\n    \"epochs\": 3,\n  }\n}"), ContainsSubstring("cfg.json:4"));
  CHECK_THAT(error_of("[1, 2]"), ContainsSubstring("expected an object"));
}

TEST_CASE("files load verbatim with relative data paths") {
  testing_support::TempDir dir("config");
  const std::string text =
      "{\"data\": {\"source\": \"s.jsonl\", \"target_train\": \"t.jsonl\", \"target_test\": \"/abs/e.jsonl\"}}\n";
  {
    std::ofstream os(dir / "run.json", std::ios::binary);
    os << text;
  }
  RunConfig rc = load_run_config(dir / "run.json");
  CHECK(rc.text == text);
  REQUIRE(rc.data.has_value());
  CHECK(rc.data->source == dir / "s.jsonl");
  CHECK(rc.data->target_test == std::filesystem::path("/abs/e.jsonl"));
  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
}

TEST_CASE("the shipped bad config is rejected") {
  const std::string path = std::string(TEST_DATA_DIR) + "/bad_config.json";
  try {
    load_run_config(path);
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK_THAT(std::string(e.what()), ContainsSubstring("bad_config.json:8"));
    CHECK_THAT(std::string(e.what()), ContainsSubstring("grl_lamda"));
  }
}

TEST_CASE("resolved settings parse back to the same configuration") {
  RunConfig rc = parse_run_config(R"({"preset": "kinetics-necdrone", "model": {"dtab": {"pairing": "random"}}})", "a");
  auto j = resolved_json(rc);
  CHECK(j["train"]["batch_size"] == 64);
  CHECK(j["train"]["ib_alpha"] == 0.025);
  CHECK(j["train"]["adv_lambda"] == 0.5);
  CHECK(j["model"]["k_tokens"] == 53);
  CHECK(j["model"]["dtab"]["queue"] == 512);
  j.erase("preset");
  RunConfig again = parse_run_config(j.dump(), "b");
  auto a = resolved_json(again), b = resolved_json(rc);
  a.erase("preset");
  b.erase("preset");
  CHECK(a == b);
}
