#pragma once

// Run configuration files: one JSON object with optional sections
//
//   preset     task preset name, applied before the explicit sections
//   data       {source, target_train, target_test} manifest paths
//   synthetic  a synthetic-data spec, used instead of `data`
//   model      encoder and head settings, with a nested `dtab` object
//   train      optimiser and schedule settings
//   mask       which loss terms are active
//   ablation   {seeds: [...]}
//   out        default output directory
//
// Unknown keys are errors. Diagnostics carry the JSON path and source line.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "transferattn/synthgen.hpp"
#include "transferattn/trainer.hpp"

namespace transferattn {

struct DataPaths {
  std::filesystem::path source;
  std::filesystem::path target_train;
  std::filesystem::path target_test;
};

struct RunConfig {
  std::optional<std::string> preset;
  std::optional<DataPaths> data;
  std::optional<SynthSpec> synthetic;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> ablation_seeds{1, 2, 3};
  std::optional<std::filesystem::path> out;
  std::string text;  // the file exactly as read
};

namespace config_detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

/// Line of the first occurrence of "key" in the text, or 0.
inline std::size_t line_of_key(const std::string& text, const std::string& key) {
  const auto pos = text.find("\"" + key + "\"");
  return pos == std::string::npos ? 0 : line_of_offset(text, pos);
}

class Reader {
 public:
  Reader(const std::string& text, std::string source) : text_(text), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& path, const std::string& key, const std::string& msg) const {
    std::string where = source_;
    if (auto line = line_of_key(text_, key)) where += ":" + std::to_string(line);
    throw ConfigError(where + ": " + path + ": " + msg);
  }

  void only(const nlohmann::json& obj, const std::string& path, std::initializer_list<const char*> keys) const {
    if (!obj.is_object()) fail(path, path.substr(path.rfind('/') + 1), "expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      bool known = false;
      for (const char* k : keys) known = known || it.key() == k;
      if (!known) fail(path + "/" + it.key(), it.key(), "unknown key");
    }
  }

  template <class T>
  void take(const nlohmann::json& obj, const std::string& path, const char* key, T& field) const {
    if (!obj.contains(key)) return;
    try {
      field = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(path + "/" + key, key, "wrong type (got " + std::string(obj.at(key).type_name()) + ")");
    }
  }

 private:
  const std::string& text_;
  std::string source_;
};

}  // namespace config_detail

/// Parses a run configuration. `base` resolves relative data paths.
inline RunConfig parse_run_config(const std::string& text, const std::string& source_name,
                                  const std::filesystem::path& base = {}) {
  using config_detail::Reader;
  Reader rd(text, source_name);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source_name + ":" + std::to_string(config_detail::line_of_offset(text, e.byte)) + ": " + e.what());
  }
  rd.only(j, "", {"preset", "data", "synthetic", "model", "train", "mask", "ablation", "out"});

  RunConfig rc;
  rc.text = text;
  if (j.contains("preset")) {
    std::string name;
    rd.take(j, "", "preset", name);
    try {
      apply_preset(find_preset(name), rc.model, rc.train);
    } catch (const ConfigError& e) {
      rd.fail("/preset", "preset", e.what());
    }
    rc.preset = name;
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    rd.only(d, "/data", {"source", "target_train", "target_test"});
    std::string s, tt, te;
    rd.take(d, "/data", "source", s);
    rd.take(d, "/data", "target_train", tt);
    rd.take(d, "/data", "target_test", te);
    if (s.empty() || tt.empty() || te.empty()) rd.fail("/data", "data", "source, target_train and target_test are required");
    auto resolve = [&](const std::string& x) {
      std::filesystem::path p(x);
      return p.is_absolute() ? p : base / p;
    };
    rc.data = DataPaths{resolve(s), resolve(tt), resolve(te)};
  }
  if (j.contains("synthetic")) {
    try {
      rc.synthetic = synth_spec_from_json(j.at("synthetic"));
    } catch (const ConfigError& e) {
      rd.fail("/synthetic", "synthetic", e.what());
    } catch (const nlohmann::json::exception& e) {
      rd.fail("/synthetic", "synthetic", e.what());
    }
  }
  if (rc.data && rc.synthetic) rd.fail("", "synthetic", "give either data or synthetic, not both");

  if (j.contains("model")) {
    const auto& m = j.at("model");
    rd.only(m, "/model", {"feat_dim", "d_model", "heads", "layers", "mlp_ratio", "k_tokens", "dtab_positions",
                          "positional", "n_classes", "classifier_depth", "classifier_frozen", "init_seed", "dtab"});
    auto& e = rc.model.encoder;
    rd.take(m, "/model", "feat_dim", e.feat_dim);
    rd.take(m, "/model", "d_model", e.d_model);
    rd.take(m, "/model", "heads", e.heads);
    rd.take(m, "/model", "layers", e.layers);
    rd.take(m, "/model", "mlp_ratio", e.mlp_ratio);
    rd.take(m, "/model", "k_tokens", e.k_tokens);
    if (m.contains("dtab_positions")) {
      std::vector<std::size_t> pos;
      rd.take(m, "/model", "dtab_positions", pos);
      e.dtab_positions = std::set<std::size_t>(pos.begin(), pos.end());
    }
    if (m.contains("positional")) {
      std::string p;
      rd.take(m, "/model", "positional", p);
      if (p == "learned")
        e.positional = PositionalEmbedding::learned;
      else if (p == "none")
        e.positional = PositionalEmbedding::none;
      else
        rd.fail("/model/positional", "positional", "expected \"learned\" or \"none\"");
    }
    rd.take(m, "/model", "n_classes", rc.model.n_classes);
    rd.take(m, "/model", "classifier_depth", rc.model.classifier_depth);
    rd.take(m, "/model", "classifier_frozen", rc.model.classifier_frozen);
    rd.take(m, "/model", "init_seed", rc.model.init_seed);
    if (m.contains("dtab")) {
      const auto& d = m.at("dtab");
      rd.only(d, "/model/dtab", {"mdta", "ib", "grl_lambda", "grl", "dde_gradient", "convention", "queue",
                                 "ib_offdiag_weight", "pairing"});
      auto& o = e.dtab;
      rd.take(d, "/model/dtab", "mdta", o.transferability_attention);
      rd.take(d, "/model/dtab", "ib", o.ib);
      rd.take(d, "/model/dtab", "grl_lambda", o.grl_lambda);
      rd.take(d, "/model/dtab", "grl", o.grl_enabled);
      rd.take(d, "/model/dtab", "dde_gradient", o.dde_gradient);
      rd.take(d, "/model/dtab", "queue", o.queue_capacity);
      rd.take(d, "/model/dtab", "ib_offdiag_weight", o.ib_offdiag_weight);
      if (d.contains("convention")) {
        std::string c;
        rd.take(d, "/model/dtab", "convention", c);
        if (c == "bce")
          o.convention = DdeConvention::bce;
        else if (c == "raw")
          o.convention = DdeConvention::raw;
        else
          rd.fail("/model/dtab/convention", "convention", "expected \"bce\" or \"raw\"");
      }
      if (d.contains("pairing")) {
        std::string p;
        rd.take(d, "/model/dtab", "pairing", p);
        if (p == "class_matched")
          o.pairing = IbPairing::class_matched;
        else if (p == "random")
          o.pairing = IbPairing::random;
        else
          rd.fail("/model/dtab/pairing", "pairing", "expected \"class_matched\" or \"random\"");
      }
    }
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    rd.only(t, "/train", {"epochs", "batch_size", "seed", "lr", "beta1", "beta2", "eps", "weight_decay",
                          "decoupled_weight_decay", "adv_lambda", "entropy_weight", "ib_alpha", "patch_weight",
                          "eval_every", "checkpoint_every", "pseudo_label_threshold"});
    auto& tc = rc.train;
    rd.take(t, "/train", "epochs", tc.epochs);
    rd.take(t, "/train", "batch_size", tc.batch_size);
    rd.take(t, "/train", "seed", tc.seed);
    rd.take(t, "/train", "lr", tc.adam.lr);
    rd.take(t, "/train", "beta1", tc.adam.beta1);
    rd.take(t, "/train", "beta2", tc.adam.beta2);
    rd.take(t, "/train", "eps", tc.adam.eps);
    rd.take(t, "/train", "weight_decay", tc.adam.weight_decay);
    rd.take(t, "/train", "decoupled_weight_decay", tc.adam.decoupled_weight_decay);
    rd.take(t, "/train", "adv_lambda", tc.adv_lambda);
    rd.take(t, "/train", "entropy_weight", tc.weights.entropy);
    rd.take(t, "/train", "ib_alpha", tc.weights.ib);
    rd.take(t, "/train", "patch_weight", tc.weights.patch);
    rd.take(t, "/train", "eval_every", tc.eval_every);
    rd.take(t, "/train", "checkpoint_every", tc.checkpoint_every);
    rd.take(t, "/train", "pseudo_label_threshold", tc.pseudo_label_threshold);
  }
  if (j.contains("mask")) {
    const auto& m = j.at("mask");
    rd.only(m, "/mask", {"cls", "entropy", "adv", "ib", "patch"});
    rd.take(m, "/mask", "cls", rc.train.mask.cls);
    rd.take(m, "/mask", "entropy", rc.train.mask.entropy);
    rd.take(m, "/mask", "adv", rc.train.mask.adv);
    rd.take(m, "/mask", "ib", rc.train.mask.ib);
    rd.take(m, "/mask", "patch", rc.train.mask.patch);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    rd.only(a, "/ablation", {"seeds"});
    rd.take(a, "/ablation", "seeds", rc.ablation_seeds);
    if (rc.ablation_seeds.empty()) rd.fail("/ablation/seeds", "seeds", "need at least one seed");
  }
  if (j.contains("out")) {
    std::string o;
    rd.take(j, "", "out", o);
    rc.out = o;
  }

  if (rc.synthetic) {
    if (j.contains("model") && j.at("model").contains("feat_dim") && rc.model.encoder.feat_dim != rc.synthetic->feat_dim)
      rd.fail("/model/feat_dim", "feat_dim", "does not match synthetic feat_dim");
    rc.model.encoder.feat_dim = rc.synthetic->feat_dim;
    rc.model.n_classes = rc.synthetic->n_classes;
  }
  try {
    rc.model.encoder.validate();
    rc.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source_name + ": " + e.what());
  }
  return rc;
}

/// Effective settings after preset and overrides, in config-file vocabulary.
inline nlohmann::ordered_json resolved_json(const RunConfig& rc) {
  const auto& e = rc.model.encoder;
  const auto& d = e.dtab;
  const auto& t = rc.train;
  nlohmann::ordered_json j;
  j["preset"] = rc.preset ? nlohmann::ordered_json(*rc.preset) : nlohmann::ordered_json();
  j["model"] = {{"feat_dim", e.feat_dim},
                {"d_model", e.d_model},
                {"heads", e.heads},
                {"layers", e.layers},
                {"mlp_ratio", e.mlp_ratio},
                {"k_tokens", e.k_tokens},
                {"dtab_positions", std::vector<std::size_t>(e.dtab_positions.begin(), e.dtab_positions.end())},
                {"positional", e.positional == PositionalEmbedding::learned ? "learned" : "none"},
                {"n_classes", rc.model.n_classes},
                {"classifier_depth", rc.model.classifier_depth},
                {"classifier_frozen", rc.model.classifier_frozen},
                {"init_seed", rc.model.init_seed},
                {"dtab",
                 {{"mdta", d.transferability_attention},
                  {"ib", d.ib},
                  {"grl_lambda", d.grl_lambda},
                  {"grl", d.grl_enabled},
                  {"dde_gradient", d.dde_gradient},
                  {"convention", d.convention == DdeConvention::bce ? "bce" : "raw"},
                  {"queue", d.queue_capacity},
                  {"ib_offdiag_weight", d.ib_offdiag_weight},
                  {"pairing", d.pairing == IbPairing::class_matched ? "class_matched" : "random"}}}};
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"lr", t.adam.lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"weight_decay", t.adam.weight_decay},
                {"decoupled_weight_decay", t.adam.decoupled_weight_decay},
                {"adv_lambda", t.adv_lambda},
                {"entropy_weight", t.weights.entropy},
                {"ib_alpha", t.weights.ib},
                {"patch_weight", t.weights.patch},
                {"eval_every", t.eval_every},
                {"checkpoint_every", t.checkpoint_every},
                {"pseudo_label_threshold", t.pseudo_label_threshold}};
  j["mask"] = {{"cls", t.mask.cls}, {"entropy", t.mask.entropy}, {"adv", t.mask.adv}, {"ib", t.mask.ib},
               {"patch", t.mask.patch}};
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), path.string(), path.parent_path());
}

}  // namespace transferattn
