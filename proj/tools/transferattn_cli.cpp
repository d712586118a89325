// transferattn-cli: train, eval, synth, gradcheck, ablate, features inspect.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or flags.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "transferattn/config.hpp"
#include "transferattn/gradsuite.hpp"

using namespace transferattn;
namespace fs = std::filesystem;

namespace {

struct Splits {
  FeatureStore source;
  FeatureStore target_train;
  FeatureStore target_test;
};

Splits load_splits(const RunConfig& rc) {
  if (rc.synthetic) {
    SynthStores s = synthetic_stores(generate_synthetic(*rc.synthetic));
    return {std::move(s.source_train), std::move(s.target_train), std::move(s.target_test)};
  }
  if (!rc.data) throw ConfigError("config has neither data nor synthetic section");
  Splits s{FeatureStore(read_manifest(rc.data->source)), FeatureStore(read_manifest(rc.data->target_train)),
           FeatureStore(read_manifest(rc.data->target_test))};
  for (const FeatureStore* st : {&s.source, &s.target_train, &s.target_test})
    if (st->feat_dim() != rc.model.encoder.feat_dim)
      throw ConfigError("model feat_dim " + std::to_string(rc.model.encoder.feat_dim) + " does not match dataset " +
                        st->manifest().dataset + " (" + std::to_string(st->feat_dim()) + ")");
  return s;
}

/// Self-contained configuration stored inside checkpoints.
std::string checkpoint_config(const RunConfig& rc) {
  auto j = resolved_json(rc);
  j.erase("preset");
  if (rc.synthetic) j["synthetic"] = nlohmann::json(*rc.synthetic);
  if (rc.data)
    j["data"] = {{"source", fs::absolute(rc.data->source).string()},
                 {"target_train", fs::absolute(rc.data->target_train).string()},
                 {"target_test", fs::absolute(rc.data->target_test).string()}};
  return j.dump(2);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

nlohmann::ordered_json outputs_manifest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (auto& f : files) j.push_back({{"path", f.generic_string()}, {"bytes", fs::file_size(dir / f)}});
  return j;
}

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, std::optional<std::string> out_flag) {
  RunConfig rc = load_run_config(config_path);
  if (seed) {
    rc.train.seed = *seed;
    rc.model.init_seed = *seed;
  }
  fs::path out;
  if (out_flag)
    out = *out_flag;
  else if (rc.out)
    out = *rc.out;
  else
    throw ConfigError(config_path + ": no output directory (use --out or the \"out\" key)");

  auto resolved = resolved_json(rc);
  std::cout << "settings: B=" << rc.train.batch_size << " k=" << rc.model.encoder.k_tokens
            << " Q=" << rc.model.encoder.dtab.queue_capacity << " alpha=" << rc.train.weights.ib
            << " lambda=" << rc.train.adv_lambda << " epochs=" << rc.train.epochs << " seed=" << rc.train.seed << '\n';

  Splits data = load_splits(rc);
  fs::create_directories(out);
  write_text(out / "config.json", rc.text);
  write_text(out / "resolved.json", resolved.dump(2) + "\n");

  TransferAttnModel model(rc.model);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  TrainOutcome o = train_model(model, rc.train, data.source, data.target_train, &data.target_test, &metrics,
                               out / "checkpoints", checkpoint_config(rc));
  metrics.close();

  nlohmann::ordered_json report{{"final_accuracy", o.final_accuracy},
                                {"best_accuracy", o.best_accuracy},
                                {"best_epoch", o.best_epoch},
                                {"epochs", rc.train.epochs},
                                {"seed", rc.train.seed},
                                {"trainable_parameters", model.params().trainable_count()},
                                {"total_parameters", model.params().total_count()},
                                {"final_hash", hex(o.final_hash)}};
  write_text(out / "report.json", report.dump(2) + "\n");
  write_text(out / "outputs.json", outputs_manifest(out).dump(2) + "\n");
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, std::optional<std::string> manifest, std::optional<std::string> export_dir) {
  Checkpoint ck = read_checkpoint(checkpoint);
  RunConfig rc = parse_run_config(ck.config_json, checkpoint + " (embedded config)");
  TransferAttnModel model(rc.model);
  load_parameters(model, ck);

  std::optional<FeatureStore> store;
  if (manifest)
    store.emplace(read_manifest(*manifest));
  else if (rc.synthetic)
    store.emplace(std::move(synthetic_stores(generate_synthetic(*rc.synthetic)).target_test));
  else if (rc.data)
    store.emplace(read_manifest(rc.data->target_test));
  else
    throw ConfigError("eval: no --manifest and the checkpoint names no dataset");
  if (store->feat_dim() != rc.model.encoder.feat_dim)
    throw ConfigError("eval: manifest feat_dim " + std::to_string(store->feat_dim()) + " does not match the model");

  std::optional<fs::path> exp;
  if (export_dir) exp = fs::path(*export_dir);
  EvalResult r = evaluate(model, *store, exp);
  nlohmann::ordered_json j{{"accuracy", r.accuracy}, {"n", r.n}, {"per_class_accuracy", r.per_class_accuracy}};
  if (exp) j["exported"] = r.ids.size();
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out) {
  std::ifstream is(spec_path, std::ios::binary);
  if (!is) throw ConfigError("cannot open spec " + spec_path);
  std::ostringstream ss;
  ss << is.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(spec_path + ": " + e.what());
  }
  SynthSpec spec;
  try {
    spec = synth_spec_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(spec_path + ": " + e.what());
  }
  SynthDataset ds = generate_synthetic(spec);
  write_synthetic(ds, out);
  std::cout << "wrote " << ds.source_train.videos.size() << " source, " << ds.target_train.videos.size()
            << " target-train and " << ds.target_test.videos.size() << " target-test videos to " << out << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& scope, double tol, std::size_t instances, std::uint64_t seed) {
  auto reports = run_gradient_suite(scope, instances, tol, seed);
  std::size_t failed = 0;
  for (auto& r : reports) {
    std::printf("%s %s/%s worst %.3g%s%s\n", r.passed ? "PASS" : "FAIL", r.scope.c_str(), r.name.c_str(), r.worst_rel,
                r.worst_where.empty() ? "" : " at ", r.worst_where.c_str());
    failed += r.passed ? 0 : 1;
  }
  std::printf("%zu cases, %zu failed (tol %g, %zu instances)\n", reports.size(), failed, tol, instances);
  return failed == 0 ? 0 : 1;
}

int cmd_ablate(const std::string& protocol_name, const std::string& config_path) {
  const AblationProtocol protocol = parse_protocol(protocol_name);
  RunConfig rc = load_run_config(config_path);
  Splits data = load_splits(rc);
  auto rows = run_ablation(protocol, rc.model, rc.train, rc.ablation_seeds, data.source, data.target_train,
                           data.target_test, [](const std::string& name, std::uint64_t seed, double acc) {
                             std::cerr << name << " seed " << seed << " accuracy " << acc << '\n';
                           });
  std::cout << ablation_table_json(protocol, rows).dump(2) << '\n';
  return 0;
}

int cmd_inspect(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::io, "cannot open " + path);
  std::array<unsigned char, kFeatureHeaderSize> hb{};
  is.read(reinterpret_cast<char*>(hb.data()), hb.size());
  if (is.gcount() != static_cast<std::streamsize>(hb.size()))
    throw FormatError(FormatError::Kind::truncated, path + ": shorter than a header");
  BlockHeader h = detail::decode_header(hb.data(), path);
  std::vector<unsigned char> payload(h.payload_bytes());
  is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  const auto got = static_cast<std::size_t>(is.gcount());
  std::string status;
  if (got < payload.size())
    status = "truncated";
  else
    status = detail::crc32_of(payload.data(), payload.size()) == h.crc ? "ok" : "mismatch";
  nlohmann::ordered_json j{{"path", path},
                           {"version", h.version},
                           {"dtype", h.dtype == DType::float32 ? "float32" : "float64"},
                           {"rows", h.rows},
                           {"cols", h.cols},
                           {"crc32", hex(h.crc).substr(8)},
                           {"payload_bytes", h.payload_bytes()},
                           {"checksum", status}};
  std::cout << j.dump(2) << '\n';
  return status == "ok" ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TransferAttn video domain adaptation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only print warnings and results");

  std::string config, checkpoint, spec, out_dir, scope = "all", protocol, inspect_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_opt, manifest, export_dir;
  double tol = 1e-4;
  std::size_t instances = 5;
  std::uint64_t grad_seed = 0;

  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Overrides train.seed and model.init_seed");
  train->add_option("--out", out_opt, "Run directory (defaults to the config's \"out\")");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a labeled manifest");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest, "Dataset manifest (defaults to the training target-test split)");
  eval->add_option("--export-features", export_dir, "Write pooled features here, one file per video");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic shifted dataset");
  synth->add_option("--spec", spec, "Synthetic spec (JSON)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out_dir, "Output directory")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad->add_option("--scope", scope, "ops, encoder, dtab, heads or all")->capture_default_str();
  grad->add_option("--tol", tol, "Relative error tolerance")->capture_default_str();
  grad->add_option("--instances", instances, "Random instances per case")->capture_default_str();
  grad->add_option("--seed", grad_seed, "Instance seed")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Run an ablation protocol and print the table");
  ablate->add_option("--protocol", protocol, "components, losses or positions")->required();
  ablate->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);

  auto* features = app.add_subcommand("features", "Feature file utilities");
  features->require_subcommand(1);
  auto* inspect = features->add_subcommand("inspect", "Print header fields and checksum status");
  inspect->add_option("path", inspect_path, "Feature file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  log_level() = quiet ? LogLevel::warn : LogLevel::info;

  try {
    if (*train) return cmd_train(config, seed, out_opt);
    if (*eval) return cmd_eval(checkpoint, manifest, export_dir);
    if (*synth) return cmd_synth(spec, out_dir);
    if (*grad) return cmd_gradcheck(scope, tol, instances, grad_seed);
    if (*ablate) return cmd_ablate(protocol, config);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
