#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "transferattn/feature_io.hpp"
#include "transferattn/heads.hpp"
#include "transferattn/model.hpp"
#include "transferattn/optim.hpp"

namespace transferattn {

/// Per-task hyperparameters for the four benchmark adaptation tasks.
struct TaskPreset {
  std::string name;
  std::size_t batch_size;
  std::size_t k_tokens;
  std::size_t queue_size;
  double ib_alpha;
  double adv_lambda;
};

inline const std::vector<TaskPreset>& task_presets() {
  static const std::vector<TaskPreset> presets{
      {"ucf-hmdb", 32, 53, 1024, 0.001, 1.0},
      {"hmdb-ucf", 32, 53, 1024, 0.001, 0.5},
      {"kinetics-gameplay", 64, 23, 512, 0.001, 0.05},
      {"kinetics-necdrone", 64, 53, 512, 0.025, 0.5},
  };
  return presets;
}

inline const TaskPreset& find_preset(const std::string& name) {
  for (auto& p : task_presets())
    if (p.name == name) return p;
  std::string known;
  for (auto& p : task_presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown task preset \"" + name + "\" (known: " + known + ")");
}

struct TrainConfig {
  AdamConfig adam;
  std::size_t epochs = 300;
  std::size_t batch_size = 32;  // half source, half target
  std::uint64_t seed = 0;
  double adv_lambda = 1.0;
  LossMask mask;
  LossWeights weights;
  std::size_t eval_every = 0;         // epochs between target evaluations; 0 = final only
  std::size_t checkpoint_every = 25;  // epochs; 0 disables periodic checkpoints
  double pseudo_label_threshold = 0.5;  // target rows below this softmax confidence get no IB partner

  void validate() const {
    if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("batch_size must be an even number >= 2");
    if (!(adv_lambda >= 0.0)) throw ConfigError("adversarial lambda must be non-negative");
    if (!(adam.lr > 0.0) || adam.weight_decay < 0.0) throw ConfigError("lr must be positive, weight decay non-negative");
    if (!(pseudo_label_threshold >= 0.0 && pseudo_label_threshold <= 1.0))
      throw ConfigError("pseudo_label_threshold must lie in [0, 1]");
    weights.validate();
  }
};

/// Applies a task preset to the model and training configuration.
inline void apply_preset(const TaskPreset& p, ModelConfig& model, TrainConfig& train) {
  train.batch_size = p.batch_size;
  train.adv_lambda = p.adv_lambda;
  train.weights.ib = p.ib_alpha;
  model.encoder.k_tokens = p.k_tokens;
  model.encoder.dtab.queue_capacity = p.queue_size;
}

/// Shuffled pass over ids that reshuffles whenever it wraps.
class CyclingSampler {
 public:
  CyclingSampler(std::vector<std::string> ids, Rng& rng) : ids_(std::move(ids)), rng_(&rng) {
    if (ids_.empty()) throw UsageError("sampler: no videos");
    rng_->shuffle(ids_);
  }

  std::vector<std::string> next(std::size_t n) {
    std::vector<std::string> out;
    while (out.size() < n) {
      if (pos_ == ids_.size()) {
        rng_->shuffle(ids_);
        pos_ = 0;
      }
      out.push_back(ids_[pos_++]);
    }
    return out;
  }

  std::size_t size() const { return ids_.size(); }

 private:
  std::vector<std::string> ids_;
  Rng* rng_;
  std::size_t pos_ = 0;
};

inline nlohmann::ordered_json report_json(const LossReport& r) {
  return {{"cls", r.cls}, {"entropy", r.entropy}, {"adv", r.adv}, {"ib", r.ib}, {"patch", r.patch}, {"total", r.total}};
}

struct EpochSummary {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  LossReport mean;
};

struct StepResult {
  LossReport report;
  std::size_t ib_pairs = 0;
};

class Trainer {
 public:
  Trainer(TransferAttnModel& model, TrainConfig cfg, std::ostream* metrics = nullptr)
      : model_(&model), cfg_(std::move(cfg)), metrics_(metrics) {
    cfg_.validate();
    Rng root(cfg_.seed);
    data_rng_ = Rng(root.fork_seed());
    ib_rng_ = Rng(root.fork_seed());
  }

  const TrainConfig& config() const { return cfg_; }
  const AdamState& optimizer_state() const { return adam_; }
  std::size_t epochs_done() const { return epoch_; }
  std::size_t steps_done() const { return step_; }

  /// One optimisation step on an explicit pair of half-batches.
  StepResult step(const Batch& source, const Batch& target) {
    const std::size_t hs = source.size(), ht = target.size();
    const std::size_t k = source.x.dim(1), d = source.x.dim(2);
    std::vector<double> xs(source.x.data().begin(), source.x.data().end());
    xs.insert(xs.end(), target.x.data().begin(), target.x.data().end());
    Tensor x({hs + ht, k, d}, std::move(xs));
    std::vector<Domain> domains(hs, Domain::source);
    domains.resize(hs + ht, Domain::target);

    auto& enc = model_->encoder();
    EncodeResult er = enc.encode(x, &domains, true, &ib_rng_);
    std::vector<std::size_t> src_rows(hs), tgt_rows(ht);
    std::iota(src_rows.begin(), src_rows.end(), 0);
    std::iota(tgt_rows.begin(), tgt_rows.end(), hs);

    LossParts parts;
    const auto& mask = cfg_.mask;
    Tensor logits = model_->classifier().logits(er.features);
    if (mask.cls) parts.cls = loss_cls(take_rows(logits, src_rows), source.labels);
    if (mask.entropy) parts.entropy = loss_soft_entropy(take_rows(logits, tgt_rows));
    if (mask.adv) parts.adv = loss_adv(er.features, domains, model_->adversary(), cfg_.adv_lambda);
    std::size_t ib_pairs = 0;
    if (!er.ib_inputs.empty()) {
      std::vector<int> labels = source.labels;
      const std::vector<int> pseudo = confident_pseudo_labels(take_rows(logits, tgt_rows), cfg_.pseudo_label_threshold);
      labels.insert(labels.end(), pseudo.begin(), pseudo.end());
      IbSummary ib = enc.information_bottleneck(er, domains, labels, ib_rng_);
      ib_pairs = ib.pairs;
      if (mask.ib && ib.pairs >= 2) parts.ib = ib.loss;
    }
    if (mask.patch && uses_patch_discriminator()) parts.patch = er.patch_disc_loss;
    auto [total, report] = total_loss(parts, cfg_.weights);

    model_->params().zero_grad();
    total.backward();
    adam_step(model_->params(), adam_, cfg_.adam);
    model_->params().zero_grad();
    ++step_;
    if (metrics_) {
      nlohmann::ordered_json j{{"type", "step"}, {"step", step_}, {"epoch", epoch_}};
      j.update(report_json(report));
      j["lr"] = cfg_.adam.lr;
      j["seed"] = cfg_.seed;
      *metrics_ << j.dump() << '\n';
    }
    return {report, ib_pairs};
  }

  /// One pass over the smaller domain; the larger one keeps cycling across epochs.
  EpochSummary train_epoch(const FeatureStore& source, const FeatureStore& target) {
    if (!source_sampler_) {
      auto s_ids = source.ids_where(Domain::source, true);
      auto t_ids = target.ids_where(Domain::target);
      if (s_ids.empty() || t_ids.empty()) throw UsageError("train_epoch: both domains need videos");
      source_sampler_.emplace(std::move(s_ids), data_rng_);
      target_sampler_.emplace(std::move(t_ids), data_rng_);
    }
    const std::size_t half = cfg_.batch_size / 2;
    const std::size_t smaller = std::min(source_sampler_->size(), target_sampler_->size());
    const std::size_t steps = (smaller + half - 1) / half;
    const std::size_t k = model_->encoder().config().k_tokens;
    EpochSummary sum;
    sum.epoch = epoch_;
    for (std::size_t s = 0; s < steps; ++s) {
      Batch sb = make_batch(source, source_sampler_->next(half), k, SampleMode::train_random, data_rng_);
      Batch tb = make_batch(target, target_sampler_->next(half), k, SampleMode::train_random, data_rng_);
      LossReport r = step(sb, tb).report;
      sum.mean.cls += r.cls;
      sum.mean.entropy += r.entropy;
      sum.mean.adv += r.adv;
      sum.mean.ib += r.ib;
      sum.mean.patch += r.patch;
      sum.mean.total += r.total;
    }
    sum.steps = steps;
    const double inv = 1.0 / static_cast<double>(steps);
    for (double* v : {&sum.mean.cls, &sum.mean.entropy, &sum.mean.adv, &sum.mean.ib, &sum.mean.patch, &sum.mean.total})
      *v *= inv;
    ++epoch_;
    return sum;
  }

  void log_record(const nlohmann::ordered_json& j) {
    if (metrics_) *metrics_ << j.dump() << '\n';
  }

 private:
  bool uses_patch_discriminator() const {
    for (auto& b : model_->encoder().blocks())
      if (b.uses_mdta()) return true;
    return false;
  }

  TransferAttnModel* model_;
  TrainConfig cfg_;
  std::ostream* metrics_;
  Rng data_rng_;
  Rng ib_rng_;
  AdamState adam_;
  std::optional<CyclingSampler> source_sampler_;
  std::optional<CyclingSampler> target_sampler_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
};

struct EvalResult {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::vector<double> per_class_accuracy;  // NaN for classes without videos
  std::vector<std::size_t> per_class_count;
  std::vector<int> predictions;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> features;
};

/// Top-1 accuracy on the labeled videos of `store`, with centre-of-segment
/// sampling. When `export_dir` is set, writes one [1 x d_model] feature file per video.
inline EvalResult evaluate(TransferAttnModel& model, const FeatureStore& store,
                           const std::optional<std::filesystem::path>& export_dir = std::nullopt,
                           std::size_t batch_size = 64) {
  std::vector<std::string> ids;
  for (auto& v : store.videos())
    if (v.label) ids.push_back(v.video_id);
  if (ids.empty()) throw UsageError("evaluate: no labeled videos in " + store.manifest().dataset);
  NoGradGuard no_grad;
  const std::size_t n_classes = model.classifier().n_classes();
  const std::size_t k = model.encoder().config().k_tokens;
  EvalResult res;
  res.per_class_count.assign(n_classes, 0);
  std::vector<std::size_t> correct(n_classes, 0);
  std::size_t hits = 0;
  Rng unused(0);
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    std::vector<std::string> chunk(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                   ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + batch_size)));
    Batch b = make_batch(store, chunk, k, SampleMode::eval_center, unused);
    EncodeResult er = model.encoder().encode(b.x, &b.domains, false);
    Tensor logits = model.classifier().logits(er.features);
    const std::size_t d = er.features.dim(1);
    const std::vector<int> preds = argmax_rows(logits);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const int pred = preds[i];
      const int label = b.labels[i];
      if (label < 0 || static_cast<std::size_t>(label) >= n_classes)
        throw DataError("evaluate: label " + std::to_string(label) + " out of range for " + chunk[i]);
      res.per_class_count[static_cast<std::size_t>(label)]++;
      if (pred == label) {
        ++hits;
        correct[static_cast<std::size_t>(label)]++;
      }
      res.predictions.push_back(pred);
      res.ids.push_back(chunk[i]);
      auto f = er.features.data().subspan(i * d, d);
      res.features.emplace_back(f.begin(), f.end());
    }
  }
  res.n = ids.size();
  res.accuracy = static_cast<double>(hits) / static_cast<double>(res.n);
  for (std::size_t c = 0; c < n_classes; ++c)
    res.per_class_accuracy.push_back(res.per_class_count[c] ? static_cast<double>(correct[c]) /
                                                                  static_cast<double>(res.per_class_count[c])
                                                            : std::numeric_limits<double>::quiet_NaN());
  if (export_dir) {
    for (std::size_t i = 0; i < res.ids.size(); ++i) {
      VideoFeatures v;
      v.video_id = res.ids[i];
      v.n_frames = 1;
      v.feat_dim = res.features[i].size();
      v.frames.assign(res.features[i].begin(), res.features[i].end());
      write_features(v, *export_dir / (res.ids[i] + ".tfat"));
    }
  }
  return res;
}

struct TrainOutcome {
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::uint64_t final_hash = 0;
  std::vector<EpochSummary> epochs;
};

/// Full schedule: epochs of training, periodic target evaluation, and
/// checkpoints every `checkpoint_every` epochs plus the best-on-target one.
inline TrainOutcome train_model(TransferAttnModel& model, const TrainConfig& cfg, const FeatureStore& source,
                                const FeatureStore& target_train, const FeatureStore* target_test,
                                std::ostream* metrics = nullptr,
                                const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                                const std::string& config_echo = "{}") {
  Trainer trainer(model, cfg, metrics);
  TrainOutcome out;
  out.best_accuracy = -1.0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochSummary s = trainer.train_epoch(source, target_train);
    nlohmann::ordered_json j{{"type", "epoch"}, {"epoch", e}, {"steps", s.steps}};
    j.update(report_json(s.mean));
    const bool last = e + 1 == cfg.epochs;
    if (target_test && (last || (cfg.eval_every && (e + 1) % cfg.eval_every == 0))) {
      const double acc = evaluate(model, *target_test).accuracy;
      j["target_accuracy"] = acc;
      if (acc > out.best_accuracy) {
        out.best_accuracy = acc;
        out.best_epoch = e;
        if (checkpoint_dir) save_checkpoint(model, config_echo, *checkpoint_dir / "best.ckpt");
      }
      if (last) out.final_accuracy = acc;
    }
    trainer.log_record(j);
    if (checkpoint_dir && cfg.checkpoint_every && (e + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(model, config_echo, *checkpoint_dir / ("epoch" + std::to_string(e + 1) + ".ckpt"));
    out.epochs.push_back(s);
  }
  if (checkpoint_dir) save_checkpoint(model, config_echo, *checkpoint_dir / "final.ckpt");
  out.final_hash = model.params().hash();
  if (out.best_accuracy < 0.0) out.best_accuracy = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationProtocol { components, losses, positions };

inline AblationProtocol parse_protocol(const std::string& s) {
  if (s == "components") return AblationProtocol::components;
  if (s == "losses") return AblationProtocol::losses;
  if (s == "positions") return AblationProtocol::positions;
  throw ConfigError("unknown ablation protocol \"" + s + "\" (components|losses|positions)");
}

struct AblationVariant {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

/// The configurations each protocol compares, derived from a full-DTAB base.
inline std::vector<AblationVariant> ablation_variants(AblationProtocol protocol, const ModelConfig& base_model,
                                                      const TrainConfig& base_train) {
  const std::size_t last = base_model.encoder.layers - 1;
  std::vector<AblationVariant> out;
  auto variant = [&](std::string name, auto&& edit) {
    AblationVariant v{std::move(name), base_model, base_train};
    v.model.encoder.dtab.transferability_attention = true;
    v.model.encoder.dtab.ib = true;
    edit(v);
    out.push_back(std::move(v));
  };
  switch (protocol) {
    case AblationProtocol::components:
      variant("standard", [&](AblationVariant& v) { v.model.encoder.dtab_positions.clear(); });
      variant("+mdta", [&](AblationVariant& v) {
        v.model.encoder.dtab_positions = {last};
        v.model.encoder.dtab.ib = false;
      });
      variant("+ib", [&](AblationVariant& v) {
        v.model.encoder.dtab_positions = {last};
        v.model.encoder.dtab.transferability_attention = false;
      });
      variant("dtab", [&](AblationVariant& v) { v.model.encoder.dtab_positions = {last}; });
      break;
    case AblationProtocol::losses: {
      struct Row {
        const char* name;
        bool entropy, adv, ib;
      };
      for (Row r : {Row{"cls", false, false, false}, Row{"cls+H", true, false, false}, Row{"cls+H+adv", true, true, false},
                    Row{"cls+H+ib", true, false, true}, Row{"cls+H+adv+ib", true, true, true}})
        variant(r.name, [&](AblationVariant& v) {
          v.model.encoder.dtab_positions = {last};
          v.model.encoder.dtab.ib = r.ib;
          v.train.mask.entropy = r.entropy;
          v.train.mask.adv = r.adv;
          v.train.mask.ib = r.ib;
        });
      break;
    }
    case AblationProtocol::positions: {
      std::set<std::size_t> all, odd, even;
      for (std::size_t i = 0; i <= last; ++i) {
        all.insert(i);
        // Positions are counted from 1: blocks 1, 3, ... are odd.
        (i % 2 == 0 ? odd : even).insert(i);
      }
      variant("all", [&](AblationVariant& v) { v.model.encoder.dtab_positions = all; });
      variant("first", [&](AblationVariant& v) { v.model.encoder.dtab_positions = {0}; });
      variant("even", [&](AblationVariant& v) { v.model.encoder.dtab_positions = even; });
      variant("odd", [&](AblationVariant& v) { v.model.encoder.dtab_positions = odd; });
      variant("last", [&](AblationVariant& v) { v.model.encoder.dtab_positions = {last}; });
      break;
    }
  }
  return out;
}

struct AblationRow {
  std::string name;
  std::vector<double> accuracies;  // one per seed
  double mean_accuracy = 0.0;
};

/// Trains every variant once per seed and reports final target accuracy.
/// `on_run` (optional) observes each finished run.
inline std::vector<AblationRow> run_ablation(
    AblationProtocol protocol, const ModelConfig& base_model, const TrainConfig& base_train,
    const std::vector<std::uint64_t>& seeds, const FeatureStore& source, const FeatureStore& target_train,
    const FeatureStore& target_test,
    const std::function<void(const std::string&, std::uint64_t, double)>& on_run = {}) {
  std::vector<AblationRow> rows;
  for (auto& v : ablation_variants(protocol, base_model, base_train)) {
    AblationRow row{v.name, {}, 0.0};
    for (auto seed : seeds) {
      ModelConfig mc = v.model;
      mc.init_seed = seed;
      TrainConfig tc = v.train;
      tc.seed = seed;
      TransferAttnModel model(mc);
      TrainOutcome o = train_model(model, tc, source, target_train, &target_test);
      row.accuracies.push_back(o.final_accuracy);
      if (on_run) on_run(v.name, seed, o.final_accuracy);
    }
    double s = 0.0;
    for (double a : row.accuracies) s += a;
    row.mean_accuracy = s / static_cast<double>(row.accuracies.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::ordered_json ablation_table_json(AblationProtocol protocol, const std::vector<AblationRow>& rows) {
  static const char* names[] = {"components", "losses", "positions"};
  nlohmann::ordered_json j;
  j["protocol"] = names[static_cast<int>(protocol)];
  j["rows"] = nlohmann::ordered_json::array();
  for (auto& r : rows)
    j["rows"].push_back({{"name", r.name}, {"accuracies", r.accuracies}, {"mean_accuracy", r.mean_accuracy}});
  return j;
}

}  // namespace transferattn
