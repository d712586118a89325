#pragma once

// Two-domain synthetic video features with a controllable domain gap.
//
// Each class owns a temporal template: a sinusoid of class-specific frequency
// and phase traced inside a class-specific random 2-D subspace, so the label
// lives in how frames evolve rather than in any one frame. Some frames of
// every video are "background" frames that carry no class signal, only a
// shared signature that the domain shift moves. The target domain is the source distribution
// pushed through a fixed rotation by theta in every coordinate plane of a random
// basis, plus a translation and extra noise.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "transferattn/feature_io.hpp"
#include "transferattn/rng.hpp"

namespace transferattn {

struct SynthSpec {
  std::size_t n_classes = 6;
  std::size_t feat_dim = 64;
  std::size_t min_frames = 40;
  std::size_t max_frames = 40;
  std::size_t videos_per_class = 60;       // per domain, train split
  std::size_t test_videos_per_class = 20;  // target test split
  double signal_amplitude = 1.0;
  double class_offset = 1.0;               // constant component along the class plane diagonal
  double frame_noise = 0.3;                // isotropic noise on every frame, both domains
  double min_frequency = 0.5;              // cycles over the clip
  double max_frequency = 3.0;
  double theta_deg = 60.0;                 // target rotation angle
  double translation = 0.0;                // norm of the target translation vector
  double target_noise = 0.0;               // extra noise sigma on target frames
  double background_fraction = 0.3;        // share of frames with no class signal
  double background_strength = 2.0;        // norm of the background signature
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2 || feat_dim < 4 || min_frames == 0 || max_frames < min_frames || videos_per_class == 0)
      throw ConfigError("synth: invalid class/frame/video counts");
    if (feat_dim % 2 != 0) throw ConfigError("synth: feat_dim must be even");
    if (background_fraction < 0.0 || background_fraction >= 1.0)
      throw ConfigError("synth: background_fraction must lie in [0, 1)");
    if (frame_noise < 0.0 || target_noise < 0.0 || translation < 0.0 || background_strength < 0.0)
      throw ConfigError("synth: noise, translation and strength must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"n_classes", s.n_classes},
                     {"feat_dim", s.feat_dim},
                     {"min_frames", s.min_frames},
                     {"max_frames", s.max_frames},
                     {"videos_per_class", s.videos_per_class},
                     {"test_videos_per_class", s.test_videos_per_class},
                     {"signal_amplitude", s.signal_amplitude},
                     {"class_offset", s.class_offset},
                     {"frame_noise", s.frame_noise},
                     {"min_frequency", s.min_frequency},
                     {"max_frequency", s.max_frequency},
                     {"theta_deg", s.theta_deg},
                     {"translation", s.translation},
                     {"target_noise", s.target_noise},
                     {"background_fraction", s.background_fraction},
                     {"background_strength", s.background_strength},
                     {"seed", s.seed}};
}

/// Reads a spec object; unknown keys are rejected.
inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  nlohmann::json defaults = s;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw ConfigError("synth spec: unknown key \"" + it.key() + "\"");
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("n_classes", s.n_classes);
  take("feat_dim", s.feat_dim);
  take("min_frames", s.min_frames);
  take("max_frames", s.max_frames);
  take("videos_per_class", s.videos_per_class);
  take("test_videos_per_class", s.test_videos_per_class);
  take("signal_amplitude", s.signal_amplitude);
  take("class_offset", s.class_offset);
  take("frame_noise", s.frame_noise);
  take("min_frequency", s.min_frequency);
  take("max_frequency", s.max_frequency);
  take("theta_deg", s.theta_deg);
  take("translation", s.translation);
  take("target_noise", s.target_noise);
  take("background_fraction", s.background_fraction);
  take("background_strength", s.background_strength);
  take("seed", s.seed);
  s.validate();
  return s;
}

/// In-memory result of generation; `write_synthetic` persists it.
struct SynthDataset {
  Manifest source_train;
  Manifest target_train;
  Manifest target_test;
  std::vector<VideoFeatures> source_videos;
  std::vector<VideoFeatures> target_train_videos;
  std::vector<VideoFeatures> target_test_videos;
};

namespace detail {

// Random orthonormal basis (rows) via Gram-Schmidt on Gaussian vectors.
inline std::vector<std::vector<double>> random_orthonormal(std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> basis;
  while (basis.size() < d) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass)
      for (auto& b : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += v[i] * b[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= dot * b[i];
      }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

}  // namespace detail

/// Generates the three splits. Labels are attached to target-train videos in
/// memory only for analysis; the target-train manifest never carries them.
inline SynthDataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const std::size_t d = spec.feat_dim;
  Rng rng(spec.seed);

  // Class templates: two orthonormal directions and a frequency/phase each.
  auto dirs = detail::random_orthonormal(d, rng);
  struct Template {
    std::vector<double> u, v;
    double freq, phase;
  };
  std::vector<Template> templates;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    Template t;
    t.u = dirs[(2 * c) % d];
    t.v = dirs[(2 * c + 1) % d];
    const double span = spec.max_frequency - spec.min_frequency;
    t.freq = spec.min_frequency + span * static_cast<double>(c) / static_cast<double>(spec.n_classes - 1);
    t.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    templates.push_back(std::move(t));
  }

  // Domain shift: rotate every plane of a random basis by theta.
  auto shift_basis = detail::random_orthonormal(d, rng);
  const double theta = spec.theta_deg * std::numbers::pi / 180.0;
  auto random_vector = [&](double norm) {
    std::vector<double> v(d);
    double n2 = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      n2 += x * x;
    }
    for (auto& x : v) x *= norm / std::sqrt(n2);
    return v;
  };
  const std::vector<double> translation = random_vector(spec.translation);
  const std::vector<double> background = random_vector(spec.background_strength);

  auto rotate = [&](std::vector<double>& x) {
    if (theta == 0.0) return;
    std::vector<double> coords(d, 0.0);
    for (std::size_t b = 0; b < d; ++b)
      for (std::size_t i = 0; i < d; ++i) coords[b] += shift_basis[b][i] * x[i];
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t b = 0; b + 1 < d; b += 2) {
      const double a0 = coords[b], a1 = coords[b + 1];
      coords[b] = c * a0 - s * a1;
      coords[b + 1] = s * a0 + c * a1;
    }
    std::fill(x.begin(), x.end(), 0.0);
    for (std::size_t b = 0; b < d; ++b)
      for (std::size_t i = 0; i < d; ++i) x[i] += shift_basis[b][i] * coords[b];
  };

  auto make_video = [&](std::size_t cls, Domain dom, const std::string& id) {
    VideoFeatures v;
    v.video_id = id;
    v.domain = dom;
    v.label = static_cast<int>(cls);
    v.feat_dim = d;
    v.n_frames = spec.min_frames + rng.uniform_index(spec.max_frames - spec.min_frames + 1);
    const Template& t = templates[cls];
    const double jitter = rng.uniform(-0.25, 0.25) * std::numbers::pi;
    const double amp = spec.signal_amplitude * rng.uniform(0.8, 1.2);
    v.frames.reserve(v.n_frames * d);
    std::vector<double> x(d);
    for (std::size_t f = 0; f < v.n_frames; ++f) {
      const double tau = v.n_frames > 1 ? static_cast<double>(f) / static_cast<double>(v.n_frames - 1) : 0.0;
      const bool is_background = rng.uniform() < spec.background_fraction;
      const double angle = 2.0 * std::numbers::pi * t.freq * tau + t.phase + jitter;
      for (std::size_t i = 0; i < d; ++i) {
        x[i] = spec.frame_noise * rng.normal();
        if (is_background)
          x[i] += background[i];
        else
          x[i] += amp * ((spec.class_offset + std::cos(angle)) * t.u[i] + (spec.class_offset + std::sin(angle)) * t.v[i]);
      }
      if (dom == Domain::target) {
        rotate(x);
        for (std::size_t i = 0; i < d; ++i) x[i] += translation[i] + spec.target_noise * rng.normal();
      }
      for (double xi : x) v.frames.push_back(static_cast<float>(xi));
    }
    return v;
  };

  SynthDataset ds;
  std::vector<std::string> classes;
  for (std::size_t c = 0; c < spec.n_classes; ++c) classes.push_back("class" + std::to_string(c));
  for (Manifest* m : {&ds.source_train, &ds.target_train, &ds.target_test}) {
    m->feat_dim = d;
    m->classes = classes;
  }
  ds.source_train.dataset = "synth-source-train";
  ds.target_train.dataset = "synth-target-train";
  ds.target_test.dataset = "synth-target-test";

  auto emit = [&](Manifest& m, std::vector<VideoFeatures>& out, Domain dom, const std::string& prefix,
                  std::size_t per_class, bool labeled) {
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < spec.n_classes; ++c) {
        const std::string id = prefix + "_" + std::to_string(c) + "_" + std::to_string(i);
        VideoFeatures v = make_video(c, dom, id);
        VideoRecord r{id, prefix + "/" + id + ".tfat", dom, std::nullopt, v.n_frames};
        if (labeled) r.label = static_cast<int>(c);
        m.videos.push_back(r);
        out.push_back(std::move(v));
      }
  };
  emit(ds.source_train, ds.source_videos, Domain::source, "source_train", spec.videos_per_class, true);
  emit(ds.target_train, ds.target_train_videos, Domain::target, "target_train", spec.videos_per_class, false);
  emit(ds.target_test, ds.target_test_videos, Domain::target, "target_test", spec.test_videos_per_class, true);
  return ds;
}

/// Strips labels from videos whose manifest record has none.
inline std::vector<VideoFeatures> with_manifest_labels(const Manifest& m, std::vector<VideoFeatures> videos) {
  for (std::size_t i = 0; i < videos.size(); ++i) videos[i].label = m.videos[i].label;
  return videos;
}

/// Writes feature files plus source_train.jsonl, target_train.jsonl and target_test.jsonl under `dir`.
inline void write_synthetic(const SynthDataset& ds, const std::filesystem::path& dir) {
  auto dump = [&](const Manifest& m, const std::vector<VideoFeatures>& vids, const char* name) {
    for (std::size_t i = 0; i < vids.size(); ++i) write_features(vids[i], dir / m.videos[i].path);
    write_manifest(m, dir / name);
  };
  dump(ds.source_train, ds.source_videos, "source_train.jsonl");
  dump(ds.target_train, ds.target_train_videos, "target_train.jsonl");
  dump(ds.target_test, ds.target_test_videos, "target_test.jsonl");
}

/// In-memory stores for the three splits, as if read back from disk.
struct SynthStores {
  FeatureStore source_train;
  FeatureStore target_train;
  FeatureStore target_test;
};

inline SynthStores synthetic_stores(const SynthDataset& ds) {
  return {FeatureStore(ds.source_train, with_manifest_labels(ds.source_train, ds.source_videos)),
          FeatureStore(ds.target_train, with_manifest_labels(ds.target_train, ds.target_train_videos)),
          FeatureStore(ds.target_test, with_manifest_labels(ds.target_test, ds.target_test_videos))};
}

}  // namespace transferattn
