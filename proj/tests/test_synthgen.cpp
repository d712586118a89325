#include <catch_amalgamated.hpp>

#include <cmath>

#include "transferattn/synthgen.hpp"
#include "support.hpp"

using namespace transferattn;
using Catch::Matchers::WithinAbs;

namespace {

SynthSpec spec_small() {
  SynthSpec s;
  s.n_classes = 4;
  s.feat_dim = 12;
  s.min_frames = 8;
  s.max_frames = 12;
  s.videos_per_class = 5;
  s.test_videos_per_class = 3;
  s.seed = 11;
  return s;
}

std::vector<double> domain_mean(const std::vector<VideoFeatures>& vids) {
  std::vector<double> m(vids[0].feat_dim, 0.0);
  std::size_t n = 0;
  for (auto& v : vids)
    for (std::size_t f = 0; f < v.n_frames; ++f, ++n)
      for (std::size_t c = 0; c < v.feat_dim; ++c) m[c] += v.at(f, c);
  for (auto& x : m) x /= static_cast<double>(n);
  return m;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  auto a = generate_synthetic(spec_small()), b = generate_synthetic(spec_small());
  REQUIRE(a.source_videos.size() == b.source_videos.size());
  for (std::size_t i = 0; i < a.source_videos.size(); ++i) CHECK(a.source_videos[i].frames == b.source_videos[i].frames);
  SynthSpec other = spec_small();
  other.seed = 12;
  CHECK(generate_synthetic(other).source_videos[0].frames != a.source_videos[0].frames);
}

TEST_CASE("splits are class balanced and target train is unlabeled") {
  auto ds = generate_synthetic(spec_small());
  CHECK(ds.source_train.videos.size() == 20);
  CHECK(ds.target_train.videos.size() == 20);
  CHECK(ds.target_test.videos.size() == 12);
  std::vector<int> counts(4, 0);
  for (auto& r : ds.source_train.videos) {
    REQUIRE(r.label.has_value());
    counts[static_cast<std::size_t>(*r.label)]++;
    CHECK(r.domain == Domain::source);
  }
  CHECK(counts == std::vector<int>{5, 5, 5, 5});
  for (auto& r : ds.target_train.videos) {
    CHECK_FALSE(r.label.has_value());
    CHECK(r.domain == Domain::target);
  }
  for (auto& v : ds.source_videos) {
    CHECK(v.n_frames >= 8);
    CHECK(v.n_frames <= 12);
  }
}

TEST_CASE("zero angle leaves the domains identically distributed") {
  SynthSpec s = spec_small();
  s.theta_deg = 0.0;
  s.videos_per_class = 60;
  auto ds = generate_synthetic(s);
  auto ms = domain_mean(ds.source_videos), mt = domain_mean(ds.target_train_videos);
  for (std::size_t c = 0; c < ms.size(); ++c) CHECK_THAT(ms[c], WithinAbs(mt[c], 0.06));

  s.theta_deg = 90.0;
  auto shifted = generate_synthetic(s);
  auto m90 = domain_mean(shifted.target_train_videos), s90 = domain_mean(shifted.source_videos);
  double gap = 0.0;
  for (std::size_t c = 0; c < ms.size(); ++c) gap += (m90[c] - s90[c]) * (m90[c] - s90[c]);
  CHECK(std::sqrt(gap) > 0.3);
}

TEST_CASE("rotation preserves frame norms") {
  SynthSpec s = spec_small();
  s.frame_noise = 0.0;
  s.background_fraction = 0.0;
  s.signal_amplitude = 1.0;
  SynthSpec s0 = s;
  s0.theta_deg = 0.0;
  auto a = generate_synthetic(s0), b = generate_synthetic(s);
  const auto& va = a.target_train_videos[0];
  const auto& vb = b.target_train_videos[0];
  for (std::size_t f = 0; f < va.n_frames; ++f) {
    double na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < va.feat_dim; ++c) {
      na += va.at(f, c) * va.at(f, c);
      nb += vb.at(f, c) * vb.at(f, c);
    }
    CHECK_THAT(std::sqrt(nb), WithinAbs(std::sqrt(na), 1e-5));
  }
}

TEST_CASE("spec parsing rejects unknown keys and bad values") {
  auto j = nlohmann::json::parse(R"({"n_classes": 3, "theta_deg": 30})");
  SynthSpec s = synth_spec_from_json(j);
  CHECK(s.n_classes == 3);
  CHECK(s.theta_deg == 30.0);
  CHECK(s.feat_dim == SynthSpec{}.feat_dim);
  CHECK_THROWS_AS(synth_spec_from_json(nlohmann::json::parse(R"({"n_clases": 3})")), ConfigError);
  CHECK_THROWS_AS(synth_spec_from_json(nlohmann::json::parse(R"({"feat_dim": 7})")), ConfigError);
  CHECK_THROWS_AS(synth_spec_from_json(nlohmann::json::parse(R"({"background_fraction": 1.0})")), ConfigError);
  nlohmann::json round = s;
  CHECK(synth_spec_from_json(round).theta_deg == 30.0);
}

TEST_CASE("written datasets read back through manifests") {
  testing_support::TempDir dir("synth");
  auto ds = generate_synthetic(spec_small());
  write_synthetic(ds, dir.path());
  for (const char* name : {"source_train.jsonl", "target_train.jsonl", "target_test.jsonl"}) {
    Manifest m = read_manifest(dir / name);
    CHECK_NOTHROW(m.validate());
  }
  FeatureStore store(read_manifest(dir / "source_train.jsonl"));
  CHECK(store.size() == 20);
  CHECK(store.get("source_train_2_1").frames.size() == ds.source_videos[6].frames.size());
}
