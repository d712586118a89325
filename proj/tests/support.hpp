#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <fstream>

#include "json.hpp"
#include "transferattn/rng.hpp"
#include "transferattn/tensor.hpp"
#include "transferattn/trainer.hpp"

namespace testing_support {

/// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    transferattn::Rng rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("transferattn-" + tag + "-" + std::to_string(rng.next_u64()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline transferattn::Tensor random_tensor(transferattn::Shape s, transferattn::Rng& rng, double scale = 1.0) {
  std::vector<double> v(transferattn::shape_numel(s));
  for (auto& x : v) x = scale * rng.normal();
  return transferattn::Tensor(std::move(s), std::move(v));
}

/// Singular values of a row-major rows x cols matrix (one-sided Jacobi), descending.
inline std::vector<double> singular_values(std::vector<double> a, std::size_t rows, std::size_t cols) {
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < cols; ++p)
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = a[i * cols + p], y = a[i * cols + q];
          alpha += x * x;
          beta += y * y;
          gamma += x * y;
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = a[i * cols + p], y = a[i * cols + q];
          a[i * cols + p] = c * x - s * y;
          a[i * cols + q] = s * x + c * y;
        }
      }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < rows; ++i) n += a[i * cols + j] * a[i * cols + j];
    sv[j] = std::sqrt(n);
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

/// Dense loop recomputation of the IB loss on row-major m x d inputs.
inline double dense_ib_loss(const std::vector<double>& zs, const std::vector<double>& zt, std::size_t m, std::size_t d,
                            double offdiag_weight) {
  auto standardize = [&](const std::vector<double>& z) {
    std::vector<double> out(m * d);
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < m; ++i) mu += z[i * d + j];
      mu /= static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t i = 0; i < m; ++i) ss += (z[i * d + j] - mu) * (z[i * d + j] - mu);
      const double norm = std::sqrt(std::max(ss, 1e-8));
      for (std::size_t i = 0; i < m; ++i) out[i * d + j] = (z[i * d + j] - mu) / norm;
    }
    return out;
  };
  auto a = standardize(zs), b = standardize(zt);
  double loss = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double c = 0.0;
      for (std::size_t r = 0; r < m; ++r) c += a[r * d + i] * b[r * d + j];
      loss += i == j ? (1.0 - c) * (1.0 - c) : offdiag_weight * c * c;
    }
  return loss;
}

/// Applies every task preset to default configurations and compares the
/// resulting (B, k, Q, alpha, lambda) with the golden file. Returns mismatches.
inline std::vector<std::string> preset_mismatches(const std::filesystem::path& golden_path) {
  std::ifstream is(golden_path);
  if (!is) return {"cannot open " + golden_path.string()};
  const auto golden = nlohmann::json::parse(is);
  std::vector<std::string> bad;
  if (golden.size() != transferattn::task_presets().size()) bad.push_back("preset count differs");
  for (auto it = golden.begin(); it != golden.end(); ++it) {
    transferattn::ModelConfig mc;
    transferattn::TrainConfig tc;
    try {
      transferattn::apply_preset(transferattn::find_preset(it.key()), mc, tc);
    } catch (const std::exception& e) {
      bad.push_back(e.what());
      continue;
    }
    const auto& g = it.value();
    auto check = [&](const char* field, bool ok) {
      if (!ok) bad.push_back(it.key() + "." + field);
    };
    check("B", tc.batch_size == g.at("B").get<std::size_t>());
    check("k", mc.encoder.k_tokens == g.at("k").get<std::size_t>());
    check("Q", mc.encoder.dtab.queue_capacity == g.at("Q").get<std::size_t>());
    check("alpha", tc.weights.ib == g.at("alpha").get<double>());
    check("lambda", tc.adv_lambda == g.at("lambda").get<double>());
  }
  return bad;
}

}  // namespace testing_support
