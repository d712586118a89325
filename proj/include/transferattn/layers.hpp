#pragma once

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "transferattn/rng.hpp"
#include "transferattn/tensor.hpp"

namespace transferattn {

inline constexpr double kInitStddev = 0.02;

struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
};

/// Named, ordered parameter registry. Tensors are shared handles, so layers
/// and the registry see the same storage.
class ParameterSet {
 public:
  Tensor add(std::string name, Tensor value, bool frozen = false) {
    for (auto& p : params_)
      if (p.name == name) throw ConfigError("duplicate parameter name " + name);
    value.set_requires_grad(!frozen);
    params_.push_back({std::move(name), value, frozen});
    return value;
  }

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }

  const Parameter& get(const std::string& name) const {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw std::out_of_range("no parameter named " + name);
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (auto& p : params_)
      if (!p.frozen) n += p.value.size();
    return n;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// FNV-1a over names and raw value bits; equal hashes mean bit-identical weights.
  std::uint64_t hash(bool include_frozen = true) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (auto& p : params_) {
      if (p.frozen && !include_frozen) continue;
      mix(p.name.data(), p.name.size());
      auto d = p.value.data();
      mix(d.data(), d.size() * sizeof(double));
    }
    return h;
  }

 private:
  std::vector<Parameter> params_;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline Tensor init_truncated_normal(Shape shape, Rng& rng, double sigma = kInitStddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.truncated_normal(sigma);
  return t;
}

/// y = x W + b over the last axis.
struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool frozen = false)
      : weight(ps.add(name + ".weight", init_truncated_normal({in, out}, rng), frozen)),
        bias(ps.add(name + ".bias", Tensor::zeros({out}), frozen)) {}

  Tensor operator()(const Tensor& x) const {
    if (x.dim(-1) != weight.dim(0))
      throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    return add(matmul(x, weight), bias);
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  LayerNorm(ParameterSet& ps, const std::string& name, std::size_t d)
      : gain(ps.add(name + ".gain", Tensor::full({d}, 1.0))), bias(ps.add(name + ".bias", Tensor::zeros({d}))) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Minimal leveled logging to stderr.
enum class LogLevel { quiet = 0, warn = 1, info = 2, debug = 3 };
inline LogLevel& log_level() {
  static LogLevel level = LogLevel::warn;
  return level;
}
inline void log_warn(const std::string& msg) {
  if (log_level() >= LogLevel::warn) std::cerr << "warning: " << msg << '\n';
}
inline void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::cerr << msg << '\n';
}
inline void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::cerr << msg << '\n';
}

}  // namespace transferattn
