#pragma once

#include "mopa/common.hpp"

#include "json.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace mopa {

enum class Init { kZero, kOne, kTruncNormal, kConst };

// Named trainable tensors with per-tensor gradient and Adam state. Names are
// unique; registration order is the canonical checkpoint order.
template <class S>
class ParamStore {
 public:
  struct Tensor {
    std::string name;
    Mat<S> val;
    Mat<S> grad;
    Mat<S> adam_m, adam_v;
    Init init = Init::kTruncNormal;
    double init_const = 0.0;
  };

  // Registers a tensor; initialization is derived from (seed, name) so it is
  // independent of registration order.
  Tensor& add(const std::string& name, int rows, int cols, Init init, std::uint64_t seed,
              double init_const = 0.0) {
    check(index_.find(name) == index_.end(), "duplicate parameter '" + name + "'");
    Tensor t;
    t.name = name;
    t.init = init;
    t.init_const = init_const;
    t.val.resize(rows, cols);
    t.grad = Mat<S>::Zero(rows, cols);
    t.adam_m = Mat<S>::Zero(rows, cols);
    t.adam_v = Mat<S>::Zero(rows, cols);
    Rng rng(derive_seed(seed, fnv1a64(name)));
    switch (init) {
      case Init::kZero:
        t.val.setZero();
        break;
      case Init::kOne:
        t.val.setOnes();
        break;
      case Init::kConst:
        t.val.setConstant(static_cast<S>(init_const));
        break;
      case Init::kTruncNormal:
        for (Eigen::Index i = 0; i < t.val.size(); ++i) {
          double z = rng.normal();
          while (std::abs(z) > 2.0) z = rng.normal();
          t.val.data()[i] = static_cast<S>(0.02 * z);
        }
        break;
    }
    index_[name] = tensors_.size();
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter '" + name + "'");
    return tensors_[it->second];
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter '" + name + "'");
    return tensors_[it->second];
  }

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.val.size());
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.grad.setZero();
  }

  template <class T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& t : tensors_) {
      auto& nt = out.add(t.name, static_cast<int>(t.val.rows()), static_cast<int>(t.val.cols()),
                         Init::kZero, 0);
      nt.val = t.val.template cast<T>();
      nt.init = t.init;
      nt.init_const = t.init_const;
    }
    return out;
  }

 private:
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

// Adam with bias correction; parameters updated in registration order.
template <class S>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<S>& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (auto& p : store.tensors()) {
      p.adam_m = p.adam_m * static_cast<S>(b1_) + p.grad * static_cast<S>(1.0 - b1_);
      p.adam_v =
          p.adam_v * static_cast<S>(b2_) + p.grad.cwiseProduct(p.grad) * static_cast<S>(1.0 - b2_);
      const auto mhat = p.adam_m.array() / static_cast<S>(bc1);
      const auto vhat = p.adam_v.array() / static_cast<S>(bc2);
      p.val.array() -= static_cast<S>(lr_) * mhat / (vhat.sqrt() + static_cast<S>(eps_));
    }
  }

  int steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

inline constexpr int kCheckpointVersion = 1;

// Checkpoint file: u64 little-endian header length, JSON header (format
// version, embedded config, tensor names/shapes), then concatenated float32
// little-endian payloads in header order.
inline void save_checkpoint(const std::string& path, const ParamStore<float>& store,
                            const nlohmann::json& config) {
  static_assert(std::endian::native == std::endian::little);
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = config;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : store.tensors()) {
    header["tensors"].push_back({{"name", t.name},
                                 {"rows", static_cast<int>(t.val.rows())},
                                 {"cols", static_cast<int>(t.val.cols())}});
  }
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write checkpoint '" + path + "'");
  const std::uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : store.tensors()) {
    out.write(reinterpret_cast<const char*>(t.val.data()),
              static_cast<std::streamsize>(sizeof(float)) * t.val.size());
  }
  if (!out) fail("checkpoint write failed for '" + path + "'");
}

struct Checkpoint {
  ParamStore<float> params;
  nlohmann::json config;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint '" + path + "'");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  check(in.good() && len > 0 && len < (1ull << 30), "checkpoint '" + path + "': bad header length");
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  check(in.good(), "checkpoint '" + path + "': truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    fail("checkpoint '" + path + "': header parse error: " + e.what());
  }
  const int version = header.at("format_version").get<int>();
  check(version == kCheckpointVersion,
        "checkpoint '" + path + "': unsupported format version " + std::to_string(version));

  Checkpoint ckpt;
  ckpt.config = header.at("config");
  for (const auto& jt : header.at("tensors")) {
    const std::string name = jt.at("name").get<std::string>();
    const int rows = jt.at("rows").get<int>();
    const int cols = jt.at("cols").get<int>();
    auto& t = ckpt.params.add(name, rows, cols, Init::kZero, 0);
    in.read(reinterpret_cast<char*>(t.val.data()),
            static_cast<std::streamsize>(sizeof(float)) * rows * cols);
    if (in.gcount() != static_cast<std::streamsize>(sizeof(float)) * rows * cols) {
      fail("checkpoint '" + path + "': truncated payload at tensor '" + name + "'");
    }
  }
  return ckpt;
}

// FNV-1a hash of a file's bytes, hex-encoded; embedded in reports.
inline std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot hash '" + path + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (in.eof()) break;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

}  // namespace mopa
