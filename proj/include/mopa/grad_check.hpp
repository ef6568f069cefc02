#pragma once

#include "mopa/graph.hpp"
#include "mopa/param_store.hpp"

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace mopa {

// Binds store tensors as graph leaves (once per name) and scatters tape
// gradients back into the store after backward().
template <class S>
class Binder {
 public:
  Binder(Graph<S>& g, ParamStore<S>& store) : g_(&g), store_(&store) {}

  int operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    auto& t = store_->get(name);
    const int id = g_->leaf(t.val);
    cache_[name] = id;
    bound_.push_back({id, &t});
    return id;
  }

  ParamStore<S>& store() { return *store_; }

  // Accumulates tape gradients into the store tensors.
  void collect() {
    for (auto& [id, t] : bound_) {
      if (g_->grad_of(id).size() > 0) t->grad += g_->grad_of(id);
    }
  }

 private:
  Graph<S>* g_;
  ParamStore<S>* store_;
  std::map<std::string, int> cache_;
  std::vector<std::pair<int, typename ParamStore<S>::Tensor*>> bound_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  int coords_checked = 0;
};

// Central finite differences against the tape's analytic gradient, evaluated
// in double precision. `build` must deterministically construct the scalar
// loss (any randomness fixed by the caller). Checks a random subsample of
// coordinates per tensor; relative error per coordinate is
// |g_fd - g| / max(1e-8, |g_fd| + |g|).
inline GradCheckReport grad_check(
    ParamStore<double>& params,
    const std::function<int(GraphD&, Binder<double>&)>& build, double epsilon,
    int samples_per_tensor = 8, std::uint64_t seed = 0) {
  check(epsilon > 0.0, "grad_check: epsilon must be positive");

  const auto eval = [&]() {
    GraphD g;
    Binder<double> bind(g, params);
    const int root = build(g, bind);
    check(g.val(root).size() == 1, "grad_check: loss must be scalar");
    const double v = g.val(root)(0, 0);
    check(std::isfinite(v), "grad_check: non-finite loss");
    return v;
  };

  // Analytic pass.
  std::vector<MatD> analytic;
  {
    GraphD g;
    Binder<double> bind(g, params);
    const int root = build(g, bind);
    g.backward(root);
    params.zero_grad();
    bind.collect();
    for (auto& t : params.tensors()) analytic.push_back(t.grad);
  }

  GradCheckReport report;
  Rng rng(derive_seed(seed, 0x6fd));
  for (std::size_t ti = 0; ti < params.tensors().size(); ++ti) {
    auto& t = params.tensors()[ti];
    const Eigen::Index size = t.val.size();
    const int samples =
        static_cast<int>(std::min<Eigen::Index>(size, std::max(1, samples_per_tensor)));
    for (int s = 0; s < samples; ++s) {
      const Eigen::Index i =
          (samples == size)
              ? s
              : static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(size)));
      const double orig = t.val.data()[i];
      t.val.data()[i] = orig + epsilon;
      const double up = eval();
      t.val.data()[i] = orig - epsilon;
      const double down = eval();
      t.val.data()[i] = orig;
      const double fd = (up - down) / (2.0 * epsilon);
      const double an = analytic[ti].data()[i];
      const double rel = std::abs(fd - an) / std::max(1e-8, std::abs(fd) + std::abs(an));
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_tensor = t.name;
      }
    }
  }
  return report;
}

}  // namespace mopa
