#pragma once

#include "mopa/model.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mopa {

struct LossConfig {
  double tau_init = 0.07;  // temperature parameterized as exp(rho)
  double lambda_global = 1.0;
  double lambda_local = 1.0;
  double lambda_token = 0.5;
  double lambda_mtp = 0.3;
  bool level_global = true;
  bool level_local = true;
  bool level_token = true;
  double mtp_alpha = 0.75;
  bool mtp_stop_gradient = false;
  // Multi-positive handling: same-sequence overlapping windows are masked out
  // of the InfoNCE denominators so near-duplicates are not false negatives.
  bool exclude_overlap_negatives = true;

  void validate() const {
    check(tau_init > 0.0, "loss: tau_init must be positive");
    check(lambda_global >= 0 && lambda_local >= 0 && lambda_token >= 0 && lambda_mtp >= 0,
          "loss: lambda weights must be non-negative");
    check(mtp_alpha >= 0.0 && mtp_alpha < 1.0, "loss: mtp_alpha must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"tau_init", c.tau_init},
                     {"lambda_global", c.lambda_global},
                     {"lambda_local", c.lambda_local},
                     {"lambda_token", c.lambda_token},
                     {"lambda_mtp", c.lambda_mtp},
                     {"level_global", c.level_global},
                     {"level_local", c.level_local},
                     {"level_token", c.level_token},
                     {"mtp_alpha", c.mtp_alpha},
                     {"mtp_stop_gradient", c.mtp_stop_gradient},
                     {"exclude_overlap_negatives", c.exclude_overlap_negatives}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  j.at("tau_init").get_to(c.tau_init);
  j.at("lambda_global").get_to(c.lambda_global);
  j.at("lambda_local").get_to(c.lambda_local);
  j.at("lambda_token").get_to(c.lambda_token);
  j.at("lambda_mtp").get_to(c.lambda_mtp);
  j.at("level_global").get_to(c.level_global);
  j.at("level_local").get_to(c.level_local);
  j.at("level_token").get_to(c.level_token);
  j.at("mtp_alpha").get_to(c.mtp_alpha);
  j.at("mtp_stop_gradient").get_to(c.mtp_stop_gradient);
  j.at("exclude_overlap_negatives").get_to(c.exclude_overlap_negatives);
}

// Masked token positions for one sample: unique (sensor, timestep) pairs.
struct MaskSet {
  std::vector<std::pair<int, int>> positions;
  double alpha = 0.0;
};

// Uniform draw without replacement of floor(alpha * N * T) positions.
inline MaskSet sample_mask(int n_sensors, int tokens, double alpha, Rng& rng) {
  check(alpha >= 0.0 && alpha < 1.0, "sample_mask: alpha must lie in [0, 1)");
  const int total = n_sensors * tokens;
  const int m = static_cast<int>(std::floor(alpha * total));
  std::vector<int> pool(total);
  for (int i = 0; i < total; ++i) pool[i] = i;
  // Partial Fisher-Yates: the first m slots are the sample.
  for (int i = 0; i < m; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(total - i)));
    std::swap(pool[i], pool[j]);
  }
  MaskSet out;
  out.alpha = alpha;
  out.positions.reserve(m);
  for (int i = 0; i < m; ++i) out.positions.push_back({pool[i] / tokens, pool[i] % tokens});
  return out;
}

// Registers the temperature and the MTP predictor tensors.
template <class S>
void register_loss_params(ParamStore<S>& store, const LossConfig& cfg, const ModelConfig& model,
                          int n_sensors, std::uint64_t seed) {
  cfg.validate();
  store.add("loss.rho", 1, 1, Init::kConst, seed, std::log(cfg.tau_init));
  store.add("mtp.q", 1, model.model_dim, Init::kTruncNormal, seed);
  store.add("mtp.id", n_sensors, model.model_dim, Init::kTruncNormal, seed);
  for (int b = 0; b < model.mtp_blocks; ++b) {
    detail::register_transformer_block(store, "mtp.blk" + std::to_string(b), model.model_dim,
                                       model.ff_mult * model.model_dim, seed);
  }
  store.add("mtp.head.fc1.w", model.model_dim, model.model_dim, Init::kTruncNormal, seed);
  store.add("mtp.head.fc1.b", 1, model.model_dim, Init::kZero, seed);
  store.add("mtp.head.fc2.w", model.model_dim, model.model_dim, Init::kTruncNormal, seed);
  store.add("mtp.head.fc2.b", 1, model.model_dim, Init::kZero, seed);
}

// 1/tau as a graph node, with tau = exp(rho).
template <class S>
int inv_tau_node(Graph<S>& g, Binder<S>& bind) {
  return g.exp_elem(g.scale(bind("loss.rho"), -1.0));
}

// ---- InfoNCE building blocks ----

// Directional InfoNCE over a scaled score matrix (scores already divided by
// tau). Row i's positive is column i. `row_weights` selects/weights anchors;
// `extra_mask` adds -inf style penalties to excluded denominator entries.
template <class S>
int infonce_from_scores(Graph<S>& g, int scaled_scores,
                        const std::vector<double>* row_weights = nullptr,
                        const Mat<S>* extra_mask = nullptr) {
  int masked = scaled_scores;
  if (extra_mask) masked = g.add2(scaled_scores, g.constant(*extra_mask));
  const int lse = g.logsumexp_rows(masked);
  const int pos = g.diag(scaled_scores);
  const int terms = g.sub(lse, pos);
  if (row_weights) {
    double total = 0.0;
    for (double w : *row_weights) total += w;
    check(total > 0.0, "infonce: no active anchors");
    return g.weighted_mean(terms, *row_weights, total);
  }
  return g.mean_all(terms);
}

// Bidirectional pair of directional losses for one anchor/positive matrix
// pair of unit-norm rows (K x d). Returns {A->B, B->A}.
template <class S>
std::pair<int, int> infonce_directional_nodes(Graph<S>& g, int a, int b, int inv_tau,
                                              const std::vector<double>* weights_a = nullptr,
                                              const std::vector<double>* weights_b = nullptr,
                                              const Mat<S>* mask_ab = nullptr,
                                              const Mat<S>* mask_ba = nullptr) {
  const int s_ab = g.scale_by(g.matmul_nt(a, b), inv_tau);
  const int s_ba = g.transpose(s_ab);
  return {infonce_from_scores(g, s_ab, weights_a, mask_ab),
          infonce_from_scores(g, s_ba, weights_b, mask_ba)};
}

// Token-level InfoNCE for one sensor: negatives are the T temporal positions
// within the same sample. Returns {A->B, B->A} averaged over active samples.
template <class S>
std::pair<int, int> infonce_token_nodes(Graph<S>& g, int tokens_a, int tokens_b, int inv_tau,
                                        int batch, int tokens,
                                        const std::vector<char>* active = nullptr) {
  std::vector<int> fwd_terms, bwd_terms;
  for (int i = 0; i < batch; ++i) {
    if (active && !(*active)[i]) continue;
    const int a_i = g.slice_rows(tokens_a, i * tokens, tokens);
    const int b_i = g.slice_rows(tokens_b, i * tokens, tokens);
    const int s = g.scale_by(g.matmul_nt(a_i, b_i), inv_tau);
    const int st = g.transpose(s);
    fwd_terms.push_back(g.mean_all(g.sub(g.logsumexp_rows(s), g.diag(s))));
    bwd_terms.push_back(g.mean_all(g.sub(g.logsumexp_rows(st), g.diag(st))));
  }
  check(!fwd_terms.empty(), "infonce_token: no active samples");
  const auto mean_of = [&](const std::vector<int>& xs) {
    int acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = g.add2(acc, xs[i]);
    return g.scale(acc, 1.0 / static_cast<double>(xs.size()));
  };
  return {mean_of(fwd_terms), mean_of(bwd_terms)};
}

// ---- batch-level objective ----

template <class S>
struct AlignNodes {
  int total = -1;  // lambda-weighted sum of enabled levels
  // Directional sub-losses for logging; -1 when the level is disabled.
  int g_i2p = -1, g_p2i = -1, l_i2p = -1, l_p2i = -1, t_i2p = -1, t_p2i = -1;
};

struct AlignBreakdown {
  double total = 0.0;
  double g_i2p = 0.0, g_p2i = 0.0, l_i2p = 0.0, l_p2i = 0.0, t_i2p = 0.0, t_p2i = 0.0;
  double mtp = 0.0;
  double tau = 0.0;
};

// Additive mask (0 keeps, -1e9 drops) excluding same-sequence overlapping
// windows from the denominators; the diagonal always stays.
template <class S>
std::optional<Mat<S>> overlap_mask(const BatchData<S>& batch) {
  const int k = batch.batch;
  Mat<S> m = Mat<S>::Zero(k, k);
  bool any = false;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      if (batch.sequence_ids[i] == batch.sequence_ids[j] &&
          std::abs(batch.window_starts[i] - batch.window_starts[j]) < batch.window_len_s) {
        m(i, j) = static_cast<S>(-1e9);
        any = true;
      }
    }
  }
  if (!any) return std::nullopt;
  return m;
}

template <class S>
int mean_scalar_nodes(Graph<S>& g, const std::vector<int>& xs) {
  check(!xs.empty(), "mean_scalar_nodes: empty");
  int acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = g.add2(acc, xs[i]);
  return g.scale(acc, 1.0 / static_cast<double>(xs.size()));
}

// The hierarchical alignment objective: bidirectional InfoNCE at the enabled
// levels, local/token terms averaged uniformly over sensors, each level the
// mean of its two directions. Dropped sensors are excluded from local/token
// anchor sums and denominators.
template <class S>
AlignNodes<S> align_loss_nodes(Graph<S>& g, Binder<S>& bind, const LossConfig& cfg,
                               const ModelForward<S>& fwd, const BatchData<S>& batch) {
  cfg.validate();
  const int k = batch.batch;
  const int n_sensors = static_cast<int>(fwd.imu.size());
  const int inv_tau = inv_tau_node(g, bind);
  AlignNodes<S> out;

  std::optional<Mat<S>> ovl;
  if (cfg.exclude_overlap_negatives) ovl = overlap_mask(batch);
  const Mat<S>* ovl_ptr = ovl ? &*ovl : nullptr;

  std::vector<int> pieces;

  if (cfg.level_global) {
    auto [i2p, p2i] = infonce_directional_nodes(g, fwd.imu_global_proj, fwd.part_global_proj,
                                                inv_tau, nullptr, nullptr, ovl_ptr, ovl_ptr);
    out.g_i2p = i2p;
    out.g_p2i = p2i;
    if (cfg.lambda_global > 0.0) {
      pieces.push_back(g.scale(g.add2(i2p, p2i), 0.5 * cfg.lambda_global));
    }
  }

  if (cfg.level_local) {
    std::vector<int> i2p_terms, p2i_terms;
    for (int n = 0; n < n_sensors; ++n) {
      std::vector<double> w(k, 0.0);
      double active = 0.0;
      for (int i = 0; i < k; ++i) {
        w[i] = batch.presence[i][n] ? 1.0 : 0.0;
        active += w[i];
      }
      if (active == 0.0) continue;

      // Absent sensors leave the denominator of the pose->imu direction.
      Mat<S> mask_ba = ovl_ptr ? *ovl_ptr : Mat<S>::Zero(k, k);
      bool extra = ovl_ptr != nullptr;
      for (int j = 0; j < k; ++j) {
        if (!batch.presence[j][n]) {
          mask_ba.col(j).setConstant(static_cast<S>(-1e9));
          extra = true;
        }
      }
      auto [i2p, p2i] = infonce_directional_nodes(
          g, fwd.imu_local_proj[n], fwd.part_local_proj[n], inv_tau, &w, &w, ovl_ptr,
          extra ? &mask_ba : nullptr);
      i2p_terms.push_back(i2p);
      p2i_terms.push_back(p2i);
    }
    if (!i2p_terms.empty()) {
      out.l_i2p = mean_scalar_nodes(g, i2p_terms);
      out.l_p2i = mean_scalar_nodes(g, p2i_terms);
      if (cfg.lambda_local > 0.0) {
        pieces.push_back(g.scale(g.add2(out.l_i2p, out.l_p2i), 0.5 * cfg.lambda_local));
      }
    }
  }

  if (cfg.level_token) {
    std::vector<int> i2p_terms, p2i_terms;
    for (int n = 0; n < n_sensors; ++n) {
      std::vector<char> active(k, 1);
      int count = 0;
      for (int i = 0; i < k; ++i) {
        active[i] = batch.presence[i][n] ? 1 : 0;
        count += active[i];
      }
      if (count == 0) continue;
      auto [i2p, p2i] =
          infonce_token_nodes(g, fwd.imu_token_proj[n], fwd.part_token_proj[n], inv_tau, k,
                              static_cast<int>(g.val(fwd.imu_token_proj[n]).rows()) / k, &active);
      i2p_terms.push_back(i2p);
      p2i_terms.push_back(p2i);
    }
    if (!i2p_terms.empty()) {
      out.t_i2p = mean_scalar_nodes(g, i2p_terms);
      out.t_p2i = mean_scalar_nodes(g, p2i_terms);
      if (cfg.lambda_token > 0.0) {
        pieces.push_back(g.scale(g.add2(out.t_i2p, out.t_p2i), 0.5 * cfg.lambda_token));
      }
    }
  }

  if (pieces.empty()) {
    out.total = g.constant(Mat<S>::Zero(1, 1));
  } else {
    int acc = pieces[0];
    for (std::size_t i = 1; i < pieces.size(); ++i) acc = g.add2(acc, pieces[i]);
    out.total = acc;
  }
  return out;
}

// Masked token prediction over the IMU tokens of all sensors jointly: masked
// rows are replaced with the learned query vector, sensor-id embeddings are
// added, a lightweight transformer plus MLP head predicts the original tokens,
// and the loss is the per-coordinate mean squared error over masked positions.
// Positions of absent sensors are never masked targets.
template <class S>
int mtp_loss_node(Graph<S>& g, Binder<S>& bind, const ModelConfig& model, const LossConfig& cfg,
                  const ModelForward<S>& fwd, const BatchData<S>& batch,
                  const std::vector<MaskSet>& masks) {
  const int k = batch.batch;
  const int n_sensors = static_cast<int>(fwd.imu.size());
  const int t = model.tokens();
  const int nt = n_sensors * t;
  check(static_cast<int>(masks.size()) == k, "mtp: one mask set per sample required");

  // Rearrange per-sensor stacks [n][i][t] into sample-major [i][n][t].
  std::vector<int> sensor_tokens;
  for (int n = 0; n < n_sensors; ++n) sensor_tokens.push_back(fwd.imu[n].tokens);
  const int stacked = g.vstack(sensor_tokens);
  std::vector<int> perm(static_cast<std::size_t>(k) * nt);
  for (int i = 0; i < k; ++i) {
    for (int n = 0; n < n_sensors; ++n) {
      for (int tt = 0; tt < t; ++tt) {
        perm[static_cast<std::size_t>(i) * nt + n * t + tt] = n * (k * t) + i * t + tt;
      }
    }
  }
  const int tokens_sm = g.gather_rows(stacked, perm);

  // Masked positions (sorted for deterministic accumulation) and rows that
  // must be replaced by the query vector (masked plus absent sensors).
  std::vector<int> mask_rows;
  std::vector<char> replace(static_cast<std::size_t>(k) * nt, 0);
  for (int i = 0; i < k; ++i) {
    std::vector<std::pair<int, int>> pos = masks[i].positions;
    std::sort(pos.begin(), pos.end());
    for (const auto& [n, tt] : pos) {
      check(n >= 0 && n < n_sensors && tt >= 0 && tt < t, "mtp: mask position out of range");
      check(batch.presence[i][n], "mtp: masked position on an absent sensor");
      const int row = i * nt + n * t + tt;
      mask_rows.push_back(row);
      replace[row] = 1;
    }
    for (int n = 0; n < n_sensors; ++n) {
      if (!batch.presence[i][n]) {
        for (int tt = 0; tt < t; ++tt) replace[static_cast<std::size_t>(i) * nt + n * t + tt] = 1;
      }
    }
  }
  if (mask_rows.empty()) return g.constant(Mat<S>::Zero(1, 1));

  const int target_src = cfg.mtp_stop_gradient ? g.constant(g.val(tokens_sm)) : tokens_sm;

  int x = g.replace_rows(tokens_sm, replace, bind("mtp.q"));
  std::vector<int> id_idx(static_cast<std::size_t>(k) * nt);
  for (std::size_t r = 0; r < id_idx.size(); ++r) {
    id_idx[r] = static_cast<int>((r / static_cast<std::size_t>(t)) % n_sensors);
  }
  x = g.add2(x, g.gather_rows(bind("mtp.id"), id_idx));
  for (int b = 0; b < model.mtp_blocks; ++b) {
    x = transformer_block(g, bind, "mtp.blk" + std::to_string(b), x, nt, model.heads);
  }
  int pred = g.affine(x, bind("mtp.head.fc1.w"), bind("mtp.head.fc1.b"));
  pred = g.gelu(pred);
  pred = g.affine(pred, bind("mtp.head.fc2.w"), bind("mtp.head.fc2.b"));

  const int pred_rows = g.gather_rows(pred, mask_rows);
  const int targ_rows = g.gather_rows(target_src, mask_rows);
  const int diff = g.sub(pred_rows, targ_rows);
  return g.mean_all(g.hadamard(diff, diff));
}

template <class S>
struct TotalLossNodes {
  AlignNodes<S> align;
  int mtp = -1;
  int total = -1;
};

// L = L_align + lambda_mtp * L_mtp.
template <class S>
TotalLossNodes<S> total_loss_nodes(Graph<S>& g, Binder<S>& bind, const ModelConfig& model,
                                   const LossConfig& cfg, const ModelForward<S>& fwd,
                                   const BatchData<S>& batch, const std::vector<MaskSet>& masks) {
  TotalLossNodes<S> out;
  out.align = align_loss_nodes(g, bind, cfg, fwd, batch);
  out.total = out.align.total;
  if (cfg.lambda_mtp > 0.0) {
    out.mtp = mtp_loss_node(g, bind, model, cfg, fwd, batch, masks);
    out.total = g.add2(out.total, g.scale(out.mtp, cfg.lambda_mtp));
  }
  return out;
}

template <class S>
AlignBreakdown read_breakdown(const Graph<S>& g, const TotalLossNodes<S>& nodes, double tau) {
  AlignBreakdown b;
  const auto rd = [&](int id) { return id >= 0 ? static_cast<double>(g.val(id)(0, 0)) : 0.0; };
  b.total = rd(nodes.total);
  b.g_i2p = rd(nodes.align.g_i2p);
  b.g_p2i = rd(nodes.align.g_p2i);
  b.l_i2p = rd(nodes.align.l_i2p);
  b.l_p2i = rd(nodes.align.l_p2i);
  b.t_i2p = rd(nodes.align.t_i2p);
  b.t_p2i = rd(nodes.align.t_p2i);
  b.mtp = rd(nodes.mtp);
  b.tau = tau;
  return b;
}

// ---- standalone operation values (production path on a scratch tape) ----

// Directional InfoNCE over unit-norm rows; positives are row-aligned.
inline double infonce_directional(const MatD& anchors, const MatD& positives, double tau) {
  check(anchors.rows() >= 1, "infonce_directional: need at least one pair");
  check(anchors.rows() == positives.rows() && anchors.cols() == positives.cols(),
        "infonce_directional: shape mismatch");
  check(anchors.allFinite() && positives.allFinite(), "infonce_directional: non-finite input");
  check(tau > 0.0, "infonce_directional: tau must be positive");
  GraphD g;
  const int a = g.constant(anchors);
  const int b = g.constant(positives);
  MatD inv(1, 1);
  inv(0, 0) = 1.0 / tau;
  const int s = g.scale_by(g.matmul_nt(a, b), g.constant(inv));
  return g.val(infonce_from_scores(g, s))(0, 0);
}

// Token-level InfoNCE; tokens are (K*T) x d stacks of unit-norm rows.
inline double infonce_token(const MatD& tokens_a, const MatD& tokens_b, int batch, double tau) {
  check(batch >= 1 && tokens_a.rows() % batch == 0, "infonce_token: bad batch");
  check(tokens_a.rows() == tokens_b.rows() && tokens_a.cols() == tokens_b.cols(),
        "infonce_token: shape mismatch");
  const int t = static_cast<int>(tokens_a.rows()) / batch;
  GraphD g;
  const int a = g.constant(tokens_a);
  const int b = g.constant(tokens_b);
  MatD inv(1, 1);
  inv(0, 0) = 1.0 / tau;
  auto [fwd, bwd] = infonce_token_nodes(g, a, b, g.constant(inv), batch, t);
  (void)bwd;
  return g.val(fwd)(0, 0);
}

}  // namespace mopa
