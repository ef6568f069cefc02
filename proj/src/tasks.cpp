#include "mopa/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mopa {

SimilarityMatrix similarity_matrix(const MatF& queries, const MatF& refs) {
  check(queries.cols() == refs.cols(), "similarity_matrix: dimension mismatch");
  check(queries.rows() >= 1 && refs.rows() >= 1, "similarity_matrix: empty inputs");
  SimilarityMatrix s;
  s.scores = queries * refs.transpose();
  check(s.scores.allFinite(), "similarity_matrix: non-finite scores");
  check(s.scores.minCoeff() >= -1.0f - 1e-6f && s.scores.maxCoeff() <= 1.0f + 1e-6f,
        "similarity_matrix: scores outside [-1, 1] (inputs not unit-norm?)");
  return s;
}

double recall_at_k(const SimilarityMatrix& s, const std::vector<int>& ground_truth, int k) {
  check(k >= 1, "recall_at_k: k must be at least 1");
  const Eigen::Index p = s.scores.rows();
  check(static_cast<Eigen::Index>(ground_truth.size()) == p,
        "recall_at_k: every query needs a ground-truth reference");
  int hits = 0;
  for (Eigen::Index i = 0; i < p; ++i) {
    const int gt = ground_truth[i];
    check(gt >= 0 && gt < s.scores.cols(), "recall_at_k: ground truth out of range");
    const float target = s.scores(i, gt);
    int rank = 0;
    for (Eigen::Index j = 0; j < s.scores.cols(); ++j) {
      const float v = s.scores(i, j);
      if (v > target || (v == target && j < gt)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(p);
}

int window_count(double span_s, double window_len_s, double stride_s) {
  const double usable = span_s - window_len_s;
  if (usable < -1e-9) return 0;
  return static_cast<int>(std::floor(usable / stride_s + 1e-9)) + 1;
}

namespace {

std::vector<std::pair<int, double>> top_k_of(const Eigen::RowVectorXf& row, int k) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  const int kk = std::min<int>(k, static_cast<int>(idx.size()));
  std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](int a, int b) {
    if (row(a) != row(b)) return row(a) > row(b);
    return a < b;
  });
  std::vector<std::pair<int, double>> out;
  for (int i = 0; i < kk; ++i) out.push_back({idx[i], static_cast<double>(row(idx[i]))});
  return out;
}

}  // namespace

OffsetEstimate estimate_offset(ParamStore<float>& store, const ModelConfig& model,
                               const SensorLayout& layout, const std::vector<ImuSequence>& imus,
                               const PoseSequence& pose, const SyncConfig& cfg) {
  cfg.validate();
  check(!imus.empty(), "estimate_offset: no imu streams");

  double imu_span = imus[0].end_s() - imus[0].t0_s;
  for (const auto& imu : imus) imu_span = std::min(imu_span, imu.end_s() - imu.t0_s);
  const double pose_span = pose.end_s() - pose.t0_s;

  OffsetEstimate out;
  out.windows_imu = window_count(imu_span, cfg.window_len_s, cfg.stride_s);
  out.windows_pose = window_count(pose_span, cfg.window_len_s, cfg.stride_s);
  check(out.windows_imu >= 1 && out.windows_pose >= 1,
        "estimate_offset: streams shorter than the window length");

  // Windows are indexed relative to each stream's own start; timestamps are
  // never compared (they are what the estimate recovers).
  std::vector<std::vector<MatF>> imu_windows, pose_windows;
  for (int p = 0; p < out.windows_imu; ++p) {
    imu_windows.push_back(make_imu_windows(imus, imus[0].t0_s + p * cfg.stride_s,
                                           cfg.window_len_s, model.target_frames));
  }
  for (int q = 0; q < out.windows_pose; ++q) {
    pose_windows.push_back(make_part_windows(pose, layout, pose.t0_s + q * cfg.stride_s,
                                             cfg.window_len_s, model.target_frames));
  }
  const ImuEmbeddings imu_emb = embed_imu_windows(store, model, layout, imu_windows);
  const PartEmbeddings pose_emb = embed_pose_windows(store, model, layout, pose_windows);
  const SimilarityMatrix sim = similarity_matrix(imu_emb.global, pose_emb.global);

  const double lo = cfg.offset_range_s[0] - 1e-9, hi = cfg.offset_range_s[1] + 1e-9;
  const auto add_vote = [&](int p, int q, double w, int dir) {
    const int delta = q - p;  // pose index minus imu index
    const double offset = delta * cfg.stride_s;
    if (offset < lo || offset > hi) return;
    out.votes.push_back({p, q, w, dir});
    out.histogram[delta] += w;
  };

  for (int p = 0; p < out.windows_imu; ++p) {
    for (const auto& [q, w] : top_k_of(sim.scores.row(p), cfg.top_k)) add_vote(p, q, w, 0);
  }
  for (int q = 0; q < out.windows_pose; ++q) {
    for (const auto& [p, w] : top_k_of(sim.scores.col(q).transpose(), cfg.top_k)) {
      add_vote(p, q, w, 1);
    }
  }
  check(!out.histogram.empty(), "estimate_offset: every vote fell outside the offset range");

  // Argmax bin; ties favor the smallest |offset|, then the smaller offset.
  int best_bin = 0;
  double best_w = -std::numeric_limits<double>::infinity();
  bool first = true;
  for (const auto& [bin, w] : out.histogram) {
    const bool better =
        first || w > best_w ||
        (w == best_w &&
         (std::abs(bin) < std::abs(best_bin) || (std::abs(bin) == std::abs(best_bin) && bin < best_bin)));
    if (better) {
      best_bin = bin;
      best_w = w;
      first = false;
    }
  }
  out.delta_hat_s = best_bin * cfg.stride_s;
  return out;
}

double crosscorr_oracle(const std::vector<double>& x, const std::vector<double>& y,
                        double rate_hz, double max_offset_s) {
  check(x.size() >= 3 && y.size() >= 3, "crosscorr: inputs too short");
  check(rate_hz > 0.0, "crosscorr: rate must be positive");
  const int nx = static_cast<int>(x.size());
  const int ny = static_cast<int>(y.size());
  const int max_lag = static_cast<int>(std::lround(max_offset_s * rate_hz));

  double best = -2.0;
  int best_lag = 0;
  for (int lag = -max_lag; lag <= max_lag; ++lag) {
    const int v0 = std::max(0, -lag);
    const int v1 = std::min(nx, ny - lag);
    const int n = v1 - v0;
    if (n < 8) continue;
    double sx = 0, sy = 0;
    for (int v = v0; v < v1; ++v) {
      sx += x[v];
      sy += y[v + lag];
    }
    const double mx = sx / n, my = sy / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (int v = v0; v < v1; ++v) {
      const double a = x[v] - mx, b = y[v + lag] - my;
      sxy += a * b;
      sxx += a * a;
      syy += b * b;
    }
    if (sxx <= 0.0 || syy <= 0.0) fail("crosscorr: zero-variance input");
    const double r = sxy / std::sqrt(sxx * syy);
    if (r > best) {
      best = r;
      best_lag = lag;
    }
  }
  check(best > -2.0, "crosscorr: no valid overlap in the offset range");
  return best_lag / rate_hz;
}

std::vector<double> pose_angular_velocity_at(const PoseSequence& pose, int limb, double rate_hz) {
  const std::vector<double> angle = pose_limb_angle(pose, limb);
  const std::vector<double> w = angular_velocity(angle, pose.fps);
  // Resample onto the target rate grid covering the pose span.
  MatF col(static_cast<int>(w.size()), 1);
  for (std::size_t i = 0; i < w.size(); ++i) col(static_cast<int>(i), 0) = static_cast<float>(w[i]);
  const double span = (static_cast<int>(w.size()) - 1) / pose.fps;
  const int frames = static_cast<int>(std::floor(span * rate_hz)) + 1;
  const MatF res = resample(col, 0.0, pose.fps, 0.0, frames / rate_hz, frames);
  std::vector<double> out(frames);
  for (int i = 0; i < frames; ++i) out[i] = res(i, 0);
  return out;
}

ArgmaxResult localize_subject(const Eigen::RowVectorXf& imu_global, const MatF& candidates) {
  check(candidates.rows() >= 1, "localize_subject: need at least one candidate");
  check(candidates.cols() == imu_global.size(), "localize_subject: dimension mismatch");
  ArgmaxResult r;
  float best = -std::numeric_limits<float>::infinity();
  for (Eigen::Index i = 0; i < candidates.rows(); ++i) {
    const float score = imu_global.dot(candidates.row(i));
    if (score > best) {
      best = score;
      r.index = static_cast<int>(i);
      r.tied = false;
    } else if (score == best) {
      r.tied = true;  // keep the lowest index
    }
  }
  return r;
}

PartMatch localize_part(const Eigen::RowVectorXf& imu_local, const MatF& candidate_rows,
                        const std::vector<PartCandidate>& ids) {
  check(candidate_rows.rows() == static_cast<Eigen::Index>(ids.size()),
        "localize_part: id list mismatch");
  const ArgmaxResult r = localize_subject(imu_local, candidate_rows);
  PartMatch m;
  m.who = ids[static_cast<std::size_t>(r.index)];
  m.tied = r.tied;
  return m;
}

NnResult har_1nn(const MatF& train_embeddings, const std::vector<int>& train_labels,
                 const MatF& query_embeddings, const std::vector<int>& query_labels) {
  check(train_embeddings.rows() >= 1, "har_1nn: empty train set");
  check(static_cast<Eigen::Index>(train_labels.size()) == train_embeddings.rows(),
        "har_1nn: label count mismatch");

  const auto unit = [](const MatF& m) {
    MatF out = m;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const float n = out.row(r).norm();
      if (n > 0) out.row(r) /= n;
    }
    return out;
  };
  const MatF train = unit(train_embeddings);
  const MatF query = unit(query_embeddings);

  NnResult res;
  int hits = 0;
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    Eigen::Index best = 0;
    float best_score = -std::numeric_limits<float>::infinity();
    for (Eigen::Index j = 0; j < train.rows(); ++j) {
      const float score = query.row(i).dot(train.row(j));
      if (score > best_score) {
        best_score = score;
        best = j;
      }
    }
    const int pred = train_labels[static_cast<std::size_t>(best)];
    res.predictions.push_back(pred);
    if (!query_labels.empty() && pred == query_labels[static_cast<std::size_t>(i)]) ++hits;
  }
  res.accuracy = query_labels.empty()
                     ? 0.0
                     : static_cast<double>(hits) / static_cast<double>(query.rows());
  return res;
}

FinetuneResult har_finetune(const ParamStore<float>& checkpoint, const ModelConfig& model,
                            const SensorLayout& layout, const std::vector<PairedSample>& train,
                            const std::vector<int>& train_labels,
                            const std::vector<PairedSample>& eval,
                            const std::vector<int>& eval_labels, int classes, int epochs,
                            double learning_rate, int batch_size, std::uint64_t seed) {
  check(classes >= 2, "har_finetune: need at least 2 classes");
  check(!train.empty() && train.size() == train_labels.size(), "har_finetune: bad train set");
  {
    bool multi = false;
    for (int l : train_labels) multi = multi || l != train_labels[0];
    check(multi, "har_finetune: train labels cover a single class");
  }

  ParamStore<float> store = checkpoint;  // encoder is unfrozen; work on a copy
  store.add("har.head.w", model.global_dim, classes, Init::kZero, seed);
  store.add("har.head.b", 1, classes, Init::kZero, seed);

  Adam<float> adam(learning_rate);
  Rng rng(seed);
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
      const std::size_t end = std::min(order.size(), at + batch_size);
      std::vector<std::vector<MatF>> windows;
      std::vector<int> labels;
      for (std::size_t i = at; i < end; ++i) {
        windows.push_back(train[order[i]].imu_windows);
        labels.push_back(train_labels[order[i]]);
      }
      GraphF g;
      Binder<float> bind(g, store);
      const std::vector<MatF> stacked = stack_imu_windows<float>(model, windows);
      const std::vector<std::vector<char>> presence(windows.size(),
                                                    std::vector<char>(layout.count(), 1));
      ImuForward<float> fwd = build_imu_forward(g, bind, model, layout, stacked, presence);
      const int logits = g.affine(fwd.global_raw, bind("har.head.w"), bind("har.head.b"));
      const int lse = g.logsumexp_rows(logits);
      const int picked = g.gather_cols_per_row(logits, labels);
      const int loss = g.mean_all(g.sub(lse, picked));
      g.backward(loss);
      store.zero_grad();
      bind.collect();
      adam.step(store);
    }
  }

  // Evaluation: argmax logits, ties toward the lowest class index.
  FinetuneResult res;
  res.classes = classes;
  res.confusion = MatF::Zero(classes, classes);
  std::vector<std::vector<MatF>> windows;
  for (const auto& s : eval) windows.push_back(s.imu_windows);
  const ImuEmbeddings emb = embed_imu_windows(store, model, layout, windows);
  const MatF logits = (emb.global_raw * store.get("har.head.w").val).rowwise() +
                      store.get("har.head.b").val.row(0);
  int hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      if (logits(i, c) > logits(i, best)) best = c;
    }
    res.predictions.push_back(best);
    const int truth = eval_labels[static_cast<std::size_t>(i)];
    res.confusion(truth, best) += 1.0f;
    if (best == truth) ++hits;
  }
  res.accuracy = static_cast<double>(hits) / static_cast<double>(logits.rows());
  return res;
}

}  // namespace mopa
