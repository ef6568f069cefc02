#include "mopa/training.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

namespace mopa {

LoadedDataset load_all(const Dataset& ds) {
  LoadedDataset out;
  out.layout = ds.manifest().layout;
  out.joint_count = ds.manifest().joint_count;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string& split = ds.manifest().sequences[i].split;
    Sequence seq = ds.load_sequence(i);
    if (split == "train") {
      out.train.push_back(std::move(seq));
    } else if (split == "val") {
      out.val.push_back(std::move(seq));
    } else {
      out.test.push_back(std::move(seq));
    }
  }
  return out;
}

std::vector<TrainBatch> make_batches(const std::vector<Sequence>& sequences,
                                     const SensorLayout& layout, const ModelConfig& model,
                                     const TrainConfig& cfg, Rng& rng, int* skipped) {
  cfg.validate();
  const int n_sensors = layout.count();
  std::vector<PairedSample> windows;
  int skip_count = 0;
  for (const auto& seq : sequences) {
    const double span = seq.pose.end_s() - seq.pose.t0_s;
    if (span < cfg.window_len_s) {
      ++skip_count;
      continue;
    }
    for (int w = 0; w < cfg.windows_per_sequence; ++w) {
      const double start = seq.pose.t0_s + rng.uniform(0.0, span - cfg.window_len_s);
      PairedSample sample = window(layout, seq, start, cfg.window_len_s, model.target_frames);
      if (cfg.exclude_degenerate && sample.degenerate) continue;
      windows.push_back(std::move(sample));
    }
  }
  if (skipped) *skipped = skip_count;
  rng.shuffle(windows);

  std::vector<TrainBatch> batches;
  for (std::size_t i = 0; i < windows.size(); i += cfg.batch_size) {
    const std::size_t end = std::min(windows.size(), i + cfg.batch_size);
    if (end - i < 2) break;  // contrastive losses need negatives
    TrainBatch batch;
    for (std::size_t j = i; j < end; ++j) {
      batch.samples.push_back(std::move(windows[j]));
      std::vector<char> present(n_sensors, 1);
      if (cfg.sensor_dropout_p > 0.0) {
        bool any = false;
        for (int n = 0; n < n_sensors; ++n) {
          present[n] = rng.uniform01() < cfg.sensor_dropout_p ? 0 : 1;
          any = any || present[n];
        }
        if (!any) present[rng.uniform_int(n_sensors)] = 1;
      }
      batch.presence.push_back(std::move(present));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<PairedSample> fixed_windows(const std::vector<Sequence>& sequences,
                                        const SensorLayout& layout, const ModelConfig& model,
                                        double window_len_s, int max_windows) {
  std::vector<PairedSample> out;
  // First pass: one centered window per sequence; further passes add shifted
  // windows until max_windows is reached.
  for (int pass = 0; static_cast<int>(out.size()) < max_windows; ++pass) {
    bool added = false;
    for (const auto& seq : sequences) {
      if (static_cast<int>(out.size()) >= max_windows) break;
      const double span = seq.pose.end_s() - seq.pose.t0_s;
      if (span < window_len_s) continue;
      const double slack = span - window_len_s;
      // Pass 0 centers; later passes spread toward the edges.
      double frac = 0.5;
      if (pass == 1) frac = 0.0;
      if (pass == 2) frac = 1.0;
      if (pass > 2) break;
      if (pass > 0 && slack < window_len_s) continue;  // avoid heavy overlap
      const double start = seq.pose.t0_s + frac * slack;
      out.push_back(window(layout, seq, start, window_len_s, model.target_frames));
      added = true;
    }
    if (!added) break;
  }
  return out;
}

MatF apply_dropout(const MatF& locals, const std::vector<char>& present, const MatF& absent) {
  check(locals.rows() == absent.rows() && locals.cols() == absent.cols(),
        "apply_dropout: shape mismatch");
  check(static_cast<int>(present.size()) == locals.rows(), "apply_dropout: mask size mismatch");
  MatF out = locals;
  for (Eigen::Index n = 0; n < out.rows(); ++n) {
    if (!present[n]) out.row(n) = absent.row(n);
  }
  return out;
}

double bidirectional_r1(const MatF& imu_global, const MatF& part_global) {
  const Eigen::Index k = imu_global.rows();
  check(k >= 1 && part_global.rows() == k, "bidirectional_r1: shape mismatch");
  const MatF scores = imu_global * part_global.transpose();
  int hit_i2p = 0, hit_p2i = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    Eigen::Index best;
    scores.row(i).maxCoeff(&best);
    if (best == i) ++hit_i2p;
    scores.col(i).maxCoeff(&best);
    if (best == i) ++hit_p2i;
  }
  return 0.5 * (static_cast<double>(hit_i2p) + hit_p2i) / static_cast<double>(k);
}

namespace {

std::vector<MatF> snapshot(const ParamStore<float>& store) {
  std::vector<MatF> vals;
  vals.reserve(store.tensors().size());
  for (const auto& t : store.tensors()) vals.push_back(t.val);
  return vals;
}

void restore(ParamStore<float>& store, const std::vector<MatF>& vals) {
  for (std::size_t i = 0; i < vals.size(); ++i) store.tensors()[i].val = vals[i];
}

}  // namespace

TrainResult train(const LoadedDataset& data, const ModelConfig& model, const LossConfig& loss,
                  const TrainConfig& cfg, const std::string& checkpoint_path,
                  const std::string& log_path, const nlohmann::json& run_config) {
  cfg.validate();
  loss.validate();
  check(!data.train.empty(), "train: empty train split");
  check(!data.val.empty(), "train: empty val split");
  const SensorLayout& layout = data.layout;
  const int n_sensors = layout.count();

  ParamStore<float> store;
  register_model_params(store, model, layout, cfg.seed);
  register_loss_params(store, loss, model, n_sensors, cfg.seed);

  std::ofstream log(log_path, std::ios::trunc);
  if (!log) fail("train: cannot write log '" + log_path + "'");

  const std::vector<PairedSample> val_windows =
      fixed_windows(data.val, layout, model, cfg.window_len_s, cfg.val_batch);
  check(val_windows.size() >= 2, "train: validation split yields fewer than 2 windows");

  Adam<float> adam(cfg.learning_rate, cfg.beta1, cfg.beta2);
  EarlyStopper stopper(cfg.patience);
  std::vector<MatF> best = snapshot(store);
  TrainResult result;
  result.checkpoint_path = checkpoint_path;
  result.log_path = log_path;

  const auto save_best = [&](const std::vector<MatF>& vals) {
    ParamStore<float> tmp = store;  // same structure
    restore(tmp, vals);
    save_checkpoint(checkpoint_path, tmp, run_config);
  };

  Rng mask_rng(derive_seed(cfg.seed, 0xa5c));
  bool aborted = false;
  for (int epoch = 0; epoch < cfg.max_epochs && !aborted; ++epoch) {
    Rng epoch_rng(derive_seed(cfg.seed, 0x100 + static_cast<std::uint64_t>(epoch)));
    const auto batches = make_batches(data.train, layout, model, cfg, epoch_rng);
    check(!batches.empty(), "train: no batches (dataset shorter than the window?)");

    AlignBreakdown mean{};
    int steps = 0;
    for (const auto& tb : batches) {
      BatchData<float> batch = make_batch_data<float>(model, layout, tb.samples);
      batch.presence = tb.presence;

      std::vector<MaskSet> masks;
      for (int i = 0; i < batch.batch; ++i) {
        // Mask only present sensors: sample over the present subset.
        std::vector<int> present_sensors;
        for (int n = 0; n < n_sensors; ++n) {
          if (batch.presence[i][n]) present_sensors.push_back(n);
        }
        MaskSet m = sample_mask(static_cast<int>(present_sensors.size()), model.tokens(),
                                loss.mtp_alpha, mask_rng);
        for (auto& [n, t] : m.positions) n = present_sensors[n];
        masks.push_back(std::move(m));
      }

      GraphF g;
      Binder<float> bind(g, store);
      double total = 0.0;
      try {
        ModelForward<float> fwd = build_forward(g, bind, model, layout, batch);
        TotalLossNodes<float> nodes = total_loss_nodes(g, bind, model, loss, fwd, batch, masks);
        total = g.val(nodes.total)(0, 0);
        if (!std::isfinite(total)) fail("non-finite loss");
        g.backward(nodes.total);
        store.zero_grad();
        bind.collect();
        adam.step(store);
        // Keep tau away from zero; the exponential parameterization already
        // enforces positivity.
        float& rho = store.get("loss.rho").val(0, 0);
        rho = std::max(rho, static_cast<float>(std::log(cfg.min_tau)));

        const double tau = std::exp(static_cast<double>(rho));
        const AlignBreakdown b = read_breakdown(g, nodes, tau);
        mean.total += b.total;
        mean.g_i2p += b.g_i2p;
        mean.g_p2i += b.g_p2i;
        mean.l_i2p += b.l_i2p;
        mean.l_p2i += b.l_p2i;
        mean.t_i2p += b.t_i2p;
        mean.t_p2i += b.t_p2i;
        mean.mtp += b.mtp;
        mean.tau = b.tau;
        ++steps;
      } catch (const Error&) {
        aborted = true;
        break;
      }
    }
    if (aborted || steps == 0) {
      aborted = true;
      break;
    }
    const double inv = 1.0 / steps;

    const BatchEmbeddings emb = embed_batch(store, model, layout, val_windows);
    const double val_r1 = bidirectional_r1(emb.imu_global, emb.part_global);
    const bool improved = stopper.observe(val_r1);
    if (improved) best = snapshot(store);

    nlohmann::json line = {{"epoch", epoch},
                           {"loss", mean.total * inv},
                           {"global_i2p", mean.g_i2p * inv},
                           {"global_p2i", mean.g_p2i * inv},
                           {"local_i2p", mean.l_i2p * inv},
                           {"local_p2i", mean.l_p2i * inv},
                           {"token_i2p", mean.t_i2p * inv},
                           {"token_p2i", mean.t_p2i * inv},
                           {"mtp", mean.mtp * inv},
                           {"tau", mean.tau},
                           {"val_r1", val_r1},
                           {"best_val_r1", stopper.best()}};
    log << line.dump() << "\n";
    log.flush();
    result.epochs_run = epoch + 1;
    if (stopper.stop()) break;
  }

  result.aborted = aborted;
  result.best_val_r1 = stopper.best();
  result.best_epoch = stopper.best_epoch() - 1;
  save_best(best);
  if (aborted) {
    nlohmann::json line = {{"event", "aborted"}, {"reason", "non-finite loss"}};
    log << line.dump() << "\n";
  }
  return result;
}

}  // namespace mopa
