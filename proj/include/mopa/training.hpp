#pragma once

#include "mopa/losses.hpp"
#include "mopa/model.hpp"

#include <string>
#include <vector>

namespace mopa {

struct TrainConfig {
  double window_len_s = 5.0;
  int batch_size = 128;         // paper preset: 1356
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int max_epochs = 100;
  int patience = 50;            // paper preset: 500
  double sensor_dropout_p = 0.0;
  int windows_per_sequence = 2;
  int val_batch = 64;
  bool exclude_degenerate = false;
  double min_tau = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    check(batch_size >= 2, "train: batch_size must be at least 2 (contrastive negatives)");
    check(patience >= 1, "train: patience must be at least 1");
    check(max_epochs >= 1, "train: max_epochs must be at least 1");
    check(learning_rate > 0.0, "train: learning rate must be positive");
    check(sensor_dropout_p >= 0.0 && sensor_dropout_p <= 1.0, "train: dropout p must be in [0,1]");
    check(windows_per_sequence >= 1, "train: windows_per_sequence must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"window_len_s", c.window_len_s},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"sensor_dropout_p", c.sensor_dropout_p},
                     {"windows_per_sequence", c.windows_per_sequence},
                     {"val_batch", c.val_batch},
                     {"exclude_degenerate", c.exclude_degenerate},
                     {"min_tau", c.min_tau},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("window_len_s").get_to(c.window_len_s);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("max_epochs").get_to(c.max_epochs);
  j.at("patience").get_to(c.patience);
  j.at("sensor_dropout_p").get_to(c.sensor_dropout_p);
  j.at("windows_per_sequence").get_to(c.windows_per_sequence);
  j.at("val_batch").get_to(c.val_batch);
  j.at("exclude_degenerate").get_to(c.exclude_degenerate);
  j.at("min_tau").get_to(c.min_tau);
  j.at("seed").get_to(c.seed);
}

// All sequences of one dataset resident in memory, grouped by split.
struct LoadedDataset {
  SensorLayout layout;
  int joint_count = 0;
  std::vector<Sequence> train, val, test;
};

LoadedDataset load_all(const Dataset& ds);

// One optimization batch: windows plus per-sample sensor presence.
struct TrainBatch {
  std::vector<PairedSample> samples;
  std::vector<std::vector<char>> presence;  // K x N, at least one sensor per sample
};

// Samples windows with random starts, applies per-sensor dropout (clamped so
// every sample keeps at least one sensor) and shuffles deterministically.
// Sequences shorter than the window are skipped (counted in skipped).
std::vector<TrainBatch> make_batches(const std::vector<Sequence>& sequences,
                                     const SensorLayout& layout, const ModelConfig& model,
                                     const TrainConfig& cfg, Rng& rng, int* skipped = nullptr);

// Evaluation windows at fixed, evenly spaced starts (deterministic).
std::vector<PairedSample> fixed_windows(const std::vector<Sequence>& sequences,
                                        const SensorLayout& layout, const ModelConfig& model,
                                        double window_len_s, int max_windows);

// Replaces dropped sensors' rows with the learned absent vectors (row n of the
// absent parameter); evaluation-side counterpart of the in-graph substitution.
MatF apply_dropout(const MatF& locals, const std::vector<char>& present, const MatF& absent);

// Tracks the best metric; stop() becomes true after `patience` epochs without
// improvement. Never reports a worse checkpoint than an earlier epoch's.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  // Returns true when the metric improved (strictly).
  bool observe(double metric) {
    ++epoch_;
    if (metric > best_) {
      best_ = metric;
      best_epoch_ = epoch_;
      return true;
    }
    return false;
  }

  bool stop() const { return epoch_ - best_epoch_ >= patience_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

struct TrainResult {
  double best_val_r1 = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  bool aborted = false;  // non-finite loss; best checkpoint still written
  std::string checkpoint_path;
  std::string log_path;
};

// Mean of the two directional R@1 scores for paired unit-norm globals.
double bidirectional_r1(const MatF& imu_global, const MatF& part_global);

// Full optimization loop with validation-R@1 early stopping, JSON-lines
// logging and best-checkpoint persistence. `run_config` is embedded in the
// checkpoint for provenance.
TrainResult train(const LoadedDataset& data, const ModelConfig& model, const LossConfig& loss,
                  const TrainConfig& cfg, const std::string& checkpoint_path,
                  const std::string& log_path, const nlohmann::json& run_config);

}  // namespace mopa
