#pragma once

#include "mopa/model.hpp"
#include "mopa/synth.hpp"

#include <map>
#include <string>
#include <vector>

namespace mopa {

// Pairwise cosine scores between embedded windows (inputs unit-norm).
struct SimilarityMatrix {
  MatF scores;  // P x Q
};

SimilarityMatrix similarity_matrix(const MatF& queries, const MatF& refs);

// Fraction of queries whose ground-truth reference ranks in the top k.
// Score ties resolve toward the smallest reference index.
double recall_at_k(const SimilarityMatrix& s, const std::vector<int>& ground_truth, int k);

struct SyncConfig {
  double clip_len_s = 20.0;
  double window_len_s = 5.0;
  double stride_s = 0.2;
  int top_k = 5;
  std::array<double, 2> offset_range_s{-7.0, 7.0};
  double tolerance_s = 0.2;

  void validate() const {
    check(stride_s > 0.0, "sync: stride must be positive");
    check(window_len_s > 0.0 && window_len_s <= clip_len_s, "sync: window must fit in the clip");
    check(top_k >= 1, "sync: top_k must be positive");
    check(offset_range_s[0] <= offset_range_s[1], "sync: bad offset range");
  }
};

inline void to_json(nlohmann::json& j, const SyncConfig& c) {
  j = nlohmann::json{{"clip_len_s", c.clip_len_s},     {"window_len_s", c.window_len_s},
                     {"stride_s", c.stride_s},         {"top_k", c.top_k},
                     {"offset_range_s", c.offset_range_s}, {"tolerance_s", c.tolerance_s}};
}

inline void from_json(const nlohmann::json& j, SyncConfig& c) {
  j.at("clip_len_s").get_to(c.clip_len_s);
  j.at("window_len_s").get_to(c.window_len_s);
  j.at("stride_s").get_to(c.stride_s);
  j.at("top_k").get_to(c.top_k);
  j.at("offset_range_s").get_to(c.offset_range_s);
  j.at("tolerance_s").get_to(c.tolerance_s);
}

struct OffsetVote {
  int imu_window = 0;   // p
  int pose_window = 0;  // q
  double weight = 0.0;
  int direction = 0;  // 0: imu->pose retrieval, 1: pose->imu
};

// Voted temporal offset. Positive delta means the pose stream starts later
// than the IMU stream; bins are (pose index - imu index) stride multiples.
struct OffsetEstimate {
  double delta_hat_s = 0.0;
  std::map<int, double> histogram;  // bin -> accumulated weight
  std::vector<OffsetVote> votes;
  int windows_imu = 0, windows_pose = 0;
};

// Number of overlapping windows a span supports: floor((span-window)/stride)+1.
int window_count(double span_s, double window_len_s, double stride_s);

// Windows both streams, embeds them globally, retrieves top-k matches per row
// and per column of the similarity matrix, and votes offsets q - p weighted by
// the similarity score; the estimate is the argmax histogram bin (ties favor
// the smallest |offset|).
OffsetEstimate estimate_offset(ParamStore<float>& store, const ModelConfig& model,
                               const SensorLayout& layout, const std::vector<ImuSequence>& imus,
                               const PoseSequence& pose, const SyncConfig& cfg);

// Normalized cross-correlation reference:
// argmax_L corr(x[v], y[v+L]) * (1/rate); positive offset means y lags x.
double crosscorr_oracle(const std::vector<double>& x, const std::vector<double>& y,
                        double rate_hz, double max_offset_s);

// Pose-side angular velocity of one sensor's distal segment, resampled to the
// IMU rate so it can be correlated against the gyro channel.
std::vector<double> pose_angular_velocity_at(const PoseSequence& pose, int limb, double rate_hz);

struct ArgmaxResult {
  int index = -1;
  bool tied = false;
};

// Argmax cosine over candidate rows; ties -> lowest index, flagged.
ArgmaxResult localize_subject(const Eigen::RowVectorXf& imu_global, const MatF& candidates);

struct PartCandidate {
  int person = 0;
  int part = 0;
};

struct PartMatch {
  PartCandidate who;
  bool tied = false;
};

// Argmax cosine over all (person, part) local embeddings.
PartMatch localize_part(const Eigen::RowVectorXf& imu_local, const MatF& candidate_rows,
                        const std::vector<PartCandidate>& ids);

struct NnResult {
  std::vector<int> predictions;
  double accuracy = 0.0;
};

// 1-nearest-neighbor by cosine similarity; ties -> lowest train index.
NnResult har_1nn(const MatF& train_embeddings, const std::vector<int>& train_labels,
                 const MatF& query_embeddings, const std::vector<int>& query_labels);

struct FinetuneResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  MatF confusion;  // true x predicted counts
  int classes = 0;
};

// Linear softmax head on the IMU global embedding trained jointly with the
// (unfrozen) IMU encoder; accuracy reported after `epochs` epochs. The head is
// zero-initialized, so with 0 epochs every prediction is class 0.
FinetuneResult har_finetune(const ParamStore<float>& checkpoint, const ModelConfig& model,
                            const SensorLayout& layout, const std::vector<PairedSample>& train,
                            const std::vector<int>& train_labels,
                            const std::vector<PairedSample>& eval,
                            const std::vector<int>& eval_labels, int classes, int epochs,
                            double learning_rate, int batch_size, std::uint64_t seed);

}  // namespace mopa
