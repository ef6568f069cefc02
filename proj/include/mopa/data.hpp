#pragma once

#include "mopa/common.hpp"

#include "json.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mopa {

// One body-mounted sensor: which body part it sits on and which skeleton
// joints describe that part's motion.
struct SensorSpec {
  std::string sensor_id;
  std::string body_part;
  std::vector<int> joint_indices;
};

// Ordered sensor list. The order is canonical: part streams, local embeddings
// and the global concatenation all follow it.
struct SensorLayout {
  std::vector<SensorSpec> sensors;

  int count() const { return static_cast<int>(sensors.size()); }
  // 2 * J^n columns for sensor n's part stream.
  int part_width(int n) const { return 2 * static_cast<int>(sensors[n].joint_indices.size()); }
  void validate(int joint_count) const;
};

inline void to_json(nlohmann::json& j, const SensorSpec& s) {
  j = nlohmann::json{
      {"sensor_id", s.sensor_id}, {"body_part", s.body_part}, {"joint_indices", s.joint_indices}};
}

inline void from_json(const nlohmann::json& j, SensorSpec& s) {
  j.at("sensor_id").get_to(s.sensor_id);
  j.at("body_part").get_to(s.body_part);
  j.at("joint_indices").get_to(s.joint_indices);
}

inline void to_json(nlohmann::json& j, const SensorLayout& l) {
  j = nlohmann::json{{"sensors", l.sensors}};
}

inline void from_json(const nlohmann::json& j, SensorLayout& l) {
  j.at("sensors").get_to(l.sensors);
}

// Raw IMU stream: rows are time samples, columns are channels.
struct ImuSequence {
  std::string sensor_id;
  MatF samples;  // F_raw x C
  double sample_rate_hz = 0.0;
  double t0_s = 0.0;

  int frames() const { return static_cast<int>(samples.rows()); }
  int channels() const { return static_cast<int>(samples.cols()); }
  // Time of the last sample; the stream covers [t0_s, end_s()].
  double end_s() const { return t0_s + (frames() - 1) / sample_rate_hz; }
  void validate() const;
};

// 2D skeletal pose stream. Joints are stored flattened as (x, y) interleaved
// per joint, joints in ascending joint-index order: column 2j = x_j, 2j+1 = y_j.
struct PoseSequence {
  MatF joints;  // F_v x 2J
  int joint_count = 0;
  double fps = 0.0;
  double t0_s = 0.0;

  int frames() const { return static_cast<int>(joints.rows()); }
  double end_s() const { return t0_s + (frames() - 1) / fps; }
  void validate() const;
};

// One training/eval item: per-sensor IMU and body-part windows resampled to a
// common frame count so both modalities tokenize to the same T.
struct PairedSample {
  std::vector<MatF> imu_windows;   // each F x C, layout order
  std::vector<MatF> part_windows;  // each F x 2J^n, normalized, layout order
  int label = -1;
  std::string subject_id;
  std::string sequence_id;
  double window_start_s = 0.0;
  double window_len_s = 5.0;
  bool degenerate = false;  // frozen-pose window (zero bounding box)
};

// One recorded sequence: a pose stream plus one IMU stream per sensor,
// index-aligned with the layout.
struct Sequence {
  std::string id;
  std::string subject_id;
  int label = -1;
  PoseSequence pose;
  std::vector<ImuSequence> imus;
};

struct ArrayRef {
  std::string file;
  std::vector<int> shape;
  std::string dtype = "float32";
};

struct SequenceEntry {
  std::string id;
  std::string subject_id;
  int label = -1;
  std::string split;  // train | val | test
  ArrayRef pose;
  double pose_fps = 0.0;
  double pose_t0_s = 0.0;
  std::vector<ArrayRef> imus;  // layout order
  double imu_rate_hz = 0.0;
  double imu_t0_s = 0.0;
};

struct DatasetManifest {
  int version = 1;
  SensorLayout layout;
  int joint_count = 0;
  std::vector<SequenceEntry> sequences;
};

// Manifest plus lazy blob access rooted at a directory.
class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetManifest manifest, std::string root)
      : manifest_(std::move(manifest)), root_(std::move(root)) {}

  const DatasetManifest& manifest() const { return manifest_; }
  const std::string& root() const { return root_; }
  std::size_t size() const { return manifest_.sequences.size(); }

  Sequence load_sequence(std::size_t index) const;
  std::vector<std::size_t> split_indices(const std::string& split) const;

 private:
  DatasetManifest manifest_;
  std::string root_;
};

// Raw little-endian float32 blob IO (extension .f32, row-major).
MatF read_f32(const std::string& path, int rows, int cols);
void write_f32(const std::string& path, const MatF& m);

Dataset load_dataset(const std::string& root_path);
void write_dataset(const std::string& root_path, const DatasetManifest& manifest,
                   const std::vector<Sequence>& sequences);

// Linear resampling of a row-major time series onto target_frames rows with
// spacing len_s / target_frames starting at start_s (absolute time).
MatF resample(const MatF& samples, double t0_s, double rate_hz, double start_s, double len_s,
              int target_frames);

// Cuts a paired window at absolute [start_s, start_s + len_s]; both modalities
// resampled to target_frames rows; pose decomposed per layout and normalized.
PairedSample window(const SensorLayout& layout, const Sequence& seq, double start_s, double len_s,
                    int target_frames);

// Single-modality window extraction (same preprocessing as window()).
std::vector<MatF> make_imu_windows(const std::vector<ImuSequence>& imus, double start_s,
                                   double len_s, int target_frames);
std::vector<MatF> make_part_windows(const PoseSequence& pose, const SensorLayout& layout,
                                    double start_s, double len_s, int target_frames,
                                    bool* degenerate = nullptr);

// Splits a pose stream into per-sensor part streams (pure column gather in
// joint_indices order, (x, y) interleaved per joint).
std::vector<MatF> decompose_pose(const PoseSequence& pose, const SensorLayout& layout);

// Bounding-box diagonal of a full-skeleton window; degenerate when zero.
struct PoseScale {
  double diagonal = 1.0;
  bool degenerate = false;
};
PoseScale pose_window_scale(const MatF& full_window);

// Centers each joint trajectory on its window mean, then divides by the
// full-skeleton scale. Output is translation- and scale-canonical.
MatF normalize_pose(const MatF& part_window, const PoseScale& scale);

}  // namespace mopa
