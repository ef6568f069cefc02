#include "mopa/data.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "mopa assumes a little-endian host");

namespace mopa {

using nlohmann::json;
namespace fs = std::filesystem;

void SensorLayout::validate(int joint_count) const {
  check(!sensors.empty(), "layout: sensor list is empty");
  std::set<std::string> ids;
  for (const auto& s : sensors) {
    check(ids.insert(s.sensor_id).second, "layout: duplicate sensor_id '" + s.sensor_id + "'");
    check(!s.joint_indices.empty(), "layout: sensor '" + s.sensor_id + "' has no joints");
    for (int j : s.joint_indices) {
      if (j < 0 || j >= joint_count) {
        fail("layout: sensor '" + s.sensor_id + "' references joint " + std::to_string(j) +
             " but the skeleton has " + std::to_string(joint_count) + " joints");
      }
    }
  }
}

void ImuSequence::validate() const {
  check(frames() >= 1 && channels() >= 1, "imu '" + sensor_id + "': empty sample matrix");
  check(sample_rate_hz > 0.0, "imu '" + sensor_id + "': sample rate must be positive");
  check(samples.allFinite(), "imu '" + sensor_id + "': non-finite samples");
}

void PoseSequence::validate() const {
  check(frames() >= 1, "pose: empty frame set");
  check(fps > 0.0, "pose: fps must be positive");
  check(joint_count >= 1 && joints.cols() == 2 * joint_count, "pose: joint column mismatch");
  check(joints.allFinite(), "pose: non-finite coordinates");
}

MatF read_f32(const std::string& path, int rows, int cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path + "'");
  MatF m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(float)) * rows * cols);
  if (in.gcount() != static_cast<std::streamsize>(sizeof(float)) * rows * cols) {
    fail("short read from '" + path + "'");
  }
  return m;
}

void write_f32(const std::string& path, const MatF& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float)) * m.rows() * m.cols());
  if (!out) fail("write failed for '" + path + "'");
}

namespace {

json array_ref_to_json(const ArrayRef& a) {
  return {{"file", a.file}, {"shape", a.shape}, {"dtype", a.dtype}};
}

ArrayRef array_ref_from_json(const json& j) {
  ArrayRef a;
  a.file = j.at("file").get<std::string>();
  a.shape = j.at("shape").get<std::vector<int>>();
  a.dtype = j.at("dtype").get<std::string>();
  return a;
}

std::size_t ref_elements(const ArrayRef& a) {
  std::size_t n = 1;
  for (int d : a.shape) n *= static_cast<std::size_t>(d);
  return n;
}

void validate_blob(const std::string& root, const std::string& seq_id, const ArrayRef& a) {
  check(a.dtype == "float32", "sequence '" + seq_id + "': unsupported dtype '" + a.dtype + "'");
  const fs::path p = fs::path(root) / a.file;
  std::error_code ec;
  const auto bytes = fs::file_size(p, ec);
  if (ec) fail("sequence '" + seq_id + "': missing file '" + a.file + "'");
  const std::size_t expected = ref_elements(a) * sizeof(float);
  if (bytes != expected) {
    fail("sequence '" + seq_id + "': file '" + a.file + "' has " + std::to_string(bytes) +
         " bytes, expected " + std::to_string(expected));
  }
}

}  // namespace

Sequence Dataset::load_sequence(std::size_t index) const {
  check(index < manifest_.sequences.size(), "sequence index out of range");
  const SequenceEntry& e = manifest_.sequences[index];
  Sequence seq;
  seq.id = e.id;
  seq.subject_id = e.subject_id;
  seq.label = e.label;

  const fs::path root(root_);
  check(e.pose.shape.size() == 3 && e.pose.shape[2] == 2,
        "sequence '" + e.id + "': pose shape must be [F, J, 2]");
  seq.pose.joints = read_f32((root / e.pose.file).string(), e.pose.shape[0], 2 * e.pose.shape[1]);
  seq.pose.joint_count = e.pose.shape[1];
  seq.pose.fps = e.pose_fps;
  seq.pose.t0_s = e.pose_t0_s;
  seq.pose.validate();

  for (std::size_t n = 0; n < e.imus.size(); ++n) {
    const ArrayRef& a = e.imus[n];
    check(a.shape.size() == 2, "sequence '" + e.id + "': imu shape must be [F, C]");
    ImuSequence imu;
    imu.sensor_id = manifest_.layout.sensors[n].sensor_id;
    imu.samples = read_f32((root / a.file).string(), a.shape[0], a.shape[1]);
    imu.sample_rate_hz = e.imu_rate_hz;
    imu.t0_s = e.imu_t0_s;
    imu.validate();
    seq.imus.push_back(std::move(imu));
  }
  return seq;
}

std::vector<std::size_t> Dataset::split_indices(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest_.sequences.size(); ++i) {
    if (manifest_.sequences[i].split == split) out.push_back(i);
  }
  return out;
}

Dataset load_dataset(const std::string& root_path) {
  const fs::path manifest_path = fs::path(root_path) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) fail("cannot open '" + manifest_path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("manifest parse error: " + std::string(e.what()));
  }

  DatasetManifest m;
  m.version = j.at("version").get<int>();
  check(m.version == 1, "manifest: unknown version " + std::to_string(m.version));
  m.layout = j.at("layout").get<SensorLayout>();
  m.joint_count = j.at("joint_count").get<int>();
  m.layout.validate(m.joint_count);

  for (const auto& js : j.at("sequences")) {
    SequenceEntry e;
    e.id = js.at("id").get<std::string>();
    e.subject_id = js.at("subject_id").get<std::string>();
    e.label = js.at("label").get<int>();
    e.split = js.at("split").get<std::string>();
    e.pose = array_ref_from_json(js.at("pose"));
    e.pose_fps = js.at("pose_fps").get<double>();
    e.pose_t0_s = js.at("pose_t0_s").get<double>();
    e.imu_rate_hz = js.at("imu_rate_hz").get<double>();
    e.imu_t0_s = js.at("imu_t0_s").get<double>();
    for (const auto& ji : js.at("imus")) e.imus.push_back(array_ref_from_json(ji));

    check(e.imus.size() == m.layout.sensors.size(),
          "sequence '" + e.id + "': imu count does not match layout");
    check(e.pose.shape.size() == 3 && e.pose.shape[2] == 2,
          "sequence '" + e.id + "': pose shape must be [F, J, 2]");
    check(e.pose.shape[1] == m.joint_count,
          "sequence '" + e.id + "': pose joint count does not match manifest");
    validate_blob(root_path, e.id, e.pose);
    for (const auto& a : e.imus) validate_blob(root_path, e.id, a);
    m.sequences.push_back(std::move(e));
  }
  return Dataset(std::move(m), root_path);
}

void write_dataset(const std::string& root_path, const DatasetManifest& manifest,
                   const std::vector<Sequence>& sequences) {
  check(manifest.sequences.size() == sequences.size(),
        "write_dataset: manifest/sequence count mismatch");
  const fs::path root(root_path);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) fail("cannot create dataset directory '" + root_path + "'");

  json j;
  j["version"] = manifest.version;
  j["layout"] = manifest.layout;
  j["joint_count"] = manifest.joint_count;
  j["sequences"] = json::array();

  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const SequenceEntry& e = manifest.sequences[i];
    const Sequence& s = sequences[i];
    write_f32((root / e.pose.file).string(), s.pose.joints);
    for (std::size_t n = 0; n < s.imus.size(); ++n) {
      write_f32((root / e.imus[n].file).string(), s.imus[n].samples);
    }
    json js;
    js["id"] = e.id;
    js["subject_id"] = e.subject_id;
    js["label"] = e.label;
    js["split"] = e.split;
    js["pose"] = array_ref_to_json(e.pose);
    js["pose_fps"] = e.pose_fps;
    js["pose_t0_s"] = e.pose_t0_s;
    js["imu_rate_hz"] = e.imu_rate_hz;
    js["imu_t0_s"] = e.imu_t0_s;
    js["imus"] = json::array();
    for (const auto& a : e.imus) js["imus"].push_back(array_ref_to_json(a));
    j["sequences"].push_back(std::move(js));
  }

  std::ofstream out(root / "manifest.json");
  if (!out) fail("cannot write manifest in '" + root_path + "'");
  out << j.dump(2) << "\n";
}

MatF resample(const MatF& samples, double t0_s, double rate_hz, double start_s, double len_s,
              int target_frames) {
  check(target_frames >= 1, "resample: target_frames must be positive");
  const int raw = static_cast<int>(samples.rows());
  MatF out(target_frames, samples.cols());
  // Sample positions expressed in source-sample units; when the window is
  // aligned with the native grid the step is an exact integer and the copy is
  // bit-exact.
  const double base = (start_s - t0_s) * rate_hz;
  const double step = len_s * rate_hz / target_frames;
  for (int i = 0; i < target_frames; ++i) {
    double u = base + step * i;
    if (u < 0.0) u = 0.0;
    int k = static_cast<int>(std::floor(u));
    if (k >= raw - 1) {
      k = raw - 1;
      u = static_cast<double>(k);
    }
    const double a = u - k;
    if (a <= 1e-12) {
      out.row(i) = samples.row(k);
    } else {
      out.row(i) = samples.row(k) * static_cast<float>(1.0 - a) +
                   samples.row(k + 1) * static_cast<float>(a);
    }
  }
  return out;
}

std::vector<MatF> decompose_pose(const PoseSequence& pose, const SensorLayout& layout) {
  layout.validate(pose.joint_count);
  std::vector<MatF> parts;
  parts.reserve(layout.sensors.size());
  for (const auto& s : layout.sensors) {
    MatF part(pose.frames(), 2 * s.joint_indices.size());
    for (std::size_t k = 0; k < s.joint_indices.size(); ++k) {
      const int j = s.joint_indices[k];
      part.col(2 * k) = pose.joints.col(2 * j);
      part.col(2 * k + 1) = pose.joints.col(2 * j + 1);
    }
    parts.push_back(std::move(part));
  }
  return parts;
}

PoseScale pose_window_scale(const MatF& full_window) {
  PoseScale s;
  float min_x = std::numeric_limits<float>::max(), max_x = std::numeric_limits<float>::lowest();
  float min_y = min_x, max_y = max_x;
  for (int c = 0; c < full_window.cols(); c += 2) {
    min_x = std::min(min_x, full_window.col(c).minCoeff());
    max_x = std::max(max_x, full_window.col(c).maxCoeff());
    min_y = std::min(min_y, full_window.col(c + 1).minCoeff());
    max_y = std::max(max_y, full_window.col(c + 1).maxCoeff());
  }
  const double dx = static_cast<double>(max_x) - min_x;
  const double dy = static_cast<double>(max_y) - min_y;
  const double diag = std::sqrt(dx * dx + dy * dy);
  if (diag <= 0.0) {
    s.diagonal = 1.0;
    s.degenerate = true;
  } else {
    s.diagonal = diag;
  }
  return s;
}

MatF normalize_pose(const MatF& part_window, const PoseScale& scale) {
  MatF out = part_window;
  const float inv = static_cast<float>(1.0 / scale.diagonal);
  for (int c = 0; c < out.cols(); ++c) {
    const float mean = out.col(c).mean();
    out.col(c) = (out.col(c).array() - mean) * inv;
  }
  return out;
}

std::vector<MatF> make_imu_windows(const std::vector<ImuSequence>& imus, double start_s,
                                   double len_s, int target_frames) {
  check(len_s > 0.0, "window: length must be positive");
  const double end_s = start_s + len_s;
  const double eps = 1e-9;
  std::vector<MatF> out;
  for (const auto& imu : imus) {
    if (start_s < imu.t0_s - eps || end_s > imu.end_s() + eps) {
      fail("window [" + std::to_string(start_s) + ", " + std::to_string(end_s) +
           "] outside imu stream span ('" + imu.sensor_id + "')");
    }
    out.push_back(
        resample(imu.samples, imu.t0_s, imu.sample_rate_hz, start_s, len_s, target_frames));
  }
  return out;
}

std::vector<MatF> make_part_windows(const PoseSequence& pose, const SensorLayout& layout,
                                    double start_s, double len_s, int target_frames,
                                    bool* degenerate) {
  check(len_s > 0.0, "window: length must be positive");
  const double end_s = start_s + len_s;
  const double eps = 1e-9;
  if (start_s < pose.t0_s - eps || end_s > pose.end_s() + eps) {
    fail("window [" + std::to_string(start_s) + ", " + std::to_string(end_s) +
         "] outside pose stream span");
  }
  const MatF full = resample(pose.joints, pose.t0_s, pose.fps, start_s, len_s, target_frames);
  const PoseScale scale = pose_window_scale(full);
  if (degenerate) *degenerate = scale.degenerate;

  PoseSequence resampled;
  resampled.joints = full;
  resampled.joint_count = pose.joint_count;
  resampled.fps = target_frames / len_s;
  resampled.t0_s = start_s;
  std::vector<MatF> out;
  for (MatF& part : decompose_pose(resampled, layout)) {
    out.push_back(normalize_pose(part, scale));
  }
  return out;
}

PairedSample window(const SensorLayout& layout, const Sequence& seq, double start_s, double len_s,
                    int target_frames) {
  PairedSample out;
  out.label = seq.label;
  out.subject_id = seq.subject_id;
  out.sequence_id = seq.id;
  out.window_start_s = start_s;
  out.window_len_s = len_s;
  out.imu_windows = make_imu_windows(seq.imus, start_s, len_s, target_frames);
  out.part_windows =
      make_part_windows(seq.pose, layout, start_s, len_s, target_frames, &out.degenerate);
  return out;
}

}  // namespace mopa
