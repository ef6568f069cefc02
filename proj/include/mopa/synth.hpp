#pragma once

#include "mopa/data.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace mopa {

// The synthetic skeleton is a fixed 13-joint 2D chain.
enum Joint : int {
  kHead = 0,
  kChest = 1,
  kPelvis = 2,
  kLShoulder = 3,
  kLElbow = 4,
  kLWrist = 5,
  kRShoulder = 6,
  kRElbow = 7,
  kRWrist = 8,
  kLKnee = 9,
  kLAnkle = 10,
  kRKnee = 11,
  kRAnkle = 12,
};
inline constexpr int kJointCount = 13;

// Limb indices in layout order: sensors sit on the distal joint of each limb.
enum Limb : int { kLArm = 0, kRArm = 1, kLLeg = 2, kRLeg = 3 };
inline constexpr int kLimbCount = 4;

// Default 4-sensor layout (both wrists, both ankles). Arm parts cover
// shoulder-elbow-wrist; leg parts cover pelvis-knee-ankle, so the pelvis is
// shared between the two leg parts and every part has J^n = 3.
SensorLayout default_layout();

// One oscillating limb: angle(t) = rest + amp * sin(2*pi*(freq*t + drift*t^2/2) + phase).
struct LimbOscillator {
  double amplitude = 0.0;   // rad
  double frequency_hz = 0.0;
  double phase = 0.0;       // rad
  double drift = 0.0;       // Hz per second (slow chirp; breaks periodicity)
};

struct MotionParams {
  std::array<LimbOscillator, kLimbCount> limbs;
  LimbOscillator torso;  // small sway of the spine
  int action_class = -1;
  double height_scale = 1.0;
  double noise_std_pose_px = 0.0;
  std::array<double, 6> noise_std_imu{};  // per channel
  std::array<double, 3> gravity{0.0, -9.81, 0.0};
  std::uint64_t seed = 0;

  void validate(double imu_rate_hz) const;
};

struct SceneSubject {
  std::string subject_id;
  MotionParams params;
  double offset_x = 0.0;
  double offset_y = 0.0;
};

struct SceneSpec {
  std::vector<SceneSubject> subjects;
  double duration_s = 10.0;
  std::vector<double> lag_s;  // per-subject injected pose lag (optional)
};

struct Scene {
  std::vector<Sequence> subjects;  // one paired sequence per person
  bool duplicate_motion = false;   // two subjects share identical params (ill-posed)
};

inline constexpr double kDefaultImuRate = 50.0;
inline constexpr double kDefaultPoseFps = 20.0;

// Generates one paired sequence from shared latent limb motion. Accelerometer
// channels are the second finite difference of the sensor joint's world
// position plus projected gravity; the first gyro channel is the first finite
// difference of the distal segment angle. Deterministic in params.seed.
Sequence gen_sequence(const MotionParams& params, double duration_s,
                      double imu_rate_hz = kDefaultImuRate, double pose_fps = kDefaultPoseFps);

// Shifts the pose stream's start time by lag_s; ground truth offset is
// (pose start - imu start) = lag_s. Content is untouched.
void inject_offset(Sequence& seq, double lag_s, double window_len_s = 5.0);

Scene gen_scene(const SceneSpec& spec);

// Named class parameter family; sequences drawn from a family share frequency
// bands and amplitude ranges per limb but differ in phases and jitter.
struct ClassFamily {
  std::string name;
  std::array<double, 2> arm_freq{0.5, 1.0};
  std::array<double, 2> arm_amp{0.3, 0.5};
  std::array<double, 2> leg_freq{0.5, 1.0};
  std::array<double, 2> leg_amp{0.3, 0.5};
  double torso_amp = 0.05;
  double drift_max = 0.02;
};

// The four builtin families used by the quickstart dataset.
std::vector<ClassFamily> builtin_families();
ClassFamily family_by_name(const std::string& name);

struct GenConfig {
  std::uint64_t seed = 1;
  double duration_s = 14.0;
  double imu_rate_hz = kDefaultImuRate;
  double pose_fps = kDefaultPoseFps;
  double noise_std_pose_px = 1.0;
  std::array<double, 6> noise_std_imu{0.2, 0.2, 0.2, 0.05, 0.05, 0.05};
  std::vector<std::string> classes{"arm_swing", "march", "kick", "sway"};
  int sequences_per_class = 50;
  int subjects = 20;
  double train_fraction = 0.6;
  double val_fraction = 0.15;
  std::string split_mode = "subject";  // subject | sequence
};

// Draws concrete MotionParams for one sequence of a family.
MotionParams draw_params(const ClassFamily& family, int action_class, double height_scale,
                         const GenConfig& cfg, std::uint64_t seed);

// Generates a full dataset directory in the motion-data format.
void gen_dataset(const GenConfig& cfg, const std::string& out_dir);

// Cuts a standalone clip covering absolute time [start_s, start_s + len_s]
// from both modalities (resampled at native rates, t0 reset to 0). Used to
// materialize misaligned evaluation clips after inject_offset.
Sequence cut_clip(const Sequence& seq, double start_s, double len_s);

// Unwrapped distal-segment angle of sensor n computed from pose joints; its
// first finite difference is the pose-side angular velocity matching the
// first gyro channel.
std::vector<double> pose_limb_angle(const PoseSequence& pose, int limb);
std::vector<double> angular_velocity(const std::vector<double>& angle, double rate_hz);

}  // namespace mopa
