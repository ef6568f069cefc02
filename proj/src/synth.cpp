#include "mopa/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mopa {

namespace {

constexpr double kTwoPi = 6.283185307179586477;
constexpr double kPxToM = 0.01;  // 1 px = 1 cm

// Segment lengths in px at height_scale 1.
constexpr double kSpine = 50.0, kNeck = 25.0, kShoulderOff = 18.0, kUpperArm = 35.0,
                 kForearm = 30.0, kHipOff = 12.0, kThigh = 45.0, kShin = 40.0;
constexpr double kBaseY = 150.0;

double osc_phase(const LimbOscillator& o, double t) {
  return kTwoPi * (o.frequency_hz * t + 0.5 * o.drift * t * t) + o.phase;
}

struct Pose2d {
  std::array<double, kJointCount> x{};
  std::array<double, kJointCount> y{};
};

Pose2d skeleton_at(const MotionParams& p, double off_x, double off_y, double t) {
  Pose2d out;
  const double hs = p.height_scale;
  const double sway = p.torso.amplitude * std::sin(osc_phase(p.torso, t));

  const double cx = off_x + sway, cy = off_y + kBaseY * hs;
  out.x[kChest] = cx;
  out.y[kChest] = cy;
  out.x[kPelvis] = cx;
  out.y[kPelvis] = cy - kSpine * hs;
  out.x[kHead] = cx;
  out.y[kHead] = cy + kNeck * hs;

  const struct {
    int limb, proximal, distal;
    double side;
    bool arm;
  } limbs[] = {
      {kLArm, kLElbow, kLWrist, -1.0, true},
      {kRArm, kRElbow, kRWrist, +1.0, true},
      {kLLeg, kLKnee, kLAnkle, -1.0, false},
      {kRLeg, kRKnee, kRAnkle, +1.0, false},
  };

  for (const auto& lb : limbs) {
    const LimbOscillator& o = p.limbs[lb.limb];
    const double phi = osc_phase(o, t);
    const double s = lb.side;
    double rx, ry;  // root of the limb chain
    double len1, len2, theta1, theta2;
    if (lb.arm) {
      const int shoulder = (lb.limb == kLArm) ? kLShoulder : kRShoulder;
      rx = cx + s * kShoulderOff * hs;
      ry = cy;
      out.x[shoulder] = rx;
      out.y[shoulder] = ry;
      theta1 = s * 0.12 + o.amplitude * std::sin(phi);
      theta2 = theta1 + s * 0.35 + 0.6 * o.amplitude * std::sin(phi + 0.9);
      len1 = kUpperArm * hs;
      len2 = kForearm * hs;
    } else {
      rx = out.x[kPelvis] + s * kHipOff * hs;
      ry = out.y[kPelvis];
      theta1 = s * 0.06 + o.amplitude * std::sin(phi);
      theta2 = theta1 + s * 0.10 + 0.5 * o.amplitude * std::sin(phi + 0.7);
      len1 = kThigh * hs;
      len2 = kShin * hs;
    }
    const double px = rx + len1 * std::sin(theta1);
    const double py = ry - len1 * std::cos(theta1);
    out.x[lb.proximal] = px;
    out.y[lb.proximal] = py;
    out.x[lb.distal] = px + len2 * std::sin(theta2);
    out.y[lb.distal] = py - len2 * std::cos(theta2);
  }
  return out;
}

// Distal segment (proximal -> sensor joint) per limb, for gyro channels.
constexpr int kSegmentA[kLimbCount] = {kLElbow, kRElbow, kLKnee, kRKnee};
constexpr int kSegmentB[kLimbCount] = {kLWrist, kRWrist, kLAnkle, kRAnkle};

std::vector<double> unwrap(std::vector<double> a) {
  for (std::size_t i = 1; i < a.size(); ++i) {
    double d = a[i] - a[i - 1];
    while (d > 3.141592653589793) {
      a[i] -= kTwoPi;
      d = a[i] - a[i - 1];
    }
    while (d < -3.141592653589793) {
      a[i] += kTwoPi;
      d = a[i] - a[i - 1];
    }
  }
  return a;
}

}  // namespace

SensorLayout default_layout() {
  SensorLayout layout;
  layout.sensors = {
      {"l_wrist", "left_wrist", {kLShoulder, kLElbow, kLWrist}},
      {"r_wrist", "right_wrist", {kRShoulder, kRElbow, kRWrist}},
      {"l_ankle", "left_ankle", {kPelvis, kLKnee, kLAnkle}},
      {"r_ankle", "right_ankle", {kPelvis, kRKnee, kRAnkle}},
  };
  return layout;
}

void MotionParams::validate(double imu_rate_hz) const {
  for (const auto& o : limbs) {
    check(o.frequency_hz > 0.0 && o.frequency_hz < imu_rate_hz / 4.0,
          "limb frequency must lie in (0, rate/4)");
    check(o.amplitude >= 0.0, "limb amplitude must be non-negative");
  }
  check(height_scale > 0.0, "height_scale must be positive");
}

Sequence gen_sequence(const MotionParams& params, double duration_s, double imu_rate_hz,
                      double pose_fps) {
  check(duration_s >= 1.0, "gen_sequence: duration must be at least 1 s");
  params.validate(imu_rate_hz);
  Rng rng(params.seed);

  Sequence seq;
  seq.label = params.action_class;

  // Pose stream: analytic skeleton sampled at pose_fps plus pixel noise.
  const int fv = static_cast<int>(std::lround(duration_s * pose_fps)) + 1;
  seq.pose.joints.resize(fv, 2 * kJointCount);
  seq.pose.joint_count = kJointCount;
  seq.pose.fps = pose_fps;
  seq.pose.t0_s = 0.0;
  for (int k = 0; k < fv; ++k) {
    const Pose2d p = skeleton_at(params, 0.0, 0.0, k / pose_fps);
    for (int j = 0; j < kJointCount; ++j) {
      double nx = 0.0, ny = 0.0;
      if (params.noise_std_pose_px > 0.0) {
        nx = params.noise_std_pose_px * rng.normal();
        ny = params.noise_std_pose_px * rng.normal();
      }
      seq.pose.joints(k, 2 * j) = static_cast<float>(p.x[j] + nx);
      seq.pose.joints(k, 2 * j + 1) = static_cast<float>(p.y[j] + ny);
    }
  }

  // IMU streams: second finite difference of the sensor joint position plus
  // projected gravity; gyro from the distal segment angle.
  const int f = static_cast<int>(std::lround(duration_s * imu_rate_hz)) + 1;
  const double dt = 1.0 / imu_rate_hz;
  const SensorLayout layout = default_layout();
  for (int limb = 0; limb < kLimbCount; ++limb) {
    std::vector<double> px(f), py(f), angle(f);
    for (int k = 0; k < f; ++k) {
      const Pose2d p = skeleton_at(params, 0.0, 0.0, k * dt);
      const int a = kSegmentA[limb], b = kSegmentB[limb];
      px[k] = p.x[b];
      py[k] = p.y[b];
      angle[k] = std::atan2(p.y[b] - p.y[a], p.x[b] - p.x[a]);
    }
    angle = unwrap(std::move(angle));

    ImuSequence imu;
    imu.sensor_id = layout.sensors[limb].sensor_id;
    imu.sample_rate_hz = imu_rate_hz;
    imu.t0_s = 0.0;
    imu.samples.resize(f, 6);
    for (int k = 0; k < f; ++k) {
      const int kc = std::clamp(k, 1, f - 2);  // replicate ends
      const double ax = (px[kc + 1] - 2.0 * px[kc] + px[kc - 1]) / (dt * dt) * kPxToM;
      const double ay = (py[kc + 1] - 2.0 * py[kc] + py[kc - 1]) / (dt * dt) * kPxToM;
      const double w = (angle[kc + 1] - angle[kc - 1]) / (2.0 * dt);
      const double ch[6] = {ax + params.gravity[0], ay + params.gravity[1], params.gravity[2],
                            w, 0.0, 0.0};
      for (int c = 0; c < 6; ++c) {
        double noise = params.noise_std_imu[c] > 0.0 ? params.noise_std_imu[c] * rng.normal() : 0.0;
        imu.samples(k, c) = static_cast<float>(ch[c] + noise);
      }
    }
    seq.imus.push_back(std::move(imu));
  }
  return seq;
}

void inject_offset(Sequence& seq, double lag_s, double window_len_s) {
  const double span = seq.pose.end_s() - seq.pose.t0_s;
  if (std::abs(lag_s) >= span - window_len_s) {
    fail("inject_offset: |lag| " + std::to_string(std::abs(lag_s)) +
         " too large for span " + std::to_string(span));
  }
  seq.pose.t0_s += lag_s;
}

Scene gen_scene(const SceneSpec& spec) {
  check(spec.subjects.size() >= 2, "gen_scene: localization scenes need at least 2 subjects");
  Scene scene;
  for (std::size_t i = 0; i < spec.subjects.size(); ++i) {
    const SceneSubject& sub = spec.subjects[i];
    Sequence seq = gen_sequence(sub.params, spec.duration_s);
    seq.id = "scene_subject_" + std::to_string(i);
    seq.subject_id = sub.subject_id;
    // Spatial placement only: shifts every joint, which normalization removes.
    for (int j = 0; j < kJointCount; ++j) {
      seq.pose.joints.col(2 * j).array() += static_cast<float>(sub.offset_x);
      seq.pose.joints.col(2 * j + 1).array() += static_cast<float>(sub.offset_y);
    }
    if (!spec.lag_s.empty()) inject_offset(seq, spec.lag_s.at(i));
    scene.subjects.push_back(std::move(seq));
  }

  // Identical motion parameters make localization ill-posed.
  for (std::size_t a = 0; a < spec.subjects.size(); ++a) {
    for (std::size_t b = a + 1; b < spec.subjects.size(); ++b) {
      const MotionParams &pa = spec.subjects[a].params, &pb = spec.subjects[b].params;
      bool same = pa.seed == pb.seed && pa.height_scale == pb.height_scale;
      for (int l = 0; l < kLimbCount && same; ++l) {
        same = pa.limbs[l].amplitude == pb.limbs[l].amplitude &&
               pa.limbs[l].frequency_hz == pb.limbs[l].frequency_hz &&
               pa.limbs[l].phase == pb.limbs[l].phase && pa.limbs[l].drift == pb.limbs[l].drift;
      }
      if (same) scene.duplicate_motion = true;
    }
  }
  return scene;
}

std::vector<ClassFamily> builtin_families() {
  std::vector<ClassFamily> fams(4);
  fams[0] = {"arm_swing", {1.6, 2.2}, {0.5, 0.8}, {0.4, 0.6}, {0.10, 0.20}, 3.0, 0.02};
  fams[1] = {"march", {0.8, 1.2}, {0.3, 0.5}, {0.8, 1.2}, {0.50, 0.80}, 5.0, 0.02};
  fams[2] = {"kick", {0.5, 0.7}, {0.15, 0.3}, {1.4, 1.9}, {0.60, 0.90}, 4.0, 0.03};
  fams[3] = {"sway", {0.3, 0.5}, {0.4, 0.7}, {0.3, 0.5}, {0.35, 0.60}, 8.0, 0.01};
  return fams;
}

ClassFamily family_by_name(const std::string& name) {
  for (const auto& f : builtin_families()) {
    if (f.name == name) return f;
  }
  fail("unknown class family '" + name + "'");
}

MotionParams draw_params(const ClassFamily& family, int action_class, double height_scale,
                         const GenConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  MotionParams p;
  p.action_class = action_class;
  p.height_scale = height_scale;
  p.noise_std_pose_px = cfg.noise_std_pose_px;
  p.noise_std_imu = cfg.noise_std_imu;
  p.seed = derive_seed(seed, 0xfeed);
  for (int l = 0; l < kLimbCount; ++l) {
    const bool arm = l < 2;
    const auto& fr = arm ? family.arm_freq : family.leg_freq;
    const auto& ar = arm ? family.arm_amp : family.leg_amp;
    p.limbs[l].frequency_hz = rng.uniform(fr[0], fr[1]);
    p.limbs[l].amplitude = rng.uniform(ar[0], ar[1]);
    p.limbs[l].phase = rng.uniform(0.0, kTwoPi);
    p.limbs[l].drift = rng.uniform(-family.drift_max, family.drift_max);
  }
  p.torso.frequency_hz = rng.uniform(0.2, 0.5);
  p.torso.amplitude = family.torso_amp * rng.uniform(0.7, 1.3);
  p.torso.phase = rng.uniform(0.0, kTwoPi);
  return p;
}

void gen_dataset(const GenConfig& cfg, const std::string& out_dir) {
  check(!cfg.classes.empty() && cfg.sequences_per_class > 0, "gen: empty class configuration");
  check(cfg.subjects >= 3, "gen: need at least 3 subjects for subject-wise splits");
  std::vector<ClassFamily> fams;
  for (const auto& name : cfg.classes) fams.push_back(family_by_name(name));

  // Subject-wise partition: each subject belongs to exactly one split.
  const int n_subj = cfg.subjects;
  int n_train_subj = std::max(1, static_cast<int>(std::lround(n_subj * cfg.train_fraction)));
  int n_val_subj = std::max(1, static_cast<int>(std::lround(n_subj * cfg.val_fraction)));
  if (n_train_subj + n_val_subj >= n_subj) n_train_subj = n_subj - n_val_subj - 1;
  check(n_train_subj >= 1, "gen: split fractions leave no train subjects");

  Rng master(cfg.seed);
  std::vector<double> heights(n_subj);
  for (auto& h : heights) h = master.uniform(0.9, 1.1);

  const auto subject_split = [&](int s) {
    if (s < n_train_subj) return std::string("train");
    if (s < n_train_subj + n_val_subj) return std::string("val");
    return std::string("test");
  };
  std::vector<int> split_subjects[3];
  for (int s = 0; s < n_subj; ++s) {
    const std::string sp = subject_split(s);
    split_subjects[sp == "train" ? 0 : sp == "val" ? 1 : 2].push_back(s);
  }

  DatasetManifest manifest;
  manifest.layout = default_layout();
  manifest.joint_count = kJointCount;
  std::vector<Sequence> sequences;

  const int per_class = cfg.sequences_per_class;
  const int n_train = static_cast<int>(std::lround(per_class * cfg.train_fraction));
  const int n_val = static_cast<int>(std::lround(per_class * cfg.val_fraction));
  int index = 0;
  for (std::size_t c = 0; c < fams.size(); ++c) {
    for (int k = 0; k < per_class; ++k, ++index) {
      const std::string split = (k < n_train) ? "train" : (k < n_train + n_val) ? "val" : "test";
      const int bucket = split == "train" ? 0 : split == "val" ? 1 : 2;
      const auto& pool = split_subjects[bucket];
      int subj;
      if (cfg.split_mode == "subject") {
        subj = pool[(static_cast<std::size_t>(c) * per_class + k) % pool.size()];
      } else {
        subj = static_cast<int>(master.uniform_int(n_subj));
      }

      const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(index));
      MotionParams params =
          draw_params(fams[c], static_cast<int>(c), heights[subj], cfg, seed);
      Sequence seq = gen_sequence(params, cfg.duration_s, cfg.imu_rate_hz, cfg.pose_fps);

      char id[32];
      std::snprintf(id, sizeof(id), "seq_%04d", index);
      seq.id = id;
      char sid[16];
      std::snprintf(sid, sizeof(sid), "s%02d", subj);
      seq.subject_id = sid;

      SequenceEntry e;
      e.id = seq.id;
      e.subject_id = seq.subject_id;
      e.label = static_cast<int>(c);
      e.split = split;
      e.pose.file = seq.id + "_pose.f32";
      e.pose.shape = {seq.pose.frames(), kJointCount, 2};
      e.pose_fps = cfg.pose_fps;
      e.pose_t0_s = 0.0;
      e.imu_rate_hz = cfg.imu_rate_hz;
      e.imu_t0_s = 0.0;
      for (const auto& imu : seq.imus) {
        ArrayRef a;
        a.file = seq.id + "_imu_" + imu.sensor_id + ".f32";
        a.shape = {imu.frames(), imu.channels()};
        e.imus.push_back(std::move(a));
      }
      manifest.sequences.push_back(std::move(e));
      sequences.push_back(std::move(seq));
    }
  }
  write_dataset(out_dir, manifest, sequences);
}

Sequence cut_clip(const Sequence& seq, double start_s, double len_s) {
  Sequence clip;
  clip.id = seq.id + "_clip";
  clip.subject_id = seq.subject_id;
  clip.label = seq.label;

  const auto cut = [&](const MatF& samples, double t0, double rate) {
    const int frames = static_cast<int>(std::lround(len_s * rate)) + 1;
    // Grid step is exactly 1/rate so the clip spans [start_s, start_s+len_s].
    return resample(samples, t0, rate, start_s, (frames / rate), frames);
  };

  const double pose_end = seq.pose.end_s();
  check(start_s >= seq.pose.t0_s - 1e-9 && start_s + len_s <= pose_end + 1e-9,
        "cut_clip: span outside pose stream");
  clip.pose.joints = cut(seq.pose.joints, seq.pose.t0_s, seq.pose.fps);
  clip.pose.joint_count = seq.pose.joint_count;
  clip.pose.fps = seq.pose.fps;
  clip.pose.t0_s = 0.0;

  for (const auto& imu : seq.imus) {
    check(start_s >= imu.t0_s - 1e-9 && start_s + len_s <= imu.end_s() + 1e-9,
          "cut_clip: span outside imu stream");
    ImuSequence out;
    out.sensor_id = imu.sensor_id;
    out.sample_rate_hz = imu.sample_rate_hz;
    out.t0_s = 0.0;
    out.samples = cut(imu.samples, imu.t0_s, imu.sample_rate_hz);
    clip.imus.push_back(std::move(out));
  }
  return clip;
}

std::vector<double> pose_limb_angle(const PoseSequence& pose, int limb) {
  check(limb >= 0 && limb < kLimbCount, "pose_limb_angle: bad limb index");
  const int a = kSegmentA[limb], b = kSegmentB[limb];
  std::vector<double> angle(pose.frames());
  for (int k = 0; k < pose.frames(); ++k) {
    angle[k] = std::atan2(pose.joints(k, 2 * b + 1) - pose.joints(k, 2 * a + 1),
                          pose.joints(k, 2 * b) - pose.joints(k, 2 * a));
  }
  return unwrap(std::move(angle));
}

std::vector<double> angular_velocity(const std::vector<double>& angle, double rate_hz) {
  const int n = static_cast<int>(angle.size());
  std::vector<double> w(n, 0.0);
  if (n < 3) return w;
  for (int k = 0; k < n; ++k) {
    const int kc = std::clamp(k, 1, n - 2);
    w[k] = (angle[kc + 1] - angle[kc - 1]) * rate_hz / 2.0;
  }
  return w;
}

}  // namespace mopa
