#pragma once

#include "mopa/data.hpp"
#include "mopa/grad_check.hpp"
#include "mopa/graph.hpp"
#include "mopa/param_store.hpp"

#include "json.hpp"

#include <array>
#include <string>
#include <vector>

namespace mopa {

struct ModelConfig {
  int channels = 6;       // IMU channels C
  int model_dim = 256;    // D
  int global_dim = 256;   // D'
  int patch_len = 10;     // f
  int target_frames = 250;  // F per window
  std::vector<int> conv_channels = {64, 128};  // hidden conv widths; a final layer maps to D
  int conv_kernel = 5;
  int heads = 4;
  int transformer_blocks = 1;
  int ff_mult = 4;
  int projection_dim = 256;
  int agg_hidden = 0;  // 0 -> 2 * global_dim
  bool imu_encoder_shared = false;  // per-sensor IMU encoders by default
  bool part_encoder_shared = true;  // one body-part encoder plus part-id embedding
  int mtp_blocks = 1;
  std::array<double, 6> imu_input_scale{0.05, 0.05, 0.05, 0.1, 0.1, 0.1};
  double pose_input_scale = 5.0;

  int tokens() const { return target_frames / patch_len; }
  int aggregator_hidden() const { return agg_hidden > 0 ? agg_hidden : 2 * global_dim; }

  void validate(const SensorLayout& layout) const {
    check(channels >= 1 && model_dim >= 1 && global_dim >= 1 && projection_dim >= 1,
          "model: dimensions must be positive");
    check(patch_len >= 1 && target_frames % patch_len == 0,
          "model: target_frames must be divisible by patch_len");
    check(model_dim % heads == 0, "model: head count must divide model_dim");
    check(conv_kernel % 2 == 1, "model: conv kernel must be odd");
    check(transformer_blocks >= 1 && mtp_blocks >= 1, "model: block counts must be positive");
    if (part_encoder_shared) {
      for (int n = 1; n < layout.count(); ++n) {
        check(layout.part_width(n) == layout.part_width(0),
              "model: shared part encoder requires equal part widths");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"channels", c.channels},
                     {"model_dim", c.model_dim},
                     {"global_dim", c.global_dim},
                     {"patch_len", c.patch_len},
                     {"target_frames", c.target_frames},
                     {"conv_channels", c.conv_channels},
                     {"conv_kernel", c.conv_kernel},
                     {"heads", c.heads},
                     {"transformer_blocks", c.transformer_blocks},
                     {"ff_mult", c.ff_mult},
                     {"projection_dim", c.projection_dim},
                     {"agg_hidden", c.agg_hidden},
                     {"imu_encoder_shared", c.imu_encoder_shared},
                     {"part_encoder_shared", c.part_encoder_shared},
                     {"mtp_blocks", c.mtp_blocks},
                     {"imu_input_scale", c.imu_input_scale},
                     {"pose_input_scale", c.pose_input_scale}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("model_dim").get_to(c.model_dim);
  j.at("global_dim").get_to(c.global_dim);
  j.at("patch_len").get_to(c.patch_len);
  j.at("target_frames").get_to(c.target_frames);
  j.at("conv_channels").get_to(c.conv_channels);
  j.at("conv_kernel").get_to(c.conv_kernel);
  j.at("heads").get_to(c.heads);
  j.at("transformer_blocks").get_to(c.transformer_blocks);
  j.at("ff_mult").get_to(c.ff_mult);
  j.at("projection_dim").get_to(c.projection_dim);
  j.at("agg_hidden").get_to(c.agg_hidden);
  j.at("imu_encoder_shared").get_to(c.imu_encoder_shared);
  j.at("part_encoder_shared").get_to(c.part_encoder_shared);
  j.at("mtp_blocks").get_to(c.mtp_blocks);
  j.at("imu_input_scale").get_to(c.imu_input_scale);
  j.at("pose_input_scale").get_to(c.pose_input_scale);
}

namespace names {

inline std::string imu_encoder(const ModelConfig& cfg, int n) {
  return cfg.imu_encoder_shared ? "imu" : "imu" + std::to_string(n);
}
inline std::string part_encoder(const ModelConfig& cfg, int n) {
  return cfg.part_encoder_shared ? "part" : "part" + std::to_string(n);
}

}  // namespace names

// ---- parameter registration ----

namespace detail {

template <class S>
void register_transformer_block(ParamStore<S>& store, const std::string& prefix, int dim,
                                int ff_dim, std::uint64_t seed) {
  store.add(prefix + ".ln1.g", 1, dim, Init::kOne, seed);
  store.add(prefix + ".ln1.b", 1, dim, Init::kZero, seed);
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    store.add(prefix + ".attn." + std::string(w), dim, dim, Init::kTruncNormal, seed);
  }
  for (const char* b : {"bq", "bk", "bv", "bo"}) {
    store.add(prefix + ".attn." + std::string(b), 1, dim, Init::kZero, seed);
  }
  store.add(prefix + ".ln2.g", 1, dim, Init::kOne, seed);
  store.add(prefix + ".ln2.b", 1, dim, Init::kZero, seed);
  store.add(prefix + ".ff1.w", dim, ff_dim, Init::kTruncNormal, seed);
  store.add(prefix + ".ff1.b", 1, ff_dim, Init::kZero, seed);
  store.add(prefix + ".ff2.w", ff_dim, dim, Init::kTruncNormal, seed);
  store.add(prefix + ".ff2.b", 1, dim, Init::kZero, seed);
}

template <class S>
void register_encoder(ParamStore<S>& store, const ModelConfig& cfg, const std::string& prefix,
                      int in_channels, std::uint64_t seed) {
  int cin = in_channels;
  std::vector<int> widths = cfg.conv_channels;
  widths.push_back(cfg.model_dim);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const std::string p = prefix + ".conv" + std::to_string(l);
    store.add(p + ".w", cfg.conv_kernel * cin, widths[l], Init::kTruncNormal, seed);
    store.add(p + ".b", 1, widths[l], Init::kZero, seed);
    cin = widths[l];
  }
  store.add(prefix + ".patch.w", cfg.patch_len * cfg.model_dim, cfg.model_dim, Init::kTruncNormal,
            seed);
  store.add(prefix + ".patch.b", 1, cfg.model_dim, Init::kZero, seed);
  for (int b = 0; b < cfg.transformer_blocks; ++b) {
    register_transformer_block(store, prefix + ".blk" + std::to_string(b), cfg.model_dim,
                               cfg.ff_mult * cfg.model_dim, seed);
  }
}

}  // namespace detail

// Registers every encoder/aggregator/projection tensor. Initialization is
// derived from (seed, name), so it does not depend on registration order.
template <class S>
void register_model_params(ParamStore<S>& store, const ModelConfig& cfg,
                           const SensorLayout& layout, std::uint64_t seed) {
  cfg.validate(layout);
  const int n_sensors = layout.count();
  const int d = cfg.model_dim;

  if (cfg.imu_encoder_shared) {
    detail::register_encoder(store, cfg, "imu", cfg.channels, seed);
  } else {
    for (int n = 0; n < n_sensors; ++n) {
      detail::register_encoder(store, cfg, names::imu_encoder(cfg, n), cfg.channels, seed);
    }
  }
  if (cfg.part_encoder_shared) {
    detail::register_encoder(store, cfg, "part", layout.part_width(0), seed);
    store.add("part.id", n_sensors, d, Init::kTruncNormal, seed);
  } else {
    for (int n = 0; n < n_sensors; ++n) {
      detail::register_encoder(store, cfg, names::part_encoder(cfg, n), layout.part_width(n),
                               seed);
    }
  }
  // Positional embeddings are per modality, shared across sensors.
  store.add("imu.pos", cfg.tokens(), d, Init::kTruncNormal, seed);
  store.add("part.pos", cfg.tokens(), d, Init::kTruncNormal, seed);

  for (const char* mod : {"agg_imu", "agg_part"}) {
    const std::string p = mod;
    store.add(p + ".ln.g", 1, n_sensors * d, Init::kOne, seed);
    store.add(p + ".ln.b", 1, n_sensors * d, Init::kZero, seed);
    store.add(p + ".fc1.w", n_sensors * d, cfg.aggregator_hidden(), Init::kTruncNormal, seed);
    store.add(p + ".fc1.b", 1, cfg.aggregator_hidden(), Init::kZero, seed);
    store.add(p + ".fc2.w", cfg.aggregator_hidden(), cfg.global_dim, Init::kTruncNormal, seed);
    store.add(p + ".fc2.b", 1, cfg.global_dim, Init::kZero, seed);
  }

  // Six bias-free projection heads (modality x level); normalization removes
  // scale, so projected directions are homogeneous in the input.
  for (const char* mod : {"imu", "part"}) {
    store.add(std::string("proj.") + mod + ".token.w", d, cfg.projection_dim, Init::kTruncNormal,
              seed);
    store.add(std::string("proj.") + mod + ".local.w", d, cfg.projection_dim, Init::kTruncNormal,
              seed);
    store.add(std::string("proj.") + mod + ".global.w", cfg.global_dim, cfg.projection_dim,
              Init::kTruncNormal, seed);
  }

  // Learned substitute rows for dropped sensors.
  store.add("absent", n_sensors, d, Init::kTruncNormal, seed);
}

// ---- batch assembly ----

template <class S>
struct BatchData {
  int batch = 0;
  std::vector<Mat<S>> imu;   // per sensor, (K*F) x C, input-scaled
  std::vector<Mat<S>> part;  // per sensor, (K*F) x 2J^n, input-scaled
  std::vector<std::vector<char>> presence;  // K x N, true = sensor present
  std::vector<int> labels;
  std::vector<std::string> sequence_ids;
  std::vector<double> window_starts;
  double window_len_s = 5.0;
};

// Stacks per-sample per-sensor window matrices vertically with input scaling.
template <class S>
std::vector<Mat<S>> stack_imu_windows(const ModelConfig& cfg,
                                      const std::vector<std::vector<MatF>>& windows) {
  check(!windows.empty(), "stack_imu_windows: empty batch");
  const int k = static_cast<int>(windows.size());
  const int n_sensors = static_cast<int>(windows[0].size());
  const int f = cfg.target_frames;
  std::vector<Mat<S>> out;
  for (int n = 0; n < n_sensors; ++n) {
    Mat<S> m(k * f, cfg.channels);
    for (int i = 0; i < k; ++i) {
      check(windows[i][n].rows() == f && windows[i][n].cols() == cfg.channels,
            "stack_imu_windows: window shape mismatch");
      m.middleRows(i * f, f) = windows[i][n].template cast<S>();
    }
    for (int c = 0; c < cfg.channels; ++c) {
      m.col(c) *= static_cast<S>(cfg.imu_input_scale[c % 6]);
    }
    out.push_back(std::move(m));
  }
  return out;
}

template <class S>
std::vector<Mat<S>> stack_part_windows(const ModelConfig& cfg, const SensorLayout& layout,
                                       const std::vector<std::vector<MatF>>& windows) {
  check(!windows.empty(), "stack_part_windows: empty batch");
  const int k = static_cast<int>(windows.size());
  const int f = cfg.target_frames;
  std::vector<Mat<S>> out;
  for (int n = 0; n < layout.count(); ++n) {
    Mat<S> m(k * f, layout.part_width(n));
    for (int i = 0; i < k; ++i) {
      check(windows[i][n].rows() == f && windows[i][n].cols() == layout.part_width(n),
            "stack_part_windows: window shape mismatch");
      m.middleRows(i * f, f) =
          windows[i][n].template cast<S>() * static_cast<S>(cfg.pose_input_scale);
    }
    out.push_back(std::move(m));
  }
  return out;
}

template <class S>
BatchData<S> make_batch_data(const ModelConfig& cfg, const SensorLayout& layout,
                             const std::vector<PairedSample>& samples) {
  check(!samples.empty(), "make_batch_data: empty batch");
  BatchData<S> out;
  out.batch = static_cast<int>(samples.size());
  std::vector<std::vector<MatF>> imu_windows, part_windows;
  for (const auto& s : samples) {
    imu_windows.push_back(s.imu_windows);
    part_windows.push_back(s.part_windows);
    out.labels.push_back(s.label);
    out.sequence_ids.push_back(s.sequence_id);
    out.window_starts.push_back(s.window_start_s);
    out.presence.push_back(std::vector<char>(layout.count(), 1));
  }
  out.imu = stack_imu_windows<S>(cfg, imu_windows);
  out.part = stack_part_windows<S>(cfg, layout, part_windows);
  out.window_len_s = samples[0].window_len_s;
  return out;
}

// ---- forward builders ----

template <class S>
int transformer_block(Graph<S>& g, Binder<S>& bind, const std::string& prefix, int x, int tokens,
                      int heads) {
  const int h1 = g.layer_norm(x, bind(prefix + ".ln1.g"), bind(prefix + ".ln1.b"));
  const int attn =
      g.mhsa(h1, bind(prefix + ".attn.wq"), bind(prefix + ".attn.bq"), bind(prefix + ".attn.wk"),
             bind(prefix + ".attn.bk"), bind(prefix + ".attn.wv"), bind(prefix + ".attn.bv"),
             bind(prefix + ".attn.wo"), bind(prefix + ".attn.bo"), tokens, heads);
  const int x2 = g.add2(x, attn);
  const int h2 = g.layer_norm(x2, bind(prefix + ".ln2.g"), bind(prefix + ".ln2.b"));
  int ff = g.affine(h2, bind(prefix + ".ff1.w"), bind(prefix + ".ff1.b"));
  ff = g.gelu(ff);
  ff = g.affine(ff, bind(prefix + ".ff2.w"), bind(prefix + ".ff2.b"));
  return g.add2(x2, ff);
}

template <class S>
struct EncoderOut {
  int tokens = -1;  // (K*T) x D, pre-projection
  int local = -1;   // K x D, mean-pooled tokens
};

// Conv stack -> patchify -> positional (+ optional id row) -> transformer.
// `input` is a (K*F) x C_in node; the same builder serves both modalities.
template <class S>
EncoderOut<S> encode_stream(Graph<S>& g, Binder<S>& bind, const ModelConfig& cfg,
                            const std::string& prefix, const std::string& pos_name, int id_row,
                            int input, int batch) {
  std::vector<int> widths = cfg.conv_channels;
  widths.push_back(cfg.model_dim);
  int x = input;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const std::string p = prefix + ".conv" + std::to_string(l);
    x = g.conv1d(x, bind(p + ".w"), bind(p + ".b"), cfg.target_frames, cfg.conv_kernel);
    x = g.relu(x);
  }
  x = g.flatten_patches(x, cfg.patch_len);
  x = g.affine(x, bind(prefix + ".patch.w"), bind(prefix + ".patch.b"));
  x = g.add2(x, g.tile_rows(bind(pos_name), batch));
  if (id_row >= 0) x = g.add_row_broadcast(x, id_row);
  for (int b = 0; b < cfg.transformer_blocks; ++b) {
    x = transformer_block(g, bind, prefix + ".blk" + std::to_string(b), x, cfg.tokens(),
                          cfg.heads);
  }
  EncoderOut<S> out;
  out.tokens = x;
  out.local = g.block_mean_rows(x, cfg.tokens());
  return out;
}

// Concatenation -> LayerNorm -> MLP over per-sensor locals (layout order).
template <class S>
int aggregate_global(Graph<S>& g, Binder<S>& bind, const std::string& prefix,
                     const std::vector<int>& locals) {
  const int cat = g.hstack(locals);
  const int ln = g.layer_norm(cat, bind(prefix + ".ln.g"), bind(prefix + ".ln.b"));
  int h = g.affine(ln, bind(prefix + ".fc1.w"), bind(prefix + ".fc1.b"));
  h = g.gelu(h);
  return g.affine(h, bind(prefix + ".fc2.w"), bind(prefix + ".fc2.b"));
}

// Modality- and level-specific linear projection followed by L2 normalization.
template <class S>
int project_shared(Graph<S>& g, Binder<S>& bind, const std::string& modality,
                   const std::string& level, int x) {
  const int p = g.matmul(x, bind("proj." + modality + "." + level + ".w"));
  return g.l2_normalize_rows(p);
}

template <class S>
struct ImuForward {
  std::vector<EncoderOut<S>> enc;     // per sensor
  std::vector<int> local_sub;         // locals after absent substitution
  int global_raw = -1;                // K x D'
  int global_proj = -1;               // K x P, unit rows
  std::vector<int> local_proj, token_proj;
};

// IMU-side forward. Dropped sensors (presence false) are substituted with the
// learned absent row before aggregation.
template <class S>
ImuForward<S> build_imu_forward(Graph<S>& g, Binder<S>& bind, const ModelConfig& cfg,
                                const SensorLayout& layout, const std::vector<Mat<S>>& imu,
                                const std::vector<std::vector<char>>& presence) {
  const int n_sensors = layout.count();
  const int batch = static_cast<int>(imu[0].rows()) / cfg.target_frames;
  ImuForward<S> fwd;
  for (int n = 0; n < n_sensors; ++n) {
    const int input = g.constant(imu[n]);
    fwd.enc.push_back(encode_stream(g, bind, cfg, names::imu_encoder(cfg, n), "imu.pos", -1,
                                    input, batch));
  }
  for (int n = 0; n < n_sensors; ++n) {
    std::vector<char> dropped(batch, 0);
    bool any = false;
    for (int i = 0; i < batch; ++i) {
      dropped[i] = presence[i][n] ? 0 : 1;
      any = any || dropped[i];
    }
    int local = fwd.enc[n].local;
    if (any) local = g.replace_rows(local, dropped, g.slice_rows(bind("absent"), n, 1));
    fwd.local_sub.push_back(local);
  }
  fwd.global_raw = aggregate_global(g, bind, "agg_imu", fwd.local_sub);
  fwd.global_proj = project_shared(g, bind, "imu", "global", fwd.global_raw);
  for (int n = 0; n < n_sensors; ++n) {
    fwd.local_proj.push_back(project_shared(g, bind, "imu", "local", fwd.enc[n].local));
    fwd.token_proj.push_back(project_shared(g, bind, "imu", "token", fwd.enc[n].tokens));
  }
  return fwd;
}

template <class S>
struct PartForward {
  std::vector<EncoderOut<S>> enc;
  int global_raw = -1;
  int global_proj = -1;
  std::vector<int> local_proj, token_proj;
};

template <class S>
PartForward<S> build_part_forward(Graph<S>& g, Binder<S>& bind, const ModelConfig& cfg,
                                  const SensorLayout& layout, const std::vector<Mat<S>>& part) {
  const int n_sensors = layout.count();
  const int batch = static_cast<int>(part[0].rows()) / cfg.target_frames;
  PartForward<S> fwd;
  for (int n = 0; n < n_sensors; ++n) {
    int id_row = -1;
    if (cfg.part_encoder_shared) id_row = g.slice_rows(bind("part.id"), n, 1);
    const int input = g.constant(part[n]);
    fwd.enc.push_back(encode_stream(g, bind, cfg, names::part_encoder(cfg, n), "part.pos",
                                    id_row, input, batch));
  }
  std::vector<int> locals;
  for (int n = 0; n < n_sensors; ++n) locals.push_back(fwd.enc[n].local);
  fwd.global_raw = aggregate_global(g, bind, "agg_part", locals);
  fwd.global_proj = project_shared(g, bind, "part", "global", fwd.global_raw);
  for (int n = 0; n < n_sensors; ++n) {
    fwd.local_proj.push_back(project_shared(g, bind, "part", "local", fwd.enc[n].local));
    fwd.token_proj.push_back(project_shared(g, bind, "part", "token", fwd.enc[n].tokens));
  }
  return fwd;
}

template <class S>
struct ModelForward {
  std::vector<EncoderOut<S>> imu, part;
  std::vector<int> imu_local_sub;
  int imu_global_raw = -1, part_global_raw = -1;
  std::vector<int> imu_token_proj, part_token_proj;
  std::vector<int> imu_local_proj, part_local_proj;
  int imu_global_proj = -1, part_global_proj = -1;
};

// Full two-modality forward for a batch.
template <class S>
ModelForward<S> build_forward(Graph<S>& g, Binder<S>& bind, const ModelConfig& cfg,
                              const SensorLayout& layout, const BatchData<S>& batch) {
  cfg.validate(layout);
  ImuForward<S> imu = build_imu_forward(g, bind, cfg, layout, batch.imu, batch.presence);
  PartForward<S> part = build_part_forward(g, bind, cfg, layout, batch.part);
  ModelForward<S> fwd;
  fwd.imu = std::move(imu.enc);
  fwd.part = std::move(part.enc);
  fwd.imu_local_sub = std::move(imu.local_sub);
  fwd.imu_global_raw = imu.global_raw;
  fwd.part_global_raw = part.global_raw;
  fwd.imu_global_proj = imu.global_proj;
  fwd.part_global_proj = part.global_proj;
  fwd.imu_token_proj = std::move(imu.token_proj);
  fwd.part_token_proj = std::move(part.token_proj);
  fwd.imu_local_proj = std::move(imu.local_proj);
  fwd.part_local_proj = std::move(part.local_proj);
  return fwd;
}

// ---- frozen-model embedding (no backward) ----

struct BatchEmbeddings {
  MatF imu_global, part_global;               // K x P, unit rows
  MatF imu_global_raw;                        // K x D'
  std::vector<MatF> imu_local, part_local;    // per sensor, K x P unit rows
  std::vector<MatF> imu_tokens, part_tokens;  // per sensor, (K*T) x P unit rows
};

// Embeds a batch with frozen parameters; reentrant across threads.
inline BatchEmbeddings embed_batch(ParamStore<float>& store, const ModelConfig& cfg,
                                   const SensorLayout& layout,
                                   const std::vector<PairedSample>& samples,
                                   const std::vector<std::vector<char>>* presence = nullptr) {
  BatchData<float> batch = make_batch_data<float>(cfg, layout, samples);
  if (presence) batch.presence = *presence;
  GraphF g;
  Binder<float> bind(g, store);
  ModelForward<float> fwd = build_forward(g, bind, cfg, layout, batch);

  BatchEmbeddings out;
  out.imu_global = g.val(fwd.imu_global_proj);
  out.part_global = g.val(fwd.part_global_proj);
  out.imu_global_raw = g.val(fwd.imu_global_raw);
  for (int n = 0; n < layout.count(); ++n) {
    out.imu_local.push_back(g.val(fwd.imu_local_proj[n]));
    out.part_local.push_back(g.val(fwd.part_local_proj[n]));
    out.imu_tokens.push_back(g.val(fwd.imu_token_proj[n]));
    out.part_tokens.push_back(g.val(fwd.part_token_proj[n]));
  }
  return out;
}

struct ImuEmbeddings {
  MatF global;      // K x P, unit rows
  MatF global_raw;  // K x D'
  std::vector<MatF> local;  // per sensor, K x P
};

inline ImuEmbeddings embed_imu_windows(ParamStore<float>& store, const ModelConfig& cfg,
                                       const SensorLayout& layout,
                                       const std::vector<std::vector<MatF>>& windows,
                                       const std::vector<std::vector<char>>* presence = nullptr) {
  GraphF g;
  Binder<float> bind(g, store);
  const std::vector<MatF> imu = stack_imu_windows<float>(cfg, windows);
  std::vector<std::vector<char>> pres =
      presence ? *presence
               : std::vector<std::vector<char>>(windows.size(),
                                                std::vector<char>(layout.count(), 1));
  ImuForward<float> fwd = build_imu_forward(g, bind, cfg, layout, imu, pres);
  ImuEmbeddings out;
  out.global = g.val(fwd.global_proj);
  out.global_raw = g.val(fwd.global_raw);
  for (int n = 0; n < layout.count(); ++n) out.local.push_back(g.val(fwd.local_proj[n]));
  return out;
}

struct PartEmbeddings {
  MatF global;
  std::vector<MatF> local;
};

inline PartEmbeddings embed_pose_windows(ParamStore<float>& store, const ModelConfig& cfg,
                                         const SensorLayout& layout,
                                         const std::vector<std::vector<MatF>>& windows) {
  GraphF g;
  Binder<float> bind(g, store);
  const std::vector<MatF> part = stack_part_windows<float>(cfg, layout, windows);
  PartForward<float> fwd = build_part_forward(g, bind, cfg, layout, part);
  PartEmbeddings out;
  out.global = g.val(fwd.global_proj);
  for (int n = 0; n < layout.count(); ++n) out.local.push_back(g.val(fwd.local_proj[n]));
  return out;
}

}  // namespace mopa
