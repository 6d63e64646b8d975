// Desk-scale occluded-keypoint task: scene generation, tiny learnable
// encoders, the pose model with its fusion variants, training, PCK
// evaluation, the ablation runner, and alignment-map emission.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <random>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pgvl/losses.hpp"
#include "pgvl/variants.hpp"

namespace pgvl {

// ---------------------------------------------------------------------------
// scenes

struct SceneConfig {
  int grid_h = 16, grid_w = 16;
  int joints = 8;
  int cin = 8;
  double p_occ = 0.5;
  int occ_min = 4, occ_max = 8;
  double sigma_render = 1.2;
  double rot_jitter = 0.5;          // radians, uniform +-
  double scale_min = 0.85, scale_max = 1.2;
  double trans_jitter = 2.0;        // cells, uniform +-
  uint64_t seed = 1234;
  int num_scenes = 2000;
  int eval_scenes = 500;
};

inline const std::vector<std::string>& joint_name_table() {
  static const std::vector<std::string> names = {
      "head",     "neck",      "left wrist", "right wrist",
      "left hip", "right hip", "left ankle", "right ankle"};
  return names;
}

// (row, col) offsets of the skeleton template around its center
inline const std::vector<std::pair<double, double>>& joint_offset_table() {
  static const std::vector<std::pair<double, double>> offsets = {
      {-5.0, 0.0}, {-3.2, 0.0}, {-1.0, -3.5}, {-1.0, 3.5},
      {0.5, -1.2}, {0.5, 1.2},  {4.5, -1.5},  {4.5, 1.5}};
  return offsets;
}

inline std::vector<std::string> joint_names(const SceneConfig& cfg) {
  if (cfg.joints < 1 || cfg.joints > (int)joint_name_table().size())
    throw ConfigError("scene: joints must be in 1.." +
                      std::to_string(joint_name_table().size()));
  return {joint_name_table().begin(), joint_name_table().begin() + cfg.joints};
}

// Fixed per-joint channel signatures; part of the task definition, not of
// any particular dataset seed.
inline std::vector<std::vector<float>> joint_signatures(int joints, int cin) {
  std::mt19937_64 rng(0xC0FFEEull);
  std::uniform_real_distribution<double> ud(0.2, 1.0);
  std::vector<std::vector<float>> sig((size_t)joint_name_table().size());
  for (auto& s : sig) {
    s.resize((size_t)cin);
    for (auto& v : s) v = (float)ud(rng);
  }
  sig.resize((size_t)joints);
  return sig;
}

template <typename T>
struct Scene {
  std::vector<T> input;  // cin * H * W, row-major per channel
  JointBatch<T> joints;  // visibility == visible in the rendered input
};

inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic function of (cfg.seed, index). Occlusion zeroes an input
// rectangle and marks covered joints input-invisible; ground truth is kept.
template <typename T>
Scene<T> generate_scene(const SceneConfig& cfg, int64_t index,
                        double sigma_target) {
  std::mt19937_64 rng(mix_seed(cfg.seed, (uint64_t)index));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int h = cfg.grid_h, w = cfg.grid_w, k = cfg.joints;
  const auto& offsets = joint_offset_table();

  // skeleton pose: rotation/scale/translation jitter, resampled until all
  // joints land inside the grid
  std::vector<std::pair<double, double>> pos((size_t)k);
  for (int attempt = 0;; ++attempt) {
    double rot = (2 * uni(rng) - 1) * cfg.rot_jitter;
    double scl = cfg.scale_min + uni(rng) * (cfg.scale_max - cfg.scale_min);
    double cr = (h - 1) / 2.0 + (2 * uni(rng) - 1) * cfg.trans_jitter;
    double cc = (w - 1) / 2.0 + (2 * uni(rng) - 1) * cfg.trans_jitter;
    bool ok = true;
    for (int j = 0; j < k; ++j) {
      auto [dr, dc] = offsets[(size_t)j];
      double r = cr + scl * (dr * std::cos(rot) - dc * std::sin(rot));
      double c = cc + scl * (dr * std::sin(rot) + dc * std::cos(rot));
      pos[(size_t)j] = {r, c};
      ok = ok && r >= 0.0 && r <= h - 1 && c >= 0.0 && c <= w - 1;
    }
    if (ok || attempt > 200) break;
  }

  // occlusion rectangle
  bool occluded = uni(rng) < cfg.p_occ;
  int or0 = 0, oc0 = 0, orh = 0, ocw = 0;
  if (occluded) {
    orh = cfg.occ_min + (int)(rng() % (uint64_t)(cfg.occ_max - cfg.occ_min + 1));
    ocw = cfg.occ_min + (int)(rng() % (uint64_t)(cfg.occ_max - cfg.occ_min + 1));
    orh = std::min(orh, h);
    ocw = std::min(ocw, w);
    or0 = (int)(rng() % (uint64_t)(h - orh + 1));
    oc0 = (int)(rng() % (uint64_t)(w - ocw + 1));
  }

  Scene<T> scene;
  scene.input.assign((size_t)(cfg.cin * h * w), T(0));
  auto sig = joint_signatures(k, cfg.cin);
  const double inv2s = 1.0 / (2.0 * cfg.sigma_render * cfg.sigma_render);
  for (int j = 0; j < k; ++j) {
    auto [jr, jc] = pos[(size_t)j];
    int r0 = std::max(0, (int)std::floor(jr - 3 * cfg.sigma_render));
    int r1 = std::min(h - 1, (int)std::ceil(jr + 3 * cfg.sigma_render));
    int c0 = std::max(0, (int)std::floor(jc - 3 * cfg.sigma_render));
    int c1 = std::min(w - 1, (int)std::ceil(jc + 3 * cfg.sigma_render));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        double d2 = (r - jr) * (r - jr) + (c - jc) * (c - jc);
        double g = std::exp(-d2 * inv2s);
        for (int ch = 0; ch < cfg.cin; ++ch)
          scene.input[(size_t)(ch * h * w + r * w + c)] +=
              (T)(g * sig[(size_t)j][(size_t)ch]);
      }
  }
  if (occluded) {
    for (int ch = 0; ch < cfg.cin; ++ch)
      for (int r = or0; r < or0 + orh; ++r)
        for (int c = oc0; c < oc0 + ocw; ++c)
          scene.input[(size_t)(ch * h * w + r * w + c)] = T(0);
  }

  scene.joints.grid_h = h;
  scene.joints.grid_w = w;
  scene.joints.gt_positions = pos;
  scene.joints.visibility.resize((size_t)k);
  for (int j = 0; j < k; ++j) {
    auto [jr, jc] = pos[(size_t)j];
    int ri = (int)std::llround(jr), ci = (int)std::llround(jc);
    bool covered = occluded && ri >= or0 && ri < or0 + orh && ci >= oc0 &&
                   ci < oc0 + ocw;
    scene.joints.visibility[(size_t)j] = !covered;
  }
  // Gaussian heatmap targets, peak 1 at the exact position
  const double invt = 1.0 / (2.0 * sigma_target * sigma_target);
  std::vector<T> tgt((size_t)(k * h * w), T(0));
  for (int j = 0; j < k; ++j) {
    auto [jr, jc] = pos[(size_t)j];
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double d2 = (r - jr) * (r - jr) + (c - jc) * (c - jc);
        tgt[(size_t)(j * h * w + r * w + c)] = (T)std::exp(-d2 * invt);
      }
  }
  scene.joints.heatmap_targets =
      make_tensor<T>(k, (int64_t)h * w, std::move(tgt));
  return scene;
}

// ---------------------------------------------------------------------------
// model

enum class Ablation {
  Full,
  NoContext,
  NoCross,
  NoGM,
  NoDirection,
  NoPGVL,
  GlobalCrossBaseline,
};

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoContext: return "no_context";
    case Ablation::NoCross: return "no_cross";
    case Ablation::NoGM: return "no_gm";
    case Ablation::NoDirection: return "no_direction";
    case Ablation::NoPGVL: return "no_pgvl";
    case Ablation::GlobalCrossBaseline: return "global_cross_attention_baseline";
  }
  return "?";
}

inline Ablation ablation_from_name(const std::string& s) {
  for (Ablation a : {Ablation::Full, Ablation::NoContext, Ablation::NoCross,
                     Ablation::NoGM, Ablation::NoDirection, Ablation::NoPGVL,
                     Ablation::GlobalCrossBaseline})
    if (s == ablation_name(a)) return a;
  throw ConfigError("unknown ablation: " + s);
}

struct LossConfig {
  double lambda_vlml = 0.1;
  Sampling sampling = Sampling::Nearest;
  double sigma_target = 1.25;
  bool row_normalize = false;
  double temperature = 1.0;
};

struct TrainSettings {
  int epochs = 30;
  int batch_size = 16;
  double lr = 0.2;
  std::vector<int> lr_decay_epochs = {24, 28};  // x0.1 at each
  double pck_radius = 2.0;
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  Ablation ablation = Ablation::Full;
  int channels = 512;  // encoder width
};

struct FusionSpecConfig {
  std::vector<int> branching = {2, 2, 2};  // G
  std::vector<int> spaces = {512};         // D
};

template <typename T>
struct PoseModel {
  SceneConfig scene_cfg;
  LossConfig loss_cfg;
  FusionSpecConfig fusion_cfg;
  Ablation ablation = Ablation::Full;
  int channels = 0;

  ParamStore<T> store;
  TensorPtr<T> patch_w, patch_b;  // cin -> C per cell
  TensorPtr<T> pos_emb;           // S x C, zero-initialized
  TensorPtr<T> prompt_emb;        // one row per distinct prompt
  std::vector<int64_t> prompt_rows;  // joint -> embedding row
  TensorPtr<T> prefix;            // 1 x C learned prefix
  std::optional<VariantSpec<T>> fusion;
  std::optional<GlobalCrossParams<T>> baseline;
  TensorPtr<T> head_wv, head_wl;

  FusionOptions fusion_options() const {
    FusionOptions o;
    o.use_context = ablation != Ablation::NoContext;
    o.use_cross = ablation != Ablation::NoCross;
    o.use_gm = ablation != Ablation::NoGM;
    return o;
  }
};

// Prompt rows: with direction words every joint has its own embedding row;
// without them, "left x"/"right x" share the row of their base name.
inline std::pair<std::vector<std::string>, std::vector<int64_t>> prompt_table(
    const std::vector<std::string>& names, bool direction_words) {
  std::vector<std::string> prompts;
  std::vector<int64_t> rows;
  for (const auto& name : names) {
    std::string p = name;
    if (!direction_words) {
      for (const char* pre : {"left ", "right "})
        if (p.rfind(pre, 0) == 0) p = p.substr(std::string(pre).size());
    }
    auto it = std::find(prompts.begin(), prompts.end(), p);
    if (it == prompts.end()) {
      rows.push_back((int64_t)prompts.size());
      prompts.push_back(p);
    } else {
      rows.push_back(it - prompts.begin());
    }
  }
  return {prompts, rows};
}

template <typename T>
PoseModel<T> init_pose_model(const SceneConfig& scene_cfg,
                             const LossConfig& loss_cfg,
                             const FusionSpecConfig& fusion_cfg,
                             Ablation ablation, int channels, uint64_t seed) {
  PoseModel<T> m;
  m.scene_cfg = scene_cfg;
  m.loss_cfg = loss_cfg;
  m.fusion_cfg = fusion_cfg;
  m.ablation = ablation;
  m.channels = channels;
  std::mt19937_64 rng(mix_seed(seed, 0xABCD));
  int64_t s = (int64_t)scene_cfg.grid_h * scene_cfg.grid_w;

  // fan-in scaled init keeps token and logit magnitudes near 1
  m.store.sigma = (T)(1.0 / std::sqrt((double)scene_cfg.cin));
  m.patch_w = m.store.create("enc.vis.patch.w", scene_cfg.cin, channels,
                             Init::ScaledNormal, rng);
  m.store.sigma = (T)(1.0 / std::sqrt((double)channels));
  m.patch_b = m.store.create("enc.vis.patch.b", 1, channels, Init::Zeros, rng);
  m.pos_emb = m.store.create("enc.vis.pos", s, channels, Init::Zeros, rng);

  auto [prompts, rows] =
      prompt_table(joint_names(scene_cfg), ablation != Ablation::NoDirection);
  m.prompt_rows = rows;
  m.prompt_emb = m.store.create("enc.lang.emb", (int64_t)prompts.size(),
                                channels, Init::ScaledNormal, rng);
  m.prefix = m.store.create("enc.lang.prefix", 1, channels, Init::ScaledNormal,
                            rng);

  if (ablation == Ablation::GlobalCrossBaseline) {
    m.baseline = init_global_cross_params(m.store, "fuse", (int64_t)channels, rng);
  } else if (ablation != Ablation::NoPGVL) {
    m.fusion = init_variant_spec(m.store, "fuse", channels, fusion_cfg.spaces,
                                 fusion_cfg.branching, rng);
  }
  m.head_wv = m.store.create("head.vis.w", channels, channels,
                             Init::ScaledNormal, rng);
  m.head_wl = m.store.create("head.lang.w", channels, channels,
                             Init::ScaledNormal, rng);
  return m;
}

template <typename T>
struct SceneForward {
  TensorPtr<T> pred;  // K x (H*W) heatmap logits
  TensorPtr<T> f_lang, f_vis;
  std::optional<FusionTrace<T>> trace;
};

template <typename T>
TensorPtr<T> encode_visual(const PoseModel<T>& model,
                           const TensorPtr<T>& grid_rows) {
  // grid_rows: S x cin (one row per cell)
  return add(linear(grid_rows, model.patch_w, model.patch_b), model.pos_emb);
}

template <typename T>
TensorPtr<T> encode_language(const PoseModel<T>& model) {
  return add_rowvec(gather_rows(model.prompt_emb, model.prompt_rows),
                    model.prefix);
}

// S x cin layout of a rendered scene (cells as rows)
template <typename T>
TensorPtr<T> scene_input_rows(const SceneConfig& cfg,
                              const std::vector<T>& input) {
  int64_t s = (int64_t)cfg.grid_h * cfg.grid_w;
  std::vector<T> rows((size_t)(s * cfg.cin));
  for (int64_t cell = 0; cell < s; ++cell)
    for (int ch = 0; ch < cfg.cin; ++ch)
      rows[(size_t)(cell * cfg.cin + ch)] = input[(size_t)(ch * s + cell)];
  return make_tensor<T>(s, cfg.cin, std::move(rows));
}

template <typename T>
SceneForward<T> forward_scene(const PoseModel<T>& model,
                              const TensorPtr<T>& grid_rows,
                              bool want_trace = false) {
  SceneForward<T> out;
  auto vis = encode_visual(model, grid_rows);
  auto lang = encode_language(model);
  switch (model.ablation) {
    case Ablation::NoPGVL:
      out.f_lang = lang;
      out.f_vis = vis;
      break;
    case Ablation::GlobalCrossBaseline: {
      auto [l, v] = global_cross_forward(lang, vis, *model.baseline);
      out.f_lang = l;
      out.f_vis = v;
      break;
    }
    default: {
      FusionOptions o = model.fusion_options();
      o.trace = want_trace;
      auto r = variants_forward(lang, vis, *model.fusion, o);
      out.f_lang = r.lang;
      out.f_vis = r.vis;
      out.trace = std::move(r.trace);
    }
  }
  auto hv = matmul(out.f_vis, model.head_wv);   // S x C
  auto hl = matmul(out.f_lang, model.head_wl);  // K x C
  auto logits = scale(matmul(hl, transpose(hv)),
                      (T)(1.0 / std::sqrt((double)model.channels)));
  out.pred = logits;  // K x S
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

struct PckCounts {
  int64_t hits = 0, total = 0;
  double fraction() const { return total == 0 ? 0.0 : (double)hits / total; }
};

struct PckReport {
  PckCounts overall, visible, occluded;
};

template <typename T>
void accumulate_pck(const TensorPtr<T>& pred, const JointBatch<T>& joints,
                    double radius, PckReport& rep) {
  int64_t w = joints.grid_w, s = joints.grid_h * joints.grid_w;
  for (int64_t j = 0; j < joints.joints(); ++j) {
    int64_t best = 0;
    for (int64_t i = 1; i < s; ++i)
      if (pred->data[j * s + i] > pred->data[j * s + best]) best = i;
    double dr = (double)(best / w) - joints.gt_positions[(size_t)j].first;
    double dc = (double)(best % w) - joints.gt_positions[(size_t)j].second;
    bool hit = dr * dr + dc * dc <= radius * radius;
    rep.overall.total++;
    rep.overall.hits += hit;
    auto& sub = joints.visibility[(size_t)j] ? rep.visible : rep.occluded;
    sub.total++;
    sub.hits += hit;
  }
}

// Fraction of joints whose argmax-decoded peak lies within radius cells of
// ground truth, over a matched prediction/scene set.
template <typename T>
double evaluate_pck(const std::vector<TensorPtr<T>>& predictions,
                    const std::vector<Scene<T>>& scenes, double radius) {
  if (predictions.empty() || predictions.size() != scenes.size())
    throw ConfigError("evaluate_pck: prediction/scene sets do not match");
  PckReport rep;
  for (size_t i = 0; i < scenes.size(); ++i)
    accumulate_pck(predictions[i], scenes[i].joints, radius, rep);
  return rep.overall.fraction();
}

// ---------------------------------------------------------------------------
// training

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EpochMetrics {
  int epoch = 0;
  double heatmap_loss = 0;
  double vlml_loss = 0;
  double lr = 0;
};

struct MetricsReport {
  uint64_t seed = 0;
  std::string ablation;
  std::vector<EpochMetrics> epochs;
  double pck_overall = 0, pck_visible = 0, pck_occluded = 0;
  int64_t eval_joints_visible = 0, eval_joints_occluded = 0;
};

template <typename T>
struct Dataset {
  std::vector<Scene<T>> train, eval;
  std::vector<TensorPtr<T>> train_rows, eval_rows;  // cached S x cin inputs
};

template <typename T>
Dataset<T> build_dataset(const SceneConfig& cfg, double sigma_target) {
  Dataset<T> ds;
  for (int i = 0; i < cfg.num_scenes; ++i) {
    ds.train.push_back(generate_scene<T>(cfg, i, sigma_target));
    ds.train_rows.push_back(scene_input_rows(cfg, ds.train.back().input));
  }
  for (int i = 0; i < cfg.eval_scenes; ++i) {
    ds.eval.push_back(generate_scene<T>(cfg, cfg.num_scenes + i, sigma_target));
    ds.eval_rows.push_back(scene_input_rows(cfg, ds.eval.back().input));
  }
  return ds;
}

template <typename T>
TensorPtr<T> scene_loss(const PoseModel<T>& model, const SceneForward<T>& fwd,
                        const JointBatch<T>& joints, double* heat_out = nullptr,
                        double* vlml_out = nullptr) {
  auto heat = heatmap_loss(fwd.pred, joints);
  TensorPtr<T> loss = heat.value;
  if (heat_out) *heat_out = (double)heat.value->data[0];
  if (model.loss_cfg.lambda_vlml > 0) {
    auto fj = sample_joint_features(fwd.f_vis, joints, model.loss_cfg.sampling);
    VlmlConfig vc;
    vc.row_normalize = model.loss_cfg.row_normalize;
    vc.temperature = model.loss_cfg.temperature;
    auto vl = vlml(fj, fwd.f_lang, joints.visibility, vc);
    if (vlml_out) *vlml_out = (double)vl->data[0];
    loss = add(loss, scale(vl, (T)model.loss_cfg.lambda_vlml));
  } else if (vlml_out) {
    *vlml_out = 0;
  }
  return loss;
}

template <typename T>
PckReport evaluate_model(const PoseModel<T>& model, const Dataset<T>& ds,
                         double radius) {
  NoGradGuard ng;
  PckReport rep;
  for (size_t i = 0; i < ds.eval.size(); ++i) {
    auto fwd = forward_scene(model, ds.eval_rows[i]);
    accumulate_pck(fwd.pred, ds.eval[i].joints, radius, rep);
  }
  return rep;
}

template <typename T>
MetricsReport train_model(PoseModel<T>& model, const Dataset<T>& ds,
                          const TrainSettings& ts, uint64_t seed) {
  MetricsReport report;
  report.seed = seed;
  report.ablation = ablation_name(model.ablation);
  double lr = ts.lr;
  std::mt19937_64 shuffle_rng(mix_seed(seed, 0x5EED));
  std::vector<size_t> order(ds.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  bool prev_finite = check_finite_flag().load();
  set_check_finite(false);
  for (int epoch = 0; epoch < ts.epochs; ++epoch) {
    for (int de : ts.lr_decay_epochs)
      if (epoch == de) lr *= 0.1;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double heat_sum = 0, vlml_sum = 0;
    size_t pos = 0;
    while (pos < order.size()) {
      size_t batch = std::min((size_t)ts.batch_size, order.size() - pos);
      model.store.zero_grads();
      for (size_t b = 0; b < batch; ++b) {
        size_t idx = order[pos + b];
        double h = 0, v = 0;
        auto fwd = forward_scene(model, ds.train_rows[idx]);
        auto loss =
            scene_loss(model, fwd, ds.train[idx].joints, &h, &v);
        heat_sum += h;
        vlml_sum += v;
        if (!std::isfinite((double)loss->data[0])) {
          set_check_finite(prev_finite);
          std::ostringstream os;
          os << "training diverged: non-finite loss at epoch " << epoch
             << " scene " << idx << " (ablation "
             << ablation_name(model.ablation) << ", seed " << seed
             << ", lr " << lr << ")";
          throw DivergenceError(os.str());
        }
        if (loss->needs_grad) backward(scale(loss, (T)(1.0 / batch)));
      }
      model.store.sgd_step((T)lr);
      pos += batch;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.heatmap_loss = heat_sum / (double)order.size();
    em.vlml_loss = vlml_sum / (double)order.size();
    em.lr = lr;
    report.epochs.push_back(em);
  }
  set_check_finite(prev_finite);

  auto rep = evaluate_model(model, ds, ts.pck_radius);
  report.pck_overall = rep.overall.fraction();
  report.pck_visible = rep.visible.fraction();
  report.pck_occluded = rep.occluded.fraction();
  report.eval_joints_visible = rep.visible.total;
  report.eval_joints_occluded = rep.occluded.total;
  return report;
}

// One self-contained run: fresh model from the seed, full training pass.
template <typename T>
MetricsReport run_training(const SceneConfig& scene_cfg,
                           const LossConfig& loss_cfg,
                           const FusionSpecConfig& fusion_cfg,
                           const TrainSettings& ts, Ablation ablation,
                           uint64_t seed, PoseModel<T>* model_out = nullptr) {
  auto model = init_pose_model<T>(scene_cfg, loss_cfg, fusion_cfg, ablation,
                                  ts.channels, seed);
  auto ds = build_dataset<T>(scene_cfg, loss_cfg.sigma_target);
  auto report = train_model(model, ds, ts, seed);
  if (model_out) *model_out = std::move(model);
  return report;
}

// ---------------------------------------------------------------------------
// ablation runner

struct AblationTable {
  std::vector<Ablation> rows;
  // [row][seed]
  std::vector<std::vector<MetricsReport>> reports;
};

inline const std::vector<Ablation>& default_ablation_rows() {
  static const std::vector<Ablation> rows = {
      Ablation::Full,   Ablation::NoContext, Ablation::NoCross,
      Ablation::NoGM,   Ablation::NoDirection, Ablation::NoPGVL,
      Ablation::GlobalCrossBaseline};
  return rows;
}

// Runs (ablation x seed) over a fixed worker pool; run results land in
// fixed slots so the table is deterministic regardless of scheduling.
template <typename T>
AblationTable run_ablations(const SceneConfig& scene_cfg,
                            const LossConfig& loss_cfg,
                            const FusionSpecConfig& fusion_cfg,
                            const TrainSettings& ts,
                            const std::vector<Ablation>& rows,
                            int num_threads = 0) {
  AblationTable table;
  table.rows = rows;
  table.reports.assign(rows.size(), std::vector<MetricsReport>(ts.seeds.size()));
  struct Job {
    size_t row, seed_idx;
  };
  std::vector<Job> jobs;
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t s = 0; s < ts.seeds.size(); ++s) jobs.push_back({r, s});
  if (num_threads <= 0)
    num_threads = (int)std::max(1u, std::thread::hardware_concurrency());
  std::atomic<size_t> next{0};
  std::vector<std::thread> workers;
  std::mutex err_mutex;
  std::string first_error;
  for (int t = 0; t < num_threads; ++t) {
    workers.emplace_back([&] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        auto [r, s] = jobs[i];
        try {
          table.reports[r][s] =
              run_training<T>(scene_cfg, loss_cfg, fusion_cfg, ts, rows[r],
                              ts.seeds[s]);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (first_error.empty()) first_error = e.what();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (!first_error.empty()) throw DivergenceError(first_error);
  return table;
}

// ---------------------------------------------------------------------------
// alignment maps

struct AlignmentMaps {
  // per level (0 = leaves): K * S cosine values, row-major by joint
  std::vector<std::vector<double>> levels;
  int64_t joints = 0, cells = 0;
};

template <typename T>
std::vector<double> cosine_rows(const TensorPtr<T>& lang,
                                const TensorPtr<T>& vis) {
  int64_t k = lang->rows, s = vis->rows, c = lang->cols;
  std::vector<double> out((size_t)(k * s), 0.0);
  for (int64_t j = 0; j < k; ++j) {
    double ln = 0;
    for (int64_t d = 0; d < c; ++d) {
      double v = (double)lang->data[j * c + d];
      ln += v * v;
    }
    ln = std::sqrt(ln);
    for (int64_t i = 0; i < s; ++i) {
      double vn = 0, dot = 0;
      for (int64_t d = 0; d < c; ++d) {
        double lv = (double)lang->data[j * c + d];
        double vv = (double)vis->data[i * c + d];
        dot += lv * vv;
        vn += vv * vv;
      }
      vn = std::sqrt(vn);
      double denom = ln * vn;
      out[(size_t)(j * s + i)] = denom > 0 ? dot / denom : 0.0;
    }
  }
  return out;
}

// Per-level cosine similarity between each joint's language node feature and
// every spatial visual node feature, averaged over that level's nodes.
template <typename T>
AlignmentMaps alignment_maps(const FusionTrace<T>& trace,
                             const ParseGraph& graph) {
  AlignmentMaps maps;
  int n = graph.spec.levels();
  for (int k = 0; k <= n; ++k) {
    auto ids = graph.nodes_at_level(k);
    std::vector<double> acc;
    for (int id : ids) {
      const auto& lt = trace.nodes[kLang].at(id);
      const auto& vt = trace.nodes[kVis].at(id);
      auto lang = lt.combined ? lt.combined : lt.replaced;
      auto vis = vt.combined ? vt.combined : vt.replaced;
      if (!lang || !vis)
        throw ConfigError("alignment_maps: trace is missing node features");
      auto cs = cosine_rows(lang, vis);
      if (acc.empty()) {
        acc = cs;
        maps.joints = lang->rows;
        maps.cells = vis->rows;
      } else {
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += cs[i];
      }
    }
    for (auto& v : acc) v /= (double)ids.size();
    maps.levels.push_back(std::move(acc));
  }
  return maps;
}

}  // namespace pgvl
