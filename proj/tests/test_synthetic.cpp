#include <doctest.h>

#include <cmath>

#include "pgvl/synthetic.hpp"

using namespace pgvl;

namespace {

SceneConfig small_cfg() {
  SceneConfig cfg;
  cfg.grid_h = 12;
  cfg.grid_w = 12;
  cfg.joints = 4;
  cfg.cin = 4;
  cfg.seed = 99;
  cfg.num_scenes = 24;
  cfg.eval_scenes = 8;
  return cfg;
}

}  // namespace

TEST_CASE("scene generation is a pure function of (seed, index)") {
  SceneConfig cfg = small_cfg();
  auto a = generate_scene<double>(cfg, 5, 1.25);
  auto b = generate_scene<double>(cfg, 5, 1.25);
  CHECK(a.input == b.input);
  CHECK(a.joints.gt_positions == b.joints.gt_positions);
  CHECK(a.joints.visibility == b.joints.visibility);
  CHECK(a.joints.heatmap_targets->data == b.joints.heatmap_targets->data);

  auto c = generate_scene<double>(cfg, 6, 1.25);
  CHECK(a.input != c.input);
}

TEST_CASE("occlusion probability extremes") {
  SceneConfig cfg = small_cfg();
  cfg.p_occ = 0.0;
  for (int i = 0; i < 16; ++i) {
    auto s = generate_scene<double>(cfg, i, 1.25);
    for (bool v : s.joints.visibility) CHECK(v);
    double mass = 0;
    for (double v : s.input) mass += std::abs(v);
    CHECK(mass > 0);
  }

  cfg.p_occ = 1.0;
  int occluded_joints = 0;
  for (int i = 0; i < 16; ++i) {
    auto s = generate_scene<double>(cfg, i, 1.25);
    // some rectangle was zeroed
    int zero_cells = 0;
    int64_t hw = cfg.grid_h * cfg.grid_w;
    for (int64_t cell = 0; cell < hw; ++cell) {
      bool all_zero = true;
      for (int ch = 0; ch < cfg.cin; ++ch)
        all_zero = all_zero && s.input[(size_t)(ch * hw + cell)] == 0.0;
      zero_cells += all_zero;
    }
    CHECK(zero_cells >= cfg.occ_min * cfg.occ_min);
    for (size_t j = 0; j < s.joints.visibility.size(); ++j)
      occluded_joints += !s.joints.visibility[j];
  }
  CHECK(occluded_joints > 0);
}

TEST_CASE("occluded joints sit on zeroed cells, targets keep the truth") {
  SceneConfig cfg = small_cfg();
  cfg.p_occ = 1.0;
  int64_t hw = cfg.grid_h * cfg.grid_w;
  for (int i = 0; i < 24; ++i) {
    auto s = generate_scene<double>(cfg, i, 1.25);
    for (int64_t j = 0; j < s.joints.joints(); ++j) {
      auto [r, c] = s.joints.gt_positions[(size_t)j];
      int64_t cell = (int64_t)std::llround(r) * cfg.grid_w +
                     (int64_t)std::llround(c);
      if (!s.joints.visibility[(size_t)j]) {
        for (int ch = 0; ch < cfg.cin; ++ch)
          CHECK(s.input[(size_t)(ch * hw + cell)] == 0.0);
      }
      // heatmap target peaks near 1 at the rounded position regardless
      CHECK(s.joints.heatmap_targets->data[j * hw + cell] > 0.7);
    }
  }
}

TEST_CASE("prompt table with and without direction words") {
  SceneConfig cfg;
  auto names = joint_names(cfg);  // all 8
  auto [p1, r1] = prompt_table(names, true);
  CHECK(p1.size() == 8);
  for (size_t j = 0; j < 8; ++j) CHECK(r1[j] == (int64_t)j);

  auto [p2, r2] = prompt_table(names, false);
  CHECK(p2.size() == 5);  // head, neck, wrist, hip, ankle
  CHECK(r2[2] == r2[3]);  // left/right wrist share a row
  CHECK(r2[4] == r2[5]);
  CHECK(r2[6] == r2[7]);
  CHECK(r2[0] != r2[1]);
}

TEST_CASE("encoders at init") {
  SceneConfig cfg = small_cfg();
  auto model = init_pose_model<double>(cfg, {}, {{2}, {16}}, Ablation::Full,
                                       16, 7);
  // zero grid, zero bias, zero positional table: visual tokens are zero
  auto zrows = zeros<double>(cfg.grid_h * cfg.grid_w, cfg.cin);
  auto vtok = encode_visual(model, zrows);
  for (double v : vtok->data) CHECK(v == 0.0);

  auto ltok = encode_language(model);
  CHECK(ltok->rows == cfg.joints);
  CHECK(ltok->cols == 16);

  // without direction words, mirrored joints get identical prompts
  auto m2 = init_pose_model<double>(cfg, {}, {{2}, {16}},
                                    Ablation::NoDirection, 16, 7);
  auto names = joint_names(cfg);  // head, neck, left wrist, right wrist
  auto l2 = encode_language(m2);
  for (int d = 0; d < 16; ++d)
    CHECK(l2->data[2 * 16 + d] == l2->data[3 * 16 + d]);
}

TEST_CASE("scene_input_rows transposes channel-major input") {
  SceneConfig cfg = small_cfg();
  auto s = generate_scene<double>(cfg, 0, 1.25);
  auto rows = scene_input_rows(cfg, s.input);
  int64_t hw = cfg.grid_h * cfg.grid_w;
  CHECK(rows->rows == hw);
  CHECK(rows->cols == cfg.cin);
  for (int64_t cell = 0; cell < hw; ++cell)
    for (int ch = 0; ch < cfg.cin; ++ch)
      CHECK(rows->data[cell * cfg.cin + ch] ==
            s.input[(size_t)(ch * hw + cell)]);
}

TEST_CASE("pck decoding") {
  SceneConfig cfg = small_cfg();
  cfg.p_occ = 0.0;
  std::vector<Scene<double>> scenes{generate_scene<double>(cfg, 0, 1.25)};
  int64_t hw = cfg.grid_h * cfg.grid_w;

  // prediction that peaks exactly on every ground-truth cell
  std::vector<double> good((size_t)(cfg.joints * hw), 0.0);
  for (int64_t j = 0; j < cfg.joints; ++j) {
    auto [r, c] = scenes[0].joints.gt_positions[(size_t)j];
    int64_t cell = (int64_t)std::llround(r) * cfg.grid_w +
                   (int64_t)std::llround(c);
    good[(size_t)(j * hw + cell)] = 1.0;
  }
  std::vector<TensorPtr<double>> preds{
      make_tensor<double>(cfg.joints, hw, good)};
  CHECK(evaluate_pck(preds, scenes, 2.0) == 1.0);

  // peak shifted far away misses every joint
  std::vector<double> bad((size_t)(cfg.joints * hw), 0.0);
  for (int64_t j = 0; j < cfg.joints; ++j) {
    auto [r, c] = scenes[0].joints.gt_positions[(size_t)j];
    int64_t rr = (int64_t)std::llround(r), cc = (int64_t)std::llround(c);
    int64_t far = rr >= cfg.grid_h / 2 ? 0 : (cfg.grid_h - 1) * cfg.grid_w;
    (void)cc;
    bad[(size_t)(j * hw + far)] = 1.0;
  }
  std::vector<TensorPtr<double>> bpreds{
      make_tensor<double>(cfg.joints, hw, bad)};
  CHECK(evaluate_pck(bpreds, scenes, 2.0) == 0.0);

  CHECK_THROWS_AS(evaluate_pck({}, scenes, 2.0), ConfigError);
}

TEST_CASE("training smoke: loss falls, runs are deterministic") {
  SceneConfig cfg = small_cfg();
  LossConfig lc;
  FusionSpecConfig fc{{2}, {16}};
  TrainSettings ts;
  ts.epochs = 3;
  ts.batch_size = 8;
  ts.lr = 0.5;
  ts.lr_decay_epochs = {};
  ts.channels = 16;

  PoseModel<float> m1, m2;
  auto r1 = run_training<float>(cfg, lc, fc, ts, Ablation::Full, 11, &m1);
  auto r2 = run_training<float>(cfg, lc, fc, ts, Ablation::Full, 11, &m2);

  CHECK(r1.epochs.size() == 3);
  CHECK(r1.epochs.back().heatmap_loss < r1.epochs.front().heatmap_loss);

  // byte-identical repeat
  for (size_t e = 0; e < r1.epochs.size(); ++e) {
    CHECK(r1.epochs[e].heatmap_loss == r2.epochs[e].heatmap_loss);
    CHECK(r1.epochs[e].vlml_loss == r2.epochs[e].vlml_loss);
  }
  CHECK(r1.pck_overall == r2.pck_overall);
  for (auto& [name, p] : m1.store.params)
    CHECK(p->data == m2.store.at(name)->data);

  // a different seed takes a different trajectory
  auto r3 = run_training<float>(cfg, lc, fc, ts, Ablation::Full, 12);
  CHECK(r3.epochs.back().heatmap_loss != r1.epochs.back().heatmap_loss);
}

TEST_CASE("every ablation variant trains one epoch") {
  SceneConfig cfg = small_cfg();
  cfg.num_scenes = 8;
  cfg.eval_scenes = 4;
  LossConfig lc;
  FusionSpecConfig fc{{2}, {16}};
  TrainSettings ts;
  ts.epochs = 1;
  ts.batch_size = 8;
  ts.lr = 0.2;
  ts.lr_decay_epochs = {};
  ts.channels = 16;
  for (Ablation a : default_ablation_rows()) {
    auto r = run_training<float>(cfg, lc, fc, ts, a, 3);
    CHECK(r.ablation == ablation_name(a));
    CHECK(std::isfinite(r.epochs[0].heatmap_loss));
    CHECK(r.pck_overall >= 0.0);
    CHECK(r.pck_overall <= 1.0);
  }
}

TEST_CASE("run_ablations fills every slot deterministically") {
  SceneConfig cfg = small_cfg();
  cfg.num_scenes = 8;
  cfg.eval_scenes = 4;
  LossConfig lc;
  FusionSpecConfig fc{{2}, {16}};
  TrainSettings ts;
  ts.epochs = 1;
  ts.batch_size = 8;
  ts.lr = 0.2;
  ts.lr_decay_epochs = {};
  ts.channels = 16;
  ts.seeds = {1, 2};
  std::vector<Ablation> rows{Ablation::Full, Ablation::NoGM};
  auto t1 = run_ablations<float>(cfg, lc, fc, ts, rows, 2);
  auto t2 = run_ablations<float>(cfg, lc, fc, ts, rows, 1);
  REQUIRE(t1.reports.size() == 2);
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t s = 0; s < ts.seeds.size(); ++s) {
      CHECK(t1.reports[r][s].seed == ts.seeds[s]);
      CHECK(t1.reports[r][s].ablation == ablation_name(rows[r]));
      CHECK(t1.reports[r][s].pck_overall == t2.reports[r][s].pck_overall);
      for (size_t e = 0; e < t1.reports[r][s].epochs.size(); ++e)
        CHECK(t1.reports[r][s].epochs[e].heatmap_loss ==
              t2.reports[r][s].epochs[e].heatmap_loss);
    }
}

TEST_CASE("cosine_rows endpoints") {
  auto lang = make_tensor<double>(2, 3, {1, 0, 0, 0, 2, 0});
  auto vis = make_tensor<double>(3, 3, {5, 0, 0, 0, 0, 3, 1, 1, 0});
  auto cs = cosine_rows(lang, vis);
  CHECK(cs[0] == doctest::Approx(1.0).epsilon(1e-12));   // parallel
  CHECK(cs[1] == doctest::Approx(0.0).epsilon(1e-12));   // orthogonal
  CHECK(cs[3] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cs[2] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("alignment maps cover every level") {
  std::mt19937_64 rng(5);
  ParamStore<double> store;
  DecompositionSpec ds{{2, 2}, 16};
  auto graph = build_parse_graph(ds);
  auto fp = init_fusion_params(store, "f", graph, rng);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (int mod = 0; mod < 2; ++mod)
    for (auto& v : fp.out_proj[mod]->data) v = nd(rng);

  std::vector<double> ld(4 * 16), vd(9 * 16);
  for (auto& v : ld) v = nd(rng);
  for (auto& v : vd) v = nd(rng);
  FusionOptions opts;
  opts.trace = true;
  auto res = pgvl_forward(make_tensor<double>(4, 16, std::move(ld)),
                          make_tensor<double>(9, 16, std::move(vd)), graph, fp,
                          opts);
  REQUIRE(res.trace.has_value());
  auto maps = alignment_maps(*res.trace, graph);
  CHECK(maps.levels.size() == 3);  // n + 1
  CHECK(maps.joints == 4);
  CHECK(maps.cells == 9);
  for (auto& level : maps.levels) {
    CHECK(level.size() == 4 * 9);
    for (double v : level) {
      CHECK(v <= 1.0 + 1e-12);
      CHECK(v >= -1.0 - 1e-12);
    }
  }
}
