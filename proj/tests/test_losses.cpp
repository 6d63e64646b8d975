#include <doctest.h>

#include <cmath>
#include <random>

#include "pgvl/losses.hpp"

using namespace pgvl;

namespace {

TensorPtr<double> randn(std::mt19937_64& rng, int64_t r, int64_t c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> d((size_t)(r * c));
  for (auto& v : d) v = nd(rng);
  return make_tensor<double>(r, c, std::move(d));
}

JointBatch<double> grid_batch(int64_t h, int64_t w,
                              std::vector<std::pair<double, double>> pos,
                              std::vector<bool> vis) {
  JointBatch<double> jb;
  jb.grid_h = h;
  jb.grid_w = w;
  jb.gt_positions = std::move(pos);
  jb.visibility = std::move(vis);
  int64_t k = (int64_t)jb.gt_positions.size();
  jb.heatmap_targets = zeros<double>(k, h * w);
  return jb;
}

// run vlml on an explicit correlation matrix by feeding orthonormal basis
// rows: F_L = I, F_joints = Corr, so F_joints x F_L^T == Corr
double vlml_of_corr(const std::vector<double>& corr, int64_t k) {
  std::vector<double> eye((size_t)(k * k), 0.0);
  for (int64_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
  auto fj = make_tensor<double>(k, k, corr);
  auto fl = make_tensor<double>(k, k, eye);
  return vlml(fj, fl, std::vector<bool>((size_t)k, true))->data[0];
}

}  // namespace

TEST_CASE("sample_joint_features") {
  std::mt19937_64 rng(1);
  // degenerate 1x1 grid: every joint receives the single row
  auto fv1 = randn(rng, 1, 4);
  auto jb1 = grid_batch(1, 1, {{0, 0}, {0, 0}}, {true, true});
  auto s1 = sample_joint_features(fv1, jb1);
  CHECK(s1->rows == 2);
  for (int j = 0; j < 4; ++j) {
    CHECK(s1->data[j] == fv1->data[j]);
    CHECK(s1->data[4 + j] == fv1->data[j]);
  }

  // exact hit with nearest sampling returns that cell's row
  auto fv = randn(rng, 6, 3);  // 2x3 grid
  auto jb = grid_batch(2, 3, {{1.0, 2.0}}, {true});
  auto s = sample_joint_features(fv, jb);
  for (int j = 0; j < 3; ++j) CHECK(s->data[j] == fv->data[5 * 3 + j]);

  // bilinear midpoint of two cells is the elementwise mean of their rows
  auto jbm = grid_batch(2, 3, {{0.0, 0.5}}, {true});
  auto sm = sample_joint_features(fv, jbm, Sampling::Bilinear);
  for (int j = 0; j < 3; ++j)
    CHECK(sm->data[j] ==
          doctest::Approx(0.5 * (fv->data[j] + fv->data[3 + j])).epsilon(1e-12));

  // visible joint outside the grid is an error
  auto bad = grid_batch(2, 3, {{5.0, 0.0}}, {true});
  CHECK_THROWS_AS(sample_joint_features(fv, bad), ShapeError);
  // invisible joints may sit outside
  auto okjb = grid_batch(2, 3, {{5.0, 0.0}}, {false});
  CHECK_NOTHROW(sample_joint_features(fv, okjb));
}

TEST_CASE("vlml closed forms") {
  // zero correlations: uniform logits force ln K
  CHECK(vlml_of_corr(std::vector<double>(4, 0.0), 2) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(vlml_of_corr(std::vector<double>(9, 0.0), 3) ==
        doctest::Approx(std::log(3.0)).epsilon(1e-9));

  // 10 * identity, K = 2: loss = ln(1 + e^-10)
  CHECK(vlml_of_corr({10, 0, 0, 10}, 2) ==
        doctest::Approx(std::log(1.0 + std::exp(-10.0))).epsilon(1e-7));

  // symmetric Corr: both terms coincide
  std::vector<double> sym = {1.0, 0.3, 0.3, -0.5};
  std::vector<double> eye = {1, 0, 0, 1};
  auto corr = make_tensor<double>(2, 2, sym);
  auto a = cross_entropy_rows(corr, {0, 1});
  CHECK(vlml_of_corr(sym, 2) == doctest::Approx(a->data[0]).epsilon(1e-12));
}

TEST_CASE("vlml invariants") {
  std::mt19937_64 rng(7);
  // nonnegative, monotone decreasing in diagonal dominance
  std::vector<double> base(16);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (auto& v : base) v = nd(rng);
  double prev = -1;
  bool first = true;
  for (double scale : {1.0, 5.0, 10.0}) {
    auto m = base;
    for (int i = 0; i < 4; ++i) m[i * 4 + i] = scale;
    double loss = vlml_of_corr(m, 4);
    CHECK(loss >= 0.0);
    if (!first) CHECK(loss < prev);
    prev = loss;
    first = false;
  }

  // transpose swap symmetry is exact by construction
  auto fj = randn(rng, 3, 5);
  auto fl = randn(rng, 3, 5);
  std::vector<bool> vis{true, true, true};
  double fwd = vlml(fj, fl, vis)->data[0];
  double swp = vlml(fl, fj, vis)->data[0];
  CHECK(fwd == swp);

  // visibility masking drops rows and columns together
  std::vector<bool> mask{true, false, true};
  auto masked = vlml(fj, fl, mask);
  auto fj2 = gather_rows(fj, {0, 2});
  auto fl2 = gather_rows(fl, {0, 2});
  CHECK(masked->data[0] ==
        doctest::Approx(vlml(fj2, fl2, {true, true})->data[0]).epsilon(1e-12));

  // K mismatch
  CHECK_THROWS_AS(vlml(randn(rng, 2, 5), fl, vis), ShapeError);
  // all joints invisible: zero loss
  CHECK(vlml(fj, fl, {false, false, false})->data[0] == 0.0);
}

TEST_CASE("heatmap_loss") {
  std::mt19937_64 rng(3);
  auto jb = grid_batch(2, 2, {{0, 0}, {1, 1}}, {true, true});
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : jb.heatmap_targets->data) v = std::abs(nd(rng));

  // perfect prediction
  auto perfect = make_tensor<double>(2, 4, jb.heatmap_targets->data);
  CHECK(heatmap_loss(perfect, jb).value->data[0] == 0.0);

  // constant offset c gives c^2
  auto off = jb.heatmap_targets->data;
  for (auto& v : off) v += 0.3;
  auto r = heatmap_loss(make_tensor<double>(2, 4, std::move(off)), jb);
  CHECK(r.value->data[0] == doctest::Approx(0.09).epsilon(1e-9));
  CHECK(!r.no_visible_joints);

  // all joints invisible: zero with the flag set
  jb.visibility = {false, false};
  auto r2 = heatmap_loss(perfect, jb);
  CHECK(r2.value->data[0] == 0.0);
  CHECK(r2.no_visible_joints);

  // only visible joints' maps count
  jb.visibility = {true, false};
  auto mixed = jb.heatmap_targets->data;
  mixed[5] += 100.0;  // corrupt the invisible joint's map
  CHECK(heatmap_loss(make_tensor<double>(2, 4, std::move(mixed)), jb)
            .value->data[0] == 0.0);

  CHECK_THROWS_AS(heatmap_loss(randn(rng, 3, 4), jb), ShapeError);
}
