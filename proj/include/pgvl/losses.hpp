// Visual-language matching loss and the keypoint heatmap regression loss.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pgvl/tensor.hpp"

namespace pgvl {

enum class Sampling { Nearest, Bilinear };

template <typename T>
struct JointBatch {
  int64_t grid_h = 0, grid_w = 0;
  // per joint: (row, col) in grid units; may be fractional
  std::vector<std::pair<double, double>> gt_positions;
  std::vector<bool> visibility;
  // K x (H*W), Gaussian peaks in [0,1]
  TensorPtr<T> heatmap_targets;

  int64_t joints() const { return (int64_t)gt_positions.size(); }
};

// Per-joint rows of the fused visual token matrix at the ground-truth
// positions. F_V_res is (H*W) x C, row index = row * W + col.
template <typename T>
TensorPtr<T> sample_joint_features(const TensorPtr<T>& f_v_res,
                                   const JointBatch<T>& joints,
                                   Sampling mode = Sampling::Nearest) {
  int64_t h = joints.grid_h, w = joints.grid_w;
  if (f_v_res->rows != h * w)
    throw ShapeError("sample_joint_features: row count does not match grid");
  for (int64_t j = 0; j < joints.joints(); ++j) {
    auto [r, c] = joints.gt_positions[j];
    if (joints.visibility[j] && (r < 0 || r > h - 1 || c < 0 || c > w - 1))
      throw ShapeError("sample_joint_features: visible joint " +
                       std::to_string(j) + " outside the grid");
  }
  if (mode == Sampling::Nearest) {
    std::vector<int64_t> rows;
    for (int64_t j = 0; j < joints.joints(); ++j) {
      auto [r, c] = joints.gt_positions[j];
      int64_t ri = std::clamp((int64_t)std::llround(r), int64_t(0), h - 1);
      int64_t ci = std::clamp((int64_t)std::llround(c), int64_t(0), w - 1);
      rows.push_back(ri * w + ci);
    }
    return gather_rows(f_v_res, rows);
  }
  // bilinear: weighted sum of the four surrounding cells
  std::vector<int64_t> idx[4];
  std::vector<T> wt[4];
  for (int64_t j = 0; j < joints.joints(); ++j) {
    auto [r, c] = joints.gt_positions[j];
    double rc = std::clamp(r, 0.0, (double)(h - 1));
    double cc = std::clamp(c, 0.0, (double)(w - 1));
    int64_t r0 = std::min((int64_t)rc, h - 2 >= 0 ? h - 2 : int64_t(0));
    int64_t c0 = std::min((int64_t)cc, w - 2 >= 0 ? w - 2 : int64_t(0));
    if (h == 1) r0 = 0;
    if (w == 1) c0 = 0;
    double fr = rc - r0, fc = cc - c0;
    int64_t r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
    idx[0].push_back(r0 * w + c0); wt[0].push_back((T)((1 - fr) * (1 - fc)));
    idx[1].push_back(r0 * w + c1); wt[1].push_back((T)((1 - fr) * fc));
    idx[2].push_back(r1 * w + c0); wt[2].push_back((T)(fr * (1 - fc)));
    idx[3].push_back(r1 * w + c1); wt[3].push_back((T)(fr * fc));
  }
  TensorPtr<T> out;
  for (int q = 0; q < 4; ++q) {
    auto part = scale_rows(gather_rows(f_v_res, idx[q]), wt[q]);
    out = out ? add(out, part) : part;
  }
  return out;
}

struct VlmlConfig {
  bool row_normalize = false;
  double temperature = 1.0;
};

// Symmetric row-wise cross entropy of the joint/prompt correlation matrix
// against the identity target, over the visible joints.
template <typename T>
TensorPtr<T> vlml(const TensorPtr<T>& f_joints, const TensorPtr<T>& f_l_res,
                  const std::vector<bool>& visibility,
                  const VlmlConfig& cfg = {}) {
  if (f_joints->rows != f_l_res->rows || f_joints->cols != f_l_res->cols)
    throw ShapeError("vlml: joint/prompt feature shape mismatch");
  if ((int64_t)visibility.size() != f_joints->rows)
    throw ShapeError("vlml: visibility mask size mismatch");
  std::vector<int64_t> vis;
  for (int64_t j = 0; j < (int64_t)visibility.size(); ++j)
    if (visibility[j]) vis.push_back(j);
  if (vis.empty()) return zeros<T>(1, 1);
  auto fj = gather_rows(f_joints, vis);
  auto fl = gather_rows(f_l_res, vis);
  if (cfg.row_normalize) {
    auto norm = [](const TensorPtr<T>& x) {
      std::vector<T> inv((size_t)x->rows);
      for (int64_t i = 0; i < x->rows; ++i) {
        T s = 0;
        for (int64_t j = 0; j < x->cols; ++j) {
          T v = x->data[i * x->cols + j];
          s += v * v;
        }
        inv[i] = T(1) / std::max((T)std::sqrt((double)s), (T)1e-8);
      }
      return inv;
    };
    fj = scale_rows(fj, norm(fj));
    fl = scale_rows(fl, norm(fl));
  }
  auto corr = matmul(fj, transpose(fl));
  if (cfg.temperature != 1.0) corr = scale(corr, (T)(1.0 / cfg.temperature));
  std::vector<int64_t> diag(vis.size());
  for (size_t i = 0; i < vis.size(); ++i) diag[i] = (int64_t)i;
  auto a = cross_entropy_rows(corr, diag);
  auto b = cross_entropy_rows(transpose(corr), diag);
  return scale(add(a, b), T(0.5));
}

template <typename T>
struct HeatmapLossResult {
  TensorPtr<T> value;
  bool no_visible_joints = false;
};

// MSE over the visible joints' heatmaps. pred is K x (H*W).
template <typename T>
HeatmapLossResult<T> heatmap_loss(const TensorPtr<T>& pred,
                                  const JointBatch<T>& joints) {
  if (pred->rows != joints.heatmap_targets->rows ||
      pred->cols != joints.heatmap_targets->cols)
    throw ShapeError("heatmap_loss: prediction/target shape mismatch");
  std::vector<int64_t> vis;
  for (int64_t j = 0; j < joints.joints(); ++j)
    if (joints.visibility[j]) vis.push_back(j);
  if (vis.empty()) return {zeros<T>(1, 1), true};
  auto p = gather_rows(pred, vis);
  auto t = gather_rows(joints.heatmap_targets, vis);
  return {mse(p, t), false};
}

}  // namespace pgvl
