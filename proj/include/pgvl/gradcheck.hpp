// Finite-difference oracle for the reverse-mode engine.
//
// Analytic gradients are compared against central differences on f64
// graphs. Composite graphs are generated from a seed; a composite builder
// re-derives the same op sequence on every call so the graph is a pure
// function of its input tensors.
#pragma once

#include <cstdint>
#include <functional>
#include <iostream>
#include <random>
#include <vector>

#include "pgvl/fusion.hpp"
#include "pgvl/losses.hpp"
#include "pgvl/tensor.hpp"
#include "pgvl/variants.hpp"

namespace pgvl {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

// rel(a, b) with a unit floor so near-zero gradients are compared absolutely
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline GradCheckResult check_gradients(
    const std::function<TensorPtr<double>()>& build_loss,
    const std::vector<TensorPtr<double>>& inputs, double step = 1e-5) {
  auto loss = build_loss();
  for (auto& in : inputs) in->zero_grad();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    in->ensure_grad();
    analytic.push_back(in->grad);
  }
  GradCheckResult res;
  for (size_t p = 0; p < inputs.size(); ++p) {
    auto& in = inputs[p];
    for (size_t i = 0; i < in->data.size(); ++i) {
      double orig = in->data[i];
      in->data[i] = orig + step;
      double up = build_loss()->data[0];
      in->data[i] = orig - step;
      double down = build_loss()->data[0];
      in->data[i] = orig;
      double fd = (up - down) / (2 * step);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[p][i], fd));
      ++res.checked;
    }
  }
  return res;
}

namespace gradcheck_detail {

inline TensorPtr<double> random_input(std::mt19937_64& rng, int64_t r,
                                      int64_t c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> d((size_t)(r * c));
  for (auto& v : d) v = nd(rng);
  return make_tensor<double>(r, c, std::move(d), true);
}

}  // namespace gradcheck_detail

// Builds a random op composite over the given inputs. All structural
// choices are re-derived from the seed, so repeated calls with the same
// inputs rebuild the identical graph.
inline TensorPtr<double> random_composite(
    uint64_t seed, const std::vector<TensorPtr<double>>& inputs) {
  std::mt19937_64 rng(seed);
  std::vector<TensorPtr<double>> pool = inputs;
  auto pick = [&](auto pred) -> int {
    std::vector<int> ok;
    for (int i = 0; i < (int)pool.size(); ++i)
      if (pred(pool[i])) ok.push_back(i);
    if (ok.empty()) return -1;
    return ok[rng() % ok.size()];
  };
  int steps = 4 + (int)(rng() % 4);
  for (int s = 0; s < steps; ++s) {
    int op = (int)(rng() % 9);
    switch (op) {
      case 0:
      case 1: {  // add / mul of two same-shape entries
        int a = (int)(rng() % pool.size());
        int b = pick([&](const TensorPtr<double>& t) {
          return t->rows == pool[a]->rows && t->cols == pool[a]->cols;
        });
        if (b < 0) break;
        pool.push_back(op == 0 ? add(pool[a], pool[b]) : mul(pool[a], pool[b]));
        break;
      }
      case 2: {  // matmul, transposing b when needed
        int a = (int)(rng() % pool.size());
        int b = pick([&](const TensorPtr<double>& t) {
          return t->rows == pool[a]->cols || t->cols == pool[a]->cols;
        });
        if (b < 0) break;
        auto rhs = pool[b]->rows == pool[a]->cols ? pool[b] : transpose(pool[b]);
        pool.push_back(matmul(pool[a], rhs));
        break;
      }
      case 3:
        pool.push_back(softmax_rows(pool[rng() % pool.size()]));
        break;
      case 4:
        pool.push_back(transpose(pool[rng() % pool.size()]));
        break;
      case 5: {
        std::uniform_real_distribution<double> ud(-2.0, 2.0);
        pool.push_back(scale(pool[rng() % pool.size()], ud(rng)));
        break;
      }
      case 6: {  // concat two row-compatible entries along columns
        int a = (int)(rng() % pool.size());
        int b = pick([&](const TensorPtr<double>& t) {
          return t->rows == pool[a]->rows;
        });
        if (b < 0) break;
        pool.push_back(concat<double>({pool[a], pool[b]}, Axis::Cols));
        break;
      }
      case 7: {  // split in two and keep both halves
        int a = pick([&](const TensorPtr<double>& t) {
          return t->cols >= 2 && t->cols % 2 == 0;
        });
        if (a < 0) break;
        auto halves =
            split(pool[a], {pool[a]->cols / 2, pool[a]->cols / 2}, Axis::Cols);
        pool.push_back(halves[0]);
        pool.push_back(halves[1]);
        break;
      }
      case 8: {  // gather a random row subset
        int a = (int)(rng() % pool.size());
        int64_t m = 1 + (int64_t)(rng() % (uint64_t)pool[a]->rows);
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < m; ++i)
          idx.push_back((int64_t)(rng() % (uint64_t)pool[a]->rows));
        pool.push_back(gather_rows(pool[a], idx));
        break;
      }
    }
  }
  // reduce everything so every branch contributes to the loss; route the
  // last entry through cross entropy to exercise it
  TensorPtr<double> loss = nullptr;
  for (auto& t : pool) {
    auto s = sum(t);
    loss = loss ? add(loss, s) : s;
  }
  auto& last = pool.back();
  std::vector<int64_t> targets;
  for (int64_t i = 0; i < last->rows; ++i)
    targets.push_back((int64_t)(rng() % (uint64_t)last->cols));
  loss = add(loss, cross_entropy_rows(last, targets));
  std::vector<double> ref((size_t)last->numel());
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : ref) v = nd(rng);
  loss = add(loss, mse(last, make_tensor<double>(last->rows, last->cols,
                                                 std::move(ref))));
  return loss;
}

// The full oracle suite: randomized composites over all primitives, a
// complete fusion pass, and both losses. Prints one line per section.
inline bool run_gradcheck_suite(std::ostream& os, int num_composites = 50) {
  bool ok = true;
  // 1. random composites
  double worst = 0;
  for (int t = 0; t < num_composites; ++t) {
    std::mt19937_64 rng(1000 + t);
    std::vector<TensorPtr<double>> inputs;
    int ni = 2 + (int)(rng() % 3);
    for (int i = 0; i < ni; ++i) {
      int64_t r = 1 + (int64_t)(rng() % 6), c = 1 + (int64_t)(rng() % 6);
      inputs.push_back(gradcheck_detail::random_input(rng, r, c));
    }
    uint64_t cseed = rng();
    auto res = check_gradients(
        [&] { return random_composite(cseed, inputs); }, inputs);
    worst = std::max(worst, res.max_rel_err);
  }
  os << "gradcheck composites: max rel err " << worst
     << (worst < 1e-6 ? " PASS" : " FAIL") << "\n";
  ok = ok && worst < 1e-6;

  // 2. full fusion pass (small shapes)
  {
    std::mt19937_64 rng(42);
    ParamStore<double> store;
    DecompositionSpec ds{{2, 2}, 8};
    auto graph = build_parse_graph(ds);
    auto fp = init_fusion_params(store, "f", graph, rng);
    // perturb the zero-initialized output projections so their grads are
    // exercised away from the stationary init
    std::normal_distribution<double> nd(0.0, 0.05);
    for (int mod = 0; mod < 2; ++mod)
      for (auto& v : fp.out_proj[mod]->data) v = nd(rng);
    auto lang = gradcheck_detail::random_input(rng, 3, 8);
    auto vis = gradcheck_detail::random_input(rng, 4, 8);
    std::vector<TensorPtr<double>> inputs{lang, vis};
    for (auto& [name, p] : store.params) inputs.push_back(p);
    auto res = check_gradients(
        [&] {
          auto r = pgvl_forward(lang, vis, graph, fp);
          return add(sum(mul(r.lang, r.lang)), sum(mul(r.vis, r.vis)));
        },
        inputs);
    os << "gradcheck pgvl_forward: max rel err " << res.max_rel_err
       << (res.max_rel_err < 1e-5 ? " PASS" : " FAIL") << "\n";
    ok = ok && res.max_rel_err < 1e-5;
  }

  // 3. losses on top of fused features
  {
    std::mt19937_64 rng(77);
    auto f_v = gradcheck_detail::random_input(rng, 6, 5);  // 2x3 grid
    auto f_l = gradcheck_detail::random_input(rng, 4, 5);
    auto pred = gradcheck_detail::random_input(rng, 4, 6);
    JointBatch<double> jb;
    jb.grid_h = 2;
    jb.grid_w = 3;
    jb.gt_positions = {{0.2, 1.3}, {1.0, 0.0}, {0.8, 2.0}, {0.4, 1.1}};
    jb.visibility = {true, true, false, true};
    std::vector<double> tgt(4 * 6);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (auto& v : tgt) v = ud(rng);
    jb.heatmap_targets = make_tensor<double>(4, 6, std::move(tgt));
    auto res = check_gradients(
        [&] {
          auto fj = sample_joint_features(f_v, jb, Sampling::Bilinear);
          auto l1 = vlml(fj, f_l, jb.visibility);
          auto l2 = heatmap_loss(pred, jb).value;
          return add(l1, l2);
        },
        {f_v, f_l, pred});
    os << "gradcheck losses: max rel err " << res.max_rel_err
       << (res.max_rel_err < 1e-5 ? " PASS" : " FAIL") << "\n";
    ok = ok && res.max_rel_err < 1e-5;
  }
  return ok;
}

}  // namespace pgvl
