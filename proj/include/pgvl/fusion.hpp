// Parse-graph visual-language fusion.
//
// Bottom-up recursion over a shared decomposition of both token matrices:
// sibling context attention and bidirectional cross-attention per node,
// parents rebuilt from their children through the guided module, root result
// projected (zero-initialized) and added back onto the inputs.
#pragma once

#include <array>
#include <cassert>
#include <map>
#include <optional>
#include <vector>

#include "pgvl/params.hpp"
#include "pgvl/parse_graph.hpp"
#include "pgvl/tensor.hpp"

namespace pgvl {

enum Modality { kLang = 0, kVis = 1 };
inline const char* modality_tag(int m) { return m == kLang ? "lang" : "vis"; }

template <typename T>
struct ModalityTokens {
  TensorPtr<T> values;  // rows x C
  Modality modality = kLang;
};

template <typename T>
struct AttentionProj {
  TensorPtr<T> wq, wk, wv;
};

// Softmax(Q K^T / sqrt(d)) V, single head, no projections.
template <typename T>
TensorPtr<T> attention(const TensorPtr<T>& q, const TensorPtr<T>& k,
                       const TensorPtr<T>& v) {
  if (q->cols != k->cols)
    throw ShapeError("attention: query/key width mismatch");
  if (k->rows != v->rows)
    throw ShapeError("attention: key/value row mismatch");
  T inv_sqrt_d = T(1) / std::sqrt((T)q->cols);
  auto scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  return matmul(softmax_rows(scores), v);
}

template <typename T>
TensorPtr<T> projected_attention(const TensorPtr<T>& q, const TensorPtr<T>& k,
                                 const TensorPtr<T>& v,
                                 const AttentionProj<T>& p) {
  return attention(matmul(q, p.wq), matmul(k, p.wk), matmul(v, p.wv));
}

// Self-attention over the row-concatenation of a sibling group; each sibling
// gets its row block back.
template <typename T>
std::vector<TensorPtr<T>> context_attention(
    const std::vector<TensorPtr<T>>& group, const AttentionProj<T>& proj) {
  if (group.empty()) throw ShapeError("context_attention: empty group");
  int64_t rows = group[0]->rows, ch = group[0]->cols;
  for (auto& g : group)
    if (g->rows != rows || g->cols != ch)
      throw ShapeError("context_attention: heterogeneous sibling shapes");
  auto cat = group.size() == 1 ? group[0] : concat(group, Axis::Rows);
  auto att = projected_attention(cat, cat, cat, proj);
  if (group.size() == 1) return {att};
  return split(att, std::vector<int64_t>(group.size(), rows), Axis::Rows);
}

// M_L = Attn(L, V, V), M_V = Attn(V, L, L), each with its own projections.
template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> cross_modal(
    const TensorPtr<T>& node_l, const TensorPtr<T>& node_v,
    const AttentionProj<T>& proj_l, const AttentionProj<T>& proj_v) {
  if (node_l->cols != node_v->cols)
    throw ShapeError("cross_modal: channel width mismatch");
  auto m_l = projected_attention(node_l, node_v, node_v, proj_l);
  auto m_v = projected_attention(node_v, node_l, node_l, proj_v);
  return {m_l, m_v};
}

template <typename T>
struct GuidedModuleParams {
  TensorPtr<T> root_map;  // C -> C_m
  AttentionProj<T> root_query;
  AttentionProj<T> parent_query;
};

// Parent- and root-conditioned attention over the channel concatenation of
// the processed children. Root and parent are their top-down features.
template <typename T>
TensorPtr<T> guided_module(const std::vector<TensorPtr<T>>& children_x,
                           const TensorPtr<T>& parent, const TensorPtr<T>& root,
                           const GuidedModuleParams<T>& p) {
  if (children_x.empty()) throw ShapeError("guided_module: no children");
  auto f_c = children_x.size() == 1 ? children_x[0]
                                    : concat(children_x, Axis::Cols);
  if (f_c->cols != parent->cols)
    throw ShapeError("guided_module: children concat width " +
                     std::to_string(f_c->cols) + " != parent width " +
                     std::to_string(parent->cols));
  if (root->cols != p.root_map->rows)
    throw ShapeError("guided_module: root width mismatch");
  auto q_r = projected_attention(matmul(root, p.root_map), f_c, f_c, p.root_query);
  auto q_p = projected_attention(parent, f_c, f_c, p.parent_query);
  return add(q_r, q_p);
}

// All learnable weights of one fusion instance over a given parse graph.
// Levels 0..n-1 carry context and cross projections; levels 1..n carry
// guided-module weights; the output projection is zero-initialized so the
// whole block is the identity before training.
template <typename T>
struct FusionParams {
  int levels = 0;  // n
  std::array<std::vector<AttentionProj<T>>, 2> ctx;    // [modality][k], k<n
  std::array<std::vector<AttentionProj<T>>, 2> cross;  // [query modality][k]
  std::array<std::vector<GuidedModuleParams<T>>, 2> gm;  // [modality][m-1]
  std::array<TensorPtr<T>, 2> out_proj;
};

template <typename T>
AttentionProj<T> make_proj(ParamStore<T>& store, const std::string& prefix,
                           int64_t ch, std::mt19937_64& rng) {
  AttentionProj<T> p;
  p.wq = store.create(prefix + ".wq", ch, ch, Init::ScaledNormal, rng);
  p.wk = store.create(prefix + ".wk", ch, ch, Init::ScaledNormal, rng);
  p.wv = store.create(prefix + ".wv", ch, ch, Init::ScaledNormal, rng);
  return p;
}

template <typename T>
FusionParams<T> init_fusion_params(ParamStore<T>& store,
                                   const std::string& prefix,
                                   const ParseGraph& graph,
                                   std::mt19937_64& rng) {
  FusionParams<T> fp;
  int n = fp.levels = graph.spec.levels();
  int64_t c_root = graph.spec.root_channels;
  for (int mod = 0; mod < 2; ++mod) {
    const std::string mp = prefix + "." + modality_tag(mod);
    for (int k = 0; k < n; ++k) {
      int64_t ch = graph.level_channels(k);
      const std::string lp = mp + ".L" + std::to_string(k);
      fp.ctx[mod].push_back(make_proj(store, lp + ".ctx", ch, rng));
      fp.cross[mod].push_back(make_proj(store, lp + ".cross", ch, rng));
    }
    for (int m = 1; m <= n; ++m) {
      int64_t ch = graph.level_channels(m);
      const std::string lp = mp + ".L" + std::to_string(m) + ".gm";
      GuidedModuleParams<T> g;
      g.root_map =
          store.create(lp + ".rootmap", c_root, ch, Init::ScaledNormal, rng);
      g.root_query = make_proj(store, lp + ".root", ch, rng);
      g.parent_query = make_proj(store, lp + ".parent", ch, rng);
      fp.gm[mod].push_back(g);
    }
    fp.out_proj[mod] =
        store.create(mp + ".out.w", c_root, c_root, Init::Zeros, rng);
  }
  return fp;
}

struct FusionOptions {
  bool use_context = true;
  bool use_cross = true;
  bool use_gm = true;
  bool trace = false;
};

template <typename T>
struct FusionTrace {
  struct NodeTrace {
    TensorPtr<T> context, cross, combined, replaced;
  };
  std::array<std::map<int, NodeTrace>, 2> nodes;  // [modality][node id]
};

template <typename T>
struct FusionResult {
  TensorPtr<T> lang;
  TensorPtr<T> vis;
  std::optional<FusionTrace<T>> trace;
};

template <typename T>
FusionResult<T> pgvl_forward(const TensorPtr<T>& lang_tokens,
                             const TensorPtr<T>& vis_tokens,
                             const ParseGraph& graph,
                             const FusionParams<T>& params,
                             const FusionOptions& opts = {}) {
  if (lang_tokens->cols != graph.spec.root_channels ||
      vis_tokens->cols != graph.spec.root_channels)
    throw ShapeError("pgvl_forward: token channels do not match graph root");
  if (!opts.use_context && !opts.use_cross)
    throw ShapeError("pgvl_forward: context and cross cannot both be off");

  const int n = graph.spec.levels();
  std::array<TensorPtr<T>, 2> tokens{lang_tokens, vis_tokens};

  FusionResult<T> result;
  if (opts.trace) result.trace.emplace();

  // top-down: per-node channel slices
  std::array<std::vector<TensorPtr<T>>, 2> td;
  for (int mod = 0; mod < 2; ++mod) {
    td[mod].resize(graph.nodes.size());
    for (size_t id = 0; id < graph.nodes.size(); ++id) {
      const auto& nd = graph.nodes[id];
      td[mod][id] = nd.parent < 0 && nd.channels() == tokens[mod]->cols
                        ? tokens[mod]
                        : slice(tokens[mod], Axis::Cols, nd.span_begin,
                                nd.span_end);
    }
  }

  // bottom-up: cur holds the most recent features per node
  std::array<std::vector<TensorPtr<T>>, 2> cur = td;
  for (int k = 0; k < n; ++k) {
    auto level_ids = graph.nodes_at_level(k);
    std::array<std::map<int, TensorPtr<T>>, 2> x;
    for (int mod = 0; mod < 2; ++mod) {
      std::map<int, TensorPtr<T>> ctx_out;
      if (opts.use_context) {
        for (const auto& group : sibling_groups(graph, k)) {
          std::vector<TensorPtr<T>> feats;
          for (int id : group) feats.push_back(cur[mod][id]);
          auto outs = context_attention(feats, params.ctx[mod][k]);
          for (size_t i = 0; i < group.size(); ++i) ctx_out[group[i]] = outs[i];
        }
      }
      for (int id : level_ids) {
        TensorPtr<T> m;
        if (opts.use_cross) {
          m = mod == kLang
                  ? projected_attention(cur[kLang][id], cur[kVis][id],
                                        cur[kVis][id], params.cross[kLang][k])
                  : projected_attention(cur[kVis][id], cur[kLang][id],
                                        cur[kLang][id], params.cross[kVis][k]);
        }
        TensorPtr<T> xi;
        if (opts.use_context && opts.use_cross)
          xi = add(ctx_out[id], m);
        else if (opts.use_context)
          xi = ctx_out[id];
        else
          xi = m;
        x[mod][id] = xi;
        if (result.trace) {
          auto& nt = result.trace->nodes[mod][id];
          nt.context = opts.use_context ? ctx_out[id] : nullptr;
          nt.cross = m;
          nt.combined = xi;
        }
      }
    }
    // replace each parent from its children
    for (int pid : graph.nodes_at_level(k + 1)) {
      for (int mod = 0; mod < 2; ++mod) {
        std::vector<TensorPtr<T>> children;
        for (int cid : graph.nodes[pid].children) children.push_back(x[mod][cid]);
        TensorPtr<T> replaced;
        if (opts.use_gm) {
          replaced = guided_module(children, td[mod][pid],
                                   td[mod][graph.root_id()],
                                   params.gm[mod][k]);
        } else {
          replaced = children.size() == 1 ? children[0]
                                          : concat(children, Axis::Cols);
        }
        assert(replaced->cols == graph.nodes[pid].channels());
        cur[mod][pid] = replaced;
        if (result.trace) result.trace->nodes[mod][pid].replaced = replaced;
      }
    }
  }

  result.lang = add(lang_tokens,
                    matmul(cur[kLang][graph.root_id()], params.out_proj[kLang]));
  result.vis = add(vis_tokens,
                   matmul(cur[kVis][graph.root_id()], params.out_proj[kVis]));
  return result;
}

// Single bidirectional cross-attention at full channel width; the ablation
// baseline that bypasses the parse graph entirely.
template <typename T>
struct GlobalCrossParams {
  std::array<AttentionProj<T>, 2> cross;
  std::array<TensorPtr<T>, 2> out_proj;
};

template <typename T>
GlobalCrossParams<T> init_global_cross_params(ParamStore<T>& store,
                                              const std::string& prefix,
                                              int64_t channels,
                                              std::mt19937_64& rng) {
  GlobalCrossParams<T> p;
  for (int mod = 0; mod < 2; ++mod) {
    const std::string mp = prefix + "." + modality_tag(mod);
    p.cross[mod] = make_proj(store, mp + ".cross", channels, rng);
    p.out_proj[mod] =
        store.create(mp + ".out.w", channels, channels, Init::Zeros, rng);
  }
  return p;
}

template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> global_cross_forward(
    const TensorPtr<T>& lang_tokens, const TensorPtr<T>& vis_tokens,
    const GlobalCrossParams<T>& p) {
  auto m_l = projected_attention(lang_tokens, vis_tokens, vis_tokens,
                                 p.cross[kLang]);
  auto m_v = projected_attention(vis_tokens, lang_tokens, lang_tokens,
                                 p.cross[kVis]);
  return {add(lang_tokens, matmul(m_l, p.out_proj[kLang])),
          add(vis_tokens, matmul(m_v, p.out_proj[kVis]))};
}

}  // namespace pgvl
