// Multi-semantic-space fusion: map both token sets into t channel widths,
// run one fusion pass per space, concatenate the per-space results along the
// channel axis and project back to the encoder width, residual on top.
#pragma once

#include <vector>

#include "pgvl/fusion.hpp"

namespace pgvl {

template <typename T>
struct VariantSpec {
  int64_t encoder_channels = 0;
  std::vector<int> space_dims;          // D = [d_1, ..., d_t]
  std::vector<int> branching;           // shared G
  std::vector<ParseGraph> graphs;       // one per space
  std::vector<FusionParams<T>> fusion;  // one per space
  // per space, per modality: encoder width -> d_i
  std::vector<std::array<TensorPtr<T>, 2>> map_w, map_b;
  // sum(d_i) -> encoder width, zero-initialized
  std::array<TensorPtr<T>, 2> out_w;
};

template <typename T>
VariantSpec<T> init_variant_spec(ParamStore<T>& store, const std::string& prefix,
                                 int64_t encoder_channels,
                                 const std::vector<int>& space_dims,
                                 const std::vector<int>& branching,
                                 std::mt19937_64& rng) {
  if (space_dims.empty())
    throw ConfigError("variants: D must contain at least one space");
  VariantSpec<T> spec;
  spec.encoder_channels = encoder_channels;
  spec.space_dims = space_dims;
  spec.branching = branching;
  int64_t total = 0;
  for (size_t i = 0; i < space_dims.size(); ++i) {
    DecompositionSpec ds{branching, space_dims[i]};
    spec.graphs.push_back(build_parse_graph(ds));
    const std::string sp = prefix + ".space" + std::to_string(i + 1);
    spec.fusion.push_back(init_fusion_params(store, sp, spec.graphs.back(), rng));
    std::array<TensorPtr<T>, 2> w, b;
    for (int mod = 0; mod < 2; ++mod) {
      const std::string mp = sp + ".map." + modality_tag(mod);
      w[mod] = store.create(mp + ".w", encoder_channels, space_dims[i],
                            Init::ScaledNormal, rng);
      b[mod] = store.create(mp + ".b", 1, space_dims[i], Init::Zeros, rng);
    }
    spec.map_w.push_back(w);
    spec.map_b.push_back(b);
    total += space_dims[i];
  }
  for (int mod = 0; mod < 2; ++mod) {
    spec.out_w[mod] =
        store.create(prefix + ".out." + std::string(modality_tag(mod)) + ".w",
                     total, encoder_channels, Init::Zeros, rng);
  }
  return spec;
}

template <typename T>
std::vector<TensorPtr<T>> map_to_spaces(const TensorPtr<T>& tokens,
                                        const VariantSpec<T>& spec,
                                        Modality mod) {
  if (tokens->cols != spec.encoder_channels)
    throw ShapeError("map_to_spaces: token width does not match encoder");
  std::vector<TensorPtr<T>> out;
  for (size_t i = 0; i < spec.space_dims.size(); ++i)
    out.push_back(linear(tokens, spec.map_w[i][mod], spec.map_b[i][mod]));
  return out;
}

template <typename T>
struct VariantsResult {
  TensorPtr<T> lang, vis;
  // per-space fusion outputs, pre-concat (kept for the independence tests)
  std::vector<TensorPtr<T>> space_lang, space_vis;
  std::optional<FusionTrace<T>> trace;  // from the first space
};

template <typename T>
VariantsResult<T> variants_forward(const TensorPtr<T>& lang_tokens,
                                   const TensorPtr<T>& vis_tokens,
                                   const VariantSpec<T>& spec,
                                   const FusionOptions& opts = {}) {
  VariantsResult<T> res;
  auto lang_spaces = map_to_spaces(lang_tokens, spec, kLang);
  auto vis_spaces = map_to_spaces(vis_tokens, spec, kVis);
  for (size_t i = 0; i < spec.space_dims.size(); ++i) {
    FusionOptions o = opts;
    o.trace = opts.trace && i == 0;
    auto r = pgvl_forward(lang_spaces[i], vis_spaces[i], spec.graphs[i],
                          spec.fusion[i], o);
    res.space_lang.push_back(r.lang);
    res.space_vis.push_back(r.vis);
    if (o.trace) res.trace = std::move(r.trace);
  }
  auto cat_l = res.space_lang.size() == 1 ? res.space_lang[0]
                                          : concat(res.space_lang, Axis::Cols);
  auto cat_v = res.space_vis.size() == 1 ? res.space_vis[0]
                                         : concat(res.space_vis, Axis::Cols);
  res.lang = add(lang_tokens, matmul(cat_l, spec.out_w[kLang]));
  res.vis = add(vis_tokens, matmul(cat_v, spec.out_w[kVis]));
  return res;
}

}  // namespace pgvl
