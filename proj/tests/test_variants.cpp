#include <doctest.h>

#include <random>

#include "pgvl/variants.hpp"

using namespace pgvl;

namespace {

TensorPtr<double> randn(std::mt19937_64& rng, int64_t r, int64_t c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> d((size_t)(r * c));
  for (auto& v : d) v = nd(rng);
  return make_tensor<double>(r, c, std::move(d));
}

}  // namespace

TEST_CASE("map_to_spaces shapes") {
  std::mt19937_64 rng(1);
  ParamStore<double> store;
  auto spec = init_variant_spec(store, "v", 16, {16}, {2}, rng);
  auto tokens = randn(rng, 5, 16);
  auto spaces = map_to_spaces(tokens, spec, kLang);
  CHECK(spaces.size() == 1);
  CHECK(spaces[0]->rows == 5);
  CHECK(spaces[0]->cols == 16);

  ParamStore<double> store2;
  auto spec2 = init_variant_spec(store2, "v", 16, {16, 8}, {2}, rng);
  auto spaces2 = map_to_spaces(tokens, spec2, kVis);
  CHECK(spaces2.size() == 2);
  CHECK(spaces2[0]->cols == 16);
  CHECK(spaces2[1]->cols == 8);
  for (auto& s : spaces2) CHECK(s->rows == 5);

  CHECK_THROWS_AS(map_to_spaces(randn(rng, 5, 8), spec, kLang), ShapeError);
  CHECK_THROWS_AS(init_variant_spec(store2, "w", 16, {6}, {4}, rng),
                  ConfigError);  // 6 not divisible by 4
}

TEST_CASE("variants_forward identity at init and shape contract") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dim_pick(0, 3);
  const int dims[] = {8, 16, 24, 32};
  for (int trial = 0; trial < 6; ++trial) {
    int t = 1 + (int)(rng() % 3);
    std::vector<int> d;
    for (int i = 0; i < t; ++i) d.push_back(dims[dim_pick(rng)]);
    ParamStore<double> store;
    auto spec = init_variant_spec(store, "v", 16, d, {2, 2}, rng);
    auto lang = randn(rng, 4, 16);
    auto vis = randn(rng, 7, 16);
    auto res = variants_forward(lang, vis, spec);
    CHECK(res.lang->rows == 4);
    CHECK(res.lang->cols == 16);
    CHECK(res.vis->rows == 7);
    CHECK(res.vis->cols == 16);
    double dev = 0;
    for (size_t i = 0; i < lang->data.size(); ++i)
      dev = std::max(dev, std::abs(res.lang->data[i] - lang->data[i]));
    for (size_t i = 0; i < vis->data.size(); ++i)
      dev = std::max(dev, std::abs(res.vis->data[i] - vis->data[i]));
    CHECK(dev == 0.0);
  }
}

TEST_CASE("pre-projection concat width is the sum of space dims") {
  std::mt19937_64 rng(3);
  ParamStore<double> store;
  auto spec = init_variant_spec(store, "v", 32, {32, 16}, {2}, rng);
  auto res = variants_forward(randn(rng, 3, 32), randn(rng, 5, 32), spec);
  int64_t total = 0;
  for (auto& s : res.space_vis) total += s->cols;
  CHECK(total == 48);
  CHECK(spec.out_w[kVis]->rows == 48);
}

TEST_CASE("single space at encoder width equals plain fusion plus residual") {
  std::mt19937_64 rng(4);
  ParamStore<double> store;
  auto spec = init_variant_spec(store, "v", 16, {16}, {2}, rng);
  // identity input mapping, identity-composition output projection
  for (int mod = 0; mod < 2; ++mod) {
    std::fill(spec.map_w[0][mod]->data.begin(), spec.map_w[0][mod]->data.end(),
              0.0);
    for (int i = 0; i < 16; ++i) spec.map_w[0][mod]->data[i * 16 + i] = 1.0;
    std::fill(spec.out_w[mod]->data.begin(), spec.out_w[mod]->data.end(), 0.0);
    for (int i = 0; i < 16; ++i) spec.out_w[mod]->data[i * 16 + i] = 1.0;
  }
  // give the inner fusion a non-trivial output projection
  std::normal_distribution<double> nd(0.0, 0.1);
  for (int mod = 0; mod < 2; ++mod)
    for (auto& v : spec.fusion[0].out_proj[mod]->data) v = nd(rng);

  auto lang = randn(rng, 4, 16);
  auto vis = randn(rng, 6, 16);
  auto res = variants_forward(lang, vis, spec);
  auto plain = pgvl_forward(lang, vis, spec.graphs[0], spec.fusion[0]);
  // variants output = input + (plain fusion output), since the inner pass
  // already carries its own residual
  for (size_t i = 0; i < lang->data.size(); ++i)
    CHECK(res.lang->data[i] ==
          doctest::Approx(lang->data[i] + plain.lang->data[i]).epsilon(1e-12));
  for (size_t i = 0; i < vis->data.size(); ++i)
    CHECK(res.vis->data[i] ==
          doctest::Approx(vis->data[i] + plain.vis->data[i]).epsilon(1e-12));
}

TEST_CASE("per-space independence before projection") {
  std::mt19937_64 rng(5);
  ParamStore<double> store;
  auto spec = init_variant_spec(store, "v", 16, {16, 8}, {2}, rng);
  auto lang = randn(rng, 4, 16);
  auto vis = randn(rng, 5, 16);
  auto base = variants_forward(lang, vis, spec);
  // zero space 2's input mapping: only its pre-projection block changes
  std::fill(spec.map_w[1][kLang]->data.begin(), spec.map_w[1][kLang]->data.end(), 0.0);
  std::fill(spec.map_w[1][kVis]->data.begin(), spec.map_w[1][kVis]->data.end(), 0.0);
  auto zeroed = variants_forward(lang, vis, spec);
  CHECK(base.space_lang[0]->data == zeroed.space_lang[0]->data);
  CHECK(base.space_vis[0]->data == zeroed.space_vis[0]->data);
  bool changed = base.space_vis[1]->data != zeroed.space_vis[1]->data;
  CHECK(changed);
}
