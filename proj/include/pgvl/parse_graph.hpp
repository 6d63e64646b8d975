// Channel-wise hierarchical decomposition of a token matrix.
//
// A decomposition spec [g_n, ..., g_1] turns a C-channel matrix into a tree
// whose level-k nodes carry C / (g_n * ... * g_{k+1}) channels each. Leaves
// sit at level 0, the root at level n. The tree itself carries no feature
// data; nodes record channel spans into the root matrix.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pgvl {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DecompositionSpec {
  std::vector<int> branching;  // [g_n, ..., g_1]
  int root_channels = 0;       // C

  int levels() const { return (int)branching.size(); }  // n
  // g_k for k in 1..n; branching[0] is g_n
  int g(int k) const { return branching[(int)branching.size() - k]; }
};

struct NodeRecord {
  int level = 0;           // 0 = leaf level, n = root
  int index_in_level = 0;  // 1-based, left to right
  int parent = -1;         // node id, -1 for root
  std::vector<int> children;
  int64_t span_begin = 0;  // [begin, end) into the root's channels
  int64_t span_end = 0;

  int64_t channels() const { return span_end - span_begin; }
};

struct ParseGraph {
  DecompositionSpec spec;
  std::vector<NodeRecord> nodes;  // level-major, root first, index ascending

  int levels() const { return spec.levels() + 1; }
  int root_id() const { return 0; }
  // channel width of any node at level k
  int64_t level_channels(int k) const;
  std::vector<int> nodes_at_level(int k) const;
};

ParseGraph build_parse_graph(const DecompositionSpec& spec);

// Groups of level-k node ids sharing a parent, ordered by parent index,
// members ordered by index. Valid for k in 0..n-1.
std::vector<std::vector<int>> sibling_groups(const ParseGraph& graph, int k);

// Stable text rendering of the tree, one node per line.
std::string format_parse_graph(const ParseGraph& graph);

}  // namespace pgvl
