#include "pgvl/parse_graph.hpp"

#include <sstream>

namespace pgvl {

int64_t ParseGraph::level_channels(int k) const {
  int64_t c = spec.root_channels;
  for (int j = spec.levels(); j > k; --j) c /= spec.g(j);
  return c;
}

std::vector<int> ParseGraph::nodes_at_level(int k) const {
  std::vector<int> out;
  for (int i = 0; i < (int)nodes.size(); ++i)
    if (nodes[i].level == k) out.push_back(i);
  return out;
}

ParseGraph build_parse_graph(const DecompositionSpec& spec) {
  int n = spec.levels();
  if (n < 1) throw ConfigError("decomposition: branching must have length >= 1");
  if (spec.root_channels <= 0)
    throw ConfigError("decomposition: root channel count must be positive");
  for (int k = n; k >= 1; --k) {
    if (spec.g(k) < 1)
      throw ConfigError("decomposition: g at level " + std::to_string(k) +
                        " must be >= 1");
  }
  // every prefix product must divide C
  int64_t c = spec.root_channels;
  for (int k = n; k >= 1; --k) {
    if (c % spec.g(k) != 0)
      throw ConfigError("decomposition: channel count " + std::to_string(c) +
                        " at level " + std::to_string(k) +
                        " is not divisible by g=" + std::to_string(spec.g(k)));
    c /= spec.g(k);
  }

  ParseGraph graph;
  graph.spec = spec;
  NodeRecord root;
  root.level = n;
  root.index_in_level = 1;
  root.span_begin = 0;
  root.span_end = spec.root_channels;
  graph.nodes.push_back(root);

  std::vector<int> prev{0};  // ids at the level just built
  for (int k = n; k >= 1; --k) {
    std::vector<int> cur;
    int idx = 1;
    for (int pid : prev) {
      const int g = spec.g(k);
      int64_t width = graph.nodes[pid].channels() / g;
      for (int ci = 0; ci < g; ++ci) {
        NodeRecord node;
        node.level = k - 1;
        node.index_in_level = idx++;
        node.parent = pid;
        node.span_begin = graph.nodes[pid].span_begin + ci * width;
        node.span_end = node.span_begin + width;
        int id = (int)graph.nodes.size();
        graph.nodes.push_back(node);
        graph.nodes[pid].children.push_back(id);
        cur.push_back(id);
      }
    }
    prev = cur;
  }
  return graph;
}

std::vector<std::vector<int>> sibling_groups(const ParseGraph& graph, int k) {
  int n = graph.spec.levels();
  if (k < 0 || k > n - 1)
    throw ConfigError("sibling_groups: level " + std::to_string(k) +
                      " out of range [0," + std::to_string(n - 1) + "]");
  std::vector<std::vector<int>> groups;
  for (int pid : graph.nodes_at_level(k + 1)) groups.push_back(graph.nodes[pid].children);
  return groups;
}

std::string format_parse_graph(const ParseGraph& graph) {
  std::ostringstream os;
  for (int k = graph.spec.levels(); k >= 0; --k) {
    for (int id : graph.nodes_at_level(k)) {
      const NodeRecord& nd = graph.nodes[id];
      os << "level " << nd.level << " node " << nd.index_in_level
         << " channels [" << nd.span_begin << "," << nd.span_end << ")";
      if (nd.parent >= 0)
        os << " parent " << graph.nodes[nd.parent].index_in_level << "@"
           << graph.nodes[nd.parent].level;
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace pgvl
