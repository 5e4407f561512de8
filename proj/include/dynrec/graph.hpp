// Sliding temporal window graph over video frames.
//
// Every frame t opens a window over frames [t, t + window]; within it, t is
// paired with the frames at strided gaps g in {1, 1 + stride, 1 + 2*stride,
// ...} up to `window`. Gap 1 is always present, so the graph is connected and
// every adjacent pair (t, t+1) is an edge. Pairs are deduplicated and stored
// once in canonical (min, max) order.
//
// Edge count formula: with gap set G = {1, 1+stride, 1+2*stride, ...} ∩
// [1, window], the canonical edge count is sum over g in G of
// (num_frames - g), and `pair_count_both_directions` is twice that: the
// cardinality of the union of the per-window ordered-pair sets
// {(a, b) | a != b}.
#pragma once

#include <algorithm>
#include <stdexcept>
#include <utility>
#include <vector>

namespace dynrec {

// Directed frame pair (first -> second).
using Edge = std::pair<int, int>;

struct VideoGraph {
  int num_frames = 0;
  int window = 0;
  int stride = 1;
  // Canonical edges: one per unordered frame pair, as (min, max), sorted.
  std::vector<Edge> edges;

  // Frame pairs counted in both orientations (see header comment).
  long long pair_count_both_directions() const {
    return 2LL * static_cast<long long>(edges.size());
  }

  bool has_edge(int a, int b) const {
    Edge e{std::min(a, b), std::max(a, b)};
    return std::binary_search(edges.begin(), edges.end(), e);
  }
};

inline VideoGraph build_window_graph(int num_frames, int window, int stride) {
  if (num_frames < 2)
    throw std::invalid_argument("build_window_graph: need at least 2 frames");
  if (window < 1 || window >= num_frames)
    throw std::invalid_argument(
        "build_window_graph: require 1 <= window < num_frames");
  if (stride < 1)
    throw std::invalid_argument("build_window_graph: stride must be >= 1");

  VideoGraph g;
  g.num_frames = num_frames;
  g.window = window;
  g.stride = stride;
  for (int a = 0; a < num_frames; ++a)
    for (int gap = 1; gap <= window && a + gap < num_frames; gap += stride)
      g.edges.emplace_back(a, a + gap);
  std::sort(g.edges.begin(), g.edges.end());
  return g;
}

// Closed-form evaluation of the count formula in the header comment.
inline long long window_graph_pair_count(int num_frames, int window,
                                         int stride) {
  long long total = 0;
  for (int gap = 1; gap <= window && gap < num_frames; gap += stride)
    total += num_frames - gap;
  return 2 * total;
}

}  // namespace dynrec
