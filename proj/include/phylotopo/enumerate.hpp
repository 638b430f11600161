#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "phylotopo/error.hpp"
#include "phylotopo/tree.hpp"

namespace phylotopo {

/// (2n-5)!! unrooted bifurcating topologies on n >= 3 labelled leaves.
inline std::uint64_t num_unrooted_topologies(int n) {
  if (n < 3) throw ValidationError("need at least 3 taxa");
  std::uint64_t c = 1;
  for (int k = 3; k <= 2 * n - 5; k += 2) c *= static_cast<std::uint64_t>(k);
  return c;
}

/// log((2n-5)!!), exact summation for any n >= 3.
inline double log_num_unrooted_topologies(int n) {
  if (n < 3) throw ValidationError("need at least 3 taxa");
  double s = 0.0;
  for (int k = 3; k <= 2 * n - 5; k += 2) s += std::log(static_cast<double>(k));
  return s;
}

namespace detail {

using EdgeList = std::vector<std::pair<NodeId, NodeId>>;

// Leaves are nodes 0..n-1, interior nodes n..2n-3 in insertion order; the
// first interior node is the designated root.
inline TreeTopology tree_from_edges(const TaxaPtr& taxa, const EdgeList& edges) {
  const int n = taxa->size();
  std::vector<std::vector<NodeId>> adj(static_cast<std::size_t>(2 * n - 2));
  for (auto [a, b] : edges) {
    adj[static_cast<std::size_t>(a)].push_back(b);
    adj[static_cast<std::size_t>(b)].push_back(a);
  }
  std::vector<int> tax(adj.size(), -1);
  for (int k = 0; k < n; ++k) tax[static_cast<std::size_t>(k)] = k;
  return TreeTopology(taxa, std::move(adj), std::move(tax), false, n);
}

inline EdgeList star3(int n) { return {{n, 0}, {n, 1}, {n, 2}}; }

inline void insert_taxon(EdgeList& edges, std::size_t edge_index, int taxon, int n) {
  const NodeId m = n + taxon - 2;
  auto [a, b] = edges[edge_index];
  edges[edge_index] = {a, m};
  edges.emplace_back(m, b);
  edges.emplace_back(m, taxon);
}

}  // namespace detail

/// Calls `visit` once per unrooted bifurcating topology on the taxon set, in
/// stepwise-insertion order (taxon k+1 placed on each edge of each k-taxon tree).
inline void for_each_unrooted(const TaxaPtr& taxa, const std::function<void(const TreeTopology&)>& visit) {
  const int n = taxa->size();
  if (n < 3 || n > 10) throw ValidationError("tree enumeration supports 3 to 10 taxa");
  detail::EdgeList edges = detail::star3(n);
  auto recurse = [&](auto&& self, int next) -> void {
    if (next == n) {
      visit(detail::tree_from_edges(taxa, edges));
      return;
    }
    const std::size_t m = edges.size();
    for (std::size_t i = 0; i < m; ++i) {
      auto saved = edges[i];
      detail::insert_taxon(edges, i, next, n);
      self(self, next + 1);
      edges.resize(m);
      edges[i] = saved;
    }
  };
  recurse(recurse, 3);
}

inline std::vector<TreeTopology> enumerate_unrooted(const TaxaPtr& taxa) {
  std::vector<TreeTopology> out;
  if (taxa->size() >= 3 && taxa->size() <= 10) out.reserve(num_unrooted_topologies(taxa->size()));
  for_each_unrooted(taxa, [&](const TreeTopology& t) { out.push_back(t); });
  return out;
}

/// Uniformly distributed unrooted topology (random stepwise insertion).
template <class Rng>
TreeTopology random_unrooted(const TaxaPtr& taxa, Rng& rng) {
  const int n = taxa->size();
  detail::EdgeList edges = detail::star3(n);
  edges.reserve(static_cast<std::size_t>(2 * n - 3));
  for (int k = 3; k < n; ++k) {
    std::uniform_int_distribution<std::size_t> pick(0, edges.size() - 1);
    detail::insert_taxon(edges, pick(rng), k, n);
  }
  return detail::tree_from_edges(taxa, edges);
}

// The 2(N-3) trees one nearest-neighbour interchange away: for every interior edge (u, v), one
// subtree hanging off u is swapped with either subtree hanging off v.
inline std::vector<TreeTopology> nni_neighbors(const TreeTopology& tree) {
  if (tree.rooted()) throw ValidationError("nni_neighbors expects an unrooted tree");
  std::vector<std::vector<NodeId>> adj;
  std::vector<int> tax;
  for (NodeId u = 0; u < tree.num_nodes(); ++u) adj.push_back(tree.neighbors(u)), tax.push_back(tree.taxon(u));
  std::vector<TreeTopology> out;
  for (EdgeId e = 0; e < tree.num_edges(); ++e) {
    const NodeId u = tree.edge_child(e), v = tree.edge_parent(e);
    if (tree.is_leaf(u) || tree.is_leaf(v)) continue;
    NodeId a = kNoNode;
    for (NodeId x : tree.neighbors(u))
      if (x != v) {
        a = x;
        break;
      }
    for (NodeId c : tree.neighbors(v)) {
      if (c == u) continue;
      auto next = adj;
      auto swap_in = [&](NodeId node, NodeId from, NodeId to) {
        auto& nb = next[static_cast<std::size_t>(node)];
        *std::find(nb.begin(), nb.end(), from) = to;
      };
      swap_in(u, a, c);
      swap_in(v, c, a);
      swap_in(a, u, v);
      swap_in(c, v, u);
      out.emplace_back(tree.taxa(), std::move(next), tax, false, tree.root());
    }
  }
  return out;
}

// Distinct topologies within `radius` interchanges of the tree, the tree itself first.
inline std::vector<TreeTopology> nni_ball(const TreeTopology& tree, int radius) {
  std::vector<TreeTopology> out{tree};
  std::set<std::vector<Bitset>> seen{splits_of(tree)};
  std::size_t frontier = 0;
  for (int r = 0; r < radius; ++r) {
    const std::size_t end = out.size();
    for (std::size_t i = frontier; i < end; ++i)
      for (auto& t : nni_neighbors(out[i]))
        if (seen.insert(splits_of(t)).second) out.push_back(std::move(t));
    frontier = end;
  }
  return out;
}

}  // namespace phylotopo
