#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "phylotopo/bitset.hpp"
#include "phylotopo/error.hpp"

namespace phylotopo {

using NodeId = std::int32_t;
using EdgeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

/// Ordered list of unique taxon names with a name -> index lookup.
class TaxaSet {
 public:
  explicit TaxaSet(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw ValidationError("empty taxon set");
    for (std::size_t i = 0; i < names_.size(); ++i) {
      const auto& n = names_[i];
      if (n.empty()) throw ValidationError("empty taxon name");
      if (n.find_first_of("(),:;") != std::string::npos)
        throw ValidationError("taxon name contains a Newick metacharacter: " + n);
      if (!index_.emplace(n, static_cast<int>(i)).second)
        throw ValidationError("duplicate taxon name: " + n);
    }
  }

  /// Names t1..tN, zero padded so that lexical and index order agree.
  static std::shared_ptr<const TaxaSet> numbered(int n) {
    std::vector<std::string> names;
    const int width = static_cast<int>(std::to_string(n).size());
    for (int i = 1; i <= n; ++i) {
      std::string s = std::to_string(i);
      names.push_back("t" + std::string(static_cast<std::size_t>(width) - s.size(), '0') + s);
    }
    return std::make_shared<const TaxaSet>(std::move(names));
  }

  int size() const noexcept { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::optional<int> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  int index_of(const std::string& name) const {
    auto i = find(name);
    if (!i) throw ValidationError("unknown taxon: " + name);
    return *i;
  }

  friend bool operator==(const TaxaSet& a, const TaxaSet& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

using TaxaPtr = std::shared_ptr<const TaxaSet>;

/// Postorder / preorder node sequences and parent links relative to a root.
struct TraversalOrder {
  NodeId root = kNoNode;
  std::vector<NodeId> postorder;
  std::vector<NodeId> preorder;
  std::vector<NodeId> parent;  // kNoNode for the root
  std::vector<int> parent_rank;  // preorder position of parent(preorder[i]), -1 for the root
};

/// Immutable arena tree. Leaves carry a taxon index, interior nodes none.
///
/// Every non-root node u owns the edge (parent(u), u); edge ids enumerate
/// those nodes in increasing id order. Branch lengths live outside the
/// topology in vectors indexed by EdgeId.
class TreeTopology {
 public:
  TreeTopology() = default;

  /// Bifurcating tree: rooted trees need a degree-2 root, unrooted trees an
  /// interior root of degree 3.
  TreeTopology(TaxaPtr taxa, std::vector<std::vector<NodeId>> adjacency, std::vector<int> taxon_of_node,
               bool rooted, NodeId root)
      : TreeTopology(std::move(taxa), std::move(adjacency), std::move(taxon_of_node), rooted, root, true) {}

  /// Tree with arbitrary interior degrees (>= 2). Only the embedding solvers accept these.
  static TreeTopology general(TaxaPtr taxa, std::vector<std::vector<NodeId>> adjacency,
                              std::vector<int> taxon_of_node, NodeId root) {
    return TreeTopology(std::move(taxa), std::move(adjacency), std::move(taxon_of_node), false, root, false);
  }

  const TaxaPtr& taxa() const noexcept { return taxa_; }
  int num_taxa() const noexcept { return taxa_->size(); }
  int num_nodes() const noexcept { return static_cast<int>(adj_.size()); }
  int num_edges() const noexcept { return static_cast<int>(edge_child_.size()); }
  int num_interior() const noexcept { return num_nodes() - num_taxa(); }
  bool rooted() const noexcept { return rooted_; }
  bool bifurcating() const noexcept { return bifurcating_; }
  NodeId root() const noexcept { return root_; }

  const std::vector<NodeId>& neighbors(NodeId u) const { return adj_[static_cast<std::size_t>(u)]; }
  int degree(NodeId u) const { return static_cast<int>(neighbors(u).size()); }
  bool is_leaf(NodeId u) const { return taxon_[static_cast<std::size_t>(u)] >= 0; }
  /// Taxon index of a leaf, -1 for interior nodes.
  int taxon(NodeId u) const { return taxon_[static_cast<std::size_t>(u)]; }
  NodeId leaf_of_taxon(int k) const { return leaf_of_taxon_[static_cast<std::size_t>(k)]; }

  const TraversalOrder& order() const noexcept { return order_; }
  NodeId parent(NodeId u) const { return order_.parent[static_cast<std::size_t>(u)]; }

  NodeId edge_child(EdgeId e) const { return edge_child_[static_cast<std::size_t>(e)]; }
  NodeId edge_parent(EdgeId e) const { return parent(edge_child(e)); }
  /// Edge leading from u to its parent, -1 for the root.
  EdgeId edge_above(NodeId u) const { return edge_of_node_[static_cast<std::size_t>(u)]; }
  /// Edge joining two adjacent nodes.
  EdgeId edge_between(NodeId u, NodeId v) const {
    if (parent(v) == u) return edge_above(v);
    if (parent(u) == v) return edge_above(u);
    throw ValidationError("nodes are not adjacent");
  }

  /// Children of u relative to the stored root.
  std::vector<NodeId> children(NodeId u) const {
    std::vector<NodeId> ch;
    for (NodeId v : neighbors(u))
      if (v != parent(u)) ch.push_back(v);
    return ch;
  }

  /// Same topology with node ids renamed: node u becomes perm[u].
  TreeTopology relabeled(const std::vector<NodeId>& perm) const {
    const auto n = adj_.size();
    if (perm.size() != n) throw ValidationError("permutation size mismatch");
    std::vector<std::vector<NodeId>> adj(n);
    std::vector<int> tax(n, -1);
    for (std::size_t u = 0; u < n; ++u) {
      auto nu = static_cast<std::size_t>(perm[u]);
      for (NodeId v : adj_[u]) adj[nu].push_back(perm[static_cast<std::size_t>(v)]);
      tax[nu] = taxon_[u];
    }
    return TreeTopology(taxa_, std::move(adj), std::move(tax), rooted_, perm[static_cast<std::size_t>(root_)],
                        bifurcating_);
  }

  /// Same tree with the stored root moved to another interior node.
  TreeTopology rerooted(NodeId new_root) const {
    return TreeTopology(taxa_, adj_, taxon_, rooted_, new_root, bifurcating_);
  }

  /// Drops the degree-2 root of a rooted tree. Unrooted trees are returned as is.
  TreeTopology unrooted() const {
    if (!rooted_) return *this;
    const auto r = root_;
    const NodeId a = adj_[static_cast<std::size_t>(r)][0];
    const NodeId b = adj_[static_cast<std::size_t>(r)][1];
    auto remap = [r](NodeId u) { return u > r ? u - 1 : u; };
    std::vector<std::vector<NodeId>> adj;
    std::vector<int> tax;
    for (NodeId u = 0; u < num_nodes(); ++u) {
      if (u == r) continue;
      std::vector<NodeId> nb;
      for (NodeId v : neighbors(u)) {
        if (v == r) nb.push_back(remap(u == a ? b : a));
        else nb.push_back(remap(v));
      }
      adj.push_back(std::move(nb));
      tax.push_back(taxon(u));
    }
    NodeId new_root = !is_leaf(a) ? remap(a) : remap(b);
    return TreeTopology(taxa_, std::move(adj), std::move(tax), false, new_root, bifurcating_);
  }

  /// Rooted tree obtained by placing a new degree-2 root in the middle of edge e.
  TreeTopology rooted_on_edge(EdgeId e) const {
    if (rooted_) throw ValidationError("tree is already rooted");
    const NodeId c = edge_child(e), p = edge_parent(e);
    auto adj = adj_;
    auto tax = taxon_;
    const auto r = static_cast<NodeId>(adj.size());
    std::replace(adj[static_cast<std::size_t>(c)].begin(), adj[static_cast<std::size_t>(c)].end(), p, r);
    std::replace(adj[static_cast<std::size_t>(p)].begin(), adj[static_cast<std::size_t>(p)].end(), c, r);
    adj.push_back({p, c});
    tax.push_back(-1);
    return TreeTopology(taxa_, std::move(adj), std::move(tax), true, r, bifurcating_);
  }

 private:
  TreeTopology(TaxaPtr taxa, std::vector<std::vector<NodeId>> adjacency, std::vector<int> taxon_of_node,
               bool rooted, NodeId root, bool bifurcating)
      : taxa_(std::move(taxa)),
        adj_(std::move(adjacency)),
        taxon_(std::move(taxon_of_node)),
        rooted_(rooted),
        bifurcating_(bifurcating),
        root_(root) {
    validate();
    build_edges();
  }

  void validate() {
    if (!taxa_) throw ValidationError("tree without taxon set");
    const auto n = static_cast<NodeId>(adj_.size());
    const int ntax = taxa_->size();
    if (ntax < 3) throw ValidationError("a tree needs at least 3 taxa");
    if (taxon_.size() != adj_.size()) throw ValidationError("taxon map size mismatch");
    if (root_ < 0 || root_ >= n) throw ValidationError("root id out of range");
    leaf_of_taxon_.assign(static_cast<std::size_t>(ntax), kNoNode);
    std::size_t degree_sum = 0;
    for (NodeId u = 0; u < n; ++u) {
      const auto& nb = adj_[static_cast<std::size_t>(u)];
      degree_sum += nb.size();
      for (NodeId v : nb)
        if (v < 0 || v >= n || v == u) throw ValidationError("bad neighbor id");
      const int t = taxon_[static_cast<std::size_t>(u)];
      if (t >= 0) {
        if (t >= ntax) throw ValidationError("taxon index out of range");
        if (nb.size() != 1) throw ValidationError("leaf nodes must have degree 1");
        if (leaf_of_taxon_[static_cast<std::size_t>(t)] != kNoNode)
          throw ValidationError("taxon appears on more than one leaf: " + taxa_->name(t));
        leaf_of_taxon_[static_cast<std::size_t>(t)] = u;
      } else if (bifurcating_) {
        const auto want = (rooted_ && u == root_) ? 2U : 3U;
        if (nb.size() != want) throw ValidationError("tree is not bifurcating");
      } else if (nb.size() < 2) {
        throw ValidationError("interior node of degree < 2");
      }
    }
    for (int k = 0; k < ntax; ++k)
      if (leaf_of_taxon_[static_cast<std::size_t>(k)] == kNoNode)
        throw ValidationError("taxon missing from tree: " + taxa_->name(k));
    if (degree_sum != 2 * (adj_.size() - 1)) throw ValidationError("graph is not a tree (edge count)");
    if (taxon_[static_cast<std::size_t>(root_)] >= 0) throw ValidationError("root must be an interior node");
    // Symmetry of adjacency.
    for (NodeId u = 0; u < n; ++u)
      for (NodeId v : adj_[static_cast<std::size_t>(u)]) {
        const auto& back = adj_[static_cast<std::size_t>(v)];
        if (std::find(back.begin(), back.end(), u) == back.end())
          throw ValidationError("adjacency is not symmetric");
      }
  }

  void build_edges() {
    const auto n = adj_.size();
    order_.root = root_;
    order_.parent.assign(n, kNoNode);
    order_.preorder.clear();
    order_.preorder.reserve(n);
    std::vector<char> seen(n, 0);
    std::vector<NodeId> stack{root_};
    seen[static_cast<std::size_t>(root_)] = 1;
    while (!stack.empty()) {
      NodeId u = stack.back();
      stack.pop_back();
      order_.preorder.push_back(u);
      const auto& nb = adj_[static_cast<std::size_t>(u)];
      for (auto it = nb.rbegin(); it != nb.rend(); ++it) {
        if (seen[static_cast<std::size_t>(*it)]) continue;
        seen[static_cast<std::size_t>(*it)] = 1;
        order_.parent[static_cast<std::size_t>(*it)] = u;
        stack.push_back(*it);
      }
    }
    if (order_.preorder.size() != n) throw ValidationError("graph is not connected");
    order_.postorder = postorder_from(order_.preorder, order_.parent);
    std::vector<int> rank(n);
    for (std::size_t i = 0; i < n; ++i) rank[static_cast<std::size_t>(order_.preorder[i])] = static_cast<int>(i);
    order_.parent_rank.assign(n, -1);
    for (std::size_t i = 1; i < n; ++i)
      order_.parent_rank[i] = rank[static_cast<std::size_t>(order_.parent[static_cast<std::size_t>(order_.preorder[i])])];
    edge_of_node_.assign(n, -1);
    edge_child_.clear();
    for (NodeId u = 0; u < static_cast<NodeId>(n); ++u) {
      if (u == root_) continue;
      edge_of_node_[static_cast<std::size_t>(u)] = static_cast<EdgeId>(edge_child_.size());
      edge_child_.push_back(u);
    }
  }

  // Children-before-parent order whose leaf sequence follows the preorder.
  static std::vector<NodeId> postorder_from(const std::vector<NodeId>& pre, const std::vector<NodeId>& parent) {
    // Reverse preorder visits children before parents but reverses sibling order;
    // an explicit two-stack pass keeps left-to-right order.
    const auto n = pre.size();
    std::vector<std::vector<NodeId>> kids(n);
    for (NodeId u : pre)
      if (parent[static_cast<std::size_t>(u)] != kNoNode) kids[static_cast<std::size_t>(parent[static_cast<std::size_t>(u)])].push_back(u);
    std::vector<NodeId> post;
    post.reserve(n);
    std::vector<std::pair<NodeId, std::size_t>> stack{{pre.front(), 0}};
    while (!stack.empty()) {
      auto& [u, i] = stack.back();
      const auto& ch = kids[static_cast<std::size_t>(u)];
      if (i < ch.size()) {
        NodeId c = ch[i++];
        stack.emplace_back(c, 0);
      } else {
        post.push_back(u);
        stack.pop_back();
      }
    }
    return post;
  }

  TaxaPtr taxa_;
  std::vector<std::vector<NodeId>> adj_;
  std::vector<int> taxon_;
  bool rooted_ = false;
  bool bifurcating_ = true;
  NodeId root_ = kNoNode;
  std::vector<NodeId> leaf_of_taxon_;
  TraversalOrder order_;
  std::vector<EdgeId> edge_of_node_;
  std::vector<NodeId> edge_child_;
};

/// Traversal of the tree from an arbitrary interior node.
inline TraversalOrder traversal(const TreeTopology& tree, NodeId root) {
  if (root < 0 || root >= tree.num_nodes()) throw ValidationError("traversal root id out of range");
  if (tree.is_leaf(root)) throw ValidationError("traversal root must be an interior node");
  if (root == tree.root()) return tree.order();
  return tree.rerooted(root).order();
}

/// Taxa below each node relative to the stored root (node id indexed).
inline std::vector<Bitset> clades_below(const TreeTopology& tree) {
  const auto ntax = static_cast<std::size_t>(tree.num_taxa());
  std::vector<Bitset> below(static_cast<std::size_t>(tree.num_nodes()), Bitset(ntax));
  for (NodeId u : tree.order().postorder) {
    auto& b = below[static_cast<std::size_t>(u)];
    if (tree.is_leaf(u)) {
      b.set(static_cast<std::size_t>(tree.taxon(u)));
      continue;
    }
    for (NodeId c : tree.neighbors(u))
      if (c != tree.parent(u)) b |= below[static_cast<std::size_t>(c)];
  }
  return below;
}

/// Canonical form of a bipartition: the side not containing taxon 0.
inline Bitset canonical_split(const Bitset& side) { return side.test(0) ? ~side : side; }

/// One canonical bipartition per edge, indexed by EdgeId.
inline std::vector<Bitset> edge_splits(const TreeTopology& tree) {
  auto below = clades_below(tree);
  std::vector<Bitset> out;
  out.reserve(static_cast<std::size_t>(tree.num_edges()));
  for (EdgeId e = 0; e < tree.num_edges(); ++e)
    out.push_back(canonical_split(below[static_cast<std::size_t>(tree.edge_child(e))]));
  return out;
}

/// Sorted set of canonical splits of an unrooted tree (2N-3 of them).
inline std::vector<Bitset> splits_of(const TreeTopology& tree) {
  if (tree.rooted()) throw ValidationError("splits_of expects an unrooted tree");
  auto s = edge_splits(tree);
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace phylotopo
