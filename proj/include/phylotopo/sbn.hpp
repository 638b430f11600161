#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "phylotopo/bitset.hpp"
#include "phylotopo/enumerate.hpp"
#include "phylotopo/error.hpp"
#include "phylotopo/tree.hpp"

namespace phylotopo {

using Clade = Bitset;

// Unordered pair of disjoint clades, stored with the numerically smaller mask first.
struct Subsplit {
  Clade first, second;

  Subsplit() = default;
  Subsplit(Clade a, Clade b) {
    if (b < a) std::swap(a, b);
    first = std::move(a);
    second = std::move(b);
  }

  Clade clade() const { return first | second; }
  bool valid() const { return !first.none() && !second.none() && !first.intersects(second); }

  friend bool operator==(const Subsplit& a, const Subsplit& b) = default;
  friend bool operator<(const Subsplit& a, const Subsplit& b) {
    if (a.first == b.first) return a.second < b.second;
    return a.first < b.first;
  }
  std::size_t hash() const noexcept { return first.hash() * 31 + second.hash(); }
  std::string to_string() const { return first.to_hex() + "|" + second.to_hex(); }
};

struct SubsplitPair {
  Subsplit parent, child;
  friend bool operator==(const SubsplitPair& a, const SubsplitPair& b) = default;
  friend bool operator<(const SubsplitPair& a, const SubsplitPair& b) {
    if (a.parent == b.parent) return a.child < b.child;
    return a.parent < b.parent;
  }
};

// Split plus the subsplit of one of its sides; indexes branch-length parameters.
struct PrimarySubsplitPair {
  Clade split;
  Subsplit child;
  friend bool operator==(const PrimarySubsplitPair& a, const PrimarySubsplitPair& b) = default;
  friend bool operator<(const PrimarySubsplitPair& a, const PrimarySubsplitPair& b) {
    if (a.split == b.split) return a.child < b.child;
    return a.split < b.split;
  }
};

}  // namespace phylotopo

template <>
struct std::hash<phylotopo::Subsplit> {
  std::size_t operator()(const phylotopo::Subsplit& s) const noexcept { return s.hash(); }
};
template <>
struct std::hash<phylotopo::SubsplitPair> {
  std::size_t operator()(const phylotopo::SubsplitPair& p) const noexcept {
    return p.parent.hash() * 1000003 ^ p.child.hash();
  }
};
template <>
struct std::hash<phylotopo::PrimarySubsplitPair> {
  std::size_t operator()(const phylotopo::PrimarySubsplitPair& p) const noexcept {
    return p.split.hash() * 1000003 ^ p.child.hash();
  }
};

namespace phylotopo {

struct RootedDecomposition {
  Subsplit root;
  std::vector<SubsplitPair> pairs;  // preorder, one per non-singleton child clade
};

inline RootedDecomposition rooted_decomposition(const TreeTopology& tree) {
  if (!tree.rooted() || !tree.bifurcating()) throw ValidationError("rooted_decomposition needs a rooted bifurcating tree");
  auto below = clades_below(tree);
  auto subsplit_at = [&](NodeId u) {
    auto ch = tree.children(u);
    return Subsplit(below[static_cast<std::size_t>(ch[0])], below[static_cast<std::size_t>(ch[1])]);
  };
  RootedDecomposition d;
  d.root = subsplit_at(tree.root());
  for (NodeId u : tree.order().preorder) {
    if (u == tree.root() || tree.is_leaf(u)) continue;
    d.pairs.push_back({subsplit_at(tree.parent(u)), subsplit_at(u)});
  }
  return d;
}

// Rebuilds the rooted tree from its decomposition. Leaves get node ids equal to their taxon index.
inline TreeTopology tree_from_decomposition(const TaxaPtr& taxa, const RootedDecomposition& d) {
  const int n = taxa->size();
  std::unordered_map<Clade, Subsplit> split_of;
  for (const auto& p : d.pairs) {
    if (!p.child.valid()) throw ValidationError("invalid subsplit in decomposition");
    if (!split_of.emplace(p.child.clade(), p.child).second) throw ValidationError("clade split twice in decomposition");
  }
  std::vector<std::vector<NodeId>> adj(static_cast<std::size_t>(n));
  std::vector<int> tax(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) tax[static_cast<std::size_t>(k)] = k;
  auto new_interior = [&] {
    adj.emplace_back();
    tax.push_back(-1);
    return static_cast<NodeId>(adj.size() - 1);
  };
  auto link = [&](NodeId a, NodeId b) {
    adj[static_cast<std::size_t>(a)].push_back(b);
    adj[static_cast<std::size_t>(b)].push_back(a);
  };
  const NodeId root = new_interior();
  std::vector<std::pair<NodeId, Subsplit>> stack{{root, d.root}};
  std::size_t used = 0;
  while (!stack.empty()) {
    auto [u, s] = stack.back();
    stack.pop_back();
    for (const Clade* c : {&s.first, &s.second}) {
      if (c->count() == 1) {
        link(u, static_cast<NodeId>(c->first()));
        continue;
      }
      auto it = split_of.find(*c);
      if (it == split_of.end()) throw ValidationError("decomposition leaves clade " + c->to_hex() + " unresolved");
      ++used;
      NodeId v = new_interior();
      link(u, v);
      stack.push_back({v, it->second});
    }
  }
  if (used != d.pairs.size()) throw ValidationError("decomposition has unused pairs");
  return TreeTopology(taxa, std::move(adj), std::move(tax), true, root);
}

namespace detail {

// Directed-edge view of an unrooted bifurcating tree. Directed edge 2e points from the
// stored parent to the child of edge e and 2e+1 points back.
struct DirectedTree {
  const TreeTopology* tree;
  std::vector<Clade> clade;        // taxa on the head side
  std::vector<NodeId> head, tail;
  std::vector<Subsplit> subsplit;  // split of the head's clade, when the head is interior
  std::vector<std::array<int, 2>> out;  // the two directed edges leaving head(d), away from tail(d)

  explicit DirectedTree(const TreeTopology& t) : tree(&t) {
    if (t.rooted() || !t.bifurcating()) throw ValidationError("expected an unrooted bifurcating tree");
    auto below = clades_below(t);
    const int m = 2 * t.num_edges();
    clade.resize(static_cast<std::size_t>(m));
    head.resize(static_cast<std::size_t>(m));
    tail.resize(static_cast<std::size_t>(m));
    for (EdgeId e = 0; e < t.num_edges(); ++e) {
      const NodeId c = t.edge_child(e), p = t.edge_parent(e);
      const auto i = static_cast<std::size_t>(2 * e);
      clade[i] = below[static_cast<std::size_t>(c)];
      clade[i + 1] = ~clade[i];
      head[i] = c, tail[i] = p;
      head[i + 1] = p, tail[i + 1] = c;
    }
    // Outgoing directed edge for every (node, neighbor) combination.
    auto dir = [&](NodeId from, NodeId to) {
      EdgeId e = t.edge_between(from, to);
      return t.edge_child(e) == to ? 2 * e : 2 * e + 1;
    };
    subsplit.resize(static_cast<std::size_t>(m));
    out.assign(static_cast<std::size_t>(m), {-1, -1});
    for (int d = 0; d < m; ++d) {
      const NodeId h = head[static_cast<std::size_t>(d)];
      if (t.is_leaf(h)) continue;
      int k = 0;
      for (NodeId v : t.neighbors(h))
        if (v != tail[static_cast<std::size_t>(d)]) out[static_cast<std::size_t>(d)][static_cast<std::size_t>(k++)] = dir(h, v);
      subsplit[static_cast<std::size_t>(d)] = Subsplit(clade[static_cast<std::size_t>(out[static_cast<std::size_t>(d)][0])],
                                                       clade[static_cast<std::size_t>(out[static_cast<std::size_t>(d)][1])]);
    }
  }

  bool interior_head(int d) const { return !tree->is_leaf(head[static_cast<std::size_t>(d)]); }
  Subsplit root_subsplit(EdgeId e) const {
    return Subsplit(clade[static_cast<std::size_t>(2 * e)], clade[static_cast<std::size_t>(2 * e + 1)]);
  }

  // Calls f(parent_subsplit_or_nullptr_for_root, child_directed_edge) for every parent-child pair
  // of the tree rooted on edge e.
  template <class F>
  void for_each_pair(EdgeId e, F&& f) const {
    std::vector<int> stack;
    for (int d : {2 * e, 2 * e + 1})
      if (interior_head(d)) {
        f(-1, d);
        stack.push_back(d);
      }
    while (!stack.empty()) {
      int d = stack.back();
      stack.pop_back();
      for (int o : out[static_cast<std::size_t>(d)])
        if (interior_head(o)) {
          f(d, o);
          stack.push_back(o);
        }
    }
  }
};

}  // namespace detail

// Index structures of a subsplit support: CPT entries grouped into softmax rows, plus the
// split and primary-subsplit-pair sets used for branch-length parameters. Indices follow
// sorted key order, so the layout does not depend on the order trees were supplied in.
class SbnSupport {
 public:
  SbnSupport() = default;

  static SbnSupport from_trees(const std::vector<TreeTopology>& trees) {
    if (trees.empty()) throw ValidationError("support needs at least one tree");
    Collector c(trees.front().taxa());
    for (const auto& t : trees) c.add(t);
    return c.finish();
  }

  static SbnSupport from_enumeration(const TaxaPtr& taxa) {
    Collector c(taxa);
    for_each_unrooted(taxa, [&](const TreeTopology& t) { c.add(t); });
    return c.finish();
  }

  // Builds directly from key sets (used when loading checkpoints).
  static SbnSupport from_keys(TaxaPtr taxa, std::vector<Subsplit> roots, std::vector<SubsplitPair> pairs,
                              std::vector<Clade> splits, std::vector<PrimarySubsplitPair> psps) {
    SbnSupport s;
    s.taxa_ = std::move(taxa);
    std::sort(roots.begin(), roots.end());
    std::sort(pairs.begin(), pairs.end());
    std::sort(splits.begin(), splits.end());
    std::sort(psps.begin(), psps.end());
    const auto ntax = static_cast<std::size_t>(s.taxa_->size());
    auto check_width = [&](const Clade& c) {
      if (c.size() != ntax || c.none()) throw ValidationError("clade width does not match the taxa set");
    };
    s.rows_.emplace_back();
    for (auto& r : roots) {
      check_width(r.first), check_width(r.second);
      if (!r.valid() || r.clade().count() != ntax) throw ValidationError("root subsplit must partition all taxa");
      s.root_index_.emplace(r, s.num_entries());
      s.rows_[0].push_back(s.num_entries());
      s.entry_row_.push_back(0);
      s.roots_.push_back(r);
    }
    std::map<std::pair<Subsplit, Clade>, int> row_ids;
    for (auto& p : pairs) {
      if (!p.child.valid() || !p.parent.valid() ||
          !(p.child.clade() == p.parent.first || p.child.clade() == p.parent.second))
        throw ValidationError("child subsplit must split a clade of its parent");
      auto [it, fresh] = row_ids.emplace(std::make_pair(p.parent, p.child.clade()), static_cast<int>(s.rows_.size()));
      if (fresh) {
        s.rows_.emplace_back();
        s.row_key_.emplace(std::make_pair(p.parent, p.child.clade()), it->second);
      }
      s.pair_index_.emplace(p, s.num_entries());
      s.rows_[static_cast<std::size_t>(it->second)].push_back(s.num_entries());
      s.entry_row_.push_back(it->second);
      s.pairs_.push_back(p);
    }
    for (auto& c : splits) {
      check_width(c);
      s.split_index_.emplace(c, static_cast<int>(s.splits_.size()));
      s.splits_.push_back(c);
    }
    for (auto& p : psps) {
      s.psp_index_.emplace(p, static_cast<int>(s.psps_.size()));
      s.psps_.push_back(p);
    }
    if (s.roots_.empty()) throw ValidationError("support has no root subsplits");
    return s;
  }

  const TaxaPtr& taxa() const noexcept { return taxa_; }
  int num_entries() const noexcept { return static_cast<int>(entry_row_.size()); }
  int num_root_entries() const noexcept { return static_cast<int>(roots_.size()); }
  int num_rows() const noexcept { return static_cast<int>(rows_.size()); }
  const std::vector<int>& row(int r) const { return rows_[static_cast<std::size_t>(r)]; }
  int row_of(int entry) const { return entry_row_[static_cast<std::size_t>(entry)]; }
  const std::vector<Subsplit>& root_subsplits() const noexcept { return roots_; }
  const std::vector<SubsplitPair>& pairs() const noexcept { return pairs_; }
  const std::vector<Clade>& splits() const noexcept { return splits_; }
  const std::vector<PrimarySubsplitPair>& psps() const noexcept { return psps_; }
  int num_splits() const noexcept { return static_cast<int>(splits_.size()); }
  int num_psps() const noexcept { return static_cast<int>(psps_.size()); }

  // Entry index, or -1 when absent.
  int root_entry(const Subsplit& s) const { return lookup(root_index_, s); }
  int pair_entry(const Subsplit& parent, const Subsplit& child) const { return lookup(pair_index_, SubsplitPair{parent, child}); }
  int row_for(const Subsplit& parent, const Clade& clade) const {
    auto it = row_key_.find(std::make_pair(parent, clade));
    return it == row_key_.end() ? -1 : it->second;
  }
  int split_index(const Clade& split) const { return lookup(split_index_, canonical_split(split)); }
  int psp_index(const Clade& split, const Subsplit& child) const {
    return lookup(psp_index_, PrimarySubsplitPair{canonical_split(split), child});
  }
  // Subsplit chosen by an entry: the root subsplit or the child of a pair.
  const Subsplit& entry_subsplit(int entry) const {
    return entry < num_root_entries() ? roots_[static_cast<std::size_t>(entry)]
                                      : pairs_[static_cast<std::size_t>(entry - num_root_entries())].child;
  }

 private:
  template <class M, class K>
  static int lookup(const M& m, const K& k) {
    auto it = m.find(k);
    return it == m.end() ? -1 : it->second;
  }

  class Collector {
   public:
    explicit Collector(TaxaPtr taxa) : taxa_(std::move(taxa)) {}
    void add(const TreeTopology& t) {
      if (*t.taxa() != *taxa_) throw ValidationError("trees in a support sample must share one taxa set");
      detail::DirectedTree dt(t);
      for (EdgeId e = 0; e < t.num_edges(); ++e) {
        const Subsplit root = dt.root_subsplit(e);
        roots_.insert(root);
        dt.for_each_pair(e, [&](int parent, int child) {
          pairs_.insert({parent < 0 ? root : dt.subsplit[static_cast<std::size_t>(parent)], dt.subsplit[static_cast<std::size_t>(child)]});
        });
        const Clade split = canonical_split(dt.clade[static_cast<std::size_t>(2 * e)]);
        splits_.insert(split);
        for (int d : {2 * e, 2 * e + 1})
          if (dt.interior_head(d)) psps_.insert({split, dt.subsplit[static_cast<std::size_t>(d)]});
      }
    }
    SbnSupport finish() {
      return from_keys(taxa_, {roots_.begin(), roots_.end()}, {pairs_.begin(), pairs_.end()},
                       {splits_.begin(), splits_.end()}, {psps_.begin(), psps_.end()});
    }

   private:
    TaxaPtr taxa_;
    std::set<Subsplit> roots_;
    std::set<SubsplitPair> pairs_;
    std::set<Clade> splits_;
    std::set<PrimarySubsplitPair> psps_;
  };

  struct RowKeyHash {
    std::size_t operator()(const std::pair<Subsplit, Clade>& k) const noexcept {
      return k.first.hash() * 1000003 ^ k.second.hash();
    }
  };

  TaxaPtr taxa_;
  std::vector<std::vector<int>> rows_;  // row 0 holds the root subsplits
  std::vector<int> entry_row_;
  std::vector<Subsplit> roots_;
  std::vector<SubsplitPair> pairs_;
  std::vector<Clade> splits_;
  std::vector<PrimarySubsplitPair> psps_;
  std::unordered_map<Subsplit, int> root_index_;
  std::unordered_map<SubsplitPair, int> pair_index_;
  std::unordered_map<std::pair<Subsplit, Clade>, int, RowKeyHash> row_key_;
  std::unordered_map<Clade, int> split_index_;
  std::unordered_map<PrimarySubsplitPair, int> psp_index_;
};

using SupportPtr = std::shared_ptr<const SbnSupport>;

// Per-edge indices into the split and PSP tables (-1 where the support lacks the key).
struct EdgeParameterIndex {
  int split = -1;
  std::array<int, 2> psp{-1, -1};
};

inline std::vector<EdgeParameterIndex> edge_parameter_indices(const SbnSupport& support, const TreeTopology& tree) {
  detail::DirectedTree dt(tree);
  std::vector<EdgeParameterIndex> out(static_cast<std::size_t>(tree.num_edges()));
  for (EdgeId e = 0; e < tree.num_edges(); ++e) {
    auto& idx = out[static_cast<std::size_t>(e)];
    const Clade& side = dt.clade[static_cast<std::size_t>(2 * e)];
    idx.split = support.split_index(side);
    for (int k = 0; k < 2; ++k)
      if (dt.interior_head(2 * e + k))
        idx.psp[static_cast<std::size_t>(k)] = support.psp_index(side, dt.subsplit[static_cast<std::size_t>(2 * e + k)]);
  }
  return out;
}

// Simplest subsplit Bayesian network: softmax CPTs over a fixed support.
class SbnModel {
 public:
  explicit SbnModel(SupportPtr support) : support_(std::move(support)) {
    phi_.assign(static_cast<std::size_t>(support_->num_entries()), 0.0);
    refresh();
  }
  SbnModel(SupportPtr support, std::vector<double> phi) : support_(std::move(support)) { set_phi(std::move(phi)); }

  const SbnSupport& support() const noexcept { return *support_; }
  const SupportPtr& support_ptr() const noexcept { return support_; }
  const std::vector<double>& phi() const noexcept { return phi_; }
  int num_parameters() const noexcept { return support_->num_entries(); }

  void set_phi(std::vector<double> phi) {
    if (static_cast<int>(phi.size()) != support_->num_entries()) throw ValidationError("phi has the wrong length");
    phi_ = std::move(phi);
    refresh();
  }

  double log_cpt(int entry) const {
    return phi_[static_cast<std::size_t>(entry)] - log_norm_[static_cast<std::size_t>(support_->row_of(entry))];
  }

  // Log probability of a rooted tree; -inf when it leaves the support.
  double log_prob_rooted(const TreeTopology& tree) const {
    auto d = rooted_decomposition(tree);
    int r = support_->root_entry(d.root);
    if (r < 0) return -std::numeric_limits<double>::infinity();
    double lp = log_cpt(r);
    for (const auto& p : d.pairs) {
      int j = support_->pair_entry(p.parent, p.child);
      if (j < 0) return -std::numeric_limits<double>::infinity();
      lp += log_cpt(j);
    }
    return lp;
  }

  // Log of the sum over the 2N-3 edge rootings. Throws OutOfSupport if every rooting has probability zero.
  double log_prob_unrooted(const TreeTopology& tree) const { return evaluate(tree, nullptr, 0.0); }

  // Same value; adds scale * d log p / d phi into grad.
  double log_prob_grad(const TreeTopology& tree, std::vector<double>& grad, double scale = 1.0) const {
    if (grad.size() != phi_.size()) grad.assign(phi_.size(), 0.0);
    return evaluate(tree, &grad, scale);
  }

  // Per-rooting log probabilities, indexed by EdgeId (-inf outside the support).
  std::vector<double> rooting_log_probs(const TreeTopology& tree) const {
    std::vector<double> out;
    detail::DirectedTree dt(tree);
    rootings(dt, out, nullptr);
    return out;
  }

  template <class Rng>
  TreeTopology sample(Rng& rng) const {
    const int n = support_->taxa()->size();
    std::vector<std::vector<NodeId>> adj(static_cast<std::size_t>(n));
    std::vector<int> tax(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) tax[static_cast<std::size_t>(k)] = k;
    auto new_interior = [&] {
      adj.emplace_back();
      tax.push_back(-1);
      return static_cast<NodeId>(adj.size() - 1);
    };
    auto link = [&](NodeId a, NodeId b) {
      adj[static_cast<std::size_t>(a)].push_back(b);
      adj[static_cast<std::size_t>(b)].push_back(a);
    };
    const NodeId root = new_interior();
    std::vector<std::pair<NodeId, Subsplit>> stack{{root, support_->entry_subsplit(draw(0, rng))}};
    while (!stack.empty()) {
      auto [u, s] = stack.back();
      stack.pop_back();
      for (const Clade* c : {&s.first, &s.second}) {
        if (c->count() == 1) {
          link(u, static_cast<NodeId>(c->first()));
          continue;
        }
        const int row = support_->row_for(s, *c);
        if (row < 0) throw OutOfSupport("support has no children for clade " + c->to_hex());
        NodeId v = new_interior();
        link(u, v);
        stack.push_back({v, support_->entry_subsplit(draw(row, rng))});
      }
    }
    return TreeTopology(support_->taxa(), std::move(adj), std::move(tax), true, root).unrooted();
  }

 private:
  void refresh() {
    log_norm_.assign(static_cast<std::size_t>(support_->num_rows()), 0.0);
    for (int r = 0; r < support_->num_rows(); ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j : support_->row(r)) mx = std::max(mx, phi_[static_cast<std::size_t>(j)]);
      double s = 0.0;
      for (int j : support_->row(r)) s += std::exp(phi_[static_cast<std::size_t>(j)] - mx);
      log_norm_[static_cast<std::size_t>(r)] = mx + std::log(s);
    }
  }

  template <class Rng>
  int draw(int row, Rng& rng) const {
    const auto& entries = support_->row(row);
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    for (int j : entries) {
      u -= std::exp(log_cpt(j));
      if (u < 0.0) return j;
    }
    return entries.back();
  }

  // Fills per-rooting log probs; when used is given, also the entries each rooting uses.
  void rootings(const detail::DirectedTree& dt, std::vector<double>& lp, std::vector<std::vector<int>>* used) const {
    const auto& t = *dt.tree;
    const auto m = static_cast<std::size_t>(2 * t.num_edges());
    // Entry for the pair (subsplit at tail side, subsplit at head) for non-root parents.
    std::vector<std::array<int, 2>> child_entry(m, {-1, -1});
    for (std::size_t d = 0; d < m; ++d)
      for (int k = 0; k < 2; ++k) {
        int o = dt.out[d][static_cast<std::size_t>(k)];
        if (o >= 0 && dt.interior_head(o))
          child_entry[d][static_cast<std::size_t>(k)] = support_->pair_entry(dt.subsplit[d], dt.subsplit[static_cast<std::size_t>(o)]);
      }
    const double ninf = -std::numeric_limits<double>::infinity();
    lp.assign(static_cast<std::size_t>(t.num_edges()), ninf);
    if (used) used->assign(static_cast<std::size_t>(t.num_edges()), {});
    std::vector<int> stack, entries;
    for (EdgeId e = 0; e < t.num_edges(); ++e) {
      const Subsplit root = dt.root_subsplit(e);
      int r = support_->root_entry(root);
      if (r < 0) continue;
      entries.assign(1, r);
      bool ok = true;
      stack.clear();
      for (int d : {2 * e, 2 * e + 1}) {
        if (!dt.interior_head(d)) continue;
        int j = support_->pair_entry(root, dt.subsplit[static_cast<std::size_t>(d)]);
        if (j < 0) {
          ok = false;
          break;
        }
        entries.push_back(j);
        stack.push_back(d);
      }
      while (ok && !stack.empty()) {
        int d = stack.back();
        stack.pop_back();
        for (int k = 0; k < 2; ++k) {
          int o = dt.out[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)];
          if (!dt.interior_head(o)) continue;
          int j = child_entry[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)];
          if (j < 0) {
            ok = false;
            break;
          }
          entries.push_back(j);
          stack.push_back(o);
        }
      }
      if (!ok) continue;
      double s = 0.0;
      for (int j : entries) s += log_cpt(j);
      lp[static_cast<std::size_t>(e)] = s;
      if (used) (*used)[static_cast<std::size_t>(e)] = entries;
    }
  }

  double evaluate(const TreeTopology& tree, std::vector<double>* grad, double scale) const {
    if (*tree.taxa() != *support_->taxa()) throw ValidationError("tree and support taxa differ");
    detail::DirectedTree dt(tree);
    std::vector<double> lp;
    std::vector<std::vector<int>> used;
    rootings(dt, lp, grad ? &used : nullptr);
    const double mx = *std::max_element(lp.begin(), lp.end());
    if (mx == -std::numeric_limits<double>::infinity()) throw OutOfSupport("tree lies outside the subsplit support");
    double s = 0.0;
    for (double v : lp) s += std::exp(v - mx);
    const double total = mx + std::log(s);
    if (!grad) return total;
    // d log p = sum_r w_r (1[entry used] - softmax of each used row).
    std::unordered_map<int, double> row_weight;
    for (std::size_t e = 0; e < lp.size(); ++e) {
      if (lp[e] == -std::numeric_limits<double>::infinity()) continue;
      const double w = scale * std::exp(lp[e] - total);
      for (int j : used[e]) {
        (*grad)[static_cast<std::size_t>(j)] += w;
        row_weight[support_->row_of(j)] += w;
      }
    }
    for (auto [r, w] : row_weight)
      for (int k : support_->row(r)) (*grad)[static_cast<std::size_t>(k)] -= w * std::exp(log_cpt(k));
    return total;
  }

  SupportPtr support_;
  std::vector<double> phi_;
  std::vector<double> log_norm_;
};

// JSON checkpoint: clades as lowercase hex bitmasks, subsplits as hex pairs.
inline nlohmann::json sbn_to_json(const SbnModel& model) {
  const auto& s = model.support();
  auto pair_json = [](const Subsplit& x) { return nlohmann::json::array({x.first.to_hex(), x.second.to_hex()}); };
  nlohmann::json j;
  j["taxa"] = s.taxa()->names();
  auto& roots = j["root_subsplits"] = nlohmann::json::array();
  for (int i = 0; i < s.num_root_entries(); ++i)
    roots.push_back({{"subsplit", pair_json(s.root_subsplits()[static_cast<std::size_t>(i)])},
                     {"phi", model.phi()[static_cast<std::size_t>(i)]}});
  auto& pairs = j["parent_child"] = nlohmann::json::array();
  for (std::size_t i = 0; i < s.pairs().size(); ++i)
    pairs.push_back({{"parent", pair_json(s.pairs()[i].parent)},
                     {"child", pair_json(s.pairs()[i].child)},
                     {"phi", model.phi()[static_cast<std::size_t>(s.num_root_entries()) + i]}});
  auto& splits = j["splits"] = nlohmann::json::array();
  for (const auto& c : s.splits()) splits.push_back(c.to_hex());
  auto& psps = j["psps"] = nlohmann::json::array();
  for (const auto& p : s.psps()) psps.push_back({{"split", p.split.to_hex()}, {"child", pair_json(p.child)}});
  return j;
}

inline SbnModel sbn_from_json(const nlohmann::json& j) {
  try {
    auto taxa = std::make_shared<const TaxaSet>(j.at("taxa").get<std::vector<std::string>>());
    const auto n = static_cast<std::size_t>(taxa->size());
    auto clade = [n](const nlohmann::json& x) { return Clade::from_hex(x.get<std::string>(), n); };
    auto subsplit = [&](const nlohmann::json& x) {
      if (!x.is_array() || x.size() != 2) throw ValidationError("subsplit must be a pair of hex masks");
      return Subsplit(clade(x[0]), clade(x[1]));
    };
    std::vector<Subsplit> roots;
    std::vector<SubsplitPair> pairs;
    std::vector<Clade> splits;
    std::vector<PrimarySubsplitPair> psps;
    std::map<Subsplit, double> root_phi;
    std::map<SubsplitPair, double> pair_phi;
    for (const auto& r : j.at("root_subsplits")) {
      roots.push_back(subsplit(r.at("subsplit")));
      root_phi[roots.back()] = r.at("phi").get<double>();
    }
    for (const auto& p : j.at("parent_child")) {
      pairs.push_back({subsplit(p.at("parent")), subsplit(p.at("child"))});
      pair_phi[pairs.back()] = p.at("phi").get<double>();
    }
    for (const auto& c : j.at("splits")) splits.push_back(clade(c));
    for (const auto& p : j.at("psps")) psps.push_back({clade(p.at("split")), subsplit(p.at("child"))});
    auto support = std::make_shared<const SbnSupport>(
        SbnSupport::from_keys(taxa, std::move(roots), std::move(pairs), std::move(splits), std::move(psps)));
    std::vector<double> phi;
    for (const auto& r : support->root_subsplits()) phi.push_back(root_phi.at(r));
    for (const auto& p : support->pairs()) phi.push_back(pair_phi.at(p));
    return SbnModel(std::move(support), std::move(phi));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed SBN checkpoint: ") + e.what());
  }
}

}  // namespace phylotopo
