#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "phylotopo/error.hpp"
#include "phylotopo/tree.hpp"

namespace phylotopo {

/// Tree plus the `:length` annotations found in the text, indexed by EdgeId.
/// Missing annotations are NaN.
struct ParsedNewick {
  TreeTopology tree;
  std::vector<double> lengths;
  bool all_lengths_present = false;
};

namespace detail {

class NewickReader {
 public:
  struct RawNode {
    std::vector<int> children;
    std::string label;
    double length = std::numeric_limits<double>::quiet_NaN();
  };

  explicit NewickReader(std::string_view text) : s_(text) {}

  std::vector<RawNode> read() {
    skip();
    int top = subtree();
    skip();
    if (!eat(';')) fail("expected ';'");
    skip();
    if (pos_ != s_.size()) fail("trailing characters after ';'");
    if (top != 0) fail("internal parser error");
    return std::move(nodes_);
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ParseError("Newick: " + msg, pos_); }

  void skip() {
    while (pos_ < s_.size()) {
      char c = s_[pos_];
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else if (c == '[') {
        auto end = s_.find(']', pos_);
        if (end == std::string_view::npos) fail("unterminated comment");
        pos_ = end + 1;
      } else {
        break;
      }
    }
  }
  bool eat(char c) {
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  int subtree() {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    skip();
    if (eat('(')) {
      do {
        int c = subtree();
        nodes_[static_cast<std::size_t>(id)].children.push_back(c);
        skip();
      } while (eat(','));
      if (!eat(')')) fail("expected ',' or ')'");
      skip();
    }
    nodes_[static_cast<std::size_t>(id)].label = label();
    skip();
    if (eat(':')) {
      skip();
      nodes_[static_cast<std::size_t>(id)].length = number();
      skip();
    }
    return id;
  }

  std::string label() {
    std::string out;
    if (pos_ < s_.size() && s_[pos_] == '\'') {
      ++pos_;
      while (true) {
        if (pos_ >= s_.size()) fail("unterminated quoted label");
        char c = s_[pos_++];
        if (c == '\'') {
          if (pos_ < s_.size() && s_[pos_] == '\'') {
            out.push_back('\'');
            ++pos_;
          } else {
            break;
          }
        } else {
          out.push_back(c);
        }
      }
      return out;
    }
    while (pos_ < s_.size()) {
      char c = s_[pos_];
      if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' || c == '[' || c == '\'' || c == ' ' ||
          c == '\t' || c == '\n' || c == '\r')
        break;
      out.push_back(c);
      ++pos_;
    }
    return out;
  }

  double number() {
    const char* begin = s_.data() + pos_;
    const char* end = s_.data() + s_.size();
    double v = 0;
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr == begin) fail("expected a branch length");
    pos_ += static_cast<std::size_t>(ptr - begin);
    return v;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  std::vector<RawNode> nodes_;
};

inline std::string format_length(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Parses a bifurcating Newick tree. A top-level node with two children makes
/// a rooted tree, three children an unrooted one. Without `taxa` the taxon set
/// is built from the leaf labels in sorted order. Leaf node ids equal taxon
/// indices; interior ids follow in preorder.
inline ParsedNewick parse_newick_with_lengths(std::string_view text, TaxaPtr taxa = nullptr) {
  auto raw = detail::NewickReader(text).read();
  std::vector<std::string> leaf_labels;
  for (const auto& n : raw) {
    if (!n.children.empty()) {
      continue;
    }
    if (n.label.empty()) throw ParseError("Newick: leaf without a label", 0);
    leaf_labels.push_back(n.label);
  }
  if (!taxa) {
    auto sorted = leaf_labels;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ValidationError("duplicate taxon label in Newick input");
    taxa = std::make_shared<const TaxaSet>(std::move(sorted));
  } else if (static_cast<int>(leaf_labels.size()) != taxa->size()) {
    throw ValidationError("Newick leaf count does not match the taxon set");
  }

  const int top_children = static_cast<int>(raw[0].children.size());
  const bool rooted = top_children == 2;
  if (top_children != 2 && top_children != 3)
    throw ValidationError("Newick top-level node must have 2 (rooted) or 3 (unrooted) children");
  for (std::size_t i = 1; i < raw.size(); ++i)
    if (!raw[i].children.empty() && raw[i].children.size() != 2)
      throw ValidationError("multifurcating node in Newick input");

  const int ntax = taxa->size();
  std::vector<NodeId> id(raw.size());
  NodeId next_interior = ntax;
  std::vector<int> seen(static_cast<std::size_t>(ntax), 0);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].children.empty()) {
      int k = taxa->index_of(raw[i].label);
      if (seen[static_cast<std::size_t>(k)]++) throw ValidationError("duplicate taxon label: " + raw[i].label);
      id[i] = k;
    } else {
      id[i] = next_interior++;
    }
  }
  const auto nnodes = static_cast<std::size_t>(next_interior);
  std::vector<std::vector<NodeId>> adj(nnodes);
  std::vector<int> tax(nnodes, -1);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].children.empty()) tax[static_cast<std::size_t>(id[i])] = id[i];
    for (int c : raw[i].children) {
      adj[static_cast<std::size_t>(id[i])].push_back(id[static_cast<std::size_t>(c)]);
      adj[static_cast<std::size_t>(id[static_cast<std::size_t>(c)])].push_back(id[i]);
    }
  }
  // Parent first in every child's neighbor list, then children in text order.
  ParsedNewick out{TreeTopology(taxa, std::move(adj), std::move(tax), rooted, id[0]), {}, true};
  out.lengths.assign(static_cast<std::size_t>(out.tree.num_edges()), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 1; i < raw.size(); ++i) {
    EdgeId e = out.tree.edge_above(id[i]);
    out.lengths[static_cast<std::size_t>(e)] = raw[i].length;
    if (std::isnan(raw[i].length)) out.all_lengths_present = false;
  }
  return out;
}

inline TreeTopology parse_newick(std::string_view text, TaxaPtr taxa = nullptr) {
  return parse_newick_with_lengths(text, std::move(taxa)).tree;
}

/// Canonical Newick: children ordered by their smallest taxon index; unrooted
/// trees are written from the interior node adjacent to taxon 0, so equal
/// topologies give equal strings. Lengths, when given, are indexed by EdgeId.
inline std::string serialize_newick(const TreeTopology& tree, const std::vector<double>* lengths = nullptr) {
  if (lengths && static_cast<int>(lengths->size()) != tree.num_edges())
    throw ValidationError("branch length vector size does not match edge count");
  const NodeId top = tree.rooted() ? tree.root() : tree.neighbors(tree.leaf_of_taxon(0)).front();

  // Minimum taxon index in the subtree hanging below each node, seen from `top`.
  const auto n = static_cast<std::size_t>(tree.num_nodes());
  std::vector<NodeId> parent(n, kNoNode), pre;
  pre.reserve(n);
  std::vector<NodeId> stack{top};
  std::vector<char> seen(n, 0);
  seen[static_cast<std::size_t>(top)] = 1;
  while (!stack.empty()) {
    NodeId u = stack.back();
    stack.pop_back();
    pre.push_back(u);
    for (NodeId v : tree.neighbors(u))
      if (!seen[static_cast<std::size_t>(v)]) {
        seen[static_cast<std::size_t>(v)] = 1;
        parent[static_cast<std::size_t>(v)] = u;
        stack.push_back(v);
      }
  }
  std::vector<int> min_taxon(n, std::numeric_limits<int>::max());
  for (auto it = pre.rbegin(); it != pre.rend(); ++it) {
    NodeId u = *it;
    auto& m = min_taxon[static_cast<std::size_t>(u)];
    if (tree.is_leaf(u)) m = tree.taxon(u);
    if (parent[static_cast<std::size_t>(u)] != kNoNode) {
      auto& pm = min_taxon[static_cast<std::size_t>(parent[static_cast<std::size_t>(u)])];
      pm = std::min(pm, m);
    }
  }

  std::string out;
  auto emit = [&](auto&& self, NodeId u) -> void {
    if (tree.is_leaf(u)) {
      out += tree.taxa()->name(tree.taxon(u));
    } else {
      std::vector<NodeId> kids;
      for (NodeId v : tree.neighbors(u))
        if (v != parent[static_cast<std::size_t>(u)]) kids.push_back(v);
      std::sort(kids.begin(), kids.end(), [&](NodeId a, NodeId b) {
        return min_taxon[static_cast<std::size_t>(a)] < min_taxon[static_cast<std::size_t>(b)];
      });
      out += '(';
      for (std::size_t i = 0; i < kids.size(); ++i) {
        if (i) out += ',';
        self(self, kids[i]);
      }
      out += ')';
    }
    if (lengths && u != top) {
      out += ':';
      out += detail::format_length((*lengths)[static_cast<std::size_t>(tree.edge_between(parent[static_cast<std::size_t>(u)], u))]);
    }
  };
  emit(emit, top);
  out += ';';
  return out;
}

/// One tree per non-empty line; all trees share the taxon set of the first.
inline std::vector<TreeTopology> parse_newick_lines(std::string_view text, TaxaPtr taxa = nullptr) {
  std::vector<TreeTopology> trees;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    trees.push_back(parse_newick(line, taxa));
    if (!taxa) taxa = trees.back().taxa();
  }
  return trees;
}

}  // namespace phylotopo
