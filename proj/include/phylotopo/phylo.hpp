#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "phylotopo/enumerate.hpp"
#include "phylotopo/error.hpp"
#include "phylotopo/tree.hpp"

namespace phylotopo {

// Branch lengths indexed by EdgeId.
using BranchLengths = std::vector<double>;

// A character is stored as a 4-bit mask over (A, C, G, T); ambiguity codes set several bits.
using StateMask = std::uint8_t;
inline constexpr StateMask kAnyState = 0xF;

inline StateMask state_mask(char c) {
  switch (std::toupper(static_cast<unsigned char>(c))) {
    case 'A': return 1;
    case 'C': return 2;
    case 'G': return 4;
    case 'T': case 'U': return 8;
    case 'R': return 1 | 4;
    case 'Y': return 2 | 8;
    case 'S': return 2 | 4;
    case 'W': return 1 | 8;
    case 'K': return 4 | 8;
    case 'M': return 1 | 2;
    case 'B': return 2 | 4 | 8;
    case 'D': return 1 | 4 | 8;
    case 'H': return 1 | 2 | 8;
    case 'V': return 1 | 2 | 4;
    case 'N': case '?': case '-': case '.': case 'X': return kAnyState;
    default: return 0;
  }
}

inline char mask_char(StateMask m) {
  static constexpr char table[16] = {'?', 'A', 'C', 'M', 'G', 'R', 'S', 'V', 'T', 'W', 'Y', 'H', 'K', 'D', 'B', 'N'};
  return table[m & 0xF];
}

class Alignment {
 public:
  // rows[k] is the sequence of taxon k.
  Alignment(TaxaPtr taxa, std::vector<std::vector<StateMask>> rows) : taxa_(std::move(taxa)), rows_(std::move(rows)) {
    if (!taxa_) throw ValidationError("alignment needs a taxa set");
    if (static_cast<int>(rows_.size()) != taxa_->size())
      throw ValidationError("alignment has " + std::to_string(rows_.size()) + " rows for " +
                            std::to_string(taxa_->size()) + " taxa");
    sites_ = static_cast<int>(rows_.front().size());
    if (sites_ == 0) throw ValidationError("alignment has no sites");
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      if (static_cast<int>(rows_[k].size()) != sites_)
        throw ValidationError("sequence '" + taxa_->name(static_cast<int>(k)) + "' has length " +
                              std::to_string(rows_[k].size()) + ", expected " + std::to_string(sites_));
      for (StateMask m : rows_[k])
        if (m == 0 || m > kAnyState) throw ValidationError("invalid character mask in alignment");
    }
  }

  const TaxaPtr& taxa() const noexcept { return taxa_; }
  int num_taxa() const noexcept { return taxa_->size(); }
  int num_sites() const noexcept { return sites_; }
  StateMask at(int taxon, int site) const { return rows_[static_cast<std::size_t>(taxon)][static_cast<std::size_t>(site)]; }
  const std::vector<StateMask>& row(int taxon) const { return rows_[static_cast<std::size_t>(taxon)]; }

  std::string sequence(int taxon) const {
    std::string s;
    s.reserve(static_cast<std::size_t>(sites_));
    for (StateMask m : row(taxon)) s.push_back(mask_char(m));
    return s;
  }

 private:
  TaxaPtr taxa_;
  std::vector<std::vector<StateMask>> rows_;
  int sites_ = 0;
};

// Sequences are taken in the order of `names`; the taxa set is built sorted and rows reordered to match.
inline Alignment make_alignment(const std::vector<std::string>& names, const std::vector<std::string>& seqs) {
  if (names.size() != seqs.size()) throw ValidationError("name/sequence count mismatch");
  auto taxa = std::make_shared<const TaxaSet>([&] {
    auto sorted = names;
    std::sort(sorted.begin(), sorted.end());
    return sorted;
  }());
  std::vector<std::vector<StateMask>> rows(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& row = rows[static_cast<std::size_t>(taxa->index_of(names[i]))];
    row.reserve(seqs[i].size());
    for (char c : seqs[i]) {
      StateMask m = state_mask(c);
      if (m == 0) throw ValidationError(std::string("invalid character '") + c + "' in sequence '" + names[i] + "'");
      row.push_back(m);
    }
  }
  return Alignment(std::move(taxa), std::move(rows));
}

inline Alignment parse_fasta(std::string_view text) {
  std::vector<std::string> names, seqs;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.remove_suffix(1);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.front()))) line.remove_prefix(1);
    if (line.empty() || line.front() == ';') continue;
    if (line.front() == '>') {
      line.remove_prefix(1);
      auto cut = line.find_first_of(" \t");
      std::string name(line.substr(0, cut));
      if (name.empty()) throw ParseError("empty FASTA header", pos - line.size() - 2);
      if (std::find(names.begin(), names.end(), name) != names.end())
        throw ValidationError("duplicate FASTA header '" + name + "'");
      names.push_back(std::move(name));
      seqs.emplace_back();
      continue;
    }
    if (names.empty()) throw ParseError("sequence data before first FASTA header", 0);
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) seqs.back().push_back(c);
  }
  if (names.empty()) throw ValidationError("empty FASTA input");
  for (std::size_t i = 1; i < seqs.size(); ++i)
    if (seqs[i].size() != seqs[0].size())
      throw ValidationError("sequence '" + names[i] + "' has length " + std::to_string(seqs[i].size()) +
                            ", expected " + std::to_string(seqs[0].size()));
  return make_alignment(names, seqs);
}

inline std::string to_fasta(const Alignment& aln) {
  std::string out;
  for (int k = 0; k < aln.num_taxa(); ++k) out += ">" + aln.taxa()->name(k) + "\n" + aln.sequence(k) + "\n";
  return out;
}

inline void check_branch_lengths(const TreeTopology& tree, const BranchLengths& q) {
  if (static_cast<int>(q.size()) != tree.num_edges())
    throw ValidationError("expected " + std::to_string(tree.num_edges()) + " branch lengths, got " +
                          std::to_string(q.size()));
  for (double v : q)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("branch lengths must be finite and non-negative");
}

// Jukes-Cantor with unit substitution rate: t is in expected substitutions per site.
inline Eigen::Matrix4d transition_matrix(double t) {
  if (!(t >= 0.0)) throw ValidationError("transition time must be non-negative");
  const double e = std::exp(-4.0 * t / 3.0);
  Eigen::Matrix4d p = Eigen::Matrix4d::Constant(0.25 - 0.25 * e);
  p.diagonal().setConstant(0.25 + 0.75 * e);
  return p;
}

inline Eigen::Matrix4d transition_matrix_derivative(double t) {
  const double e = std::exp(-4.0 * t / 3.0);
  Eigen::Matrix4d p = Eigen::Matrix4d::Constant(e / 3.0);
  p.diagonal().setConstant(-e);
  return p;
}

inline double log_prior(const TreeTopology& tree, const BranchLengths& q) {
  check_branch_lengths(tree, q);
  double lp = -log_num_unrooted_topologies(tree.num_taxa());
  for (double v : q) lp += std::log(10.0) - 10.0 * v;
  return lp;
}

// d log_prior / d q_e is the constant -10 on every edge.
inline constexpr double kPriorRate = 10.0;

// Site patterns are compressed once; likelihood calls are const and safe to run concurrently.
class LikelihoodEngine {
 public:
  explicit LikelihoodEngine(const Alignment& aln) : taxa_(aln.taxa()), sites_(aln.num_sites()) {
    const int n = aln.num_taxa();
    std::map<std::vector<StateMask>, int> index;
    site_pattern_.resize(static_cast<std::size_t>(sites_));
    std::vector<StateMask> column(static_cast<std::size_t>(n));
    for (int s = 0; s < sites_; ++s) {
      for (int k = 0; k < n; ++k) column[static_cast<std::size_t>(k)] = aln.at(k, s);
      auto [it, fresh] = index.emplace(column, static_cast<int>(index.size()));
      if (fresh) {
        patterns_.push_back(column);
        weights_.push_back(0.0);
      }
      weights_[static_cast<std::size_t>(it->second)] += 1.0;
      site_pattern_[static_cast<std::size_t>(s)] = it->second;
    }
  }

  const TaxaPtr& taxa() const noexcept { return taxa_; }
  int num_sites() const noexcept { return sites_; }
  int num_patterns() const noexcept { return static_cast<int>(weights_.size()); }
  const std::vector<double>& pattern_weights() const noexcept { return weights_; }
  int pattern_of_site(int s) const { return site_pattern_[static_cast<std::size_t>(s)]; }

  double log_likelihood(const TreeTopology& tree, const BranchLengths& q) const {
    Work w;
    prune(tree, q, w);
    return total(w);
  }

  // Log likelihood of each distinct pattern (not weighted).
  std::vector<double> pattern_log_likelihoods(const TreeTopology& tree, const BranchLengths& q) const {
    Work w;
    prune(tree, q, w);
    return w.pattern_ll;
  }

  // Returns the log likelihood and fills grad[e] = d log p / d q_e.
  double log_likelihood_grad(const TreeTopology& tree, const BranchLengths& q, BranchLengths& grad) const {
    Work w;
    prune(tree, q, w);
    const double ll = total(w);
    const auto& order = tree.order();
    const std::size_t np = static_cast<std::size_t>(num_patterns());
    grad.assign(static_cast<std::size_t>(tree.num_edges()), 0.0);
    // upper[u]: probability of everything outside the subtree of u given u's state, rescaled per pattern.
    std::vector<std::vector<double>> upper(static_cast<std::size_t>(tree.num_nodes()));
    std::vector<double> outside(np * 4);
    upper[static_cast<std::size_t>(order.root)].assign(np * 4, 0.25);
    for (NodeId u : order.preorder) {
      if (tree.is_leaf(u) && u != order.root) continue;
      const auto& up = upper[static_cast<std::size_t>(u)];
      for (NodeId c : tree.neighbors(u)) {
        if (c == tree.parent(u)) continue;
        // outside = upper(u) * product of the other children's messages.
        std::copy(up.begin(), up.end(), outside.begin());
        for (NodeId s : tree.neighbors(u)) {
          if (s == c || s == tree.parent(u)) continue;
          const auto& m = w.message[static_cast<std::size_t>(s)];
          for (std::size_t i = 0; i < np * 4; ++i) outside[i] *= m[i];
        }
        const EdgeId e = tree.edge_above(c);
        const double t = q[static_cast<std::size_t>(e)];
        const double ex = std::exp(-4.0 * t / 3.0);
        const double a = (1.0 - ex) / 4.0;
        const auto& lc = w.partial[static_cast<std::size_t>(c)];
        double g = 0.0;
        for (std::size_t p = 0; p < np; ++p) {
          const double* L = &lc[p * 4];
          const double* A = &outside[p * 4];
          const double sum_l = L[0] + L[1] + L[2] + L[3];
          double num = 0.0, den = 0.0;
          for (int s = 0; s < 4; ++s) {
            num += A[s] * ((ex / 3.0) * sum_l - (4.0 * ex / 3.0) * L[s]);
            den += A[s] * (a * sum_l + ex * L[s]);
          }
          if (!(den > 0.0)) throw ZeroLikelihood("site pattern has zero likelihood");
          g += weights_[p] * num / den;
        }
        grad[static_cast<std::size_t>(e)] = g;
        if (tree.is_leaf(c)) continue;
        auto& uc = upper[static_cast<std::size_t>(c)];
        uc.resize(np * 4);
        for (std::size_t p = 0; p < np; ++p) {
          const double* A = &outside[p * 4];
          const double sum_a = A[0] + A[1] + A[2] + A[3];
          double mx = 0.0;
          for (int s = 0; s < 4; ++s) mx = std::max(mx, uc[p * 4 + s] = a * sum_a + ex * A[s]);
          if (mx > 0.0)
            for (int s = 0; s < 4; ++s) uc[p * 4 + s] /= mx;
        }
      }
    }
    return ll;
  }

 private:
  struct Work {
    std::vector<std::vector<double>> partial;  // conditional likelihoods per node, pattern-major
    std::vector<std::vector<double>> message;  // P(t) * partial, sent from a node to its parent
    std::vector<double> log_scale;             // accumulated per-pattern scaling
    std::vector<double> pattern_ll;
  };

  void prune(const TreeTopology& tree, const BranchLengths& q, Work& w) const {
    if (*tree.taxa() != *taxa_) throw ValidationError("tree and alignment taxa differ");
    check_branch_lengths(tree, q);
    const auto& order = tree.order();
    const std::size_t np = static_cast<std::size_t>(num_patterns());
    const std::size_t nn = static_cast<std::size_t>(tree.num_nodes());
    w.partial.assign(nn, {});
    w.message.assign(nn, {});
    w.log_scale.assign(np, 0.0);
    for (NodeId u : order.postorder) {
      auto& L = w.partial[static_cast<std::size_t>(u)];
      if (tree.is_leaf(u) && u != order.root) {
        L.assign(np * 4, 0.0);
        const int k = tree.taxon(u);
        for (std::size_t p = 0; p < np; ++p) {
          const StateMask m = patterns_[p][static_cast<std::size_t>(k)];
          for (int s = 0; s < 4; ++s) L[p * 4 + s] = (m >> s) & 1 ? 1.0 : 0.0;
        }
      } else {
        L.assign(np * 4, 1.0);
        for (NodeId c : tree.neighbors(u)) {
          if (c == tree.parent(u)) continue;
          const auto& m = w.message[static_cast<std::size_t>(c)];
          for (std::size_t i = 0; i < np * 4; ++i) L[i] *= m[i];
        }
        for (std::size_t p = 0; p < np; ++p) {
          double mx = std::max(std::max(L[p * 4], L[p * 4 + 1]), std::max(L[p * 4 + 2], L[p * 4 + 3]));
          if (mx > 0.0) {
            for (int s = 0; s < 4; ++s) L[p * 4 + s] /= mx;
            w.log_scale[p] += std::log(mx);
          }
        }
      }
      if (u == order.root) continue;
      const double t = q[static_cast<std::size_t>(tree.edge_above(u))];
      const double ex = std::exp(-4.0 * t / 3.0);
      const double a = (1.0 - ex) / 4.0;
      auto& M = w.message[static_cast<std::size_t>(u)];
      M.resize(np * 4);
      for (std::size_t p = 0; p < np; ++p) {
        const double sum = L[p * 4] + L[p * 4 + 1] + L[p * 4 + 2] + L[p * 4 + 3];
        for (int s = 0; s < 4; ++s) M[p * 4 + s] = a * sum + ex * L[p * 4 + s];
      }
    }
    w.pattern_ll.resize(np);
    const auto& R = w.partial[static_cast<std::size_t>(order.root)];
    for (std::size_t p = 0; p < np; ++p) {
      const double site = 0.25 * (R[p * 4] + R[p * 4 + 1] + R[p * 4 + 2] + R[p * 4 + 3]);
      if (!(site > 0.0)) throw ZeroLikelihood("site pattern " + std::to_string(p) + " has zero likelihood");
      w.pattern_ll[p] = std::log(site) + w.log_scale[p];
    }
  }

  double total(const Work& w) const {
    double ll = 0.0;
    for (std::size_t p = 0; p < w.pattern_ll.size(); ++p) ll += weights_[p] * w.pattern_ll[p];
    return ll;
  }

  TaxaPtr taxa_;
  int sites_;
  std::vector<std::vector<StateMask>> patterns_;
  std::vector<double> weights_;
  std::vector<int> site_pattern_;
};

inline double log_likelihood(const TreeTopology& tree, const BranchLengths& q, const Alignment& aln) {
  return LikelihoodEngine(aln).log_likelihood(tree, q);
}

inline double log_likelihood_grad(const TreeTopology& tree, const BranchLengths& q, const Alignment& aln,
                                  BranchLengths& grad) {
  return LikelihoodEngine(aln).log_likelihood_grad(tree, q, grad);
}

// Draws M sites under Jukes-Cantor from a uniform root state.
template <class Rng>
Alignment simulate_alignment(const TreeTopology& tree, const BranchLengths& q, int sites, Rng& rng) {
  check_branch_lengths(tree, q);
  if (sites <= 0) throw ValidationError("site count must be positive");
  const auto& order = tree.order();
  std::vector<std::vector<StateMask>> rows(static_cast<std::size_t>(tree.num_taxa()));
  std::vector<int> state(static_cast<std::size_t>(tree.num_nodes()));
  std::uniform_int_distribution<int> uniform(0, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int s = 0; s < sites; ++s) {
    for (NodeId u : order.preorder) {
      int x;
      if (u == order.root) {
        x = uniform(rng);
      } else {
        const double t = q[static_cast<std::size_t>(tree.edge_above(u))];
        const double stay = 0.25 + 0.75 * std::exp(-4.0 * t / 3.0);
        const int from = state[static_cast<std::size_t>(tree.parent(u))];
        if (unit(rng) < stay) {
          x = from;
        } else {
          x = std::uniform_int_distribution<int>(0, 2)(rng);
          if (x >= from) ++x;
        }
      }
      state[static_cast<std::size_t>(u)] = x;
      if (tree.is_leaf(u)) rows[static_cast<std::size_t>(tree.taxon(u))].push_back(static_cast<StateMask>(1 << x));
    }
  }
  return Alignment(tree.taxa(), std::move(rows));
}

}  // namespace phylotopo
