#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "phylotopo/error.hpp"
#include "phylotopo/tree.hpp"

namespace phylotopo {

/// Row u holds the feature vector of node u.
using NodeFeatures = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Leaf carrying taxon k gets the k-th standard basis vector of R^N; interior rows are zero.
inline NodeFeatures one_hot_tips(const TreeTopology& tree) {
  NodeFeatures x = NodeFeatures::Zero(tree.num_nodes(), tree.num_taxa());
  for (int k = 0; k < tree.num_taxa(); ++k) x(tree.leaf_of_taxon(k), k) = 1.0;
  return x;
}

/// x_u = c_u x_parent(u) + d_u for every non-root node (root entries unused).
struct TwoPassCoefficients {
  std::vector<double> c;
  NodeFeatures d;
};

namespace detail {
inline void check_tip_rows(const TreeTopology& tree, const NodeFeatures& tips) {
  if (tips.rows() != tree.num_nodes())
    throw ValidationError("tip feature matrix must have one row per node");
  if (tips.cols() == 0) throw ValidationError("tip features have dimension 0");
}
}  // namespace detail

/// Postorder elimination pass: leaves start at c = 0, d = x; every other
/// non-root node gets c = 1/(deg - sum c_child), d = sum d_child * c.
inline TwoPassCoefficients two_pass_coefficients(const TreeTopology& tree, const NodeFeatures& tips) {
  detail::check_tip_rows(tree, tips);
  const auto n = static_cast<std::size_t>(tree.num_nodes());
  TwoPassCoefficients k{std::vector<double>(n, 0.0), NodeFeatures::Zero(tree.num_nodes(), tips.cols())};
  const auto dim = static_cast<std::size_t>(tips.cols());
  double* d = k.d.data();
  for (NodeId u : tree.order().postorder) {
    double* du = d + static_cast<std::size_t>(u) * dim;
    if (tree.is_leaf(u)) {
      std::copy_n(tips.data() + static_cast<std::size_t>(u) * dim, dim, du);
      continue;
    }
    if (u == tree.root()) continue;
    double csum = 0.0;
    const NodeId up = tree.parent(u);
    for (NodeId v : tree.neighbors(u)) {
      if (v == up) continue;
      csum += k.c[static_cast<std::size_t>(v)];
      const double* dv = d + static_cast<std::size_t>(v) * dim;
      for (std::size_t j = 0; j < dim; ++j) du[j] += dv[j];
    }
    const double cu = 1.0 / (tree.degree(u) - csum);
    k.c[static_cast<std::size_t>(u)] = cu;
    for (std::size_t j = 0; j < dim; ++j) du[j] *= cu;
  }
  return k;
}

/// Dirichlet-energy minimizing interior features in linear time: the
/// elimination pass above, then back substitution from the root. Both passes
/// run over preorder positions so scratch rows are visited sequentially.
inline NodeFeatures embed_two_pass(const TreeTopology& tree, const NodeFeatures& tips) {
  detail::check_tip_rows(tree, tips);
  const auto n = static_cast<std::size_t>(tree.num_nodes());
  const auto dim = static_cast<std::size_t>(tips.cols());
  const auto& pre = tree.order().preorder;
  const auto& prank = tree.order().parent_rank;
  // c first accumulates the children's coefficients, then holds the node's own.
  struct Slot {
    double c = 0.0;
    int kids = 0;
  };
  std::vector<Slot> slot(n);
  std::vector<double> d(n * dim, 0.0);
  for (std::size_t i = n - 1; i > 0; --i) {
    double* di = d.data() + i * dim;
    Slot& s = slot[i];
    if (s.kids == 0) {
      std::copy_n(tips.data() + static_cast<std::size_t>(pre[i]) * dim, dim, di);
    } else {
      s.c = 1.0 / (s.kids + 1 - s.c);
      for (std::size_t j = 0; j < dim; ++j) di[j] *= s.c;
    }
    const auto p = static_cast<std::size_t>(prank[i]);
    slot[p].c += s.c;
    ++slot[p].kids;
    double* dp = d.data() + p * dim;
    for (std::size_t j = 0; j < dim; ++j) dp[j] += di[j];
  }
  const double croot = 1.0 / (slot[0].kids - slot[0].c);
  for (std::size_t j = 0; j < dim; ++j) d[j] *= croot;
  for (std::size_t i = 1; i < n; ++i) {
    double* di = d.data() + i * dim;
    const double* dp = d.data() + static_cast<std::size_t>(prank[i]) * dim;
    for (std::size_t j = 0; j < dim; ++j) di[j] += slot[i].c * dp[j];
  }
  NodeFeatures x(tree.num_nodes(), tips.cols());
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(d.data() + i * dim, dim, x.data() + static_cast<std::size_t>(pre[i]) * dim);
  return x;
}

/// Same minimizer via a dense Cholesky solve of the interior block of the
/// graph Laplacian. Cubic cost; used as a reference.
inline NodeFeatures embed_dense(const TreeTopology& tree, const NodeFeatures& tips) {
  detail::check_tip_rows(tree, tips);
  const int n_in = tree.num_interior();
  if (n_in > 2000) throw ValidationError("dense embedding limited to 2000 interior nodes");
  std::vector<int> slot(static_cast<std::size_t>(tree.num_nodes()), -1);
  std::vector<NodeId> interior;
  for (NodeId u = 0; u < tree.num_nodes(); ++u)
    if (!tree.is_leaf(u)) {
      slot[static_cast<std::size_t>(u)] = static_cast<int>(interior.size());
      interior.push_back(u);
    }
  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n_in, n_in);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n_in, tips.cols());
  for (int i = 0; i < n_in; ++i) {
    const NodeId u = interior[static_cast<std::size_t>(i)];
    lap(i, i) = tree.degree(u);
    for (NodeId v : tree.neighbors(u)) {
      if (tree.is_leaf(v)) rhs.row(i) += tips.row(v);
      else lap(i, slot[static_cast<std::size_t>(v)]) -= 1.0;
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(lap);
  if (llt.info() != Eigen::Success) throw Error("interior Laplacian is singular");
  Eigen::MatrixXd sol = llt.solve(rhs);
  NodeFeatures x = tips;
  for (int i = 0; i < n_in; ++i) x.row(interior[static_cast<std::size_t>(i)]) = sol.row(i);
  return x;
}

/// Sum over edges of squared feature differences.
inline double dirichlet_energy(const TreeTopology& tree, const NodeFeatures& feats) {
  if (feats.rows() != tree.num_nodes()) throw ValidationError("feature matrix must cover every node");
  double e = 0.0;
  for (EdgeId k = 0; k < tree.num_edges(); ++k)
    e += (feats.row(tree.edge_child(k)) - feats.row(tree.edge_parent(k))).squaredNorm();
  return e;
}

/// max over interior u of |x_u - mean of neighbours|_inf. Zero at the minimizer.
inline double balance_residual(const TreeTopology& tree, const NodeFeatures& feats) {
  double worst = 0.0;
  Eigen::RowVectorXd mean(feats.cols());
  for (NodeId u = 0; u < tree.num_nodes(); ++u) {
    if (tree.is_leaf(u)) continue;
    mean.setZero();
    for (NodeId v : tree.neighbors(u)) mean += feats.row(v);
    mean /= tree.degree(u);
    worst = std::max(worst, (feats.row(u) - mean).cwiseAbs().maxCoeff());
  }
  return worst;
}

/// Interior rows of a full feature matrix, in node id order.
inline NodeFeatures interior_rows(const TreeTopology& tree, const NodeFeatures& feats) {
  NodeFeatures out(tree.num_interior(), feats.cols());
  int i = 0;
  for (NodeId u = 0; u < tree.num_nodes(); ++u)
    if (!tree.is_leaf(u)) out.row(i++) = feats.row(u);
  return out;
}

/// Tip rows of a full feature matrix, row k for taxon k.
inline NodeFeatures tip_rows(const TreeTopology& tree, const NodeFeatures& feats) {
  NodeFeatures out(tree.num_taxa(), feats.cols());
  for (int k = 0; k < tree.num_taxa(); ++k) out.row(k) = feats.row(tree.leaf_of_taxon(k));
  return out;
}

/// Recovers the unrooted bifurcating topology whose Dirichlet embedding is
/// `interior` (rows in any order) given linearly independent tip features
/// (row k = taxon k). Each round maps every current tip to the interior node
/// carrying its largest convex-combination coefficient, merges one cherry into
/// that node, which then becomes a tip, and stops at three tips. Interior row j
/// becomes node N + j of the result.
inline TreeTopology reconstruct_topology(const NodeFeatures& interior, const NodeFeatures& tips, TaxaPtr taxa,
                                         double tie_tolerance = 1e-6) {
  const int n = taxa->size();
  if (tips.rows() != n) throw ValidationError("need one tip feature row per taxon");
  if (interior.rows() != n - 2) throw ValidationError("an unrooted bifurcating tree has N-2 interior nodes");
  if (interior.cols() != tips.cols()) throw ValidationError("tip and interior feature dimensions differ");

  // Coefficients of every interior feature in the basis of the tip features.
  Eigen::MatrixXd basis = tips.transpose();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(basis);
  if (qr.rank() < n) throw ValidationError("tip features are linearly dependent");
  Eigen::MatrixXd coef = qr.solve(Eigen::MatrixXd(interior.transpose()));  // n x (n-2)

  struct Tip {
    Eigen::VectorXd coef;
    NodeId node;
  };
  std::vector<Tip> tip_set;
  for (int k = 0; k < n; ++k) tip_set.push_back({Eigen::VectorXd::Unit(n, k), k});
  std::vector<int> pool(static_cast<std::size_t>(n - 2));
  for (int j = 0; j < n - 2; ++j) pool[static_cast<std::size_t>(j)] = j;

  std::vector<std::vector<NodeId>> adj(static_cast<std::size_t>(2 * n - 2));
  auto link = [&](NodeId a, NodeId b) {
    adj[static_cast<std::size_t>(a)].push_back(b);
    adj[static_cast<std::size_t>(b)].push_back(a);
  };

  while (tip_set.size() > 3) {
    const auto t = static_cast<Eigen::Index>(tip_set.size());
    Eigen::MatrixXd b(n, t);
    for (Eigen::Index i = 0; i < t; ++i) b.col(i) = tip_set[static_cast<std::size_t>(i)].coef;
    Eigen::MatrixXd rhs(n, static_cast<Eigen::Index>(pool.size()));
    for (std::size_t j = 0; j < pool.size(); ++j) rhs.col(static_cast<Eigen::Index>(j)) = coef.col(pool[j]);
    Eigen::MatrixXd a = b.colPivHouseholderQr().solve(rhs);  // t x |pool|

    std::vector<int> nearest(static_cast<std::size_t>(t));
    for (Eigen::Index i = 0; i < t; ++i) {
      Eigen::Index best = 0;
      double best_val = a.row(i).maxCoeff(&best);
      double second = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        if (j != best) second = std::max(second, a(i, j));
      if (second >= best_val - tie_tolerance * std::abs(best_val))
        throw AmbiguousEmbedding("tied neighbour coefficients; features are not a valid embedding");
      nearest[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    int first = -1, second = -1;
    for (int i = 0; i < t && second < 0; ++i)
      for (int j = i + 1; j < t; ++j)
        if (nearest[static_cast<std::size_t>(i)] == nearest[static_cast<std::size_t>(j)]) {
          first = i;
          second = j;
          break;
        }
    if (first < 0) throw AmbiguousEmbedding("no cherry found; features are not a valid embedding");
    const auto slot = static_cast<std::size_t>(nearest[static_cast<std::size_t>(first)]);
    const int j = pool[slot];
    const NodeId merged = n + j;
    link(tip_set[static_cast<std::size_t>(first)].node, merged);
    link(tip_set[static_cast<std::size_t>(second)].node, merged);
    tip_set.erase(tip_set.begin() + second);
    tip_set[static_cast<std::size_t>(first)] = {coef.col(j), merged};
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(slot));
  }
  const NodeId center = n + pool.front();
  for (const auto& tp : tip_set) link(tp.node, center);

  std::vector<int> tax(adj.size(), -1);
  for (int k = 0; k < n; ++k) tax[static_cast<std::size_t>(k)] = k;
  try {
    return TreeTopology(std::move(taxa), std::move(adj), std::move(tax), false, center);
  } catch (const ValidationError& e) {
    throw AmbiguousEmbedding(std::string("reconstructed graph is not a bifurcating tree: ") + e.what());
  }
}

}  // namespace phylotopo
