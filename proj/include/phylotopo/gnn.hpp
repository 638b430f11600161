#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "phylotopo/embed.hpp"
#include "phylotopo/error.hpp"
#include "phylotopo/tensor.hpp"
#include "phylotopo/tree.hpp"

namespace phylotopo::nn {

enum class GnnVariant { MLP, GCN, GIN, SAGE, GGNN, EDGE };

inline std::string to_string(GnnVariant v) {
  switch (v) {
    case GnnVariant::MLP: return "mlp";
    case GnnVariant::GCN: return "gcn";
    case GnnVariant::GIN: return "gin";
    case GnnVariant::SAGE: return "sage";
    case GnnVariant::GGNN: return "ggnn";
    case GnnVariant::EDGE: return "edge";
  }
  return "?";
}

inline GnnVariant parse_variant(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (auto v : {GnnVariant::MLP, GnnVariant::GCN, GnnVariant::GIN, GnnVariant::SAGE, GnnVariant::GGNN, GnnVariant::EDGE})
    if (to_string(v) == s) return v;
  throw ValidationError("unknown GNN variant '" + s + "' (expected mlp, gcn, gin, sage, ggnn or edge)");
}

struct GnnConfig {
  GnnVariant variant = GnnVariant::GGNN;
  int layers = 2;  // message-passing steps; ignored (treated as 0) for the MLP variant
  int hidden_dim = 100;
  int mlp_layers = 2;
  bool learn_gin_eps = false;

  int steps() const { return variant == GnnVariant::MLP ? 0 : layers; }
  void validate() const {
    if (layers < 0) throw ValidationError("layers must be >= 0");
    if (hidden_dim < 1) throw ValidationError("hidden_dim must be >= 1");
    if (mlp_layers < 1) throw ValidationError("mlp_layers must be >= 1");
  }
};

// Disjoint union of trees. Undirected edge k of the batch is (edge_u[k], edge_v[k]) and owns the
// directed messages 2k (u -> v) and 2k+1 (v -> u) in src/dst.
struct GraphBatch {
  Mat features;
  std::vector<int> src, dst;
  Eigen::VectorXd degree;
  std::vector<int> graph_of_node;
  std::vector<int> edge_u, edge_v;
  std::vector<int> edge_offset;  // first batch edge of each graph, plus a final sentinel
  std::vector<int> node_offset;
  int num_graphs = 0;

  Eigen::Index num_nodes() const { return features.rows(); }
  int num_edges() const { return static_cast<int>(edge_u.size()); }
};

inline GraphBatch make_batch(const std::vector<const TreeTopology*>& trees, const std::vector<const NodeFeatures*>& features) {
  if (trees.empty() || trees.size() != features.size()) throw ValidationError("batch needs matching trees and features");
  GraphBatch b;
  const auto d = features.front()->cols();
  Eigen::Index total = 0;
  for (std::size_t g = 0; g < trees.size(); ++g) {
    if (features[g]->rows() != trees[g]->num_nodes() || features[g]->cols() != d)
      throw ValidationError("feature matrix shape does not match its tree");
    total += features[g]->rows();
  }
  b.features.resize(total, d);
  b.degree.resize(total);
  b.num_graphs = static_cast<int>(trees.size());
  int base = 0;
  for (std::size_t g = 0; g < trees.size(); ++g) {
    const auto& t = *trees[g];
    b.node_offset.push_back(base);
    b.edge_offset.push_back(static_cast<int>(b.edge_u.size()));
    b.features.middleRows(base, t.num_nodes()) = *features[g];
    for (NodeId u = 0; u < t.num_nodes(); ++u) {
      b.degree[base + u] = t.degree(u);
      b.graph_of_node.push_back(static_cast<int>(g));
    }
    for (EdgeId e = 0; e < t.num_edges(); ++e) {
      const int u = base + t.edge_child(e), v = base + t.edge_parent(e);
      b.edge_u.push_back(u);
      b.edge_v.push_back(v);
      b.src.insert(b.src.end(), {u, v});
      b.dst.insert(b.dst.end(), {v, u});
    }
    base += t.num_nodes();
  }
  b.node_offset.push_back(base);
  b.edge_offset.push_back(static_cast<int>(b.edge_u.size()));
  return b;
}

inline GraphBatch make_batch(const TreeTopology& tree, const NodeFeatures& features) {
  return make_batch(std::vector<const TreeTopology*>{&tree}, std::vector<const NodeFeatures*>{&features});
}

struct Linear {
  int weight = -1, bias = -1;

  template <class Rng>
  static Linear create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
                       bool with_bias = true) {
    Linear l;
    l.weight = store.add(name + ".weight", glorot_uniform(in, out, rng));
    if (with_bias) l.bias = store.add(name + ".bias", Mat::Zero(1, out));
    return l;
  }

  Var operator()(Tape& t, const ParameterStore& store, Var x) const {
    Var y = matmul(x, t.param(store, weight));
    return bias >= 0 ? add_row(y, t.param(store, bias)) : y;
  }
};

// Affine layers with ELU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  template <class Rng>
  static Mlp create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index hidden,
                    Eigen::Index out, int depth, Rng& rng) {
    Mlp m;
    for (int i = 0; i < depth; ++i) {
      const auto a = i == 0 ? in : hidden;
      const auto b = i == depth - 1 ? out : hidden;
      m.layers.push_back(Linear::create(store, name + "." + std::to_string(i), a, b, rng));
    }
    return m;
  }

  Var operator()(Tape& t, const ParameterStore& store, Var x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](t, store, x);
      if (i + 1 < layers.size()) x = elu(x);
    }
    return x;
  }
};

inline Var neighbor_sum(Var h, const GraphBatch& b) {
  return scatter_add_rows(gather_rows(h, b.src), b.dst, b.num_nodes());
}

inline Var readout_graph(Var h, const GraphBatch& b) { return segment_sum(h, b.graph_of_node, b.num_graphs); }

inline Var readout_edge(Var hu, Var hv) { return maximum(hu, hv); }

// One message-passing step of the chosen operator.
class ConvLayer {
 public:
  ConvLayer() = default;

  template <class Rng>
  ConvLayer(ParameterStore& store, const std::string& name, GnnVariant variant, Eigen::Index in, Eigen::Index hidden,
            int mlp_layers, bool learn_eps, Rng& rng)
      : variant_(variant), in_(in), hidden_(hidden) {
    switch (variant) {
      case GnnVariant::GCN:
        w_ = Linear::create(store, name + ".w", in, hidden, rng, false);
        break;
      case GnnVariant::GIN:
        mlp_ = Mlp::create(store, name + ".mlp", in, hidden, hidden, mlp_layers, rng);
        if (learn_eps) eps_ = store.add(name + ".eps", Mat::Zero(1, 1));
        break;
      case GnnVariant::SAGE:
        w_ = Linear::create(store, name + ".w1", in, hidden, rng);
        w2_ = Linear::create(store, name + ".w2", in, hidden, rng, false);
        break;
      case GnnVariant::GGNN:
        if (in > hidden) throw ValidationError("GGNN needs input dimension <= hidden dimension");
        w_ = Linear::create(store, name + ".w", hidden, hidden, rng, false);
        gru_in_ = Linear::create(store, name + ".gru_in", hidden, 3 * hidden, rng);
        gru_hidden_ = Linear::create(store, name + ".gru_hidden", hidden, 3 * hidden, rng);
        break;
      case GnnVariant::EDGE:
        mlp_ = Mlp::create(store, name + ".mlp", 2 * in, hidden, hidden, mlp_layers, rng);
        break;
      case GnnVariant::MLP:
        throw ValidationError("the MLP variant has no convolution layers");
    }
  }

  struct Result {
    Var node;
    std::optional<Var> edge;  // EDGE only: e_{src -> dst} for every directed message
  };

  // Raw operator output, before any post-activation.
  Result operator()(Tape& t, const ParameterStore& store, Var h, const GraphBatch& b) const {
    if (h.cols() != in_) throw ValidationError("conv input has " + std::to_string(h.cols()) + " columns, expected " + std::to_string(in_));
    switch (variant_) {
      case GnnVariant::GCN: {
        Eigen::VectorXd norm = (1.0 + b.degree.array()).rsqrt();
        Var hs = row_scale(h, norm);
        Var m = add(hs, neighbor_sum(hs, b));
        return {w_(t, store, row_scale(m, norm)), {}};
      }
      case GnnVariant::GIN: {
        Var self = eps_ >= 0 ? add(h, scale_by(h, t.param(store, eps_))) : h;
        return {mlp_(t, store, add(self, neighbor_sum(h, b))), {}};
      }
      case GnnVariant::SAGE: {
        Eigen::VectorXd inv = b.degree.cwiseInverse();
        return {add(w_(t, store, h), w2_(t, store, row_scale(neighbor_sum(h, b), inv))), {}};
      }
      case GnnVariant::GGNN: {
        Var hp = h.cols() < hidden_ ? pad_cols(h, hidden_) : h;
        Var m = neighbor_sum(w_(t, store, hp), b);
        Var gi = gru_in_(t, store, m), gh = gru_hidden_(t, store, hp);
        Var r = sigmoid(add(slice_cols(gi, 0, hidden_), slice_cols(gh, 0, hidden_)));
        Var z = sigmoid(add(slice_cols(gi, hidden_, hidden_), slice_cols(gh, hidden_, hidden_)));
        Var n = tanh(add(slice_cols(gi, 2 * hidden_, hidden_), hadamard(r, slice_cols(gh, 2 * hidden_, hidden_))));
        // (1 - z) * n + z * h
        return {add(n, hadamard(z, sub(hp, n))), {}};
      }
      case GnnVariant::EDGE: {
        Var hv = gather_rows(h, b.dst), hu = gather_rows(h, b.src);
        Var e = mlp_(t, store, concat_cols(hv, sub(hu, hv)));
        return {scatter_add_rows(e, b.dst, b.num_nodes()), e};
      }
      case GnnVariant::MLP: break;
    }
    throw Error("unreachable conv variant");
  }

 private:
  GnnVariant variant_ = GnnVariant::GCN;
  Eigen::Index in_ = 0, hidden_ = 0;
  Linear w_, w2_, gru_in_, gru_hidden_;
  Mlp mlp_;
  int eps_ = -1;
};

// Raw node embeddings -> T convolution steps -> per-node MLP. The EDGE variant also yields per-edge
// features taken from the last step's directed messages, passed through the same node MLP.
class GnnEncoder {
 public:
  GnnEncoder() = default;

  template <class Rng>
  GnnEncoder(ParameterStore& store, const std::string& prefix, const GnnConfig& cfg, Eigen::Index input_dim, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    Eigen::Index d = input_dim;
    for (int i = 0; i < cfg.steps(); ++i) {
      convs_.emplace_back(store, prefix + ".conv" + std::to_string(i), cfg.variant, d, cfg.hidden_dim, cfg.mlp_layers,
                          cfg.learn_gin_eps, rng);
      d = cfg.hidden_dim;
    }
    mlp0_ = Mlp::create(store, prefix + ".mlp0", d, cfg.hidden_dim, cfg.hidden_dim, cfg.mlp_layers, rng);
  }

  const GnnConfig& config() const noexcept { return cfg_; }
  Eigen::Index output_dim() const noexcept { return cfg_.hidden_dim; }

  struct Output {
    Var node;
    std::optional<Var> edge_messages;  // rows follow the directed message order of the batch
  };

  Output operator()(Tape& t, const ParameterStore& store, const GraphBatch& b) const {
    Var h = t.constant(b.features);
    std::optional<Var> edge;
    for (const auto& conv : convs_) {
      auto r = conv(t, store, h, b);
      h = cfg_.variant == GnnVariant::GGNN ? r.node : elu(r.node);
      if (r.edge) edge = elu(*r.edge);
    }
    Output out{mlp0_(t, store, h), {}};
    if (edge) out.edge_messages = mlp0_(t, store, *edge);
    return out;
  }

  // Per-edge features: elementwise max over both endpoints (and both directed messages for EDGE).
  Var edge_features(const Output& o, const GraphBatch& b) const {
    Var hu = gather_rows(o.node, b.edge_u), hv = gather_rows(o.node, b.edge_v);
    Var he = readout_edge(hu, hv);
    if (o.edge_messages) {
      std::vector<int> fwd, bwd;
      for (int k = 0; k < b.num_edges(); ++k) fwd.push_back(2 * k), bwd.push_back(2 * k + 1);
      he = maximum(he, maximum(gather_rows(*o.edge_messages, fwd), gather_rows(*o.edge_messages, bwd)));
    }
    return he;
  }

 private:
  GnnConfig cfg_;
  std::vector<ConvLayer> convs_;
  Mlp mlp0_;
};

// Raw features used throughout: one-hot tips with interior rows from the two-pass solver.
inline NodeFeatures tree_features(const TreeTopology& tree) { return embed_two_pass(tree, one_hot_tips(tree)); }

}  // namespace phylotopo::nn
