#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include "phylotopo/enumerate.hpp"
#include "phylotopo/error.hpp"
#include "phylotopo/gnn.hpp"
#include "phylotopo/parallel.hpp"

namespace phylotopo::ebm {

using nn::Mat;

// Every topology of a small taxon set, with a target probability and cached raw features.
struct TreeSpaceTable {
  TaxaPtr taxa;
  std::vector<TreeTopology> trees;
  std::vector<NodeFeatures> features;
  std::vector<double> probs;

  std::size_t size() const noexcept { return trees.size(); }
};

inline TreeSpaceTable enumerate_table(int n_taxa) {
  TreeSpaceTable t;
  t.taxa = TaxaSet::numbered(n_taxa);
  t.trees = enumerate_unrooted(t.taxa);
  for (const auto& tree : t.trees) t.features.push_back(nn::tree_features(tree));
  t.probs.assign(t.trees.size(), 1.0 / static_cast<double>(t.trees.size()));
  return t;
}

// One draw from the symmetric Dirichlet(beta), trees in enumeration order. Gamma variates are
// drawn in log space (log Gamma(beta+1) + log(U)/beta) so tiny beta does not underflow.
inline std::vector<double> sample_dirichlet(std::size_t dim, double beta, std::uint64_t seed) {
  if (!(beta > 0.0)) throw ValidationError("Dirichlet concentration must be positive");
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(beta + 1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> logg(dim);
  for (auto& v : logg) {
    double u;
    do u = unit(rng);
    while (u <= 0.0);
    v = std::log(gamma(rng)) + std::log(u) / beta;
  }
  const double mx = *std::max_element(logg.begin(), logg.end());
  double s = 0.0;
  for (auto& v : logg) s += (v = std::exp(v - mx));
  for (auto& v : logg) v /= s;
  return logg;
}

inline TreeSpaceTable sample_dirichlet_target(int n_taxa, double beta, std::uint64_t seed) {
  auto t = enumerate_table(n_taxa);
  t.probs = sample_dirichlet(t.size(), beta, seed);
  return t;
}

inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& log_q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - log_q[i]);
  return std::max(kl, 0.0);
}

// Jensen-Shannon divergence in nats.
inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) s += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) s += 0.5 * q[i] * std::log(q[i] / m);
  }
  return s;
}

// Minimum of the NCE objective with uniform noise: -2 JSD(p || uniform) + 2 log 2.
inline double optimal_nce_loss(const std::vector<double>& p) {
  std::vector<double> u(p.size(), 1.0 / static_cast<double>(p.size()));
  return -2.0 * jsd(p, u) + 2.0 * std::log(2.0);
}

struct EbmConfig {
  nn::GnnConfig gnn;
  int steps = 50000;
  int batch = 128;
  nn::AdamConfig adam;
  double final_lr_ratio = 0.01;  // cosine decay from adam.lr to adam.lr * final_lr_ratio over the run
  int eval_every = 500;
  std::uint64_t seed = 1;
  int threads = 1;
};

// q(tree) = exp(-F(tree)) / Z with F = MLP1(sum over nodes of the encoder output) and log Z free.
class EbmModel {
 public:
  EbmModel(const nn::GnnConfig& cfg, int n_taxa, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    encoder_ = nn::GnnEncoder(store_, "gnn", cfg, n_taxa, rng);
    head_ = nn::Mlp::create(store_, "head", cfg.hidden_dim, cfg.hidden_dim, 1, cfg.mlp_layers, rng);
    logz_ = store_.add("logZ", Mat::Constant(1, 1, log_num_unrooted_topologies(n_taxa)));
  }

  nn::ParameterStore& store() noexcept { return store_; }
  const nn::ParameterStore& store() const noexcept { return store_; }
  double log_z() const { return store_[logz_].value(0, 0); }
  int log_z_index() const noexcept { return logz_; }

  // Energies of a batch as a column (one row per graph).
  nn::Var energies(nn::Tape& t, const nn::GraphBatch& b) const {
    return head_(t, store_, nn::readout_graph(encoder_(t, store_, b).node, b));
  }

  std::vector<double> energies(const std::vector<const TreeTopology*>& trees, const std::vector<const NodeFeatures*>& feats) const {
    nn::Tape t(false);
    Mat e = energies(t, nn::make_batch(trees, feats)).value();
    return {e.data(), e.data() + e.size()};
  }

  double energy(const TreeTopology& tree) const {
    auto f = nn::tree_features(tree);
    return energies({&tree}, {&f})[0];
  }

  double log_q(const TreeTopology& tree) const { return -energy(tree) - log_z(); }

  // Energies of every table entry, in chunks.
  std::vector<double> table_energies(const TreeSpaceTable& table, int threads = 1, std::size_t chunk = 512) const {
    std::vector<double> out(table.size());
    const std::size_t nchunks = (table.size() + chunk - 1) / chunk;
    parallel_for(nchunks, threads, [&](std::size_t c) {
      std::vector<const TreeTopology*> tp;
      std::vector<const NodeFeatures*> fp;
      for (std::size_t i = c * chunk; i < std::min(table.size(), (c + 1) * chunk); ++i)
        tp.push_back(&table.trees[i]), fp.push_back(&table.features[i]);
      auto e = energies(tp, fp);
      std::copy(e.begin(), e.end(), out.begin() + static_cast<std::ptrdiff_t>(c * chunk));
    });
    return out;
  }

  // Minibatch NCE loss with uniform noise over the table; accumulates gradients when asked.
  // Repeated trees are evaluated once and weighted by their data and noise counts.
  double nce_loss(const TreeSpaceTable& table, const std::vector<std::size_t>& data, const std::vector<std::size_t>& noise,
                  bool accumulate_grad) {
    if (data.empty() || noise.empty()) throw ValidationError("NCE batches must be non-empty");
    const double wd = 1.0 / static_cast<double>(data.size()), wn = 1.0 / static_cast<double>(noise.size());
    std::vector<std::size_t> uniq(data);
    uniq.insert(uniq.end(), noise.begin(), noise.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<double> data_w(uniq.size(), 0.0), noise_w(uniq.size(), 0.0);
    auto slot = [&](std::size_t i) {
      if (i >= table.size()) throw ValidationError("NCE batch index out of range");
      return static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), i) - uniq.begin());
    };
    for (auto i : data) data_w[slot(i)] += wd;
    for (auto i : noise) noise_w[slot(i)] += wn;

    std::vector<const TreeTopology*> tp;
    std::vector<const NodeFeatures*> fp;
    for (auto i : uniq) tp.push_back(&table.trees[i]), fp.push_back(&table.features[i]);
    nn::Tape t(accumulate_grad);
    nn::Var f = energies(t, nn::make_batch(tp, fp));
    const double log_noise = -std::log(static_cast<double>(table.size()));
    const double lz = log_z();
    Mat seed(f.rows(), 1);
    double loss = 0.0, dlogz = 0.0;
    for (std::size_t k = 0; k < uniq.size(); ++k) {
      const double d = -f.value()(static_cast<Eigen::Index>(k), 0) - lz - log_noise;
      // dJ/dD; D depends on F and log Z with coefficient -1.
      const double dj = -data_w[k] * sigmoid(-d) + noise_w[k] * sigmoid(d);
      loss -= data_w[k] * log_sigmoid(d) + noise_w[k] * log_sigmoid(-d);
      seed(static_cast<Eigen::Index>(k), 0) = -dj;
      dlogz -= dj;
    }
    if (!std::isfinite(loss)) throw Error("non-finite NCE loss");
    if (accumulate_grad) {
      t.seed(f, seed);
      t.backward();
      t.flush_grads(store_);
      store_[logz_].grad(0, 0) += dlogz;
    }
    return loss;
  }

  struct ExactMetrics {
    double population_loss;  // NCE objective under the exact data and noise distributions
    double kl;               // KL(target || explicitly normalized model)
    double log_partition;    // log sum exp(-F) over the table
  };

  ExactMetrics exact_metrics(const TreeSpaceTable& table, int threads = 1) const {
    auto f = table_energies(table, threads);
    const double log_noise = -std::log(static_cast<double>(table.size()));
    const double lz = log_z();
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : f) mx = std::max(mx, -v);
    double s = 0.0, loss = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      s += std::exp(-f[i] - mx);
      const double d = -f[i] - lz - log_noise;
      loss -= table.probs[i] * log_sigmoid(d) + std::exp(log_noise) * log_sigmoid(-d);
    }
    const double logpart = mx + std::log(s);
    std::vector<double> log_qbar(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) log_qbar[i] = -f[i] - logpart;
    return {loss, kl_divergence(table.probs, log_qbar), logpart};
  }

  // Explicitly normalized model probabilities over the table.
  std::vector<double> normalized_probs(const TreeSpaceTable& table, int threads = 1) const {
    auto f = table_energies(table, threads);
    const double mx = -*std::min_element(f.begin(), f.end());
    double s = 0.0;
    for (auto& v : f) s += (v = std::exp(-v - mx));
    for (auto& v : f) v /= s;
    return f;
  }

 private:
  nn::ParameterStore store_;
  nn::GnnEncoder encoder_;
  nn::Mlp head_;
  int logz_ = -1;
};

struct TraceRecord {
  int step;
  double nce_loss;  // exact population loss
  double kl;
  double log_z;
};

// Inverse-CDF sampler over the table probabilities.
class TableSampler {
 public:
  explicit TableSampler(const std::vector<double>& probs) : cdf_(probs.size()) {
    std::partial_sum(probs.begin(), probs.end(), cdf_.begin());
  }
  template <class Rng>
  std::size_t operator()(Rng& rng) const {
    const double u = std::uniform_real_distribution<double>(0.0, cdf_.back())(rng);
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

// Adam on minibatch NCE; exact metrics at step 0, every eval_every steps and at the end.
inline std::vector<TraceRecord> train_nce(EbmModel& model, const TreeSpaceTable& table, const EbmConfig& cfg,
                                          const std::function<void(const TraceRecord&)>& on_record = {}) {
  if (cfg.steps < 0 || cfg.batch < 1 || cfg.eval_every < 1 || !(cfg.adam.lr > 0) || !(cfg.final_lr_ratio > 0) ||
      cfg.final_lr_ratio > 1)
    throw ValidationError("invalid NCE training configuration");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  TableSampler data(table.probs);
  std::uniform_int_distribution<std::size_t> noise(0, table.size() - 1);
  std::vector<TraceRecord> trace;
  auto record = [&](int step) {
    auto m = model.exact_metrics(table, cfg.threads);
    trace.push_back({step, m.population_loss, m.kl, model.log_z()});
    if (on_record) on_record(trace.back());
  };
  record(0);
  std::vector<std::size_t> d(static_cast<std::size_t>(cfg.batch)), n(static_cast<std::size_t>(cfg.batch));
  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& i : d) i = data(rng);
    for (auto& i : n) i = noise(rng);
    model.nce_loss(table, d, n, true);
    nn::AdamConfig adam = cfg.adam;
    const double t = cfg.steps > 1 ? static_cast<double>(step - 1) / (cfg.steps - 1) : 1.0;
    adam.lr *= cfg.final_lr_ratio + (1.0 - cfg.final_lr_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    nn::adam_step(model.store(), adam);
    if (step % cfg.eval_every == 0 || step == cfg.steps) record(step);
  }
  return trace;
}

}  // namespace phylotopo::ebm
