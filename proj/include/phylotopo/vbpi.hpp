#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "phylotopo/error.hpp"
#include "phylotopo/gnn.hpp"
#include "phylotopo/parallel.hpp"
#include "phylotopo/phylo.hpp"
#include "phylotopo/sbn.hpp"

namespace phylotopo::vbpi {

using nn::Mat;

inline constexpr double kLogTwoPi = 1.8378770664093453;

enum class BranchKind { Split, PSP, GNN };

inline std::string to_string(BranchKind k) {
  switch (k) {
    case BranchKind::Split: return "split";
    case BranchKind::PSP: return "psp";
    case BranchKind::GNN: return "gnn";
  }
  return "?";
}

inline BranchKind parse_branch_kind(std::string_view s) {
  if (s == "split") return BranchKind::Split;
  if (s == "psp") return BranchKind::PSP;
  if (s == "gnn") return BranchKind::GNN;
  throw ValidationError("unknown branch parameterization '" + std::string(s) + "' (expected split, psp or gnn)");
}

inline double logmeanexp(const std::vector<double>& x) {
  if (x.empty()) throw ValidationError("logmeanexp of an empty sample");
  const double mx = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s / static_cast<double>(x.size()));
}

// Normalized importance weights exp(x_i) / sum_j exp(x_j).
inline std::vector<double> softmax(const std::vector<double>& x) {
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> w(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (w[i] = std::exp(x[i] - mx));
  for (auto& v : w) v /= s;
  return w;
}

inline double lognormal_log_density(double q, double mu, double sigma) {
  const double z = (std::log(q) - mu) / sigma;
  return -std::log(q) - std::log(sigma) - 0.5 * kLogTwoPi - 0.5 * z * z;
}

inline double lognormal_entropy(double mu, double sigma) { return mu + 0.5 + std::log(sigma) + 0.5 * kLogTwoPi; }

// q_e = exp(mu_e + exp(log_sigma_e) eps_e) and the density of the diagonal Lognormal at q.
struct BranchSample {
  BranchLengths q;
  std::vector<double> eps;
  double log_density = 0.0;
};

inline BranchSample branches_from_noise(const std::vector<double>& mu, const std::vector<double>& log_sigma,
                                        std::vector<double> eps) {
  if (mu.size() != log_sigma.size() || mu.size() != eps.size()) throw ValidationError("branch parameter sizes differ");
  BranchSample s;
  s.q.resize(mu.size());
  for (std::size_t e = 0; e < mu.size(); ++e) {
    const double x = mu[e] + std::exp(log_sigma[e]) * eps[e];
    s.q[e] = std::exp(x);
    // log density in terms of the noise: -x - log sigma - log(2 pi)/2 - eps^2/2
    s.log_density += -x - log_sigma[e] - 0.5 * kLogTwoPi - 0.5 * eps[e] * eps[e];
  }
  s.eps = std::move(eps);
  return s;
}

template <class Rng>
BranchSample sample_branches(const std::vector<double>& mu, const std::vector<double>& log_sigma, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> eps(mu.size());
  for (auto& v : eps) v = normal(rng);
  return branches_from_noise(mu, log_sigma, std::move(eps));
}

// d/dx_e of [lambda log p(Y|tree, q) + log p(tree, q) - log Q(q|tree)] with x = log q and the noise fixed,
// given the likelihood gradient in q. The -log Q term contributes +1 through x.
inline std::vector<double> bound_grad_log_q(const BranchLengths& q, const BranchLengths& loglik_grad, double lambda) {
  std::vector<double> g(q.size());
  for (std::size_t e = 0; e < q.size(); ++e) g[e] = (lambda * loglik_grad[e] - kPriorRate) * q[e] + 1.0;
  return g;
}

struct VbpiConfig {
  BranchKind kind = BranchKind::Split;
  nn::GnnConfig gnn;
  int K = 10;
  int steps = 10000;
  double lr_phi = 1e-3;
  double lr_psi = 1e-3;
  double anneal_init = 0.001;
  double anneal_horizon = 100000;
  double init_mu = -2.302585092994046;  // log 0.1, the prior mean branch length
  double init_log_sigma = -1.0;
  int eval_every = 100;
  int eval_samples = 100;
  std::uint64_t seed = 1;
  int threads = 1;

  void validate() const {
    if (K < 2) throw ValidationError("VIMCO needs K >= 2");
    if (steps < 0) throw ValidationError("steps must be >= 0");
    if (!(lr_phi > 0) || !(lr_psi > 0)) throw ValidationError("learning rates must be positive");
    if (!(anneal_init > 0) || anneal_init > 1) throw ValidationError("anneal_init must be in (0, 1]");
    if (!(anneal_horizon > 0)) throw ValidationError("anneal_horizon must be positive");
    if (eval_every < 1 || eval_samples < 1) throw ValidationError("evaluation settings must be positive");
    gnn.validate();
  }
};

// Likelihood tempering weight after n updates.
inline double anneal_weight(const VbpiConfig& cfg, long n) {
  return std::min(1.0, cfg.anneal_init + static_cast<double>(n) / cfg.anneal_horizon);
}

// Per-edge Lognormal parameters as a function of the tree: split tables, split plus PSP tables, or a GNN.
class BranchParamModel {
 public:
  BranchParamModel() = default;

  BranchParamModel(BranchKind kind, SupportPtr support, const nn::GnnConfig& gnn, int n_taxa, std::uint64_t seed,
                   double init_mu, double init_log_sigma)
      : kind_(kind), support_(std::move(support)) {
    if (kind != BranchKind::GNN) {
      if (!support_) throw ValidationError("split and PSP parameterizations need an SBN support");
      const auto s = support_->num_splits();
      mu_split_ = store_.add("psi.mu.split", Mat::Constant(s, 1, init_mu));
      ls_split_ = store_.add("psi.log_sigma.split", Mat::Constant(s, 1, init_log_sigma));
      if (kind == BranchKind::PSP) {
        const auto p = std::max(1, support_->num_psps());
        mu_psp_ = store_.add("psi.mu.psp", Mat::Zero(p, 1));
        ls_psp_ = store_.add("psi.log_sigma.psp", Mat::Zero(p, 1));
      }
      return;
    }
    std::mt19937_64 rng(seed);
    encoder_ = nn::GnnEncoder(store_, "psi.gnn", gnn, n_taxa, rng);
    mlp_mu_ = nn::Mlp::create(store_, "psi.mu", gnn.hidden_dim, gnn.hidden_dim, 1, gnn.mlp_layers, rng);
    mlp_ls_ = nn::Mlp::create(store_, "psi.log_sigma", gnn.hidden_dim, gnn.hidden_dim, 1, gnn.mlp_layers, rng);
    store_[mlp_mu_.layers.back().bias].value.setConstant(init_mu);
    store_[mlp_ls_.layers.back().bias].value.setConstant(init_log_sigma);
  }

  BranchKind kind() const noexcept { return kind_; }
  nn::ParameterStore& store() noexcept { return store_; }
  const nn::ParameterStore& store() const noexcept { return store_; }

  struct EdgeParams {
    nn::Var mu, log_sigma;  // column vectors indexed by EdgeId
  };

  EdgeParams operator()(nn::Tape& t, const TreeTopology& tree) const {
    if (kind_ == BranchKind::GNN) {
      auto feats = nn::tree_features(tree);
      auto b = nn::make_batch(tree, feats);
      auto o = encoder_(t, store_, b);
      nn::Var he = encoder_.edge_features(o, b);
      return {mlp_mu_(t, store_, he), mlp_ls_(t, store_, he)};
    }
    auto idx = edge_parameter_indices(*support_, tree);
    std::vector<int> split;
    for (const auto& i : idx) {
      if (i.split < 0) throw OutOfSupport("tree has a split outside the branch-parameter support");
      split.push_back(i.split);
    }
    nn::Var mu = nn::gather_rows(t.param(store_, mu_split_), split);
    nn::Var ls = nn::gather_rows(t.param(store_, ls_split_), split);
    if (kind_ == BranchKind::PSP) {
      std::vector<int> psp, edge;
      for (std::size_t e = 0; e < idx.size(); ++e)
        for (int p : idx[e].psp)
          if (p >= 0) psp.push_back(p), edge.push_back(static_cast<int>(e));
      if (!psp.empty()) {
        const auto n = static_cast<Eigen::Index>(idx.size());
        mu = nn::add(mu, nn::scatter_add_rows(nn::gather_rows(t.param(store_, mu_psp_), psp), edge, n));
        ls = nn::add(ls, nn::scatter_add_rows(nn::gather_rows(t.param(store_, ls_psp_), psp), edge, n));
      }
    }
    return {mu, ls};
  }

  std::pair<std::vector<double>, std::vector<double>> values(const TreeTopology& tree) const {
    nn::Tape t(false);
    auto p = (*this)(t, tree);
    const Mat& m = p.mu.value();
    const Mat& s = p.log_sigma.value();
    return {{m.data(), m.data() + m.size()}, {s.data(), s.data() + s.size()}};
  }

 private:
  BranchKind kind_ = BranchKind::Split;
  SupportPtr support_;
  nn::ParameterStore store_;
  int mu_split_ = -1, ls_split_ = -1, mu_psp_ = -1, ls_psp_ = -1;
  nn::GnnEncoder encoder_;
  nn::Mlp mlp_mu_, mlp_ls_;
};

// SBN over topologies (phi) plus branch-length model (psi).
class VbpiState {
 public:
  VbpiState(SupportPtr support, const VbpiConfig& cfg)
      : sbn_(support),
        branch_(cfg.kind, support, cfg.gnn, support->taxa()->size(), cfg.seed, cfg.init_mu, cfg.init_log_sigma) {
    cfg.validate();
    phi_ = phi_store_.add("phi", Mat::Zero(sbn_.num_parameters(), 1));
  }

  SbnModel& sbn() noexcept { return sbn_; }
  const SbnModel& sbn() const noexcept { return sbn_; }
  BranchParamModel& branch() noexcept { return branch_; }
  const BranchParamModel& branch() const noexcept { return branch_; }
  nn::ParameterStore& phi_store() noexcept { return phi_store_; }
  const nn::ParameterStore& phi_store() const noexcept { return phi_store_; }
  long& step() noexcept { return step_; }
  long step() const noexcept { return step_; }

  // Copies the stored phi into the SBN after an optimizer step or a load.
  void sync_phi() {
    const Mat& v = phi_store_[phi_].value;
    sbn_.set_phi({v.data(), v.data() + v.size()});
  }

 private:
  SbnModel sbn_;
  BranchParamModel branch_;
  nn::ParameterStore phi_store_;
  int phi_ = -1;
  long step_ = 0;
};

// One draw (tree, q) with every term of its importance weight.
struct Particle {
  TreeTopology tree;
  BranchSample branches;
  double log_lik = 0.0, log_prior = 0.0, log_q_tree = 0.0;

  double log_weight(double lambda) const { return lambda * log_lik + log_prior - log_q_tree - branches.log_density; }
};

template <class Rng>
Particle draw_particle(const VbpiState& s, const LikelihoodEngine& engine, Rng& rng) {
  Particle p;
  p.tree = s.sbn().sample(rng);
  auto [mu, ls] = s.branch().values(p.tree);
  p.branches = sample_branches(mu, ls, rng);
  p.log_lik = engine.log_likelihood(p.tree, p.branches.q);
  p.log_prior = log_prior(p.tree, p.branches.q);
  p.log_q_tree = s.sbn().log_prob_unrooted(p.tree);
  return p;
}

// n independent particles, each from its own seed so results do not depend on the thread count.
inline std::vector<Particle> draw_particles(const VbpiState& s, const LikelihoodEngine& engine, std::size_t n,
                                            std::mt19937_64& rng, int threads) {
  std::vector<std::uint64_t> seeds(n);
  for (auto& v : seeds) v = rng();
  std::vector<Particle> out(n);
  parallel_for(n, threads, [&](std::size_t i) {
    std::mt19937_64 r(seeds[i]);
    out[i] = draw_particle(s, engine, r);
  });
  return out;
}

struct LowerBoundEstimate {
  double value;
  std::vector<double> log_weights;
};

// K-sample lower bound logmeanexp(log w) with the likelihood tempered by lambda.
inline LowerBoundEstimate lower_bound(const VbpiState& s, const LikelihoodEngine& engine, int K, std::mt19937_64& rng,
                                      double lambda = 1.0, int threads = 1) {
  if (K < 1) throw ValidationError("K must be >= 1");
  auto ps = draw_particles(s, engine, static_cast<std::size_t>(K), rng, threads);
  LowerBoundEstimate est;
  for (const auto& p : ps) est.log_weights.push_back(p.log_weight(lambda));
  est.value = logmeanexp(est.log_weights);
  return est;
}

// Standard evidence lower bound: average single-sample log weight.
inline double elbo(const VbpiState& s, const LikelihoodEngine& engine, int n, std::mt19937_64& rng, int threads = 1) {
  auto ps = draw_particles(s, engine, static_cast<std::size_t>(n), rng, threads);
  double m = 0.0;
  for (const auto& p : ps) m += p.log_weight(1.0) / static_cast<double>(n);
  return m;
}

// VIMCO coefficients on grad log Q(tree_i) for the gradient of the K-sample bound:
//   (L - L_{-i}) - w_i,
// where L_{-i} replaces log w_i by the mean of the others and w_i is the normalized weight.
// The -w_i part comes from log Q(tree_i) appearing inside log w_i.
inline std::vector<double> vimco_coefficients(const std::vector<double>& log_w) {
  const std::size_t K = log_w.size();
  if (K < 2) throw ValidationError("VIMCO needs K >= 2");
  const double L = logmeanexp(log_w);
  const double total = std::accumulate(log_w.begin(), log_w.end(), 0.0);
  auto w = softmax(log_w);
  std::vector<double> c(K);
  auto loo = log_w;
  for (std::size_t i = 0; i < K; ++i) {
    loo[i] = (total - log_w[i]) / static_cast<double>(K - 1);
    c[i] = (L - logmeanexp(loo)) - w[i];
    loo[i] = log_w[i];
  }
  return c;
}

// Leave-one-out learning signals L - L_{-i} alone.
inline std::vector<double> vimco_signals(const std::vector<double>& log_w) {
  auto c = vimco_coefficients(log_w);
  auto w = softmax(log_w);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += w[i];
  return c;
}

struct StepResult {
  double lower_bound;
  double lambda;
};

// Particle with everything needed for its gradient contribution.
struct GradParticle {
  Particle particle;
  std::unique_ptr<nn::Tape> tape;
  BranchParamModel::EdgeParams params;
  std::vector<double> log_sigma;
  BranchLengths loglik_grad;
  std::vector<double> log_q_tree_grad;
};

template <class Rng>
GradParticle draw_grad_particle(const VbpiState& s, const LikelihoodEngine& engine, Rng& rng) {
  GradParticle g;
  auto& p = g.particle;
  p.tree = s.sbn().sample(rng);
  g.tape = std::make_unique<nn::Tape>();
  g.params = s.branch()(*g.tape, p.tree);
  const Mat& m = g.params.mu.value();
  const Mat& l = g.params.log_sigma.value();
  std::vector<double> mu(m.data(), m.data() + m.size());
  g.log_sigma.assign(l.data(), l.data() + l.size());
  p.branches = sample_branches(mu, g.log_sigma, rng);
  p.log_lik = engine.log_likelihood_grad(p.tree, p.branches.q, g.loglik_grad);
  p.log_prior = log_prior(p.tree, p.branches.q);
  p.log_q_tree = s.sbn().log_prob_grad(p.tree, g.log_q_tree_grad, 1.0);
  return g;
}

// Adds the gradient of -L (the annealed K-sample bound) into the phi and psi stores: VIMCO for phi,
// reparameterization for psi. Particles are drawn exactly as lower_bound draws them from the same rng.
inline StepResult accumulate_gradients(VbpiState& s, const LikelihoodEngine& engine, int K_samples, double lambda,
                                       std::mt19937_64& rng, int threads = 1) {
  if (K_samples < 2) throw ValidationError("VIMCO needs K >= 2");
  const auto K = static_cast<std::size_t>(K_samples);
  std::vector<std::uint64_t> seeds(K);
  for (auto& v : seeds) v = rng();
  std::vector<GradParticle> ps(K);
  parallel_for(K, threads, [&](std::size_t i) {
    std::mt19937_64 r(seeds[i]);
    ps[i] = draw_grad_particle(s, engine, r);
  });
  std::vector<double> log_w(K);
  for (std::size_t i = 0; i < K; ++i) log_w[i] = ps[i].particle.log_weight(lambda);
  const double L = logmeanexp(log_w);
  if (!std::isfinite(L)) throw Error("non-finite lower bound");
  const auto w = softmax(log_w);
  const auto c = vimco_coefficients(log_w);

  // phi: minimize -L
  auto& phi_grad = s.phi_store()[0].grad;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < ps[i].log_q_tree_grad.size(); ++j)
      phi_grad(static_cast<Eigen::Index>(j), 0) -= c[i] * ps[i].log_q_tree_grad[j];

  // psi: pathwise gradient of L = sum_i w_i d log w_i
  parallel_for(K, threads, [&](std::size_t i) {
    auto& g = ps[i];
    const auto& b = g.particle.branches;
    auto dx = bound_grad_log_q(b.q, g.loglik_grad, lambda);
    const auto E = static_cast<Eigen::Index>(dx.size());
    Mat seed_mu(E, 1), seed_ls(E, 1);
    for (Eigen::Index e = 0; e < E; ++e) {
      const auto k = static_cast<std::size_t>(e);
      seed_mu(e, 0) = -w[i] * dx[k];
      seed_ls(e, 0) = -w[i] * (dx[k] * std::exp(g.log_sigma[k]) * b.eps[k] + 1.0);
    }
    g.tape->seed(g.params.mu, seed_mu);
    g.tape->seed(g.params.log_sigma, seed_ls);
    g.tape->backward();
  });
  for (auto& g : ps) g.tape->flush_grads(s.branch().store());
  return {L, lambda};
}

// One Adam update of phi and psi on the annealed K-sample bound.
inline StepResult train_step(VbpiState& s, const LikelihoodEngine& engine, const VbpiConfig& cfg, std::mt19937_64& rng) {
  auto r = accumulate_gradients(s, engine, cfg.K, anneal_weight(cfg, s.step()), rng, cfg.threads);
  nn::AdamConfig a_phi, a_psi;
  a_phi.lr = cfg.lr_phi;
  a_psi.lr = cfg.lr_psi;
  nn::adam_step(s.phi_store(), a_phi);
  nn::adam_step(s.branch().store(), a_psi);
  s.sync_phi();
  ++s.step();
  return r;
}

struct TraceRecord {
  long step;
  double elbo;
  double lambda;
};

// Runs cfg.steps updates, recording a standard ELBO estimate at step 0 and every eval_every steps.
// Evaluation draws come from a separate stream so they do not perturb training.
inline std::vector<TraceRecord> train(VbpiState& s, const LikelihoodEngine& engine, const VbpiConfig& cfg,
                                      const std::function<void(const TraceRecord&)>& on_record = {}) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::vector<TraceRecord> trace;
  auto record = [&] {
    std::mt19937_64 eval_rng(cfg.seed ^ (0x5851f42d4c957f2dULL * static_cast<std::uint64_t>(s.step() + 1)));
    trace.push_back({s.step(), elbo(s, engine, cfg.eval_samples, eval_rng, cfg.threads), anneal_weight(cfg, s.step())});
    if (on_record) on_record(trace.back());
  };
  record();
  for (int n = 1; n <= cfg.steps; ++n) {
    train_step(s, engine, cfg, rng);
    if (n % cfg.eval_every == 0 || n == cfg.steps) record();
  }
  return trace;
}

struct MarginalLikelihood {
  double mean;
  double stddev;
  std::vector<double> runs;
};

// Importance-sampling estimate logmeanexp(log w) over n_samples unannealed weights, repeated `runs` times.
inline MarginalLikelihood estimate_marginal_likelihood(const VbpiState& s, const LikelihoodEngine& engine, int n_samples,
                                                       int runs, std::uint64_t seed, int threads = 1) {
  if (n_samples < 1 || runs < 1) throw ValidationError("marginal likelihood needs positive sample and run counts");
  MarginalLikelihood ml{0.0, 0.0, {}};
  std::mt19937_64 rng(seed);
  for (int r = 0; r < runs; ++r) ml.runs.push_back(lower_bound(s, engine, n_samples, rng, 1.0, threads).value);
  ml.mean = std::accumulate(ml.runs.begin(), ml.runs.end(), 0.0) / runs;
  double v = 0.0;
  for (double x : ml.runs) v += (x - ml.mean) * (x - ml.mean);
  ml.stddev = runs > 1 ? std::sqrt(v / (runs - 1)) : 0.0;
  return ml;
}

struct GapConfig {
  int steps = 500;          // per-tree optimizer budget
  int samples = 10;         // reparameterized draws per optimizer step
  double lr = 1e-2;
  int eval_samples = 2000;  // common noise draws for both ELBOs
};

struct AmortizationGap {
  double gap;
  double amortized_elbo;
  double optimized_elbo;
  bool clipped;  // the per-tree optimum did not beat the amortized parameters
};

// ELBO of the tree-conditional branch distribution, log p(Y, q | tree) + log p(tree) - log Q(q | tree),
// averaged over fixed noise draws.
inline double conditional_elbo(const TreeTopology& tree, const LikelihoodEngine& engine, const std::vector<double>& mu,
                               const std::vector<double>& log_sigma, const std::vector<std::vector<double>>& noise) {
  double m = 0.0;
  for (const auto& eps : noise) {
    auto b = branches_from_noise(mu, log_sigma, eps);
    m += engine.log_likelihood(tree, b.q) + log_prior(tree, b.q) - b.log_density;
  }
  return m / static_cast<double>(noise.size());
}

// Per-tree ELBO after optimizing free Lognormal parameters from the amortized values, minus the
// amortized ELBO, both under the same noise draws.
inline AmortizationGap amortization_gap(const VbpiState& s, const TreeTopology& tree, const LikelihoodEngine& engine,
                                        const GapConfig& cfg, std::uint64_t seed) {
  if (cfg.steps < 0 || cfg.samples < 1 || cfg.eval_samples < 1) throw ValidationError("invalid amortization gap settings");
  auto [mu0, ls0] = s.branch().values(tree);
  const auto E = static_cast<Eigen::Index>(mu0.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> noise(static_cast<std::size_t>(cfg.eval_samples), std::vector<double>(mu0.size()));
  for (auto& eps : noise)
    for (auto& v : eps) v = normal(rng);
  const double amortized = conditional_elbo(tree, engine, mu0, ls0, noise);
  if (cfg.steps == 0) return {0.0, amortized, amortized, false};

  nn::ParameterStore local;
  const int pm = local.add("mu", Eigen::Map<const Mat>(mu0.data(), E, 1));
  const int pl = local.add("log_sigma", Eigen::Map<const Mat>(ls0.data(), E, 1));
  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  std::vector<double> mu(mu0), ls(ls0);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int k = 0; k < cfg.samples; ++k) {
      auto b = sample_branches(mu, ls, rng);
      BranchLengths gll;
      engine.log_likelihood_grad(tree, b.q, gll);
      auto dx = bound_grad_log_q(b.q, gll, 1.0);
      for (Eigen::Index e = 0; e < E; ++e) {
        const auto j = static_cast<std::size_t>(e);
        local[pm].grad(e, 0) -= dx[j] / cfg.samples;
        local[pl].grad(e, 0) -= (dx[j] * std::exp(ls[j]) * b.eps[j] + 1.0) / cfg.samples;
      }
    }
    nn::adam_step(local, adam);
    for (Eigen::Index e = 0; e < E; ++e) {
      mu[static_cast<std::size_t>(e)] = local[pm].value(e, 0);
      ls[static_cast<std::size_t>(e)] = local[pl].value(e, 0);
    }
  }
  const double optimized = conditional_elbo(tree, engine, mu, ls, noise);
  if (optimized < amortized) return {0.0, amortized, optimized, true};
  return {optimized - amortized, amortized, optimized, false};
}

}  // namespace phylotopo::vbpi
