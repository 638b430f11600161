#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "phylotopo/ebm.hpp"
#include "support/random_trees.hpp"

using namespace phylotopo;
using namespace phylotopo::ebm;

namespace {

nn::GnnConfig small_config(nn::GnnVariant v = nn::GnnVariant::GGNN) {
  nn::GnnConfig c;
  c.variant = v;
  c.hidden_dim = 8;
  return c;
}

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

}  // namespace

TEST(Dirichlet, DrawIsADistribution) {
  for (double beta : {0.008, 0.1, 1.0, 10.0}) {
    auto p = sample_dirichlet(945, beta, 7);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    for (double v : p) EXPECT_GE(v, 0.0);
  }
}

TEST(Dirichlet, SameSeedSameDraw) {
  EXPECT_EQ(sample_dirichlet(105, 0.5, 3), sample_dirichlet(105, 0.5, 3));
  EXPECT_NE(sample_dirichlet(105, 0.5, 3), sample_dirichlet(105, 0.5, 4));
}

TEST(Dirichlet, ComponentMeanIsUniform) {
  // Each component of a symmetric Dirichlet has mean 1/dim and variance (dim-1)/(dim^2 (dim beta + 1)).
  const std::size_t dim = 4;
  const double beta = 0.3;
  const int draws = 20000;
  std::vector<double> mean(dim, 0.0);
  for (int s = 0; s < draws; ++s) {
    auto p = sample_dirichlet(dim, beta, static_cast<std::uint64_t>(s) + 100);
    for (std::size_t i = 0; i < dim; ++i) mean[i] += p[i] / draws;
  }
  const double var = (dim - 1.0) / (dim * dim * (dim * beta + 1.0));
  for (double m : mean) EXPECT_NEAR(m, 0.25, 5.0 * std::sqrt(var / draws));
}

TEST(Dirichlet, SecondMomentMatchesClosedForm) {
  // For a symmetric Dirichlet, E[sum p_i^2] = (beta + 1) / (dim beta + 1).
  const std::size_t dim = 10395;
  const double beta = 0.008;
  const int draws = 200;
  double mean = 0.0, mean_sq = 0.0;
  for (int s = 0; s < draws; ++s) {
    auto p = sample_dirichlet(dim, beta, static_cast<std::uint64_t>(s) + 1);
    double q = 0.0;
    for (double v : p) q += v * v;
    mean += q / draws;
    mean_sq += q * q / draws;
  }
  const double se = std::sqrt((mean_sq - mean * mean) / draws);
  EXPECT_NEAR(mean, (beta + 1.0) / (dim * beta + 1.0), 5.0 * se);
}

TEST(Dirichlet, RejectsNonPositiveConcentration) {
  EXPECT_THROW(sample_dirichlet(3, 0.0, 1), ValidationError);
  EXPECT_THROW(sample_dirichlet(3, -1.0, 1), ValidationError);
}

TEST(TreeSpaceTable, EnumeratesEveryTopology) {
  auto t = sample_dirichlet_target(6, 1.0, 2);
  EXPECT_EQ(t.size(), 105u);
  EXPECT_EQ(t.features.size(), 105u);
  EXPECT_NEAR(std::accumulate(t.probs.begin(), t.probs.end(), 0.0), 1.0, 1e-12);
}

TEST(NceBound, UniformTargetGivesTwoLogTwo) {
  std::vector<double> u(15, 1.0 / 15);
  EXPECT_NEAR(optimal_nce_loss(u), 2.0 * std::log(2.0), 1e-12);
}

TEST(NceBound, MatchesLossAtOptimalDiscriminator) {
  // With D = log p - log n the population objective is
  //   sum_i p_i softplus(-D_i) + n_i softplus(D_i).
  auto p = sample_dirichlet(15, 0.4, 5);
  double j = 0.0;
  const double n = 1.0 / 15;
  for (double pi : p) {
    if (pi == 0.0) {
      j += n * 0.0;
      continue;
    }
    const double d = std::log(pi) - std::log(n);
    j += pi * softplus(-d) + n * softplus(d);
  }
  EXPECT_NEAR(optimal_nce_loss(p), j, 1e-10);
  EXPECT_LE(optimal_nce_loss(p), 2.0 * std::log(2.0));
}

TEST(EbmModel, LogZStartsAtLogTreeCount) {
  EbmModel m(small_config(), 6, 1);
  EXPECT_NEAR(m.log_z(), std::log(105.0), 1e-12);
}

TEST(EbmModel, LogQIsNegativeEnergyMinusLogZ) {
  EbmModel m(small_config(), 5, 1);
  auto table = enumerate_table(5);
  auto e = m.table_energies(table);
  for (std::size_t i = 0; i < table.size(); ++i) {
    EXPECT_NEAR(m.energy(table.trees[i]), e[i], 1e-10);
    EXPECT_NEAR(m.log_q(table.trees[i]), -e[i] - m.log_z(), 1e-10);
  }
}

TEST(EbmModel, EnergyIgnoresNodeNumbering) {
  auto taxa = TaxaSet::numbered(7);
  std::mt19937_64 rng(3);
  for (auto v : {nn::GnnVariant::MLP, nn::GnnVariant::GCN, nn::GnnVariant::GIN, nn::GnnVariant::SAGE,
                 nn::GnnVariant::GGNN, nn::GnnVariant::EDGE}) {
    EbmModel m(small_config(v), 7, 5);
    for (int rep = 0; rep < 5; ++rep) {
      auto t = random_unrooted(taxa, rng);
      auto perm = phylotopo::testing::random_permutation(t.num_nodes(), rng);
      EXPECT_NEAR(m.energy(t), m.energy(t.relabeled(perm)), 1e-9) << nn::to_string(v);
    }
  }
}

TEST(EbmModel, ChunkingAndThreadsDoNotChangeEnergies) {
  EbmModel m(small_config(), 6, 2);
  auto table = enumerate_table(6);
  auto a = m.table_energies(table, 1, 512);
  auto b = m.table_energies(table, 3, 7);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
}

TEST(EbmModel, ExactMetricsAgreeWithDirectComputation) {
  auto table = sample_dirichlet_target(5, 0.5, 9);
  EbmModel m(small_config(), 5, 4);
  auto e = m.table_energies(table);
  const double n = 1.0 / 15;
  double z = 0.0, j = 0.0;
  for (double v : e) z += std::exp(-v);
  double kl = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double d = -e[i] - m.log_z() - std::log(n);
    j += table.probs[i] * softplus(-d) + n * softplus(d);
    if (table.probs[i] > 0) kl += table.probs[i] * std::log(table.probs[i] / (std::exp(-e[i]) / z));
  }
  auto got = m.exact_metrics(table);
  EXPECT_NEAR(got.population_loss, j, 1e-10);
  EXPECT_NEAR(got.kl, kl, 1e-10);
  EXPECT_NEAR(got.log_partition, std::log(z), 1e-10);
  auto q = m.normalized_probs(table);
  EXPECT_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-12);
}

TEST(EbmModel, PopulationLossBoundsOptimum) {
  auto table = sample_dirichlet_target(5, 0.3, 12);
  for (std::uint64_t s = 0; s < 5; ++s) {
    EbmModel m(small_config(), 5, s);
    EXPECT_GE(m.exact_metrics(table).population_loss, optimal_nce_loss(table.probs) - 1e-12);
  }
}

TEST(EbmModel, NceGradientMatchesFiniteDifferences) {
  auto table = sample_dirichlet_target(5, 0.5, 3);
  for (auto v : {nn::GnnVariant::GGNN, nn::GnnVariant::EDGE, nn::GnnVariant::SAGE}) {
    EbmModel m(small_config(v), 5, 6);
    std::vector<std::size_t> data{0, 3, 3, 7, 14}, noise{1, 2, 9, 11};
    auto& store = m.store();
    store.zero_grad();
    m.nce_loss(table, data, noise, true);
    double worst = 0.0;
    const double h = 1e-5;
    for (int p = 0; p < store.size(); ++p) {
      auto& param = store[p];
      const Eigen::Index stride = std::max<Eigen::Index>(1, param.value.size() / 6);
      for (Eigen::Index i = 0; i < param.value.size(); i += stride) {
        const double x = param.value.data()[i];
        param.value.data()[i] = x + h;
        const double up = m.nce_loss(table, data, noise, false);
        param.value.data()[i] = x - h;
        const double dn = m.nce_loss(table, data, noise, false);
        param.value.data()[i] = x;
        const double fd = (up - dn) / (2 * h);
        const double g = param.grad.data()[i];
        worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-4}));
      }
    }
    EXPECT_LT(worst, 1e-4) << nn::to_string(v);
  }
}

TEST(EbmModel, RejectsEmptyBatches) {
  auto table = enumerate_table(5);
  EbmModel m(small_config(), 5, 1);
  EXPECT_THROW(m.nce_loss(table, {}, {1}, false), ValidationError);
  EXPECT_THROW(m.nce_loss(table, {1}, {}, false), ValidationError);
}

TEST(TableSampler, FrequenciesMatchProbabilities) {
  std::vector<double> p{0.5, 0.0, 0.2, 0.3};
  TableSampler s(p);
  std::mt19937_64 rng(1);
  std::vector<int> counts(4, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[s(rng)];
  EXPECT_EQ(counts[1], 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(counts[i] / double(n), p[i], 0.01);
}

TEST(TrainNce, ReducesKlOnSmallSpace) {
  auto table = sample_dirichlet_target(5, 0.5, 21);
  EbmConfig cfg;
  cfg.gnn = small_config();
  cfg.gnn.hidden_dim = 16;
  cfg.steps = 1500;
  cfg.batch = 64;
  cfg.adam.lr = 1e-2;
  cfg.eval_every = 500;
  EbmModel m(cfg.gnn, 5, 1);
  auto trace = train_nce(m, table, cfg);
  ASSERT_EQ(trace.size(), 4u);
  EXPECT_EQ(trace.front().step, 0);
  EXPECT_EQ(trace.back().step, 1500);
  for (const auto& r : trace) {
    EXPECT_TRUE(std::isfinite(r.nce_loss));
    EXPECT_TRUE(std::isfinite(r.kl));
    EXPECT_TRUE(std::isfinite(r.log_z));
  }
  EXPECT_LT(trace.back().kl, 0.25 * trace.front().kl);
  EXPECT_LT(trace.back().nce_loss, trace.front().nce_loss);
  EXPECT_GE(trace.back().nce_loss, optimal_nce_loss(table.probs) - 1e-12);
}

TEST(TrainNce, SameSeedSameTrace) {
  auto table = sample_dirichlet_target(5, 0.5, 2);
  EbmConfig cfg;
  cfg.gnn = small_config();
  cfg.steps = 40;
  cfg.batch = 16;
  cfg.eval_every = 20;
  EbmModel a(cfg.gnn, 5, 1), b(cfg.gnn, 5, 1);
  auto ta = train_nce(a, table, cfg);
  cfg.threads = 3;
  auto tb = train_nce(b, table, cfg);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_NEAR(ta[i].kl, tb[i].kl, 1e-10);
}

TEST(EbmModel, NceLossMatchesPerSampleSum) {
  // Direct per-sample average of -log sigmoid(D) over data and -log sigmoid(-D) over noise.
  auto table = sample_dirichlet_target(5, 0.5, 8);
  EbmModel m(small_config(), 5, 2);
  std::vector<std::size_t> data{4, 4, 4, 0, 13}, noise{4, 6, 6};
  auto e = m.table_energies(table);
  double j = 0.0;
  for (auto i : data) j += softplus(e[i] + m.log_z() - std::log(15.0)) / data.size();
  for (auto i : noise) j += softplus(-e[i] - m.log_z() + std::log(15.0)) / noise.size();
  EXPECT_NEAR(m.nce_loss(table, data, noise, false), j, 1e-10);
}

TEST(Dirichlet, HugeConcentrationIsNearlyUniform) {
  auto p = sample_dirichlet(10395, 1e6, 4);
  EXPECT_LT(*std::max_element(p.begin(), p.end()), 2.0 / 10395);
}

namespace {

void zero_head_output(EbmModel& m) {
  auto& s = m.store();
  s[s.index_of("head.1.weight")].value.setZero();
  s[s.index_of("head.1.bias")].value.setZero();
}

}  // namespace

TEST(EbmModel, ZeroHeadGivesUniformModel) {
  auto table = sample_dirichlet_target(6, 0.2, 1);
  EbmModel m(small_config(), 6, 3);
  zero_head_output(m);
  for (double e : m.table_energies(table)) EXPECT_EQ(e, 0.0);
  for (double q : m.normalized_probs(table)) EXPECT_NEAR(q, 1.0 / 105, 1e-15);
  for (const auto& t : table.trees) EXPECT_NEAR(m.log_q(t), -std::log(105.0), 1e-12);
}

TEST(EbmModel, ZeroDiscriminatorGivesTwoLogTwo) {
  auto table = sample_dirichlet_target(6, 0.2, 1);
  EbmModel m(small_config(), 6, 3);
  zero_head_output(m);
  EXPECT_NEAR(m.exact_metrics(table).population_loss, 2.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(m.nce_loss(table, {0, 5, 9}, {1, 2}, false), 2.0 * std::log(2.0), 1e-12);
}

TEST(EbmModel, KlIsNonNegativeAndZeroAtTarget) {
  auto table = sample_dirichlet_target(5, 0.7, 6);
  for (std::uint64_t s = 0; s < 10; ++s) {
    EbmModel m(small_config(nn::GnnVariant::GIN), 5, s);
    EXPECT_GE(m.exact_metrics(table).kl, 0.0);
  }
  std::vector<double> logp;
  for (double p : table.probs) logp.push_back(std::log(p));
  EXPECT_NEAR(kl_divergence(table.probs, logp), 0.0, 1e-15);
}
