#include <gtest/gtest.h>

#include <map>
#include <random>

#include "phylotopo/newick.hpp"
#include "phylotopo/sbn.hpp"
#include "support/random_trees.hpp"

namespace phylotopo {
namespace {

Clade clade_of(const TaxaSet& taxa, std::initializer_list<const char*> names) {
  Clade c(static_cast<std::size_t>(taxa.size()));
  for (const char* n : names) c.set(static_cast<std::size_t>(taxa.index_of(n)));
  return c;
}

template <class Rng>
std::vector<double> random_phi(const SbnSupport& s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> phi(static_cast<std::size_t>(s.num_entries()));
  for (auto& v : phi) v = g(rng);
  return phi;
}

// Sums rooted probabilities over every edge rooting, via explicit rooted trees.
double rooting_sum(const SbnModel& m, const TreeTopology& t) {
  double p = 0.0;
  for (EdgeId e = 0; e < t.num_edges(); ++e) p += std::exp(m.log_prob_rooted(t.rooted_on_edge(e)));
  return p;
}

TEST(Decomposition, BalancedQuartet) {
  auto t = parse_newick("((A,B),(C,D));");
  const auto& x = *t.taxa();
  auto d = rooted_decomposition(t);
  EXPECT_EQ(d.root, Subsplit(clade_of(x, {"A", "B"}), clade_of(x, {"C", "D"})));
  ASSERT_EQ(d.pairs.size(), 2U);
  std::set<Subsplit> kids{d.pairs[0].child, d.pairs[1].child};
  EXPECT_TRUE(kids.count(Subsplit(clade_of(x, {"A"}), clade_of(x, {"B"}))));
  EXPECT_TRUE(kids.count(Subsplit(clade_of(x, {"C"}), clade_of(x, {"D"}))));
  for (const auto& p : d.pairs) EXPECT_EQ(p.parent, d.root);
}

TEST(Decomposition, CaterpillarChain) {
  auto t = parse_newick("((A,(B,C)),D);");
  const auto& x = *t.taxa();
  auto d = rooted_decomposition(t);
  EXPECT_EQ(d.root, Subsplit(clade_of(x, {"A", "B", "C"}), clade_of(x, {"D"})));
  ASSERT_EQ(d.pairs.size(), 2U);
  EXPECT_EQ(d.pairs[0].child, Subsplit(clade_of(x, {"A"}), clade_of(x, {"B", "C"})));
  EXPECT_EQ(d.pairs[0].parent, d.root);
  EXPECT_EQ(d.pairs[1].child, Subsplit(clade_of(x, {"B"}), clade_of(x, {"C"})));
  EXPECT_EQ(d.pairs[1].parent, d.pairs[0].child);
}

TEST(Decomposition, CherryTerminates) {
  auto d = rooted_decomposition(parse_newick("((A,B),C);"));
  EXPECT_EQ(d.pairs.size(), 1U);
  EXPECT_EQ(d.pairs[0].child.first.count() + d.pairs[0].child.second.count(), 2U);
}

TEST(Decomposition, InvertibleOnRandomRootedTrees) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 200; ++rep) {
    auto taxa = TaxaSet::numbered(3 + rep % 30);
    auto u = testing::shuffled_random_tree(taxa, rng);
    auto t = u.rooted_on_edge(static_cast<EdgeId>(rep % u.num_edges()));
    auto d = rooted_decomposition(t);
    EXPECT_EQ(d.pairs.size(), static_cast<std::size_t>(taxa->size() - 2));
    auto back = tree_from_decomposition(taxa, d);
    EXPECT_EQ(serialize_newick(back), serialize_newick(t));
    auto again = rooted_decomposition(back);
    EXPECT_EQ(again.root, d.root);
    EXPECT_EQ(std::set<SubsplitPair>(again.pairs.begin(), again.pairs.end()),
              std::set<SubsplitPair>(d.pairs.begin(), d.pairs.end()));
  }
  EXPECT_THROW(rooted_decomposition(parse_newick("(A,B,C);")), ValidationError);
}

TEST(Support, SingleTreeIsCertain) {
  auto t = parse_newick("((A,B),(C,(D,E)),F);");
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_trees({t}));
  SbnModel m(s);
  EXPECT_NEAR(m.log_prob_unrooted(t), 0.0, 1e-12);
  std::mt19937_64 rng(1);
  m.set_phi(random_phi(*s, rng));
  EXPECT_NEAR(m.log_prob_unrooted(t), 0.0, 1e-12);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(splits_of(m.sample(rng)), splits_of(t));
  EXPECT_EQ(s->num_root_entries(), t.num_edges());
  EXPECT_EQ(s->num_splits(), t.num_edges());
  EXPECT_THROW(m.log_prob_unrooted(parse_newick("((A,C),(B,(D,E)),F);")), OutOfSupport);
}

TEST(Support, DuplicateTreesAndOrderDoNotMatter) {
  std::mt19937_64 rng(3);
  auto taxa = TaxaSet::numbered(7);
  std::vector<TreeTopology> trees;
  for (int i = 0; i < 6; ++i) trees.push_back(testing::shuffled_random_tree(taxa, rng));
  auto a = SbnSupport::from_trees(trees);
  auto doubled = trees;
  doubled.insert(doubled.end(), trees.rbegin(), trees.rend());
  auto b = SbnSupport::from_trees(doubled);
  EXPECT_EQ(a.root_subsplits(), b.root_subsplits());
  EXPECT_EQ(a.pairs(), b.pairs());
  EXPECT_EQ(a.splits(), b.splits());
  EXPECT_EQ(a.psps(), b.psps());
  EXPECT_THROW(SbnSupport::from_trees({trees[0], parse_newick("((a,b),c,d);")}), ValidationError);
  EXPECT_THROW(SbnSupport::from_trees({}), ValidationError);
}

TEST(Support, RowsPartitionClades) {
  auto s = SbnSupport::from_enumeration(TaxaSet::numbered(6));
  int covered = 0;
  for (int r = 0; r < s.num_rows(); ++r) {
    covered += static_cast<int>(s.row(r).size());
    for (int j : s.row(r)) EXPECT_EQ(s.row_of(j), r);
  }
  EXPECT_EQ(covered, s.num_entries());
  // Every bipartition of 6 taxa into non-empty sides: 2^5 - 1.
  EXPECT_EQ(s.num_root_entries(), 31);
  EXPECT_EQ(s.num_splits(), 31);
}

TEST(Probability, NormalizedOverFullEnumeration) {
  std::mt19937_64 rng(4);
  for (int n : {4, 5}) {
    auto taxa = TaxaSet::numbered(n);
    auto s = std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(taxa));
    auto trees = enumerate_unrooted(taxa);
    for (int rep = 0; rep < 20; ++rep) {
      SbnModel m(s, random_phi(*s, rng, 1.5));
      double total = 0.0;
      for (const auto& t : trees) {
        const double lp = m.log_prob_unrooted(t);
        EXPECT_TRUE(std::isfinite(lp));
        EXPECT_NEAR(std::exp(lp), rooting_sum(m, t), 1e-12);
        EXPECT_EQ(m.rooting_log_probs(t).size(), static_cast<std::size_t>(2 * n - 3));
        total += std::exp(lp);
      }
      EXPECT_NEAR(total, 1.0, 1e-10);
    }
  }
}

TEST(Probability, UniformQuartetTopologies) {
  auto taxa = TaxaSet::numbered(4);
  SbnModel m(std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(taxa)));
  for (const auto& t : enumerate_unrooted(taxa)) EXPECT_NEAR(std::exp(m.log_prob_unrooted(t)), 1.0 / 3.0, 1e-14);
}

TEST(Probability, PartialSupportRootingsAndRerooting) {
  std::mt19937_64 rng(5);
  auto taxa = TaxaSet::numbered(9);
  std::vector<TreeTopology> trees;
  for (int i = 0; i < 10; ++i) trees.push_back(random_unrooted(taxa, rng));
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_trees(trees));
  SbnModel m(s, random_phi(*s, rng));
  for (const auto& t : trees) {
    const double lp = m.log_prob_unrooted(t);
    EXPECT_NEAR(std::exp(lp), rooting_sum(m, t), 1e-12 + 1e-10 * std::exp(lp));
    for (NodeId r = 0; r < t.num_nodes(); ++r)
      if (!t.is_leaf(r)) EXPECT_NEAR(m.log_prob_unrooted(t.rerooted(r)), lp, 1e-12);
  }
}

TEST(Gradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  auto taxa = TaxaSet::numbered(5);
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(taxa));
  SbnModel m(s, random_phi(*s, rng));
  for (const auto& t : enumerate_unrooted(taxa)) {
    std::vector<double> grad;
    m.log_prob_grad(t, grad);
    for (int j = 0; j < s->num_entries(); ++j) {
      auto at = [&](double h) {
        auto phi = m.phi();
        phi[static_cast<std::size_t>(j)] += h;
        return SbnModel(s, phi).log_prob_unrooted(t);
      };
      const double fd = (at(1e-5) - at(-1e-5)) / 2e-5;
      EXPECT_NEAR(grad[static_cast<std::size_t>(j)], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Gradient, UnusedEntriesOnlyFromNormalizers) {
  std::mt19937_64 rng(7);
  auto taxa = TaxaSet::numbered(6);
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(taxa));
  SbnModel m(s, random_phi(*s, rng));
  auto t = random_unrooted(taxa, rng);
  std::set<int> used;
  for (EdgeId e = 0; e < t.num_edges(); ++e) {
    auto d = rooted_decomposition(t.rooted_on_edge(e));
    used.insert(s->root_entry(d.root));
    for (const auto& p : d.pairs) used.insert(s->pair_entry(p.parent, p.child));
  }
  std::vector<double> grad;
  m.log_prob_grad(t, grad);
  for (int j = 0; j < s->num_entries(); ++j)
    if (!used.count(j)) EXPECT_LE(grad[static_cast<std::size_t>(j)], 0.0);
  // Softmax rows are shift-invariant, so each row's gradient sums to zero.
  for (int r = 0; r < s->num_rows(); ++r) {
    double sum = 0.0;
    for (int j : s->row(r)) sum += grad[static_cast<std::size_t>(j)];
    EXPECT_NEAR(sum, 0.0, 1e-12);
  }
}

TEST(Gradient, ExpectedScoreIsZero) {
  auto taxa = TaxaSet::numbered(4);
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(taxa));
  for (double scale : {0.0, 1.0}) {
    std::mt19937_64 rng(8);
    SbnModel m(s, random_phi(*s, rng, scale));
    std::vector<double> grad(static_cast<std::size_t>(s->num_entries()), 0.0);
    for (const auto& t : enumerate_unrooted(taxa)) m.log_prob_grad(t, grad, std::exp(m.log_prob_unrooted(t)));
    for (double g : grad) EXPECT_NEAR(g, 0.0, 1e-12);
  }
}

TEST(Sampling, QuartetFrequencies) {
  auto taxa = TaxaSet::numbered(4);
  SbnModel m(std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(taxa)));
  std::mt19937_64 rng(9);
  std::map<std::string, int> counts;
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) ++counts[serialize_newick(m.sample(rng))];
  ASSERT_EQ(counts.size(), 3U);
  const double sigma = std::sqrt(draws * (1.0 / 3) * (2.0 / 3));
  for (auto& [k, c] : counts) EXPECT_NEAR(c, draws / 3.0, 3 * sigma) << k;
}

TEST(Sampling, HistogramMatchesScores) {
  std::mt19937_64 rng(10);
  auto taxa = TaxaSet::numbered(4);
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(taxa));
  SbnModel m(s, random_phi(*s, rng));
  std::map<std::string, int> counts;
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) {
    auto t = m.sample(rng);
    ++counts[serialize_newick(t)];
  }
  double kl = 0.0;
  for (const auto& t : enumerate_unrooted(taxa)) {
    const double p = std::exp(m.log_prob_unrooted(t));
    const double q = counts[serialize_newick(t)] / static_cast<double>(draws);
    if (q > 0) kl += q * std::log(q / p);
  }
  EXPECT_LT(kl, 0.01);
}

TEST(Sampling, StaysInPartialSupport) {
  std::mt19937_64 rng(11);
  auto taxa = TaxaSet::numbered(12);
  std::vector<TreeTopology> trees;
  for (int i = 0; i < 5; ++i) trees.push_back(random_unrooted(taxa, rng));
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_trees(trees));
  SbnModel m(s, random_phi(*s, rng));
  for (int i = 0; i < 500; ++i) {
    auto t = m.sample(rng);
    EXPECT_TRUE(std::isfinite(m.log_prob_unrooted(t)));
    auto idx = edge_parameter_indices(*s, t);
    for (EdgeId e = 0; e < t.num_edges(); ++e) {
      EXPECT_GE(idx[static_cast<std::size_t>(e)].split, 0);
      if (!t.is_leaf(t.edge_child(e))) EXPECT_GE(idx[static_cast<std::size_t>(e)].psp[0], 0);
      if (!t.is_leaf(t.edge_parent(e))) EXPECT_GE(idx[static_cast<std::size_t>(e)].psp[1], 0);
    }
  }
}

TEST(EdgeIndices, TipsHaveOnePsp) {
  auto t = parse_newick("((A,B),(C,D));").unrooted();
  auto s = SbnSupport::from_trees({t});
  EXPECT_EQ(s.num_splits(), 5);
  EXPECT_EQ(s.num_psps(), 6);  // four pendant edges with one interior side, two sides of the central edge
  for (EdgeId e = 0; e < t.num_edges(); ++e) {
    auto idx = edge_parameter_indices(s, t)[static_cast<std::size_t>(e)];
    const bool pendant = t.is_leaf(t.edge_child(e)) || t.is_leaf(t.edge_parent(e));
    EXPECT_EQ((idx.psp[0] >= 0) + (idx.psp[1] >= 0), pendant ? 1 : 2);
  }
}

TEST(Checkpoint, JsonRoundTrip) {
  std::mt19937_64 rng(12);
  auto taxa = TaxaSet::numbered(6);
  std::vector<TreeTopology> trees;
  for (int i = 0; i < 4; ++i) trees.push_back(random_unrooted(taxa, rng));
  auto s = std::make_shared<const SbnSupport>(SbnSupport::from_trees(trees));
  SbnModel m(s, random_phi(*s, rng));
  auto j = sbn_to_json(m);
  auto back = sbn_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.phi(), m.phi());
  EXPECT_EQ(back.support().pairs(), s->pairs());
  EXPECT_EQ(back.support().psps(), s->psps());
  for (const auto& t : trees) EXPECT_EQ(back.log_prob_unrooted(t), m.log_prob_unrooted(t));
  EXPECT_EQ(j["root_subsplits"][0]["subsplit"][0].get<std::string>().size(), 2U);
  auto broken = j;
  broken["parent_child"][0]["child"] = nlohmann::json::array({"01", "01"});
  EXPECT_THROW(sbn_from_json(broken), ValidationError);
  broken = j;
  broken.erase("splits");
  EXPECT_THROW(sbn_from_json(broken), ValidationError);
}

}  // namespace
}  // namespace phylotopo
