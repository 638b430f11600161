#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "phylotopo/cli.hpp"

namespace fs = std::filesystem;
using namespace phylotopo;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("phylotopo_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

std::string small_fasta() {
  return ">A\nACGTACGTAACCGGTTACGA\n>B\nACGTACGTAACCGGTAACGA\n>C\nACGAACGTTACCGGTTACGT\n>D\nTCGAACGTTACCGCTTACTT\n";
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Cli, EnumerateCountsEightTaxonTrees) {
  auto r = run({"enumerate", "--taxa", "8", "--count-only"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "10395\n");
}

TEST(Cli, EnumerateListsEveryTopologyOnce) {
  auto r = run({"enumerate", "--names", "A,B,C,D,E"});
  ASSERT_EQ(r.code, 0);
  auto trees = parse_newick_lines(r.out);
  ASSERT_EQ(trees.size(), 15u);
  std::set<std::string> seen;
  for (const auto& t : trees) seen.insert(serialize_newick(t));
  EXPECT_EQ(seen.size(), 15u);
}

TEST(Cli, EmbedStarGivesEqualThirds) {
  auto r = run({"embed", "--newick", "(A,B,C);"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"node_id", "is_leaf", "taxon", "f_0", "f_1", "f_2"}));
  int interior = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][1] != "0") continue;
    ++interior;
    for (int k = 3; k < 6; ++k) EXPECT_NEAR(std::stod(rows[i][static_cast<std::size_t>(k)]), 1.0 / 3.0, 1e-15);
  }
  EXPECT_EQ(interior, 1);
}

TEST(Cli, EmbedThenReconstructRecoversTopology) {
  TempDir d;
  const std::string tree = "((A,B),(C,(D,E)),(F,G));";
  ASSERT_EQ(run({"embed", "--newick", tree, "--out", d.path().string()}).code, 0);
  auto r = run({"reconstruct", "--csv", d / "embedding.csv"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(splits_of(parse_newick(r.out)), splits_of(parse_newick(tree)));
}

TEST(Cli, DenseAndTwoPassEmbeddingsAgree) {
  auto a = csv_rows(run({"embed", "--newick", "((A,B),(C,D),(E,F));"}).out);
  auto b = csv_rows(run({"embed", "--newick", "((A,B),(C,D),(E,F));", "--dense"}).out);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 1; i < a.size(); ++i)
    for (std::size_t k = 3; k < a[i].size(); ++k) EXPECT_NEAR(std::stod(a[i][k]), std::stod(b[i][k]), 1e-12);
}

TEST(Cli, LoglikMatchesLibrary) {
  TempDir d;
  write(d / "a.fa", small_fasta());
  const std::string tree = "((A:0.1,B:0.2):0.05,C:0.1,D:0.3);";
  auto r = run({"loglik", "--fasta", d / "a.fa", "--newick", tree, "--grad"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto aln = parse_fasta(small_fasta());
  auto p = parse_newick_with_lengths(tree, aln.taxa());
  BranchLengths g;
  const double ll = log_likelihood_grad(p.tree, p.lengths, aln, g);
  auto rows = csv_rows(r.out);
  EXPECT_DOUBLE_EQ(std::stod(rows[0][0]), ll);
  ASSERT_EQ(rows.size(), 2u + g.size());
  EXPECT_EQ(rows[1], (std::vector<std::string>{"edge_id", "child_node", "length", "gradient"}));
  for (std::size_t e = 0; e < g.size(); ++e) EXPECT_DOUBLE_EQ(std::stod(rows[2 + e][3]), g[e]);
}

TEST(Cli, LoglikRejectsMissingLengths) {
  TempDir d;
  write(d / "a.fa", small_fasta());
  EXPECT_EQ(run({"loglik", "--fasta", d / "a.fa", "--newick", "((A,B),C,D);"}).code, 1);
}

TEST(Cli, SbnCheckNormalizesAndSamples) {
  auto r = run({"sbn-check", "--taxa", "5", "--seed", "9", "--samples", "20000"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json::parse(r.out);
  EXPECT_EQ(j["support_trees"], 15);
  EXPECT_NEAR(j["probability_sum"].get<double>(), 1.0, 1e-10);
  EXPECT_LT(j["sampler_kl"].get<double>(), 0.01);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"enumerate", "--taxa", "two"}).code, 1);
  EXPECT_EQ(run({"enumerate", "--taxa", "2"}).code, 1);
  EXPECT_EQ(run({"embed"}).code, 1);
  EXPECT_EQ(run({"embed", "--newick", "((A,B),C"}).code, 1);
  EXPECT_EQ(run({"ebm-train", "--out", "x"}).code, 1);  // seed is mandatory
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"enumerate", "--help"}).code, 0);
  EXPECT_EQ(run({"vbpi-eval", "--checkpoint", "/nonexistent/run"}).code, 1);

  // A regular file where the output directory should go is an environment failure, not bad input.
  TempDir d;
  write(d / "blocker", "x");
  auto r = run({"ebm-train", "--taxa", "4", "--steps", "1", "--seed", "1", "--out", d / "blocker/run"});
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST(Cli, EbmTrainIsByteDeterministic) {
  TempDir d;
  auto args = [&](const std::string& out, const std::string& seed) {
    return std::vector<std::string>{"ebm-train", "--taxa", "5", "--hidden", "8", "--steps", "40", "--batch", "16",
                                    "--eval-every", "10", "--seed", seed, "--threads", "2", "--out", d / out};
  };
  ASSERT_EQ(run(args("a", "3")).code, 0);
  ASSERT_EQ(run(args("b", "3")).code, 0);
  ASSERT_EQ(run(args("c", "4")).code, 0);
  const auto a = read_file(d / "a/trace.csv"), b = read_file(d / "b/trace.csv"), c = read_file(d / "c/trace.csv");
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto rows = csv_rows(a);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"step", "nce_loss", "kl", "logZ"}));
  EXPECT_EQ(rows.size(), 6u);
}

TEST(Cli, VbpiTrainIsByteDeterministicAndEvaluates) {
  TempDir d;
  write(d / "a.fa", small_fasta());
  auto args = [&](const std::string& out) {
    return std::vector<std::string>{"vbpi-train", "--fasta", d / "a.fa", "--branch", "gnn", "--hidden", "8",
                                    "--steps", "20", "--eval-every", "10", "--eval-samples", "5", "--seed", "7",
                                    "--checkpoint-out", d / out};
  };
  ASSERT_EQ(run(args("a")).code, 0);
  ASSERT_EQ(run(args("b")).code, 0);
  EXPECT_EQ(read_file(d / "a/trace.csv"), read_file(d / "b/trace.csv"));
  EXPECT_EQ(csv_rows(read_file(d / "a/trace.csv"))[0], (std::vector<std::string>{"step", "elbo", "lambda"}));

  auto r = run({"vbpi-eval", "--checkpoint", d / "a", "--ml-samples", "50", "--ml-runs", "3", "--gap-trees",
                "((A,B),C,D);", "--gap-steps", "5", "--gap-eval-samples", "20", "--out", d / "eval"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json::parse(r.out);
  EXPECT_EQ(j["step"], 20);
  EXPECT_TRUE(std::isfinite(j["marginal_likelihood"]["mean"].get<double>()));
  EXPECT_EQ(j["marginal_likelihood"]["runs"].size(), 3u);
  EXPECT_EQ(j["amortization_gaps"].size(), 1u);
  EXPECT_GE(j["mean_gap"].get<double>(), 0.0);
  EXPECT_EQ(json::parse(read_file(d / "eval/summary.json")), j);
}

TEST(Cli, CheckpointRestoresParameters) {
  TempDir d;
  write(d / "a.fa", small_fasta());
  ASSERT_EQ(run({"vbpi-train", "--fasta", d / "a.fa", "--branch", "psp", "--steps", "15", "--seed", "2",
                 "--checkpoint-out", d / "run"})
                .code,
            0);
  auto l = cli::load_vbpi_checkpoint(d / "run");
  EXPECT_EQ(l.state->step(), 15);
  EXPECT_EQ(l.cfg.kind, vbpi::BranchKind::PSP);
  auto saved = json::parse(read_file(d / "run/checkpoint.json"));
  EXPECT_EQ(sbn_to_json(l.state->sbn()), saved["sbn"]);
  // Training moved the branch tables away from their initial values and the load brings them back.
  const auto& mu = l.state->branch().store()[l.state->branch().store().index_of("psi.mu.split")].value;
  EXPECT_GT((mu.array() - l.cfg.init_mu).abs().maxCoeff(), 0.0);
}

TEST(Cli, ConfigFileWithFlagOverride) {
  TempDir d;
  write(d / "cfg.json", R"({"taxa": 5, "hidden": 8, "steps": 100, "batch": 16, "eval-every": 10, "seed": 3})");
  ASSERT_EQ(run({"ebm-train", "--config", d / "cfg.json", "--steps", "20", "--out", d / "a"}).code, 0);
  ASSERT_EQ(run({"ebm-train", "--taxa", "5", "--hidden", "8", "--steps", "20", "--batch", "16", "--eval-every", "10",
                 "--seed", "3", "--out", d / "b"})
                .code,
            0);
  EXPECT_EQ(read_file(d / "a/trace.csv"), read_file(d / "b/trace.csv"));
  auto m = json::parse(read_file(d / "a/manifest.json"));
  EXPECT_EQ(m["config"]["steps"], "20");
  EXPECT_EQ(m["status"], "completed");

  write(d / "bad.json", R"({"no-such-flag": 1})");
  EXPECT_EQ(run({"ebm-train", "--config", d / "bad.json", "--seed", "1", "--out", d / "c"}).code, 1);
  write(d / "nested.json", R"({"steps": [1, 2]})");
  EXPECT_EQ(run({"ebm-train", "--config", d / "nested.json", "--seed", "1", "--out", d / "c"}).code, 1);
}

TEST(Cli, ManifestConfigReproducesRun) {
  TempDir d;
  ASSERT_EQ(run({"ebm-train", "--taxa", "5", "--hidden", "8", "--steps", "20", "--batch", "16", "--eval-every", "5",
                 "--seed", "11", "--out", d / "a"})
                .code,
            0);
  ASSERT_EQ(run({"ebm-train", "--config", d / "a/manifest.json", "--out", d / "b"}).code, 0);
  EXPECT_EQ(read_file(d / "a/trace.csv"), read_file(d / "b/trace.csv"));
  auto m = json::parse(read_file(d / "b/manifest.json"));
  EXPECT_EQ(m["outputs"], json::array({"trace.csv", "model.bin", "model.json"}));
  EXPECT_FALSE(m["finished"].get<std::string>().empty());
}

TEST(Cli, WritesOnlyInsideOutputDirectory) {
  TempDir d;
  write(d / "a.fa", small_fasta());
  ASSERT_EQ(run({"ebm-train", "--taxa", "4", "--steps", "3", "--seed", "1", "--out", d / "ebm"}).code, 0);
  ASSERT_EQ(run({"vbpi-train", "--fasta", d / "a.fa", "--branch", "split", "--steps", "3", "--seed", "1",
                 "--checkpoint-out", d / "vb"})
                .code,
            0);
  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(d.path())) top.insert(e.path().filename().string());
  EXPECT_EQ(top, (std::set<std::string>{"a.fa", "ebm", "vb"}));
  for (const auto& e : fs::recursive_directory_iterator(d.path()))
    EXPECT_NE(e.path().extension(), ".tmp") << e.path();
}

TEST(Cli, ThreadDefaultComesFromEnvironment) {
  TempDir d;
  ::setenv("PHYLOTOPO_THREADS", "3", 1);
  ASSERT_EQ(run({"ebm-train", "--taxa", "4", "--steps", "2", "--seed", "1", "--out", d / "a"}).code, 0);
  ::unsetenv("PHYLOTOPO_THREADS");
  EXPECT_EQ(json::parse(read_file(d / "a/manifest.json"))["config"]["threads"], "3");
}
