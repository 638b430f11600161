#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "phylotopo/checkpoint.hpp"
#include "phylotopo/ebm.hpp"
#include "phylotopo/embed.hpp"
#include "phylotopo/enumerate.hpp"
#include "phylotopo/error.hpp"
#include "phylotopo/newick.hpp"
#include "phylotopo/parallel.hpp"
#include "phylotopo/phylo.hpp"
#include "phylotopo/sbn.hpp"
#include "phylotopo/vbpi.hpp"

#ifndef PHYLOTOPO_VERSION
#define PHYLOTOPO_VERSION "unknown"
#endif

namespace phylotopo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// Shortest decimal text that reads back to the same double.
inline std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Flat JSON object of flag values, keyed by long flag name without dashes. A run manifest is
// accepted too: its config snapshot is used.
inline std::vector<std::string> config_arguments(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  if (j.is_object() && j.contains("command") && j.contains("config")) j = j["config"];
  if (!j.is_object()) throw ValidationError("config must be a flat JSON object");
  std::vector<std::string> args;
  for (const auto& [key, v] : j.items()) {
    if (key == "config") throw ValidationError("config files cannot nest");
    if (v.is_boolean())
      args.push_back("--" + key + "=" + (v.get<bool>() ? "true" : "false"));
    else if (v.is_string())
      args.push_back("--" + key + "=" + v.get<std::string>());
    else if (v.is_number())
      args.push_back("--" + key + "=" + v.dump());
    else
      throw ValidationError("config value for '" + key + "' must be a scalar");
  }
  return args;
}

// Resolved option values of a subcommand in the config-file format.
inline json config_snapshot(const CLI::App& sub) {
  json j = json::object();
  for (const CLI::Option* o : sub.get_options()) {
    if (o->get_lnames().empty()) continue;
    const std::string& key = o->get_lnames().front();
    if (key == "help" || key == "config") continue;
    const bool flag = o->get_expected_max() == 0;
    if (flag) {
      j[key] = o->count() > 0 && o->as<bool>();
    } else if (o->count() > 0) {
      j[key] = o->results().back();
    } else if (!o->get_default_str().empty()) {
      j[key] = o->get_default_str();
    }
  }
  return j;
}

// Run record in the output directory: written when the run starts and rewritten when it ends.
class RunManifest {
 public:
  RunManifest(fs::path dir, std::string command, json config) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    j_["command"] = std::move(command);
    j_["version"] = PHYLOTOPO_VERSION;
    j_["config"] = std::move(config);
    j_["started"] = utc_now();
    j_["status"] = "running";
    j_["outputs"] = json::array();
    flush();
  }

  const fs::path& dir() const noexcept { return dir_; }

  // Writes a file inside the run directory and indexes it.
  void write(const std::string& name, const std::string& text) {
    write_file_atomic(dir_ / name, text);
    add_output(name);
  }
  void add_output(const std::string& name) { j_["outputs"].push_back(name); }

  void finish(json summary = {}) {
    j_["finished"] = utc_now();
    j_["status"] = "completed";
    if (!summary.is_null()) j_["summary"] = std::move(summary);
    flush();
  }

 private:
  void flush() { write_file_atomic(dir_ / "manifest.json", j_.dump(2) + "\n"); }

  fs::path dir_;
  json j_;
};

// Inline Newick (anything containing ';') or a file of one tree per line.
inline std::string newick_source(const std::string& arg) {
  if (arg.find(';') != std::string::npos) {
    std::string s = arg;
    for (std::size_t p = 0; (p = s.find(';', p)) != std::string::npos; ++p) s.insert(++p, "\n");
    return s;
  }
  return read_file(arg);
}

inline void write_text(const std::string& text, const std::string& out_dir, const std::string& name, std::ostream& out) {
  if (out_dir.empty()) {
    out << text;
    return;
  }
  fs::create_directories(out_dir);
  write_file_atomic(fs::path(out_dir) / name, text);
}

// ---- embed / reconstruct ----

inline std::string embedding_csv(const TreeTopology& tree, const NodeFeatures& f) {
  std::string s = "node_id,is_leaf,taxon";
  for (Eigen::Index k = 0; k < f.cols(); ++k) s += ",f_" + std::to_string(k);
  s += "\n";
  for (NodeId u = 0; u < tree.num_nodes(); ++u) {
    s += std::to_string(u) + "," + (tree.is_leaf(u) ? "1," + tree.taxa()->name(tree.taxon(u)) : "0,");
    for (Eigen::Index k = 0; k < f.cols(); ++k) s += "," + num(f(u, k));
    s += "\n";
  }
  return s;
}

struct EmbedArgs {
  std::string newick, out;
  bool dense = false;
};

inline void run_embed(const EmbedArgs& a, std::ostream& out) {
  auto trees = parse_newick_lines(newick_source(a.newick));
  if (trees.size() != 1) throw ValidationError("embed takes exactly one tree");
  const auto& tree = trees.front();
  auto tips = one_hot_tips(tree);
  auto f = a.dense ? embed_dense(tree, tips) : embed_two_pass(tree, tips);
  write_text(embedding_csv(tree, f), a.out, "embedding.csv", out);
}

struct ReconstructArgs {
  std::string csv;
  double tie_tolerance = 1e-6;
};

// Reads an embedding CSV and prints the recovered unrooted topology.
inline void run_reconstruct(const ReconstructArgs& a, std::ostream& out) {
  std::istringstream in(read_file(a.csv));
  std::string line;
  if (!std::getline(in, line) || line.rfind("node_id,is_leaf,taxon", 0) != 0)
    throw ValidationError("embedding CSV must start with node_id,is_leaf,taxon");
  struct Row {
    long id;
    bool leaf;
    std::string taxon;
    std::vector<double> f;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() < 4) throw ValidationError("embedding CSV row has too few columns: " + line);
    Row r;
    try {
      r.id = std::stol(cells[0]);
      r.leaf = cells[1] == "1";
      for (std::size_t k = 3; k < cells.size(); ++k) r.f.push_back(std::stod(cells[k]));
    } catch (const std::logic_error&) {
      throw ValidationError("non-numeric value in embedding CSV row: " + line);
    }
    r.taxon = cells[2];
    if (!rows.empty() && r.f.size() != rows.front().f.size()) throw ValidationError("ragged embedding CSV");
    rows.push_back(std::move(r));
  }
  std::vector<const Row*> leaves, interior;
  for (const auto& r : rows) (r.leaf ? leaves : interior).push_back(&r);
  if (leaves.size() < 3) throw ValidationError("need at least three leaf rows");
  std::sort(leaves.begin(), leaves.end(), [](auto x, auto y) { return x->id < y->id; });
  std::sort(interior.begin(), interior.end(), [](auto x, auto y) { return x->id < y->id; });
  std::vector<std::string> names;
  for (auto r : leaves) names.push_back(r->taxon);
  auto taxa = std::make_shared<const TaxaSet>(names);
  const auto d = static_cast<Eigen::Index>(rows.front().f.size());
  auto fill = [d](const std::vector<const Row*>& src) {
    NodeFeatures m(static_cast<Eigen::Index>(src.size()), d);
    for (std::size_t i = 0; i < src.size(); ++i)
      for (Eigen::Index k = 0; k < d; ++k) m(static_cast<Eigen::Index>(i), k) = src[i]->f[static_cast<std::size_t>(k)];
    return m;
  };
  auto tree = reconstruct_topology(fill(interior), fill(leaves), taxa, a.tie_tolerance);
  out << serialize_newick(tree) << "\n";
}

// ---- enumerate ----

struct EnumerateArgs {
  int taxa = 0;
  std::string names;
  bool count_only = false;
  std::string out;
};

inline void run_enumerate(const EnumerateArgs& a, std::ostream& out) {
  TaxaPtr taxa;
  if (!a.names.empty()) {
    std::vector<std::string> names;
    std::stringstream ss(a.names);
    for (std::string s; std::getline(ss, s, ',');) names.push_back(s);
    taxa = std::make_shared<const TaxaSet>(names);
    if (a.taxa != 0 && a.taxa != taxa->size()) throw ValidationError("--taxa disagrees with --names");
  } else {
    if (a.taxa < 3) throw ValidationError("--taxa must be at least 3");
    taxa = TaxaSet::numbered(a.taxa);
  }
  if (a.count_only) {
    out << num_unrooted_topologies(taxa->size()) << "\n";
    return;
  }
  if (taxa->size() > 10) throw ValidationError("listing is limited to 10 taxa; use --count-only");
  std::string s;
  for_each_unrooted(taxa, [&](const TreeTopology& t) { s += serialize_newick(t) + "\n"; });
  write_text(s, a.out, "trees.nwk", out);
}

// ---- loglik ----

struct LoglikArgs {
  std::string fasta, newick;
  bool grad = false;
};

inline void run_loglik(const LoglikArgs& a, std::ostream& out) {
  auto aln = parse_fasta(read_file(a.fasta));
  auto text = newick_source(a.newick);
  auto end = text.find(';');
  auto parsed = parse_newick_with_lengths(std::string_view(text).substr(0, end + 1), aln.taxa());
  if (!parsed.all_lengths_present) throw ValidationError("loglik needs a branch length on every edge");
  if (parsed.tree.rooted()) throw ValidationError("loglik expects an unrooted tree (three children at the top level)");
  const auto& tree = parsed.tree;
  BranchLengths g;
  const double ll = LikelihoodEngine(aln).log_likelihood_grad(tree, parsed.lengths, g);
  out << num(ll) << "\n";
  if (!a.grad) return;
  out << "edge_id,child_node,length,gradient\n";
  for (EdgeId e = 0; e < tree.num_edges(); ++e)
    out << e << "," << tree.edge_child(e) << "," << num(parsed.lengths[static_cast<std::size_t>(e)]) << ","
        << num(g[static_cast<std::size_t>(e)]) << "\n";
}

// ---- sbn-check ----

struct SbnCheckArgs {
  int taxa = 0;
  std::string trees;
  std::uint64_t seed = 1;
  double phi_scale = 1.0;
  long samples = 0;
  std::string out;
};

// Draws random CPT parameters on a support and reports total probability over the enumeration and
// the sampler's empirical KL divergence.
inline void run_sbn_check(const SbnCheckArgs& a, std::ostream& out) {
  if ((a.taxa > 0) == !a.trees.empty()) throw ValidationError("give exactly one of --taxa or --trees");
  std::shared_ptr<const SbnSupport> support;
  if (a.taxa > 0) {
    if (a.taxa < 4 || a.taxa > 8) throw ValidationError("--taxa must be in [4, 8]");
    support = std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(TaxaSet::numbered(a.taxa)));
  } else {
    support = std::make_shared<const SbnSupport>(SbnSupport::from_trees(parse_newick_lines(newick_source(a.trees))));
  }
  if (support->taxa()->size() > 8) throw ValidationError("sbn-check enumerates the tree space; at most 8 taxa");
  if (a.samples < 0 || !(a.phi_scale >= 0)) throw ValidationError("invalid --samples or --phi-scale");
  std::mt19937_64 rng(a.seed);
  std::normal_distribution<double> normal(0.0, a.phi_scale);
  std::vector<double> phi(static_cast<std::size_t>(support->num_entries()));
  for (auto& v : phi) v = normal(rng);
  SbnModel model(support, phi);

  std::map<std::string, double> prob;
  double total = 0.0;
  for_each_unrooted(support->taxa(), [&](const TreeTopology& t) {
    try {
      const double p = std::exp(model.log_prob_unrooted(t));
      prob[serialize_newick(t)] = p;
      total += p;
    } catch (const OutOfSupport&) {
    }
  });
  json j;
  j["taxa"] = support->taxa()->size();
  j["parameters"] = support->num_entries();
  j["support_trees"] = prob.size();
  j["probability_sum"] = total;
  if (a.samples > 0) {
    std::map<std::string, long> counts;
    for (long i = 0; i < a.samples; ++i) ++counts[serialize_newick(model.sample(rng).unrooted())];
    double kl = 0.0;
    for (const auto& [k, c] : counts) {
      const double f = static_cast<double>(c) / static_cast<double>(a.samples);
      auto it = prob.find(k);
      if (it == prob.end()) throw Error("sampler produced a tree outside the support");
      kl += f * std::log(f / it->second);
    }
    j["samples"] = a.samples;
    j["sampler_kl"] = kl;
  }
  write_text(j.dump(2) + "\n", a.out, "sbn_check.json", out);
}

// ---- ebm-train ----

struct GnnArgs {
  std::string variant = "ggnn";
  int layers = 2;
  int hidden = 32;
  int mlp_layers = 2;

  nn::GnnConfig config() const {
    nn::GnnConfig g;
    g.variant = nn::parse_variant(variant);
    g.layers = layers;
    g.hidden_dim = hidden;
    g.mlp_layers = mlp_layers;
    g.validate();
    return g;
  }
};

struct EbmArgs {
  int taxa = 8;
  double beta = 0.008;
  GnnArgs gnn;
  int steps = 50000;
  int batch = 128;
  double lr = 1e-3;
  double final_lr_ratio = 0.01;
  int eval_every = 500;
  std::uint64_t seed = 0;
  std::uint64_t target_seed = 0;
  bool target_seed_set = false;
  int threads = 1;
  std::string out;
};

inline std::string ebm_trace_csv_header() { return "step,nce_loss,kl,logZ\n"; }

inline void run_ebm_train(const EbmArgs& a, const json& snapshot, std::ostream& out) {
  if (a.taxa < 4 || a.taxa > 8) throw ValidationError("--taxa must be in [4, 8] (the tree space is enumerated)");
  ebm::EbmConfig cfg;
  cfg.gnn = a.gnn.config();
  cfg.steps = a.steps;
  cfg.batch = a.batch;
  cfg.adam.lr = a.lr;
  cfg.final_lr_ratio = a.final_lr_ratio;
  cfg.eval_every = a.eval_every;
  cfg.seed = a.seed;
  cfg.threads = a.threads;
  if (cfg.steps < 0 || cfg.batch < 1 || cfg.eval_every < 1 || !(cfg.adam.lr > 0) || !(cfg.final_lr_ratio > 0) ||
      cfg.final_lr_ratio > 1 || cfg.threads < 1)
    throw ValidationError("invalid training settings");
  if (!(a.beta > 0)) throw ValidationError("--beta must be positive");

  RunManifest run(a.out, "ebm-train", snapshot);
  auto table = ebm::sample_dirichlet_target(a.taxa, a.beta, a.target_seed_set ? a.target_seed : a.seed);
  ebm::EbmModel model(cfg.gnn, a.taxa, a.seed);
  std::string csv = ebm_trace_csv_header();
  auto trace = ebm::train_nce(model, table, cfg, [&](const ebm::TraceRecord& r) {
    csv += std::to_string(r.step) + "," + num(r.nce_loss) + "," + num(r.kl) + "," + num(r.log_z) + "\n";
  });
  run.write("trace.csv", csv);
  nn::save_parameters(model.store(), run.dir() / "model.bin", run.dir() / "model.json");
  run.add_output("model.bin");
  run.add_output("model.json");
  const auto& last = trace.back();
  json summary{{"final_step", last.step},
               {"nce_loss", last.nce_loss},
               {"optimal_nce_loss", ebm::optimal_nce_loss(table.probs)},
               {"kl", last.kl},
               {"logZ", last.log_z}};
  run.finish(summary);
  out << summary.dump() << "\n";
}

// ---- vbpi-train / vbpi-eval ----

struct VbpiArgs {
  std::string fasta, support = "enumerate", branch = "gnn";
  GnnArgs gnn;
  int K = 10;
  int steps = 10000;
  double lr_phi = 1e-3, lr_psi = 1e-3;
  double anneal_init = 0.001, anneal_horizon = 100000;
  int eval_every = 100, eval_samples = 100;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string checkpoint_out;
};

inline json vbpi_config_json(const vbpi::VbpiConfig& c) {
  return {{"branch", vbpi::to_string(c.kind)},
          {"variant", nn::to_string(c.gnn.variant)},
          {"layers", c.gnn.layers},
          {"hidden", c.gnn.hidden_dim},
          {"mlp_layers", c.gnn.mlp_layers},
          {"K", c.K},
          {"lr_phi", c.lr_phi},
          {"lr_psi", c.lr_psi},
          {"anneal_init", c.anneal_init},
          {"anneal_horizon", c.anneal_horizon},
          {"init_mu", c.init_mu},
          {"init_log_sigma", c.init_log_sigma},
          {"seed", c.seed}};
}

inline vbpi::VbpiConfig vbpi_config_from_json(const json& j) {
  vbpi::VbpiConfig c;
  c.kind = vbpi::parse_branch_kind(j.at("branch").get<std::string>());
  c.gnn.variant = nn::parse_variant(j.at("variant").get<std::string>());
  c.gnn.layers = j.at("layers").get<int>();
  c.gnn.hidden_dim = j.at("hidden").get<int>();
  c.gnn.mlp_layers = j.at("mlp_layers").get<int>();
  c.K = j.at("K").get<int>();
  c.lr_phi = j.at("lr_phi").get<double>();
  c.lr_psi = j.at("lr_psi").get<double>();
  c.anneal_init = j.at("anneal_init").get<double>();
  c.anneal_horizon = j.at("anneal_horizon").get<double>();
  c.init_mu = j.at("init_mu").get<double>();
  c.init_log_sigma = j.at("init_log_sigma").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline void run_vbpi_train(const VbpiArgs& a, const json& snapshot, std::ostream& out) {
  vbpi::VbpiConfig cfg;
  cfg.kind = vbpi::parse_branch_kind(a.branch);
  cfg.gnn = a.gnn.config();
  cfg.K = a.K;
  cfg.steps = a.steps;
  cfg.lr_phi = a.lr_phi;
  cfg.lr_psi = a.lr_psi;
  cfg.anneal_init = a.anneal_init;
  cfg.anneal_horizon = a.anneal_horizon;
  cfg.eval_every = a.eval_every;
  cfg.eval_samples = a.eval_samples;
  cfg.seed = a.seed;
  cfg.threads = a.threads;
  cfg.validate();
  if (cfg.threads < 1) throw ValidationError("--threads must be >= 1");

  const std::string fasta = read_file(a.fasta);
  auto aln = parse_fasta(fasta);
  std::shared_ptr<const SbnSupport> support;
  if (a.support == "enumerate") {
    if (aln.taxa()->size() > 8) throw ValidationError("--support enumerate is limited to 8 taxa");
    support = std::make_shared<const SbnSupport>(SbnSupport::from_enumeration(aln.taxa()));
  } else {
    support = std::make_shared<const SbnSupport>(SbnSupport::from_trees(parse_newick_lines(newick_source(a.support), aln.taxa())));
  }

  RunManifest run(a.checkpoint_out, "vbpi-train", snapshot);
  vbpi::VbpiState state(support, cfg);
  LikelihoodEngine engine(aln);
  std::string csv = "step,elbo,lambda\n";
  auto trace = vbpi::train(state, engine, cfg, [&](const vbpi::TraceRecord& r) {
    csv += std::to_string(r.step) + "," + num(r.elbo) + "," + num(r.lambda) + "\n";
  });
  run.write("trace.csv", csv);
  nn::save_parameters(state.branch().store(), run.dir() / "psi.bin", run.dir() / "psi.json");
  run.add_output("psi.bin");
  run.add_output("psi.json");
  json ck{{"config", vbpi_config_json(cfg)}, {"step", state.step()}, {"alignment", fasta}, {"sbn", sbn_to_json(state.sbn())}};
  run.write("checkpoint.json", ck.dump(1) + "\n");
  json summary{{"final_step", trace.back().step}, {"elbo", trace.back().elbo}, {"lambda", trace.back().lambda}};
  run.finish(summary);
  out << summary.dump() << "\n";
}

struct LoadedVbpi {
  Alignment aln;
  vbpi::VbpiConfig cfg;
  std::unique_ptr<vbpi::VbpiState> state;
};

inline LoadedVbpi load_vbpi_checkpoint(const fs::path& dir) {
  json ck;
  try {
    ck = json::parse(read_file(dir / "checkpoint.json"));
    LoadedVbpi l{parse_fasta(ck.at("alignment").get<std::string>()), vbpi_config_from_json(ck.at("config")), nullptr};
    auto sbn = sbn_from_json(ck.at("sbn"));
    if (*sbn.support().taxa() != *l.aln.taxa()) throw ValidationError("checkpoint alignment and SBN taxa differ");
    l.state = std::make_unique<vbpi::VbpiState>(sbn.support_ptr(), l.cfg);
    nn::load_parameters(l.state->branch().store(), dir / "psi.bin", dir / "psi.json");
    auto& phi = l.state->phi_store()[l.state->phi_store().index_of("phi")].value;
    for (std::size_t i = 0; i < sbn.phi().size(); ++i) phi(static_cast<Eigen::Index>(i), 0) = sbn.phi()[i];
    l.state->sync_phi();
    l.state->step() = ck.at("step").get<long>();
    return l;
  } catch (const json::exception& e) {
    throw ValidationError("malformed checkpoint: " + std::string(e.what()));
  }
}

struct VbpiEvalArgs {
  std::string checkpoint;
  int ml_samples = 1000;
  int ml_runs = 10;
  std::string gap_trees;
  int gap_steps = 500;
  int gap_samples = 10;
  int gap_eval_samples = 2000;
  double gap_lr = 1e-2;
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out;
};

inline void run_vbpi_eval(const VbpiEvalArgs& a, const json& snapshot, std::ostream& out) {
  if (a.ml_samples < 1 || a.ml_runs < 1 || a.threads < 1) throw ValidationError("invalid evaluation settings");
  auto l = load_vbpi_checkpoint(a.checkpoint);
  LikelihoodEngine engine(l.aln);
  json j;
  j["step"] = l.state->step();
  auto ml = vbpi::estimate_marginal_likelihood(*l.state, engine, a.ml_samples, a.ml_runs, a.seed, a.threads);
  j["marginal_likelihood"] = {{"mean", ml.mean}, {"std", ml.stddev}, {"samples", a.ml_samples}, {"runs", ml.runs}};
  if (!a.gap_trees.empty()) {
    vbpi::GapConfig g{a.gap_steps, a.gap_samples, a.gap_lr, a.gap_eval_samples};
    auto trees = parse_newick_lines(newick_source(a.gap_trees), l.aln.taxa());
    json gaps = json::array();
    double sum = 0.0;
    for (std::size_t i = 0; i < trees.size(); ++i) {
      auto t = trees[i].rooted() ? trees[i].unrooted() : trees[i];
      auto r = vbpi::amortization_gap(*l.state, t, engine, g, a.seed + i);
      gaps.push_back({{"tree", serialize_newick(t)},
                      {"gap", r.gap},
                      {"amortized_elbo", r.amortized_elbo},
                      {"optimized_elbo", r.optimized_elbo},
                      {"clipped", r.clipped}});
      sum += r.gap;
    }
    j["amortization_gaps"] = gaps;
    j["mean_gap"] = sum / static_cast<double>(trees.size());
  }
  if (!a.out.empty()) {
    RunManifest run(a.out, "vbpi-eval", snapshot);
    run.write("summary.json", j.dump(2) + "\n");
    run.finish();
  }
  out << j.dump(2) << "\n";
}

// ---- dispatch ----

enum ExitCode { kOk = 0, kValidation = 1, kRuntime = 2 };

inline void add_gnn_options(CLI::App* sub, GnnArgs& g) {
  sub->add_option("--variant", g.variant, "mlp|gcn|gin|sage|ggnn|edge")->capture_default_str();
  sub->add_option("--layers", g.layers, "message-passing steps")->capture_default_str();
  sub->add_option("--hidden", g.hidden, "hidden width")->capture_default_str();
  sub->add_option("--mlp-layers", g.mlp_layers, "layers per MLP")->capture_default_str();
}

// Parses args (without the program name) and runs one subcommand.
inline int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tree-topology embeddings, energy-based tree models and variational phylogenetics"};
  app.set_version_flag("--version", PHYLOTOPO_VERSION);
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  const int default_thr = default_threads();

  EmbedArgs embed;
  auto* s_embed = app.add_subcommand("embed", "Dirichlet-energy node features of one tree as CSV");
  s_embed->add_option("--newick", embed.newick, "tree text or file")->required();
  s_embed->add_option("--out", embed.out, "output directory (default: stdout)");
  s_embed->add_flag("--dense", embed.dense, "use the dense linear solver");

  ReconstructArgs rec;
  auto* s_rec = app.add_subcommand("reconstruct", "topology from an embedding CSV");
  s_rec->add_option("--csv", rec.csv, "embedding CSV")->required();
  s_rec->add_option("--tie-tolerance", rec.tie_tolerance)->capture_default_str();

  EnumerateArgs en;
  auto* s_en = app.add_subcommand("enumerate", "all unrooted bifurcating topologies");
  s_en->add_option("--taxa", en.taxa, "number of taxa");
  s_en->add_option("--names", en.names, "comma-separated taxon names");
  s_en->add_flag("--count-only", en.count_only, "print only the count");
  s_en->add_option("--out", en.out, "output directory (default: stdout)");

  LoglikArgs ll;
  auto* s_ll = app.add_subcommand("loglik", "Jukes-Cantor log-likelihood of a tree with branch lengths");
  s_ll->add_option("--fasta", ll.fasta)->required();
  s_ll->add_option("--newick", ll.newick, "tree text or file")->required();
  s_ll->add_flag("--grad", ll.grad, "also print per-edge gradients as CSV");

  SbnCheckArgs sc;
  auto* s_sc = app.add_subcommand("sbn-check", "normalization and sampler check of an SBN with random parameters");
  s_sc->add_option("--taxa", sc.taxa, "complete support over this many taxa");
  s_sc->add_option("--trees", sc.trees, "support from trees (text or file)");
  s_sc->add_option("--seed", sc.seed)->capture_default_str();
  s_sc->add_option("--phi-scale", sc.phi_scale, "std of random parameters")->capture_default_str();
  s_sc->add_option("--samples", sc.samples, "sampler draws for the KL check")->capture_default_str();
  s_sc->add_option("--out", sc.out, "output directory (default: stdout)");

  EbmArgs eb;
  eb.threads = default_thr;
  auto* s_eb = app.add_subcommand("ebm-train", "NCE training of a tree energy model against a Dirichlet target");
  s_eb->add_option("--taxa", eb.taxa)->capture_default_str();
  s_eb->add_option("--beta", eb.beta, "Dirichlet concentration")->capture_default_str();
  add_gnn_options(s_eb, eb.gnn);
  s_eb->add_option("--steps", eb.steps)->capture_default_str();
  s_eb->add_option("--batch", eb.batch, "data and noise samples per step")->capture_default_str();
  s_eb->add_option("--lr", eb.lr)->capture_default_str();
  s_eb->add_option("--final-lr-ratio", eb.final_lr_ratio, "cosine decay floor as a fraction of --lr")->capture_default_str();
  s_eb->add_option("--eval-every", eb.eval_every)->capture_default_str();
  s_eb->add_option("--seed", eb.seed)->required();
  auto* tseed = s_eb->add_option("--target-seed", eb.target_seed, "seed of the target draw (default: --seed)");
  s_eb->add_option("--threads", eb.threads)->capture_default_str();
  s_eb->add_option("--out", eb.out, "output directory")->required();

  VbpiArgs vb;
  vb.threads = default_thr;
  auto* s_vb = app.add_subcommand("vbpi-train", "variational phylogenetic inference");
  s_vb->add_option("--fasta", vb.fasta)->required();
  s_vb->add_option("--support", vb.support, "\"enumerate\", Newick list text or file")->capture_default_str();
  s_vb->add_option("--branch", vb.branch, "split|psp|gnn")->capture_default_str();
  add_gnn_options(s_vb, vb.gnn);
  s_vb->add_option("--K", vb.K, "samples in the multi-sample bound")->capture_default_str();
  s_vb->add_option("--steps", vb.steps)->capture_default_str();
  s_vb->add_option("--lr-phi", vb.lr_phi)->capture_default_str();
  s_vb->add_option("--lr-psi", vb.lr_psi)->capture_default_str();
  s_vb->add_option("--anneal-init", vb.anneal_init)->capture_default_str();
  s_vb->add_option("--anneal-horizon", vb.anneal_horizon)->capture_default_str();
  s_vb->add_option("--eval-every", vb.eval_every)->capture_default_str();
  s_vb->add_option("--eval-samples", vb.eval_samples)->capture_default_str();
  s_vb->add_option("--seed", vb.seed)->required();
  s_vb->add_option("--threads", vb.threads)->capture_default_str();
  s_vb->add_option("--checkpoint-out,--out", vb.checkpoint_out, "run directory")->required();

  VbpiEvalArgs ve;
  ve.threads = default_thr;
  auto* s_ve = app.add_subcommand("vbpi-eval", "marginal likelihood and amortization gaps of a trained run");
  s_ve->add_option("--checkpoint", ve.checkpoint, "run directory of vbpi-train")->required();
  s_ve->add_option("--ml-samples", ve.ml_samples)->capture_default_str();
  s_ve->add_option("--ml-runs", ve.ml_runs)->capture_default_str();
  s_ve->add_option("--gap-trees", ve.gap_trees, "Newick list text or file");
  s_ve->add_option("--gap-steps", ve.gap_steps)->capture_default_str();
  s_ve->add_option("--gap-samples", ve.gap_samples)->capture_default_str();
  s_ve->add_option("--gap-eval-samples", ve.gap_eval_samples)->capture_default_str();
  s_ve->add_option("--gap-lr", ve.gap_lr)->capture_default_str();
  s_ve->add_option("--seed", ve.seed)->capture_default_str();
  s_ve->add_option("--threads", ve.threads)->capture_default_str();
  s_ve->add_option("--out", ve.out, "output directory (default: stdout only)");

  std::string config_path;
  for (auto* sub : app.get_subcommands([](CLI::App*) { return true; }))
    sub->add_option("--config", config_path, "flat JSON file of flag values");

  try {
    // Config entries go right after the subcommand name so explicit flags, parsed later, win.
    for (std::size_t i = 1; i < args.size(); ++i) {
      std::string path;
      if (args[i] == "--config" && i + 1 < args.size())
        path = args[i + 1];
      else if (args[i].rfind("--config=", 0) == 0)
        path = args[i].substr(9);
      if (path.empty()) continue;
      auto extra = config_arguments(path);
      args.insert(args.begin() + 1, extra.begin(), extra.end());
      break;
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidation;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }

  try {
    eb.target_seed_set = tseed->count() > 0;
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "embed") run_embed(embed, out);
    else if (name == "reconstruct") run_reconstruct(rec, out);
    else if (name == "enumerate") run_enumerate(en, out);
    else if (name == "loglik") run_loglik(ll, out);
    else if (name == "sbn-check") run_sbn_check(sc, out);
    else if (name == "ebm-train") run_ebm_train(eb, config_snapshot(*sub), out);
    else if (name == "vbpi-train") run_vbpi_train(vb, config_snapshot(*sub), out);
    else if (name == "vbpi-eval") run_vbpi_eval(ve, config_snapshot(*sub), out);
    return kOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const OutOfSupport& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const AmbiguousEmbedding& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace phylotopo::cli
