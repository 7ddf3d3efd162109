// Copyright 2026 The ShardSafe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Command-line entry point. Exit codes: 0 success, 1 usage error,
// 2 data error, 3 budget/infeasibility.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "shardsafe/cost_sim.hpp"
#include "shardsafe/dp_engine.hpp"
#include "shardsafe/embedding_store.hpp"
#include "shardsafe/ensemble.hpp"
#include "shardsafe/error.hpp"
#include "shardsafe/experiment.hpp"
#include "shardsafe/forgetting.hpp"
#include "shardsafe/inca_adapter.hpp"
#include "shardsafe/prototype.hpp"
#include "shardsafe/rng.hpp"
#include "shardsafe/shard_graph.hpp"

namespace {

using namespace shardsafe;

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw data_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// --config <json>: a flat object of long-option defaults, injected before
// the user's own flags so explicit flags win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") {
      config_path = args[i + 1];
      args.erase(args.begin() + i, args.begin() + i + 2);
      break;
    }
  }
  if (config_path.empty()) return args;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(config_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw usage_error(std::string("config parse error: ") + e.what());
  }
  if (!j.is_object()) throw usage_error("config must be a JSON object");
  std::vector<std::string> injected;
  for (auto it = j.begin(); it != j.end(); ++it) {
    injected.push_back("--" + it.key());
    if (it.value().is_string()) {
      injected.push_back(it.value().get<std::string>());
    } else if (it.value().is_boolean()) {
      if (!it.value().get<bool>()) injected.pop_back();
    } else if (it.value().is_array()) {
      std::string list;
      for (const auto& v : it.value()) {
        if (!list.empty()) list += ",";
        list += v.is_string() ? v.get<std::string>() : v.dump();
      }
      injected.push_back(list);
    } else {
      injected.push_back(it.value().dump());
    }
  }
  // Keep the subcommand name first.
  std::vector<std::string> out;
  size_t i = 0;
  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    out.push_back(args[0]);
    i = 1;
  }
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + i, args.end());
  return out;
}

TrainConfig add_train_flags(CLI::App* cmd, std::string* loss_name) {
  TrainConfig config;
  cmd->add_option("--epochs", config.epochs, "Training epochs")
      ->capture_default_str();
  cmd->add_option("--lr", config.learning_rate, "Peak learning rate")
      ->capture_default_str();
  cmd->add_option("--weight-decay", config.weight_decay, "Weight decay")
      ->capture_default_str();
  cmd->add_option("--batch", config.batch_size, "Batch size (0 = full batch)")
      ->capture_default_str();
  cmd->add_option("--loss", *loss_name, "Loss mode: bce | ce")
      ->capture_default_str();
  return config;
}

LossMode parse_loss(const std::string& name) {
  if (name == "bce") return LossMode::kMaskedBce;
  if (name == "ce") return LossMode::kCliqueCe;
  throw usage_error("unknown loss mode: " + name);
}

void print_report(const ForgetReport& report) {
  std::cout << "mode=" << report.mode
            << " affected=" << report.affected_nodes.size()
            << " dropped=" << report.dropped_nodes.size()
            << " retrain_set=" << report.retrain_set_size
            << " samples_revisited=" << report.samples_revisited << "\n";
  std::fprintf(stderr, "wall_ms=%.3f\n", report.wall_ms);
}

int run(int argc, char** argv) {
  CLI::App app{"Compartmentalized training and exact unlearning over shard "
               "graphs"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  SyntheticSpec synth;
  std::string gen_out;
  gen->add_option("--classes", synth.num_classes)->required();
  gen->add_option("--per-class", synth.samples_per_class)->required();
  gen->add_option("--tokens", synth.token_count)->capture_default_str();
  gen->add_option("--dim", synth.dim)->required();
  gen->add_option("--cluster-scale", synth.cluster_scale)
      ->capture_default_str();
  gen->add_option("--noise-scale", synth.noise_scale)->capture_default_str();
  gen->add_option("--domains", synth.num_domains)->capture_default_str();
  gen->add_option("--seed", synth.seed)->envname("SHARDSAFE_SEED")->required();
  gen->add_option("--out", gen_out)->required();

  // ---- build-graph ----
  auto* bg = app.add_subcommand("build-graph", "Construct a shard graph");
  std::string bg_data, bg_topology = "uniform", bg_out;
  uint32_t bg_n = 1, bg_nc = 1, bg_nf = 1, bg_d = 0;
  uint64_t bg_seed = 0;
  bg->add_option("--data", bg_data)->required();
  bg->add_option("--topology", bg_topology,
                 "uniform | bilevel | random_degree")
      ->capture_default_str();
  bg->add_option("--n", bg_n, "Shard count (uniform / random_degree)");
  bg->add_option("--nc", bg_nc, "Coarse shards (bilevel)");
  bg->add_option("--nf", bg_nf, "Fine cliques per coarse shard (bilevel)");
  bg->add_option("--d", bg_d, "Outbound degree (random_degree)");
  bg->add_option("--seed", bg_seed)->envname("SHARDSAFE_SEED")->required();
  bg->add_option("--out", bg_out)->required();

  // ---- train ----
  auto* tr = app.add_subcommand("train", "Train adapters over a shard graph");
  std::string tr_data, tr_graph, tr_out, tr_loss = "bce",
              tr_lambda_mode = "formula";
  double tr_lambda_value = 0.0;
  bool tr_mix_raw = false, tr_unnormalized = false;
  unsigned tr_jobs = 0;
  uint64_t tr_seed = 0;
  TrainConfig tr_config = add_train_flags(tr, &tr_loss);
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--graph", tr_graph)->required();
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--seed", tr_seed)->envname("SHARDSAFE_SEED")->required();
  tr->add_option("--lambda", tr_lambda_mode, "formula | fixed")
      ->capture_default_str();
  tr->add_option("--lambda-value", tr_lambda_value,
                 "Fixed prototype weight (with --lambda fixed)");
  tr->add_flag("--mix-raw", tr_mix_raw,
               "Mix raw branch scores instead of probabilities");
  tr->add_flag("--unnormalized-prototypes", tr_unnormalized,
               "Use raw (unnormalized) embedding prototypes");
  tr->add_option("--jobs", tr_jobs, "Worker threads (0 = cores)");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "Evaluate model accuracy");
  std::string ev_model, ev_data, ev_out;
  unsigned ev_jobs = 0;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--out", ev_out, "Optional per-sample CSV");
  ev->add_option("--jobs", ev_jobs);

  // ---- predict ----
  auto* pr = app.add_subcommand("predict", "Batch predictions to CSV");
  std::string pr_model, pr_data, pr_out;
  uint32_t pr_topk = 3;
  pr->add_option("--model", pr_model)->required();
  pr->add_option("--data", pr_data)->required();
  pr->add_option("--out", pr_out)->required();
  pr->add_option("--topk", pr_topk)->capture_default_str();

  // ---- forget ----
  auto* fg = app.add_subcommand("forget", "Exact forgetting of samples/node");
  std::string fg_model, fg_data, fg_out_model, fg_out_data, fg_journal,
      fg_requester = "cli";
  std::vector<uint64_t> fg_ids;
  int64_t fg_node = -1, fg_timestamp = 0;
  unsigned fg_jobs = 0;
  fg->add_option("--model", fg_model)->required();
  fg->add_option("--data", fg_data)->required();
  fg->add_option("--ids", fg_ids, "Sample ids to forget")->delimiter(',');
  fg->add_option("--node", fg_node, "Shard id to forget");
  fg->add_option("--out-model", fg_out_model)->required();
  fg->add_option("--out-data", fg_out_data)->required();
  fg->add_option("--journal", fg_journal, "Append JSONL audit entry");
  fg->add_option("--timestamp", fg_timestamp)->capture_default_str();
  fg->add_option("--requester", fg_requester)->capture_default_str();
  fg->add_option("--jobs", fg_jobs);

  // ---- instant-forget ----
  auto* ig = app.add_subcommand("instant-forget",
                                "Tombstone a shard's adapters, no retraining");
  std::string ig_model, ig_out_model, ig_journal, ig_requester = "cli";
  uint32_t ig_node = 0;
  int64_t ig_timestamp = 0;
  ig->add_option("--model", ig_model)->required();
  ig->add_option("--node", ig_node)->required();
  ig->add_option("--out-model", ig_out_model)->required();
  ig->add_option("--journal", ig_journal);
  ig->add_option("--timestamp", ig_timestamp)->capture_default_str();
  ig->add_option("--requester", ig_requester)->capture_default_str();

  // ---- verify-unlearn ----
  auto* vu = app.add_subcommand(
      "verify-unlearn", "Check forget path == scratch path, byte for byte");
  std::string vu_data, vu_graph, vu_kind = "sample", vu_loss = "bce";
  std::vector<uint64_t> vu_ids;
  int64_t vu_node = -1;
  uint64_t vu_seed = 0;
  unsigned vu_jobs = 0;
  TrainConfig vu_config = add_train_flags(vu, &vu_loss);
  vu->add_option("--data", vu_data)->required();
  vu->add_option("--graph", vu_graph)->required();
  vu->add_option("--kind", vu_kind, "sample | node | batch")
      ->capture_default_str();
  vu->add_option("--ids", vu_ids)->delimiter(',');
  vu->add_option("--node", vu_node);
  vu->add_option("--seed", vu_seed)->envname("SHARDSAFE_SEED")->required();
  vu->add_option("--jobs", vu_jobs);

  // ---- simulate-cost ----
  auto* sc = app.add_subcommand("simulate-cost",
                                "Monte Carlo expected forgetting cost");
  CostTrialConfig sc_config;
  std::string sc_topology = "clique", sc_out;
  sc->add_option("--topology", sc_topology, "clique | edgeless | random_degree")
      ->capture_default_str();
  sc->add_option("--nodes", sc_config.num_nodes, "Node count |V|")
      ->capture_default_str();
  sc->add_option("--d", sc_config.degree)->capture_default_str();
  sc->add_option("--shard-size", sc_config.shard_size)->capture_default_str();
  sc->add_option("--trials", sc_config.trials)->capture_default_str();
  sc->add_option("--regime-constant", sc_config.regime_constant)
      ->capture_default_str();
  sc->add_option("--seed", sc_config.seed)
      ->envname("SHARDSAFE_SEED")
      ->required();
  sc->add_option("--out", sc_out, "Optional CSV path");

  // ---- pareto ----
  auto* pa = app.add_subcommand("pareto",
                                "Accuracy vs forgetting-cost sweep (bilevel)");
  std::string pa_data, pa_eval, pa_out, pa_loss = "bce";
  std::vector<uint32_t> pa_n, pa_nf;
  std::vector<uint64_t> pa_seeds;
  uint32_t pa_test_per_class = 10;
  unsigned pa_jobs = 0;
  TrainConfig pa_config = add_train_flags(pa, &pa_loss);
  pa->add_option("--data", pa_data)->required();
  pa->add_option("--eval-data", pa_eval,
                 "Held-out dataset (default: split --data)");
  pa->add_option("--test-per-class", pa_test_per_class)->capture_default_str();
  pa->add_option("--n", pa_n, "Total shard counts")->delimiter(',')->required();
  pa->add_option("--nf-grid", pa_nf, "Fine clique counts")
      ->delimiter(',')
      ->required();
  pa->add_option("--seeds", pa_seeds)->delimiter(',')->required();
  pa->add_option("--out", pa_out)->required();
  pa->add_option("--jobs", pa_jobs);

  // ---- dp-budget ----
  auto* db = app.add_subcommand("dp-budget",
                                "Max stochastic forget requests for a budget");
  double db_eps = 1.0, db_delta = 1e-10, db_alpha = 30.0, db_beta = 1.0;
  db->add_option("--eps", db_eps)->required();
  db->add_option("--delta", db_delta)->required();
  db->add_option("--alpha", db_alpha)->required();
  db->add_option("--beta", db_beta)->required();

  // ---- dp-train ----
  auto* dt = app.add_subcommand("dp-train",
                                "Mixed-privacy training (neighbors under DP)");
  std::string dt_data, dt_graph, dt_out, dt_loss = "bce", dt_accountant;
  double dt_eps = 1.0, dt_delta = 1e-10, dt_clip = 1.0, dt_alpha = 30.0,
         dt_beta = 1.0;
  uint64_t dt_seed = 0;
  unsigned dt_jobs = 0;
  TrainConfig dt_config = add_train_flags(dt, &dt_loss);
  dt->add_option("--data", dt_data)->required();
  dt->add_option("--graph", dt_graph)->required();
  dt->add_option("--out", dt_out)->required();
  dt->add_option("--eps", dt_eps)->capture_default_str();
  dt->add_option("--delta", dt_delta)->capture_default_str();
  dt->add_option("--clip", dt_clip)->capture_default_str();
  dt->add_option("--alpha", dt_alpha)->capture_default_str();
  dt->add_option("--beta", dt_beta)->capture_default_str();
  dt->add_option("--accountant", dt_accountant,
                 "Write accountant JSON beside the model");
  dt->add_option("--seed", dt_seed)->envname("SHARDSAFE_SEED")->required();
  dt->add_option("--jobs", dt_jobs);

  // ---- experiment ----
  auto* ex = app.add_subcommand("experiment", "Run a scripted experiment");
  std::string ex_spec, ex_kind = "comparison", ex_out_dir;
  uint32_t ex_requests = 10;
  std::vector<uint64_t> ex_k_grid = {2, 4, 8};
  unsigned ex_jobs = 0;
  ex->add_option("--spec", ex_spec)->required();
  ex->add_option("--kind", ex_kind,
                 "comparison | instant | dp | cross-domain")
      ->capture_default_str();
  ex->add_option("--out-dir", ex_out_dir, "Override spec output dir");
  ex->add_option("--requests", ex_requests)->capture_default_str();
  ex->add_option("--k-grid", ex_k_grid)->delimiter(',');
  ex->add_option("--jobs", ex_jobs);

  auto args = expand_config(argc, argv);
  std::reverse(args.begin(), args.end());  // CLI11 takes a reversed vector
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (gen->parsed()) {
    const auto dataset = generate_synthetic(synth);
    save_dataset(dataset, gen_out);
    std::cout << "wrote " << dataset.size() << " samples (K="
              << dataset.num_classes << ", T=" << dataset.token_count
              << ", D=" << dataset.dim << ") to " << gen_out << "\n";
    return 0;
  }

  if (bg->parsed()) {
    const auto dataset = load_dataset(bg_data);
    ShardGraph graph;
    if (bg_topology == "uniform") {
      graph = build_uniform(dataset, bg_n, bg_seed);
    } else if (bg_topology == "bilevel") {
      graph = build_bilevel(dataset, bg_nc, bg_nf, bg_seed);
    } else if (bg_topology == "random_degree") {
      graph = build_random_degree(dataset, bg_n, bg_d, bg_seed);
    } else {
      throw usage_error("unknown topology: " + bg_topology);
    }
    const auto violations = validate(graph, dataset);
    if (!violations.empty()) {
      throw data_error("constructed graph invalid: " + violations.front());
    }
    save_graph(graph, bg_out);
    std::cout << "wrote " << graph.nodes.size() << " nodes, "
              << graph.edges.size() << " edges to " << bg_out << "\n";
    return 0;
  }

  if (tr->parsed()) {
    tr_config.loss_mode = parse_loss(tr_loss);
    tr_config.seed = tr_seed;
    const auto dataset = load_dataset(tr_data);
    const auto graph = load_graph(tr_graph);
    LambdaPolicy lambda = LambdaPolicy::formula();
    if (tr_lambda_mode == "fixed") {
      lambda = LambdaPolicy::fixed(tr_lambda_value);
    } else if (tr_lambda_mode != "formula") {
      throw usage_error("unknown lambda mode: " + tr_lambda_mode);
    }
    SafeModel model = fit_safe_model(dataset, graph, tr_config, lambda, {}, {},
                                     tr_jobs, !tr_unnormalized);
    model.mix_raw_scores = tr_mix_raw;
    save_model(model, tr_out);
    std::cout << "trained " << model.units.size() << " units over "
              << graph.nodes.size() << " shards; lambda="
              << effective_lambda(model) << "; wrote " << tr_out << "\n";
    return 0;
  }

  if (ev->parsed()) {
    const auto model = load_model(ev_model);
    const auto dataset = load_dataset(ev_data);
    if (!ev_out.empty()) {
      std::ostringstream csv;
      csv << "id,label,pred,correct\n";
      size_t correct = 0;
      for (const auto& s : dataset.samples) {
        const auto pred =
            safe_predict(model, {s.tokens.data(), s.tokens.size()});
        correct += pred.label == s.label;
        csv << s.id << "," << s.label << "," << pred.label << ","
            << (pred.label == s.label ? 1 : 0) << "\n";
      }
      write_text_file(ev_out, csv.str());
      std::printf("accuracy=%.6f\n",
                  static_cast<double>(correct) / dataset.size());
    } else {
      std::printf("accuracy=%.6f\n",
                  evaluate_accuracy(model, dataset, ev_jobs));
    }
    return 0;
  }

  if (pr->parsed()) {
    const auto model = load_model(pr_model);
    const auto dataset = load_dataset(pr_data);
    const uint32_t topk = std::min(pr_topk, model.num_classes);
    std::ostringstream csv;
    csv << "id,pred";
    for (uint32_t r = 1; r <= topk; ++r) {
      csv << ",rank" << r << "_label,rank" << r << "_prob";
    }
    csv << "\n";
    char buf[64];
    for (const auto& s : dataset.samples) {
      const auto pred =
          safe_predict(model, {s.tokens.data(), s.tokens.size()});
      csv << s.id << "," << pred.label;
      std::vector<uint32_t> idx(pred.probabilities.size());
      for (uint32_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::stable_sort(idx.begin(), idx.end(), [&](uint32_t a, uint32_t b) {
        return pred.probabilities[a] > pred.probabilities[b];
      });
      for (uint32_t r = 0; r < topk; ++r) {
        std::snprintf(buf, sizeof(buf), ",%u,%.6f", idx[r],
                      pred.probabilities[idx[r]]);
        csv << buf;
      }
      csv << "\n";
    }
    write_text_file(pr_out, csv.str());
    std::cout << "wrote predictions for " << dataset.size() << " samples to "
              << pr_out << "\n";
    return 0;
  }

  if (fg->parsed()) {
    if (fg_ids.empty() == (fg_node < 0)) {
      throw usage_error("pass exactly one of --ids or --node");
    }
    const auto model = load_model(fg_model);
    const auto dataset = load_dataset(fg_data);
    ForgetRequest request;
    request.timestamp = fg_timestamp;
    request.requester = fg_requester;
    ForgetResult result;
    if (!fg_ids.empty()) {
      request.kind = ForgetRequest::Kind::kSamples;
      request.sample_ids = fg_ids;
      result = forget_samples(model, dataset, fg_ids, fg_jobs);
    } else {
      request.kind = ForgetRequest::Kind::kNode;
      request.node_id = static_cast<uint32_t>(fg_node);
      result = forget_node(model, dataset, request.node_id, fg_jobs);
    }
    save_model(result.model, fg_out_model);
    save_dataset(result.dataset, fg_out_data);
    if (!fg_journal.empty()) append_journal(fg_journal, request, result.report);
    print_report(result.report);
    return 0;
  }

  if (ig->parsed()) {
    const auto model = load_model(ig_model);
    const auto result = instant_forget(model, ig_node);
    save_model(result.model, ig_out_model);
    if (!ig_journal.empty()) {
      ForgetRequest request;
      request.kind = ForgetRequest::Kind::kInstantNode;
      request.node_id = ig_node;
      request.timestamp = ig_timestamp;
      request.requester = ig_requester;
      append_journal(ig_journal, request, result.report);
    }
    print_report(result.report);
    std::cout << "deferred retrain owed for " << result.job.retrain_later.size()
              << " units\n";
    return 0;
  }

  if (vu->parsed()) {
    vu_config.loss_mode = parse_loss(vu_loss);
    vu_config.seed = vu_seed;
    const auto dataset = load_dataset(vu_data);
    const auto graph = load_graph(vu_graph);
    ForgetRequest request;
    if (vu_kind == "sample" || vu_kind == "batch") {
      if (vu_ids.empty()) throw usage_error("--ids required for this kind");
      request.kind = ForgetRequest::Kind::kSamples;
      request.sample_ids = vu_ids;
    } else if (vu_kind == "node") {
      if (vu_node < 0) throw usage_error("--node required for this kind");
      request.kind = ForgetRequest::Kind::kNode;
      request.node_id = static_cast<uint32_t>(vu_node);
    } else {
      throw usage_error("unknown kind: " + vu_kind);
    }
    const auto result =
        verify_unlearning(graph, dataset, request, vu_config, vu_jobs);
    if (result.exact) {
      std::printf("EXACT: byte-identical (prototype divergence %.3g)\n",
                  result.prototype_divergence);
      return 0;
    }
    std::printf("MISMATCH: %s (max divergence %.6g)\n", result.detail.c_str(),
                result.max_divergence);
    return 2;
  }

  if (sc->parsed()) {
    sc_config.topology = cost_topology_from_string(sc_topology);
    if (sc_config.num_nodes == 0) {
      // Node count only matters for sampling; default to a small multiple
      // of the clique size for clique/edgeless runs.
      sc_config.num_nodes = sc_config.topology == CostTopology::kRandomDegree
                                ? 4096
                                : std::max(64u, sc_config.degree * 8);
    }
    const auto summary = simulate_expected_cost(sc_config);
    const auto closed = expected_cost_closed_form(
        sc_config.topology, sc_config.degree, sc_config.shard_size);
    std::printf("topology=%s nodes=%u d=%u shard_size=%u trials=%u ",
                to_string(sc_config.topology).c_str(), sc_config.num_nodes,
                sc_config.degree, sc_config.shard_size, sc_config.trials);
    std::printf("mean=%.6g std_error=%.6g", summary.mean, summary.std_error);
    if (closed.has_value()) std::printf(" closed_form=%.6g", *closed);
    if (!summary.in_regime) std::printf(" (outside theorem regime)");
    std::printf("\n");
    if (!sc_out.empty()) {
      write_text_file(sc_out, cost_summary_to_csv(sc_config, summary));
    }
    return 0;
  }

  if (pa->parsed()) {
    pa_config.loss_mode = parse_loss(pa_loss);
    const auto dataset = load_dataset(pa_data);
    EmbeddingDataset train = dataset, eval_set;
    if (!pa_eval.empty()) {
      eval_set = load_dataset(pa_eval);
    } else {
      auto split = split_train_test(dataset, pa_test_per_class);
      train = std::move(split.first);
      eval_set = std::move(split.second);
    }
    const auto rows =
        pareto_sweep(train, eval_set, pa_n, pa_nf, pa_config, pa_seeds, pa_jobs);
    write_text_file(pa_out, pareto_to_csv(rows));
    std::cout << "wrote " << rows.size() << " sweep rows to " << pa_out << "\n";
    return 0;
  }

  if (db->parsed()) {
    const uint64_t k = max_requests(db_eps, db_delta, db_alpha, db_beta);
    const auto [eps_g, delta_g] = group_privacy(db_eps, db_delta, k);
    std::printf("k=%llu (group privacy at k: eps_g=%.6g delta_g=%.6g)\n",
                static_cast<unsigned long long>(k), eps_g, delta_g);
    return 0;
  }

  if (dt->parsed()) {
    dt_config.loss_mode = parse_loss(dt_loss);
    dt_config.seed = dt_seed;
    const auto dataset = load_dataset(dt_data);
    const auto graph = load_graph(dt_graph);
    const DpConfig dp{dt_eps, dt_delta, dt_clip};
    SafeModel model =
        fit_safe_model(dataset, graph, dt_config, LambdaPolicy::formula(), {},
                       make_dp_options(dp), dt_jobs);
    save_model(model, dt_out);
    const Budget budget{dt_alpha, dt_beta};
    Accountant accountant(dp, budget);
    if (!dt_accountant.empty()) accountant.save(dt_accountant);
    std::cout << "trained " << model.units.size()
              << " units under (eps=" << dt_eps << ", delta=" << dt_delta
              << "); max_k=" << accountant.max_k() << "; wrote " << dt_out
              << "\n";
    return 0;
  }

  if (ex->parsed()) {
    auto spec = experiment_spec_from_json(read_text_file(ex_spec));
    if (!ex_out_dir.empty()) spec.output_dir = ex_out_dir;
    std::filesystem::create_directories(spec.output_dir);
    const auto path = [&](const std::string& name) {
      return (std::filesystem::path(spec.output_dir) / name).string();
    };
    if (ex_kind == "comparison") {
      const auto cells = run_method_comparison(spec, ex_jobs);
      write_text_file(path(spec.name + "_comparison.csv"),
                      comparison_to_csv(cells));
    } else if (ex_kind == "instant") {
      const auto points = run_instant_forgetting(spec, ex_requests, ex_jobs);
      write_text_file(path(spec.name + "_instant.csv"),
                      instant_curve_to_csv(points));
    } else if (ex_kind == "dp") {
      const auto rows =
          run_dp_tradeoff(spec, ex_k_grid, DpConfig{}, Budget{}, ex_jobs);
      write_text_file(path(spec.name + "_dp.csv"), dp_tradeoff_to_csv(rows));
    } else if (ex_kind == "cross-domain") {
      const auto rows = run_cross_domain(spec, ex_jobs);
      write_text_file(path(spec.name + "_cross_domain.csv"),
                      cross_domain_to_csv(rows));
    } else {
      throw usage_error("unknown experiment kind: " + ex_kind);
    }
    write_text_file(path(spec.name + "_summary.json"),
                    experiment_spec_to_json(spec));
    std::cout << "experiment '" << spec.name << "' (" << ex_kind
              << ") written to " << spec.output_dir << "\n";
    return 0;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::kUsage:
        return 1;
      case ErrorKind::kData:
        return 2;
      case ErrorKind::kBudget:
        return 3;
    }
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
