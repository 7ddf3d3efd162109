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

#include "shardsafe/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "shardsafe/error.hpp"
#include "shardsafe/forgetting.hpp"
#include "shardsafe/rng.hpp"

namespace shardsafe {

const char kEngineVersion[] = "1.0.0";

namespace {

using json = nlohmann::json;

struct Stats {
  double mean = 0.0, std_dev = 0.0;
};

Stats mean_std(const std::vector<double>& xs) {
  Stats s;
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.std_dev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return s;
}

// Builds the method's graph and lambda policy; asserts the definitional
// mapping (uniform graphs never carry edges).
struct MethodSetup {
  ShardGraph graph;
  LambdaPolicy lambda;
  uint32_t n_c = 0, n_f = 0;
};

MethodSetup setup_method(Method method, const EmbeddingDataset& train,
                         uint32_t n,
                         const std::vector<std::pair<uint32_t, std::pair<uint32_t, uint32_t>>>& splits,
                         uint64_t graph_seed) {
  MethodSetup setup;
  const bool bilevel =
      method == Method::kSafe || method == Method::kNoprotoSafe;
  if (bilevel) {
    auto [n_c, n_f] = choose_bilevel_split(n, train.num_classes);
    for (const auto& [sn, split] : splits) {
      if (sn == n) {
        n_c = split.first;
        n_f = split.second;
      }
    }
    setup.n_c = n_c;
    setup.n_f = n_f;
    setup.graph = build_bilevel(train, n_c, n_f, graph_seed);
  } else {
    setup.n_c = n;
    setup.n_f = 1;
    setup.graph = build_uniform(train, n, graph_seed);
    if (!setup.graph.edges.empty()) {
      throw data_error("uniform sharding must not construct edges");
    }
  }
  switch (method) {
    case Method::kSafe:
    case Method::kProtoSisa:
      setup.lambda = LambdaPolicy::formula();
      break;
    case Method::kNoprotoSafe:
    case Method::kSisa:
      setup.lambda = LambdaPolicy::fixed(0.0);
      break;
    case Method::kPrototypes:
      setup.lambda = LambdaPolicy::fixed(1.0);
      break;
  }
  return setup;
}

}  // namespace

Method method_from_string(const std::string& name) {
  if (name == "SAFE") return Method::kSafe;
  if (name == "NoprotoSAFE") return Method::kNoprotoSafe;
  if (name == "SISA") return Method::kSisa;
  if (name == "ProtoSISA") return Method::kProtoSisa;
  if (name == "Prototypes") return Method::kPrototypes;
  throw usage_error("unknown method: " + name);
}

std::string to_string(Method method) {
  switch (method) {
    case Method::kSafe:
      return "SAFE";
    case Method::kNoprotoSafe:
      return "NoprotoSAFE";
    case Method::kSisa:
      return "SISA";
    case Method::kProtoSisa:
      return "ProtoSISA";
    case Method::kPrototypes:
      return "Prototypes";
  }
  return "?";
}

ExperimentSpec experiment_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw data_error(std::string("experiment spec parse error: ") + e.what());
  }
  ExperimentSpec spec;
  spec.name = j.value("name", std::string("experiment"));
  const auto& d = j.at("dataset");
  spec.data.num_classes = d.at("classes").get<uint32_t>();
  spec.data.samples_per_class = d.at("per_class").get<uint32_t>();
  spec.data.token_count = d.value("tokens", 1u);
  spec.data.dim = d.at("dim").get<uint32_t>();
  spec.data.cluster_scale = d.value("cluster_scale", 5.0);
  spec.data.noise_scale = d.value("noise_scale", 1.0);
  spec.data.num_domains = d.value("domains", 1u);
  spec.data.seed = d.value("seed", 0ull);
  spec.test_per_class = j.value("test_per_class", 10u);
  if (j.contains("methods")) {
    for (const auto& m : j["methods"]) {
      spec.methods.push_back(method_from_string(m.get<std::string>()));
    }
  }
  if (j.contains("shard_counts")) {
    spec.shard_counts = j["shard_counts"].get<std::vector<uint32_t>>();
  }
  if (j.contains("splits")) {
    for (auto it = j["splits"].begin(); it != j["splits"].end(); ++it) {
      spec.splits.push_back(
          {static_cast<uint32_t>(std::stoul(it.key())),
           {it.value().at(0).get<uint32_t>(), it.value().at(1).get<uint32_t>()}});
    }
  }
  spec.seeds = j.value("seeds", std::vector<uint64_t>{0});
  if (j.contains("train")) {
    const auto& t = j["train"];
    spec.train.epochs = t.value("epochs", spec.train.epochs);
    spec.train.learning_rate = t.value("lr", spec.train.learning_rate);
    spec.train.weight_decay =
        t.value("weight_decay", spec.train.weight_decay);
    spec.train.batch_size = t.value("batch_size", spec.train.batch_size);
    if (t.contains("loss")) {
      const std::string loss = t["loss"].get<std::string>();
      if (loss == "bce") {
        spec.train.loss_mode = LossMode::kMaskedBce;
      } else if (loss == "ce") {
        spec.train.loss_mode = LossMode::kCliqueCe;
      } else {
        throw usage_error("unknown loss mode: " + loss);
      }
    }
  }
  spec.output_dir = j.value("output", std::string("."));
  return spec;
}

std::string experiment_spec_to_json(const ExperimentSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["dataset"] = {{"classes", spec.data.num_classes},
                  {"per_class", spec.data.samples_per_class},
                  {"tokens", spec.data.token_count},
                  {"dim", spec.data.dim},
                  {"cluster_scale", spec.data.cluster_scale},
                  {"noise_scale", spec.data.noise_scale},
                  {"domains", spec.data.num_domains},
                  {"seed", spec.data.seed}};
  j["test_per_class"] = spec.test_per_class;
  j["methods"] = json::array();
  for (Method m : spec.methods) j["methods"].push_back(to_string(m));
  j["shard_counts"] = spec.shard_counts;
  j["splits"] = json::object();
  for (const auto& [n, split] : spec.splits) {
    j["splits"][std::to_string(n)] =
        json::array({split.first, split.second});
  }
  j["seeds"] = spec.seeds;
  j["train"] = {{"epochs", spec.train.epochs},
                {"lr", spec.train.learning_rate},
                {"weight_decay", spec.train.weight_decay},
                {"batch_size", spec.train.batch_size},
                {"loss", spec.train.loss_mode == LossMode::kMaskedBce
                             ? "bce"
                             : "ce"}};
  j["output"] = spec.output_dir;
  j["engine_version"] = kEngineVersion;
  return j.dump(2) + "\n";
}

std::pair<EmbeddingDataset, EmbeddingDataset> split_train_test(
    const EmbeddingDataset& dataset, uint32_t test_per_class) {
  uint32_t num_domains = 1;
  auto it = dataset.metadata.find("domains");
  if (it != dataset.metadata.end()) {
    num_domains = static_cast<uint32_t>(std::stoul(it->second));
  }
  if (test_per_class % num_domains != 0) {
    throw usage_error("test_per_class must be divisible by the domain count");
  }
  const uint32_t test_per_group = test_per_class / num_domains;

  std::map<std::pair<uint32_t, uint32_t>, std::vector<uint64_t>> groups;
  for (const auto& s : dataset.samples) {
    groups[{s.label, s.source}].push_back(s.id);
  }
  std::vector<uint64_t> test_ids;
  for (const auto& [key, ids] : groups) {
    if (ids.size() <= test_per_group) {
      throw usage_error("not enough samples in class " +
                        std::to_string(key.first) + " domain " +
                        std::to_string(key.second) + " for the test split");
    }
    test_ids.insert(test_ids.end(), ids.end() - test_per_group, ids.end());
  }
  std::vector<uint64_t> train_ids;
  {
    std::set<uint64_t> test_set(test_ids.begin(), test_ids.end());
    for (const auto& s : dataset.samples) {
      if (!test_set.count(s.id)) train_ids.push_back(s.id);
    }
  }
  return {remove_samples(dataset, test_ids), remove_samples(dataset, train_ids)};
}

std::pair<uint32_t, uint32_t> choose_bilevel_split(uint32_t n, uint32_t k) {
  if (n == 0) throw usage_error("shard count must be >= 1");
  uint32_t best_nf = 1;
  double best_gap = 1e300;
  for (uint32_t n_f = 1; n_f <= n && n_f <= k; ++n_f) {
    if (n % n_f != 0) continue;
    const double gap =
        std::abs(std::log(static_cast<double>(n_f)) -
                 0.5 * std::log(static_cast<double>(n)));
    if (gap < best_gap) {
      best_gap = gap;
      best_nf = n_f;
    }
  }
  return {n / best_nf, best_nf};
}

std::vector<ComparisonCell> run_method_comparison(const ExperimentSpec& spec,
                                                  unsigned jobs) {
  const auto dataset = generate_synthetic(spec.data);
  const auto [train, test] = split_train_test(dataset, spec.test_per_class);
  std::vector<ComparisonCell> cells;
  for (Method method : spec.methods) {
    for (uint32_t n : spec.shard_counts) {
      for (uint64_t seed : spec.seeds) {
        ComparisonCell cell;
        cell.method = method;
        cell.n = n;
        cell.seed = seed;
        cell.cost_rel = 1.0 / static_cast<double>(n);
        try {
          // Graph and training seeds are shared across methods so each
          // (n, seed) cell is a paired comparison.
          const auto setup =
              setup_method(method, train, n, spec.splits,
                           derive_seed(seed, "experiment-graph", n));
          cell.n_c = setup.n_c;
          cell.n_f = setup.n_f;
          if (method == Method::kPrototypes) {
            SafeModel model;
            model.attention = init_shared(train.dim, derive_seed(seed, "theta"));
            model.graph = refine(setup.graph, train);
            model.num_classes = train.num_classes;
            model.token_count = train.token_count;
            model.lambda_policy = setup.lambda;
            model.prototypes = fit_prototypes(train);
            cell.train_accuracy = evaluate_accuracy(model, train, jobs);
            cell.test_accuracy = evaluate_accuracy(model, test, jobs);
          } else {
            TrainConfig config = spec.train;
            config.seed = derive_seed(seed, "experiment-train", n);
            const auto model = fit_safe_model(train, setup.graph, config,
                                              setup.lambda, {}, {}, jobs);
            cell.train_accuracy = evaluate_accuracy(model, train, jobs);
            cell.test_accuracy = evaluate_accuracy(model, test, jobs);
          }
        } catch (const std::exception& e) {
          cell.error = e.what();  // partial failure: record and continue
        }
        cells.push_back(std::move(cell));
      }
    }
  }
  return cells;
}

std::vector<InstantCurvePoint> run_instant_forgetting(
    const ExperimentSpec& spec, uint32_t num_requests, unsigned jobs) {
  const auto dataset = generate_synthetic(spec.data);
  const auto [train, test] = split_train_test(dataset, spec.test_per_class);
  if (spec.shard_counts.empty()) {
    throw usage_error("instant forgetting needs one shard count");
  }
  const uint32_t n = spec.shard_counts.front();
  std::vector<InstantCurvePoint> points;
  // Lambda is pinned to 0 for both methods so the graph structure is the
  // only difference.
  const std::vector<Method> methods = {Method::kNoprotoSafe, Method::kSisa};
  for (Method method : methods) {
    for (uint64_t seed : spec.seeds) {
      const auto setup =
          setup_method(method, train, n, spec.splits,
                       derive_seed(seed, "instant-graph", n));
      TrainConfig config = spec.train;
      config.seed = derive_seed(seed, "instant-train", n);
      SafeModel model = fit_safe_model(train, setup.graph, config,
                                       LambdaPolicy::fixed(0.0), {}, {}, jobs);
      const double base = evaluate_accuracy(model, test, jobs);
      points.push_back({method, seed, 0, base, 1.0});

      std::vector<uint32_t> shard_ids;
      for (const auto& node : setup.graph.nodes) shard_ids.push_back(node.id);
      Rng rng(derive_seed(seed, "instant-drops", n));
      rng.shuffle(shard_ids);
      const uint32_t drops =
          std::min<uint32_t>(num_requests, shard_ids.size());
      for (uint32_t r = 0; r < drops; ++r) {
        model = instant_forget(model, shard_ids[r]).model;
        const double acc = evaluate_accuracy(model, test, jobs);
        points.push_back(
            {method, seed, r + 1, acc, base > 0.0 ? acc / base : 0.0});
      }
    }
  }
  return points;
}

std::vector<DpTradeoffRow> run_dp_tradeoff(const ExperimentSpec& spec,
                                           const std::vector<uint64_t>& k_grid,
                                           const DpConfig& base_dp,
                                           const Budget& budget,
                                           unsigned jobs) {
  const auto dataset = generate_synthetic(spec.data);
  const auto [train, test] = split_train_test(dataset, spec.test_per_class);
  if (spec.shard_counts.empty()) {
    throw usage_error("dp tradeoff needs one shard count");
  }
  const uint32_t n = spec.shard_counts.front();

  std::vector<DpTradeoffRow> rows;
  auto eval_for = [&](uint64_t k, double epsilon, bool dp_enabled) {
    std::vector<double> accs;
    for (uint64_t seed : spec.seeds) {
      const auto setup =
          setup_method(Method::kSafe, train, n, spec.splits,
                       derive_seed(seed, "dp-graph", k, n));
      TrainConfig config = spec.train;
      config.seed = derive_seed(seed, "dp-train", k, n);
      SafeModel model;
      if (dp_enabled) {
        DpConfig dp = base_dp;
        dp.epsilon = epsilon;
        model = fit_safe_model(train, setup.graph, config,
                               LambdaPolicy::formula(), {},
                               make_dp_options(dp), jobs);
      } else {
        model = fit_safe_model(train, setup.graph, config,
                               LambdaPolicy::formula(), {}, {}, jobs);
      }
      accs.push_back(evaluate_accuracy(model, test, jobs));
    }
    const auto stats = mean_std(accs);
    DpTradeoffRow row;
    row.k = k;
    row.epsilon = epsilon;
    row.mean_accuracy = stats.mean;
    row.std_accuracy = stats.std_dev;
    return row;
  };

  // Non-private anchor (exact mode; a single request forces retraining).
  rows.push_back(eval_for(0, 0.0, false));
  for (uint64_t k : k_grid) {
    // Largest epsilon that still survives k requests: max_requests is
    // non-increasing in epsilon, so bisect.
    double lo = 1e-3, hi = 64.0;
    if (max_requests(lo, base_dp.delta, budget.alpha_b, budget.beta_b) < k) {
      continue;  // infeasible k for this (delta, budget)
    }
    for (int iter = 0; iter < 80; ++iter) {
      const double mid = 0.5 * (lo + hi);
      uint64_t reach = 0;
      try {
        reach = max_requests(mid, base_dp.delta, budget.alpha_b, budget.beta_b);
      } catch (const Error&) {
        reach = 0;
      }
      if (reach >= k) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    rows.push_back(eval_for(k, lo, true));
  }
  return rows;
}

std::vector<CrossDomainRow> run_cross_domain(const ExperimentSpec& spec,
                                             unsigned jobs) {
  if (spec.data.num_domains < 2) {
    throw usage_error("cross-domain run needs num_domains >= 2");
  }
  const auto dataset = generate_synthetic(spec.data);
  const auto [train, test] = split_train_test(dataset, spec.test_per_class);
  if (spec.shard_counts.empty()) {
    throw usage_error("cross-domain run needs one shard count");
  }
  const uint32_t n = spec.shard_counts.front();
  const uint32_t domains = spec.data.num_domains;
  if (n % domains != 0) {
    throw usage_error("shard count must be divisible by the domain count");
  }
  const uint32_t n_dom = n / domains;

  // Per-domain train subsets (by source tag).
  std::vector<EmbeddingDataset> domain_train(domains);
  for (uint32_t m = 0; m < domains; ++m) {
    std::vector<uint64_t> other;
    for (const auto& s : train.samples) {
      if (s.source != m) other.push_back(s.id);
    }
    domain_train[m] = remove_samples(train, other);
  }
  std::vector<EmbeddingDataset> domain_test(domains);
  for (uint32_t m = 0; m < domains; ++m) {
    std::vector<uint64_t> other;
    for (const auto& s : test.samples) {
      if (s.source != m) other.push_back(s.id);
    }
    domain_test[m] = remove_samples(test, other);
  }

  struct Topology {
    std::string name;
    bool bilevel = false;
    bool cross = false;
    LambdaPolicy lambda;
  };
  const std::vector<Topology> topologies = {
      {"sisa_in_domain", false, false, LambdaPolicy::fixed(0.0)},
      {"sisa_cross_domain", false, true, LambdaPolicy::fixed(0.0)},
      {"safe_in_domain", true, false, LambdaPolicy::formula()},
      {"safe_cross_domain", true, true, LambdaPolicy::formula()},
  };

  std::vector<CrossDomainRow> rows;
  for (const auto& topo : topologies) {
    std::vector<std::vector<double>> per_domain(domains);
    std::vector<double> overall;
    for (uint64_t seed : spec.seeds) {
      ShardGraph graph;
      const uint64_t graph_seed =
          derive_seed(seed, "cross-domain-graph", fnv1a64(topo.name), n);
      if (topo.cross) {
        graph = topo.bilevel
                    ? build_bilevel(train,
                                    choose_bilevel_split(n, train.num_classes).first,
                                    choose_bilevel_split(n, train.num_classes).second,
                                    graph_seed)
                    : build_uniform(train, n, graph_seed);
      } else {
        std::vector<ShardGraph> parts;
        for (uint32_t m = 0; m < domains; ++m) {
          const uint64_t part_seed = derive_seed(graph_seed, "part", m);
          parts.push_back(
              topo.bilevel
                  ? build_bilevel(
                        domain_train[m],
                        choose_bilevel_split(n_dom, train.num_classes).first,
                        choose_bilevel_split(n_dom, train.num_classes).second,
                        part_seed)
                  : build_uniform(domain_train[m], n_dom, part_seed));
        }
        graph = merge_graphs(parts);
      }
      if (graph.nodes.size() != n) {
        throw data_error("cross-domain topology has wrong node count");
      }
      TrainConfig config = spec.train;
      config.seed = derive_seed(seed, "cross-domain-train", fnv1a64(topo.name));
      const auto model =
          fit_safe_model(train, graph, config, topo.lambda, {}, {}, jobs);
      overall.push_back(evaluate_accuracy(model, test, jobs));
      for (uint32_t m = 0; m < domains; ++m) {
        per_domain[m].push_back(evaluate_accuracy(model, domain_test[m], jobs));
      }
    }
    const auto all_stats = mean_std(overall);
    rows.push_back({topo.name, -1, all_stats.mean, all_stats.std_dev});
    for (uint32_t m = 0; m < domains; ++m) {
      const auto stats = mean_std(per_domain[m]);
      rows.push_back({topo.name, static_cast<int32_t>(m), stats.mean,
                      stats.std_dev});
    }
  }
  return rows;
}

std::string comparison_to_csv(const std::vector<ComparisonCell>& cells) {
  std::ostringstream out;
  out << "method,n,n_c,n_f,seed,train_accuracy,test_accuracy,cost_rel,error\n";
  char buf[256];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof(buf), "%s,%u,%u,%u,%llu,%.6f,%.6f,%.8f,%s\n",
                  to_string(c.method).c_str(), c.n, c.n_c, c.n_f,
                  static_cast<unsigned long long>(c.seed), c.train_accuracy,
                  c.test_accuracy, c.cost_rel, c.error.c_str());
    out << buf;
  }
  return out.str();
}

std::string instant_curve_to_csv(const std::vector<InstantCurvePoint>& points) {
  std::ostringstream out;
  out << "method,seed,drops,accuracy,relative_accuracy\n";
  char buf[160];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%u,%.6f,%.6f\n",
                  to_string(p.method).c_str(),
                  static_cast<unsigned long long>(p.seed), p.drops, p.accuracy,
                  p.relative_accuracy);
    out << buf;
  }
  return out.str();
}

std::string dp_tradeoff_to_csv(const std::vector<DpTradeoffRow>& rows) {
  std::ostringstream out;
  out << "k,epsilon,mean_accuracy,std_accuracy\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%llu,%.6f,%.6f,%.6f\n",
                  static_cast<unsigned long long>(r.k), r.epsilon,
                  r.mean_accuracy, r.std_accuracy);
    out << buf;
  }
  return out.str();
}

std::string cross_domain_to_csv(const std::vector<CrossDomainRow>& rows) {
  std::ostringstream out;
  out << "topology,domain,mean_accuracy,std_accuracy\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f\n", r.topology.c_str(),
                  r.domain, r.mean_accuracy, r.std_accuracy);
    out << buf;
  }
  return out.str();
}

}  // namespace shardsafe
