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

#include "shardsafe/cost_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "shardsafe/ensemble.hpp"
#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"
#include "shardsafe/shard_graph.hpp"

namespace shardsafe {

CostTopology cost_topology_from_string(const std::string& name) {
  if (name == "clique") return CostTopology::kClique;
  if (name == "random_degree") return CostTopology::kRandomDegree;
  if (name == "edgeless") return CostTopology::kEdgeless;
  throw usage_error("unknown cost topology: " + name);
}

std::string to_string(CostTopology topology) {
  switch (topology) {
    case CostTopology::kClique:
      return "clique";
    case CostTopology::kRandomDegree:
      return "random_degree";
    case CostTopology::kEdgeless:
      return "edgeless";
  }
  return "?";
}

void CostTrialConfig::validate() const {
  if (num_nodes == 0) throw usage_error("num_nodes must be >= 1");
  if (trials == 0) throw usage_error("trials must be >= 1");
  if (shard_size == 0) throw usage_error("shard_size must be >= 1");
  switch (topology) {
    case CostTopology::kClique:
      if (degree == 0 || degree > num_nodes) {
        throw usage_error("clique size must be in [1, num_nodes]");
      }
      break;
    case CostTopology::kRandomDegree:
      if (degree >= num_nodes) {
        throw usage_error("degree d must be <= num_nodes - 1");
      }
      break;
    case CostTopology::kEdgeless:
      break;
  }
}

std::optional<double> expected_cost_closed_form(CostTopology topology,
                                                uint32_t degree,
                                                uint32_t shard_size) {
  switch (topology) {
    case CostTopology::kClique:
      if (degree == 0) throw usage_error("clique size must be >= 1");
      return static_cast<double>(degree) * shard_size;
    case CostTopology::kEdgeless:
      return static_cast<double>(shard_size);
    case CostTopology::kRandomDegree:
      return std::nullopt;  // no closed form shipped; validated empirically
  }
  return std::nullopt;
}

CostSummary simulate_expected_cost(const CostTrialConfig& config) {
  config.validate();
  CostSummary summary;
  const uint32_t n = config.num_nodes;
  const uint32_t d = config.degree;
  summary.in_regime =
      config.topology != CostTopology::kRandomDegree ||
      static_cast<double>(d) * d <=
          config.regime_constant * std::sqrt(static_cast<double>(n));

  Rng rng(derive_seed(config.seed, "cost-simulation"));
  double sum = 0.0, sum_sq = 0.0;

  // Reused buffers for the random-degree instance.
  std::vector<uint32_t> out_edges(static_cast<size_t>(n) * d);
  std::vector<uint32_t> stamp(n, 0);
  uint32_t epoch = 0;

  for (uint32_t trial = 0; trial < config.trials; ++trial) {
    uint64_t cost = 0;
    switch (config.topology) {
      case CostTopology::kEdgeless: {
        cost = config.shard_size;
        break;
      }
      case CostTopology::kClique: {
        // Disjoint cliques of size d; a trailing remainder clique holds
        // n mod d nodes. The retrain set of a sample is its whole clique.
        const uint32_t target = static_cast<uint32_t>(rng.below(n));
        const uint32_t clique = target / d;
        const uint32_t full_cliques = n / d;
        const uint32_t size =
            clique < full_cliques ? d : n - full_cliques * d;
        cost = static_cast<uint64_t>(size) * config.shard_size;
        break;
      }
      case CostTopology::kRandomDegree: {
        // d distinct outbound targets per node, uniform among the others.
        for (uint32_t j = 0; j < n; ++j) {
          uint32_t* row = out_edges.data() + static_cast<size_t>(j) * d;
          uint32_t filled = 0;
          while (filled < d) {
            const auto t = static_cast<uint32_t>(rng.below(n));
            if (t == j) continue;
            bool dup = false;
            for (uint32_t x = 0; x < filled; ++x) {
              if (row[x] == t) {
                dup = true;
                break;
              }
            }
            if (!dup) row[filled++] = t;
          }
        }
        const uint32_t target = static_cast<uint32_t>(rng.below(n));
        ++epoch;
        // Inbound nodes of the target (self included), each covering
        // itself plus its outbound targets.
        uint64_t covered = 0;
        auto mark = [&](uint32_t v) {
          if (stamp[v] != epoch) {
            stamp[v] = epoch;
            ++covered;
          }
        };
        auto cover_node = [&](uint32_t j) {
          mark(j);
          const uint32_t* row = out_edges.data() + static_cast<size_t>(j) * d;
          for (uint32_t x = 0; x < d; ++x) mark(row[x]);
        };
        cover_node(target);
        for (uint32_t j = 0; j < n; ++j) {
          if (j == target) continue;
          const uint32_t* row = out_edges.data() + static_cast<size_t>(j) * d;
          for (uint32_t x = 0; x < d; ++x) {
            if (row[x] == target) {
              cover_node(j);
              break;
            }
          }
        }
        cost = covered * config.shard_size;
        break;
      }
    }
    sum += static_cast<double>(cost);
    sum_sq += static_cast<double>(cost) * static_cast<double>(cost);
    ++summary.histogram[cost];
  }

  const double trials = static_cast<double>(config.trials);
  summary.mean = sum / trials;
  const double variance =
      config.trials > 1
          ? std::max(0.0, (sum_sq - sum * sum / trials) / (trials - 1.0))
          : 0.0;
  summary.std_error = std::sqrt(variance / trials);
  return summary;
}

std::vector<ParetoRow> pareto_sweep(const EmbeddingDataset& train,
                                    const EmbeddingDataset& eval,
                                    const std::vector<uint32_t>& shard_counts,
                                    const std::vector<uint32_t>& nf_grid,
                                    const TrainConfig& base_config,
                                    const std::vector<uint64_t>& seeds,
                                    unsigned jobs) {
  if (seeds.empty()) throw usage_error("pareto sweep needs >= 1 seed");
  std::vector<ParetoRow> rows;
  for (uint32_t n : shard_counts) {
    for (uint32_t n_f : nf_grid) {
      ParetoRow row;
      row.n = n;
      row.n_f = n_f;
      row.cost_rel = 1.0 / static_cast<double>(n);
      if (n_f > train.num_classes) {
        row.note = "skipped: n_f exceeds class count";
        rows.push_back(row);
        continue;
      }
      if (n % n_f != 0) {
        row.note = "skipped: n_f does not divide n";
        rows.push_back(row);
        continue;
      }
      row.n_c = n / n_f;
      double sum = 0.0, sum_sq = 0.0;
      for (uint64_t seed : seeds) {
        const auto graph = build_bilevel(
            train, row.n_c, n_f, derive_seed(seed, "pareto-graph", n, n_f));
        TrainConfig config = base_config;
        config.seed = derive_seed(seed, "pareto-train", n, n_f);
        const auto model =
            fit_safe_model(train, graph, config, LambdaPolicy::formula(), {},
                           {}, jobs);
        const double acc = evaluate_accuracy(model, eval, jobs);
        sum += acc;
        sum_sq += acc * acc;
      }
      const double count = static_cast<double>(seeds.size());
      row.mean_accuracy = sum / count;
      row.std_accuracy =
          seeds.size() > 1
              ? std::sqrt(std::max(0.0, (sum_sq - sum * sum / count) /
                                            (count - 1.0)))
              : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string pareto_to_csv(const std::vector<ParetoRow>& rows) {
  std::ostringstream out;
  out << "n,n_c,n_f,mean_accuracy,std_accuracy,cost_rel,note\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%u,%u,%u,%.6f,%.6f,%.8f,%s\n", r.n, r.n_c,
                  r.n_f, r.mean_accuracy, r.std_accuracy, r.cost_rel,
                  r.note.c_str());
    out << buf;
  }
  return out.str();
}

std::string cost_summary_to_csv(const CostTrialConfig& config,
                                const CostSummary& summary) {
  std::ostringstream out;
  out << "topology,nodes,d,shard_size,trials,mean,std_error,in_regime\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%u,%u,%u,%u,%.6f,%.6f,%d\n",
                to_string(config.topology).c_str(), config.num_nodes,
                config.degree, config.shard_size, config.trials, summary.mean,
                summary.std_error, summary.in_regime ? 1 : 0);
  out << buf;
  return out.str();
}

}  // namespace shardsafe
