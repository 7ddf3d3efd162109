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

#ifndef SHARDSAFE_COST_SIM_HPP_
#define SHARDSAFE_COST_SIM_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shardsafe/embedding_store.hpp"
#include "shardsafe/inca_adapter.hpp"

namespace shardsafe {

enum class CostTopology { kClique, kRandomDegree, kEdgeless };

CostTopology cost_topology_from_string(const std::string& name);
std::string to_string(CostTopology topology);

struct CostTrialConfig {
  CostTopology topology = CostTopology::kClique;
  uint32_t num_nodes = 0;
  uint32_t degree = 0;      // clique size / outbound degree
  uint32_t shard_size = 1;  // samples per node
  uint32_t trials = 1000;
  uint64_t seed = 0;
  double regime_constant = 1.0;  // theorem regime: d^2 <= C * sqrt(|V|)

  void validate() const;
};

// Exact expected retrain cost where a closed form exists: d*|S| for
// disjoint cliques, |S| for edgeless graphs. Random connectivity has no
// closed form here and returns nullopt.
std::optional<double> expected_cost_closed_form(CostTopology topology,
                                                uint32_t degree,
                                                uint32_t shard_size);

struct CostSummary {
  double mean = 0.0;
  double std_error = 0.0;
  std::map<uint64_t, uint64_t> histogram;  // cost -> trial count
  bool in_regime = true;
};

// Monte Carlo estimate of E|M_x|: per trial, draw a topology instance and
// a uniform target sample, then brute-force the retrain set over the
// explicit edge lists.
CostSummary simulate_expected_cost(const CostTrialConfig& config);

struct ParetoRow {
  uint32_t n = 0, n_c = 0, n_f = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double cost_rel = 0.0;  // relative retrain time, 1/n
  std::string note;       // set when the combination was skipped
};

// Trains bilevel models over the (n, n_f) grid and reports accuracy vs
// relative forgetting cost. Infeasible combinations (n_f > K or n_f not
// dividing n) are skipped with a note.
std::vector<ParetoRow> pareto_sweep(const EmbeddingDataset& train,
                                    const EmbeddingDataset& eval,
                                    const std::vector<uint32_t>& shard_counts,
                                    const std::vector<uint32_t>& nf_grid,
                                    const TrainConfig& base_config,
                                    const std::vector<uint64_t>& seeds,
                                    unsigned jobs = 0);

std::string pareto_to_csv(const std::vector<ParetoRow>& rows);
std::string cost_summary_to_csv(const CostTrialConfig& config,
                                const CostSummary& summary);

}  // namespace shardsafe

#endif  // SHARDSAFE_COST_SIM_HPP_
