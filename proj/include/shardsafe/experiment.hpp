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

#ifndef SHARDSAFE_EXPERIMENT_HPP_
#define SHARDSAFE_EXPERIMENT_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "shardsafe/cost_sim.hpp"
#include "shardsafe/dp_engine.hpp"
#include "shardsafe/embedding_store.hpp"
#include "shardsafe/ensemble.hpp"

namespace shardsafe {

// Method names map definitionally onto engine configurations:
//   SAFE        = bilevel sharding + formula lambda
//   NoprotoSAFE = bilevel sharding + lambda 0
//   SISA        = uniform sharding + lambda 0
//   ProtoSISA   = uniform sharding + formula lambda
//   Prototypes  = prototype bank only (lambda 1, no adapters)
enum class Method { kSafe, kNoprotoSafe, kSisa, kProtoSisa, kPrototypes };

Method method_from_string(const std::string& name);
std::string to_string(Method method);

struct ExperimentSpec {
  std::string name = "experiment";
  SyntheticSpec data;
  uint32_t test_per_class = 10;  // held out from data.samples_per_class
  std::vector<Method> methods;
  std::vector<uint32_t> shard_counts;
  // Optional per-n (n_c, n_f) override for bilevel methods.
  std::vector<std::pair<uint32_t, std::pair<uint32_t, uint32_t>>> splits;
  std::vector<uint64_t> seeds;
  TrainConfig train;
  std::string output_dir = ".";
};

ExperimentSpec experiment_spec_from_json(const std::string& text);
std::string experiment_spec_to_json(const ExperimentSpec& spec);

// Deterministic per-(class, domain) split: the last test_per_class /
// num_domains samples of each group become the eval set.
std::pair<EmbeddingDataset, EmbeddingDataset> split_train_test(
    const EmbeddingDataset& dataset, uint32_t test_per_class);

// Default (n_c, n_f) for n total shards: the divisor of n closest to
// sqrt(n) that does not exceed the class count.
std::pair<uint32_t, uint32_t> choose_bilevel_split(uint32_t n, uint32_t k);

struct ComparisonCell {
  Method method = Method::kSafe;
  uint32_t n = 0, n_c = 0, n_f = 0;
  uint64_t seed = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double cost_rel = 0.0;
  std::string error;  // non-empty when this cell failed
};

std::vector<ComparisonCell> run_method_comparison(const ExperimentSpec& spec,
                                                  unsigned jobs = 0);

struct InstantCurvePoint {
  Method method = Method::kSafe;
  uint64_t seed = 0;
  uint32_t drops = 0;
  double accuracy = 0.0;
  double relative_accuracy = 0.0;
};

// Sequentially tombstones uniformly random shards (SAFE with lambda 0 vs
// SISA) and records test accuracy after each drop.
std::vector<InstantCurvePoint> run_instant_forgetting(
    const ExperimentSpec& spec, uint32_t num_requests, unsigned jobs = 0);

struct DpTradeoffRow {
  uint64_t k = 0;  // 0 marks the non-private exact anchor
  double epsilon = 0.0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

// Accuracy vs survivable request count: per k, the largest epsilon whose
// max_requests reaches k (delta, budget fixed), plus a non-private anchor.
std::vector<DpTradeoffRow> run_dp_tradeoff(const ExperimentSpec& spec,
                                           const std::vector<uint64_t>& k_grid,
                                           const DpConfig& base_dp,
                                           const Budget& budget,
                                           unsigned jobs = 0);

struct CrossDomainRow {
  std::string topology;  // sisa_in_domain | sisa_cross_domain | ...
  int32_t domain = -1;   // -1 = all domains
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

// Four equal-cost topologies over a multi-domain dataset: uniform or
// bilevel sharding, built per domain or across domains.
std::vector<CrossDomainRow> run_cross_domain(const ExperimentSpec& spec,
                                             unsigned jobs = 0);

std::string comparison_to_csv(const std::vector<ComparisonCell>& cells);
std::string instant_curve_to_csv(const std::vector<InstantCurvePoint>& points);
std::string dp_tradeoff_to_csv(const std::vector<DpTradeoffRow>& rows);
std::string cross_domain_to_csv(const std::vector<CrossDomainRow>& rows);

// Engine identification embedded in experiment summaries.
extern const char kEngineVersion[];

}  // namespace shardsafe

#endif  // SHARDSAFE_EXPERIMENT_HPP_
