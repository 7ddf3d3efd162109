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

#ifndef SHARDSAFE_ENSEMBLE_HPP_
#define SHARDSAFE_ENSEMBLE_HPP_

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "shardsafe/embedding_store.hpp"
#include "shardsafe/inca_adapter.hpp"
#include "shardsafe/prototype.hpp"
#include "shardsafe/shard_graph.hpp"

namespace shardsafe {

enum class LambdaMode { kFormula, kFixed };

struct LambdaPolicy {
  LambdaMode mode = LambdaMode::kFormula;
  double fixed_value = 0.0;

  static LambdaPolicy formula() { return {LambdaMode::kFormula, 0.0}; }
  static LambdaPolicy fixed(double value) {
    return {LambdaMode::kFixed, value};
  }
};

// Unit removed from serving without retraining (instant forgetting).
struct Tombstone {
  uint32_t parent = 0;
  uint32_t label = 0;
  uint32_t retrain_count = 0;
};

struct SafeModel {
  CrossAttentionParams attention;
  RefinedShardGraph graph;
  std::vector<QueryUnit> units;  // live units, sorted by (parent, label)
  std::vector<Tombstone> tombstones;
  PrototypeBank prototypes;
  LambdaPolicy lambda_policy;
  bool mix_raw_scores = false;  // ablation: mix raw branch outputs
  uint32_t num_classes = 0;
  uint32_t token_count = 0;
  TrainConfig train_config;
  uint64_t graph_digest_value = 0;

  const QueryUnit* find_unit(NodeKey key) const;
  std::map<NodeKey, uint32_t> retrain_counts() const;
};

// Trains a full model: shared adapter from (dataset.dim, theta seed),
// one unit per refined node, prototypes fit on the dataset.
SafeModel fit_safe_model(const EmbeddingDataset& dataset,
                         const ShardGraph& graph, const TrainConfig& config,
                         LambdaPolicy lambda_policy = LambdaPolicy::formula(),
                         const std::map<NodeKey, uint32_t>& retrain_counts = {},
                         const DpOptions& dp = {}, unsigned jobs = 0,
                         bool normalized_prototypes = true);

// Per-class mean of live unit logits via one shared forward pass.
// Classes with no live unit score -infinity; throws when no unit is live.
std::vector<double> ensemble_logits(const SafeModel& model,
                                    std::span<const float> tokens);

struct Prediction {
  std::vector<double> probabilities;  // per class
  uint32_t label = 0;                 // argmax, ties to smallest index
  double lambda = 0.0;
};

// Softmaxes both branches, then mixes (1 - lambda) * ensemble +
// lambda * prototypes. With no live ensemble the prototype branch is used
// alone; classes without any live adapter fall back to their prototype
// probability when lambda > 0.
Prediction safe_predict(const SafeModel& model, std::span<const float> tokens);

// The branch-combination rule of safe_predict, exposed for direct checks.
std::vector<double> mix_branches(const std::vector<double>& ensemble_probs,
                                 const std::vector<double>& proto_probs,
                                 const std::vector<char>& covered,
                                 double lambda);

double evaluate_accuracy(const SafeModel& model,
                         const EmbeddingDataset& dataset, unsigned jobs = 0);

// Serving view that excludes every unit whose node is forbidden or whose
// outbound neighborhood intersects a forbidden node; prototypes are refit
// on the permitted samples. Forbidden ids name parent shards.
SafeModel a_la_carte(const SafeModel& model, const EmbeddingDataset& dataset,
                     const std::vector<uint32_t>& forbidden_parents);

// Same restriction at refined-node granularity.
SafeModel a_la_carte_refined(const SafeModel& model,
                             const EmbeddingDataset& dataset,
                             const std::vector<NodeKey>& forbidden_nodes);

double effective_lambda(const SafeModel& model);

void save_model(const SafeModel& model, const std::string& path);
SafeModel load_model(const std::string& path);

}  // namespace shardsafe

#endif  // SHARDSAFE_ENSEMBLE_HPP_
