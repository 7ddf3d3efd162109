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

#ifndef SHARDSAFE_FORGETTING_HPP_
#define SHARDSAFE_FORGETTING_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "shardsafe/ensemble.hpp"

namespace shardsafe {

struct ForgetRequest {
  enum class Kind { kSamples, kNode, kInstantNode };
  Kind kind = Kind::kSamples;
  std::vector<uint64_t> sample_ids;  // kSamples
  uint32_t node_id = 0;              // kNode / kInstantNode (parent shard)
  int64_t timestamp = 0;
  std::string requester;
};

struct ForgetReport {
  std::vector<NodeKey> affected_nodes;   // refined nodes retrained
  std::vector<NodeKey> dropped_nodes;    // refined nodes left empty
  size_t retrain_set_size = 0;           // |M_x| before removal
  size_t samples_revisited = 0;          // training data touched after removal
  double wall_ms = 0.0;
  std::string mode;                      // "retrain" | "drop" | "tombstone"
};

struct ForgetResult {
  SafeModel model;
  EmbeddingDataset dataset;
  ForgetReport report;
};

// Removes the samples, retrains exactly the adapters whose neighborhood
// contained them (fresh seeds via bumped retrain counters), updates the
// prototype bank incrementally, and leaves every other unit byte-identical.
ForgetResult forget_samples(const SafeModel& model,
                            const EmbeddingDataset& dataset,
                            const std::vector<uint64_t>& ids,
                            unsigned jobs = 0);

// Drops an entire parent shard: its units are removed outright, inbound
// neighbors are retrained without the shard's data.
ForgetResult forget_node(const SafeModel& model,
                         const EmbeddingDataset& dataset, uint32_t node_id,
                         unsigned jobs = 0);

struct DeferredRetrainJob {
  uint32_t node_id = 0;                 // shard whose data must go
  std::vector<NodeKey> tombstoned;      // units taken out of serving
  std::vector<NodeKey> retrain_later;   // inbound units owed a retrain
};

struct InstantForgetResult {
  SafeModel model;
  DeferredRetrainJob job;
  ForgetReport report;
};

// Tombstones the shard's units and every unit trained on its data, without
// retraining; prediction falls back per the ensemble rules.
InstantForgetResult instant_forget(const SafeModel& model, uint32_t node_id);

struct VerifyResult {
  bool exact = false;               // adapters + graph byte-identical
  double max_divergence = 0.0;      // max abs parameter difference
  double prototype_divergence = 0.0;  // incremental bank vs scratch refit
  std::string detail;
};

// Trains on (graph, dataset), applies the request, then trains from
// scratch on the reduced graph with the same per-node seeds and compares.
VerifyResult verify_unlearning(const ShardGraph& graph,
                               const EmbeddingDataset& dataset,
                               const ForgetRequest& request,
                               const TrainConfig& config, unsigned jobs = 0);

// Append-only JSON-lines audit log of request + report. Wall time is
// excluded so identical runs produce identical files.
void append_journal(const std::string& path, const ForgetRequest& request,
                    const ForgetReport& report);

}  // namespace shardsafe

#endif  // SHARDSAFE_FORGETTING_HPP_
