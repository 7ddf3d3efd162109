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

#include "shardsafe/forgetting.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "shardsafe/error.hpp"

namespace shardsafe {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start)
      .count();
}

std::vector<uint64_t> union_of_neighborhoods(
    const RefinedShardGraph& graph, const std::set<uint32_t>& nodes) {
  std::vector<uint64_t> ids;
  for (uint32_t idx : nodes) {
    auto nb = graph.neighborhood_union(idx);
    ids.insert(ids.end(), nb.begin(), nb.end());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

// Rebuilds the model around a reduced dataset/graph, retraining exactly
// `retrain_keys` with bumped counters and keeping every other live unit
// byte-identical. Tombstoned units stay tombstoned; their deferred retrain
// is still owed.
SafeModel rebuild_after_removal(const SafeModel& model,
                                const EmbeddingDataset& reduced_dataset,
                                const ShardGraph& reduced_parent,
                                const std::set<NodeKey>& affected_keys,
                                std::vector<NodeKey>* retrained_out,
                                std::vector<NodeKey>* dropped_out,
                                unsigned jobs) {
  SafeModel next = model;
  next.graph = refine(reduced_parent, reduced_dataset);
  next.graph_digest_value = graph_digest(reduced_parent);

  auto counters = model.retrain_counts();
  std::vector<NodeKey> retrain_keys;
  for (const auto& key : affected_keys) {
    const bool alive = next.graph.index_of(key).has_value();
    const bool live_unit = model.find_unit(key) != nullptr;
    if (!alive) {
      if (live_unit && dropped_out != nullptr) dropped_out->push_back(key);
      continue;
    }
    if (!live_unit) continue;  // tombstoned units keep waiting
    counters[key] = counters.count(key) ? counters[key] + 1 : 1;
    retrain_keys.push_back(key);
  }

  next.units.clear();
  for (const auto& unit : model.units) {
    if (!affected_keys.count(unit.key())) next.units.push_back(unit);
  }
  if (!retrain_keys.empty()) {
    auto outcome = train_nodes(model.attention, reduced_dataset, next.graph,
                               model.train_config, retrain_keys, counters, {},
                               jobs);
    for (auto& unit : outcome.units) next.units.push_back(std::move(unit));
  }
  std::sort(next.units.begin(), next.units.end(),
            [](const QueryUnit& a, const QueryUnit& b) {
              return a.key() < b.key();
            });
  if (retrained_out != nullptr) *retrained_out = retrain_keys;
  return next;
}

}  // namespace

ForgetResult forget_samples(const SafeModel& model,
                            const EmbeddingDataset& dataset,
                            const std::vector<uint64_t>& ids, unsigned jobs) {
  const auto start = Clock::now();
  if (ids.empty()) throw usage_error("forget request has no target samples");

  std::set<uint32_t> affected_idx;
  for (uint64_t id : ids) {
    const auto node = model.graph.node_of_sample(id);
    if (!node.has_value()) {
      throw data_error("sample id " + std::to_string(id) +
                       " is not in any shard");
    }
    for (uint32_t j : model.graph.pointing_at(*node)) affected_idx.insert(j);
  }
  const auto pre_union = union_of_neighborhoods(model.graph, affected_idx);

  std::set<NodeKey> affected_keys;
  for (uint32_t idx : affected_idx) affected_keys.insert(model.graph.key_of(idx));

  ForgetResult result;
  result.dataset = remove_samples(dataset, ids);
  const ShardGraph reduced_parent =
      graph_without_samples(model.graph.parent(), ids);
  result.report.mode = "retrain";
  result.model = rebuild_after_removal(
      model, result.dataset, reduced_parent, affected_keys,
      &result.report.affected_nodes, &result.report.dropped_nodes, jobs);

  // Exact incremental prototype update from the pre-removal dataset.
  for (uint64_t id : ids) {
    const Sample* s = dataset.find(id);
    remove_from_prototypes(result.model.prototypes, *s, dataset.token_count);
  }

  result.report.retrain_set_size = pre_union.size();
  std::set<uint32_t> retrained_idx;
  for (const auto& key : result.report.affected_nodes) {
    const auto idx = result.model.graph.index_of(key);
    if (idx.has_value()) retrained_idx.insert(static_cast<uint32_t>(*idx));
  }
  result.report.samples_revisited =
      union_of_neighborhoods(result.model.graph, retrained_idx).size();
  result.report.wall_ms = ms_since(start);
  return result;
}

ForgetResult forget_node(const SafeModel& model,
                         const EmbeddingDataset& dataset, uint32_t node_id,
                         unsigned jobs) {
  const auto start = Clock::now();
  const ShardNode* shard = model.graph.parent().find_node(node_id);
  if (shard == nullptr) {
    throw data_error("unknown shard id " + std::to_string(node_id));
  }

  // The shard's own units are dropped outright; inbound-pointing refined
  // nodes outside the shard must retrain without its data.
  std::set<uint32_t> own_idx;
  std::set<uint32_t> inbound_idx;
  for (size_t i = 0; i < model.graph.num_nodes(); ++i) {
    if (model.graph.nodes()[i].parent == node_id) {
      own_idx.insert(static_cast<uint32_t>(i));
    }
  }
  for (uint32_t idx : own_idx) {
    for (uint32_t j : model.graph.in_edges(idx)) {
      if (!own_idx.count(j)) inbound_idx.insert(j);
    }
  }
  const auto pre_union = union_of_neighborhoods(model.graph, inbound_idx);

  std::set<NodeKey> affected_keys;
  for (uint32_t idx : inbound_idx) affected_keys.insert(model.graph.key_of(idx));

  ForgetResult result;
  result.dataset = remove_samples(dataset, shard->samples);
  const ShardGraph reduced_parent =
      graph_without_node(model.graph.parent(), node_id);
  result.model = rebuild_after_removal(
      model, result.dataset, reduced_parent, affected_keys,
      &result.report.affected_nodes, &result.report.dropped_nodes, jobs);

  // Remove the shard's units and tombstones for its refined nodes.
  std::vector<QueryUnit> kept;
  for (auto& unit : result.model.units) {
    if (unit.parent == node_id) {
      result.report.dropped_nodes.push_back(unit.key());
    } else {
      kept.push_back(std::move(unit));
    }
  }
  result.model.units = std::move(kept);
  std::vector<Tombstone> kept_tombstones;
  for (const auto& t : result.model.tombstones) {
    if (t.parent != node_id) kept_tombstones.push_back(t);
  }
  result.model.tombstones = std::move(kept_tombstones);
  std::sort(result.report.dropped_nodes.begin(),
            result.report.dropped_nodes.end());

  for (uint64_t id : shard->samples) {
    const Sample* s = dataset.find(id);
    remove_from_prototypes(result.model.prototypes, *s, dataset.token_count);
  }

  result.report.mode = result.report.affected_nodes.empty() ? "drop" : "retrain";
  result.report.retrain_set_size = pre_union.size();
  std::set<uint32_t> retrained_idx;
  for (const auto& key : result.report.affected_nodes) {
    const auto idx = result.model.graph.index_of(key);
    if (idx.has_value()) retrained_idx.insert(static_cast<uint32_t>(*idx));
  }
  result.report.samples_revisited =
      union_of_neighborhoods(result.model.graph, retrained_idx).size();
  result.report.wall_ms = ms_since(start);
  return result;
}

InstantForgetResult instant_forget(const SafeModel& model, uint32_t node_id) {
  const auto start = Clock::now();
  if (model.graph.parent().find_node(node_id) == nullptr) {
    throw data_error("unknown shard id " + std::to_string(node_id));
  }
  std::set<uint32_t> forbidden_idx;
  for (size_t i = 0; i < model.graph.num_nodes(); ++i) {
    if (model.graph.nodes()[i].parent == node_id) {
      forbidden_idx.insert(static_cast<uint32_t>(i));
    }
  }

  InstantForgetResult result;
  result.model = model;
  result.job.node_id = node_id;
  std::vector<QueryUnit> kept;
  for (auto& unit : result.model.units) {
    const auto idx = model.graph.index_of(unit.key());
    bool tainted = idx.has_value() && forbidden_idx.count(static_cast<uint32_t>(*idx));
    if (idx.has_value() && !tainted) {
      for (uint32_t nb : model.graph.out_edges(*idx)) {
        if (forbidden_idx.count(nb)) {
          tainted = true;
          break;
        }
      }
    }
    if (tainted) {
      result.model.tombstones.push_back(
          {unit.parent, unit.label, unit.retrain_count});
      result.job.tombstoned.push_back(unit.key());
      if (unit.parent != node_id) result.job.retrain_later.push_back(unit.key());
    } else {
      kept.push_back(std::move(unit));
    }
  }
  result.model.units = std::move(kept);

  result.report.mode = "tombstone";
  result.report.affected_nodes = result.job.tombstoned;
  result.report.retrain_set_size = 0;
  result.report.samples_revisited = 0;
  result.report.wall_ms = ms_since(start);
  return result;
}

VerifyResult verify_unlearning(const ShardGraph& graph,
                               const EmbeddingDataset& dataset,
                               const ForgetRequest& request,
                               const TrainConfig& config, unsigned jobs) {
  if (request.kind == ForgetRequest::Kind::kInstantNode) {
    throw usage_error(
        "instant forgetting is approximate by design; only sample/node "
        "requests can be verified for exactness");
  }
  SafeModel trained = fit_safe_model(dataset, graph, config,
                                     LambdaPolicy::formula(), {}, {}, jobs);
  ForgetResult forgotten =
      request.kind == ForgetRequest::Kind::kSamples
          ? forget_samples(trained, dataset, request.sample_ids, jobs)
          : forget_node(trained, dataset, request.node_id, jobs);

  const ShardGraph reduced_parent =
      request.kind == ForgetRequest::Kind::kSamples
          ? graph_without_samples(graph, request.sample_ids)
          : graph_without_node(graph, request.node_id);
  SafeModel scratch = fit_safe_model(
      forgotten.dataset, reduced_parent, config, LambdaPolicy::formula(),
      forgotten.model.retrain_counts(), {}, jobs);

  VerifyResult result;
  result.prototype_divergence =
      max_abs_difference(forgotten.model.prototypes, scratch.prototypes);

  if (graph_to_json(forgotten.model.graph.parent()) !=
      graph_to_json(scratch.graph.parent())) {
    result.detail = "reduced parent graphs differ";
    result.max_divergence = std::numeric_limits<double>::infinity();
    return result;
  }
  if (forgotten.model.units.size() != scratch.units.size()) {
    result.detail = "unit counts differ: " +
                    std::to_string(forgotten.model.units.size()) + " vs " +
                    std::to_string(scratch.units.size());
    result.max_divergence = std::numeric_limits<double>::infinity();
    return result;
  }
  bool bytes_equal = true;
  double max_div = 0.0;
  for (size_t i = 0; i < scratch.units.size(); ++i) {
    const auto& a = forgotten.model.units[i];
    const auto& b = scratch.units[i];
    if (a.key() != b.key() || a.retrain_count != b.retrain_count) {
      result.detail = "unit keys/counters differ at index " + std::to_string(i);
      result.max_divergence = std::numeric_limits<double>::infinity();
      return result;
    }
    if (std::memcmp(a.query.data(), b.query.data(),
                    a.query.size() * sizeof(float)) != 0 ||
        std::memcmp(a.head.data(), b.head.data(),
                    a.head.size() * sizeof(float)) != 0) {
      bytes_equal = false;
      for (size_t j = 0; j < a.query.size(); ++j) {
        max_div = std::max(
            max_div, std::abs(static_cast<double>(a.query[j]) - b.query[j]));
        max_div = std::max(
            max_div, std::abs(static_cast<double>(a.head[j]) - b.head[j]));
      }
      if (result.detail.empty()) {
        result.detail = "parameter bytes differ at unit (" +
                        std::to_string(a.parent) + "," +
                        std::to_string(a.label) + ")";
      }
    }
  }
  result.exact = bytes_equal;
  result.max_divergence = max_div;
  if (result.exact) result.detail = "byte-identical";
  return result;
}

void append_journal(const std::string& path, const ForgetRequest& request,
                    const ForgetReport& report) {
  nlohmann::json entry;
  switch (request.kind) {
    case ForgetRequest::Kind::kSamples:
      entry["kind"] = "samples";
      entry["targets"] = request.sample_ids;
      break;
    case ForgetRequest::Kind::kNode:
      entry["kind"] = "node";
      entry["targets"] = nlohmann::json::array({request.node_id});
      break;
    case ForgetRequest::Kind::kInstantNode:
      entry["kind"] = "instant_node";
      entry["targets"] = nlohmann::json::array({request.node_id});
      break;
  }
  entry["timestamp"] = request.timestamp;
  entry["requester"] = request.requester;
  nlohmann::json rep;
  rep["mode"] = report.mode;
  rep["affected"] = nlohmann::json::array();
  for (const auto& [p, l] : report.affected_nodes) {
    rep["affected"].push_back(nlohmann::json::array({p, l}));
  }
  rep["dropped"] = nlohmann::json::array();
  for (const auto& [p, l] : report.dropped_nodes) {
    rep["dropped"].push_back(nlohmann::json::array({p, l}));
  }
  rep["retrain_set_size"] = report.retrain_set_size;
  rep["samples_revisited"] = report.samples_revisited;
  entry["report"] = rep;

  std::ofstream out(path, std::ios::app);
  if (!out) throw data_error("cannot open journal for append: " + path);
  out << entry.dump() << "\n";
  if (!out) throw data_error("journal write failed: " + path);
}

}  // namespace shardsafe
