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

#ifndef SHARDSAFE_SHARD_GRAPH_HPP_
#define SHARDSAFE_SHARD_GRAPH_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "shardsafe/embedding_store.hpp"

namespace shardsafe {

struct ShardNode {
  uint32_t id = 0;
  std::vector<uint64_t> samples;  // ascending
};

// Directed graph over disjoint data shards. An edge i -> j grants node i's
// adapter training access to node j's data. Every node has an implicit
// self edge; self edges are never stored or serialized.
struct ShardGraph {
  std::string topology = "custom";  // uniform | bilevel | random_degree | custom
  std::map<std::string, std::string> metadata;
  std::vector<ShardNode> nodes;  // ascending id
  std::vector<std::pair<uint32_t, uint32_t>> edges;  // sorted, no self loops

  const ShardNode* find_node(uint32_t id) const;
  bool has_node(uint32_t id) const { return find_node(id) != nullptr; }

  // Explicit outbound targets of `id` (self excluded).
  std::vector<uint32_t> out_neighbors(uint32_t id) const;
};

// Single-class filtration of a parent shard.
struct RefinedNode {
  uint32_t parent = 0;
  uint32_t label = 0;
  std::vector<uint64_t> samples;  // ascending
};

using NodeKey = std::pair<uint32_t, uint32_t>;  // (parent, label)

// Per-class refinement of a shard graph. Each refined node holds the
// samples of one class of one parent shard; edges are induced from the
// parent edges (self edges included), so a multi-class parent shard
// refines into a complete digraph over its classes.
class RefinedShardGraph {
 public:
  RefinedShardGraph() = default;
  RefinedShardGraph(ShardGraph parent, std::vector<RefinedNode> nodes);

  const ShardGraph& parent() const { return parent_; }
  const std::vector<RefinedNode>& nodes() const { return nodes_; }
  size_t num_nodes() const { return nodes_.size(); }

  NodeKey key_of(size_t idx) const {
    return {nodes_[idx].parent, nodes_[idx].label};
  }
  std::optional<size_t> index_of(NodeKey key) const;
  std::optional<size_t> node_of_sample(uint64_t id) const;

  // Outbound / inbound refined neighbors, self excluded, ascending.
  const std::vector<uint32_t>& out_edges(size_t idx) const { return out_[idx]; }
  const std::vector<uint32_t>& in_edges(size_t idx) const { return in_[idx]; }

  // Union of the node's own samples and its outbound neighbors' samples.
  std::vector<uint64_t> neighborhood_union(size_t idx) const;

  // Nodes whose outbound neighborhood contains `idx` (self included).
  std::vector<uint32_t> pointing_at(size_t idx) const;

  // True when the edge relation (with implicit self edges) is a disjoint
  // union of complete subgraphs.
  bool is_disjoint_cliques() const;

  // Connected component (bidirectional closure) containing idx, ascending.
  std::vector<uint32_t> component_of(size_t idx) const;

 private:
  ShardGraph parent_;
  std::vector<RefinedNode> nodes_;  // sorted by (parent, label)
  std::vector<std::vector<uint32_t>> out_, in_;
  std::map<NodeKey, uint32_t> index_;
  std::unordered_map<uint64_t, uint32_t> sample_node_;
};

struct RetrainSet {
  std::vector<uint32_t> affected_nodes;  // refined node indices, ascending
  std::vector<uint64_t> sample_ids;      // union of their neighborhoods
};

// Uniform random partition into n edgeless shards (sizes differ by <= 1).
ShardGraph build_uniform(const EmbeddingDataset& dataset, uint32_t n,
                         uint64_t seed);

// Bilevel sharding: per-class round-robin split into n_c class-balanced
// coarse shards, then the classes of each coarse shard partitioned into
// n_f groups of ~K/n_f classes. Each (coarse, group) pair is one node;
// refinement turns each node into a clique of its classes.
ShardGraph build_bilevel(const EmbeddingDataset& dataset, uint32_t n_c,
                         uint32_t n_f, uint64_t seed);

// Uniform shards plus d distinct outbound edges per node, chosen uniformly
// at random among the other nodes.
ShardGraph build_random_degree(const EmbeddingDataset& dataset, uint32_t n,
                               uint32_t d, uint64_t seed);

RefinedShardGraph refine(const ShardGraph& graph,
                         const EmbeddingDataset& dataset);

// Eq.-style retrain set of the sample: the union of the outbound
// neighborhoods of every node pointing at the sample's node.
RetrainSet retrain_set(const RefinedShardGraph& graph, uint64_t sample_id);

// Invariant violations (empty means ok). With a dataset, additionally
// checks that the shards partition exactly the dataset ids.
std::vector<std::string> validate(const ShardGraph& graph);
std::vector<std::string> validate(const ShardGraph& graph,
                                  const EmbeddingDataset& dataset);

std::string graph_to_json(const ShardGraph& graph);
ShardGraph graph_from_json(const std::string& json_text);
void save_graph(const ShardGraph& graph, const std::string& path);
ShardGraph load_graph(const std::string& path);
uint64_t graph_digest(const ShardGraph& graph);

// Reduced graphs for forgetting: same node ids, fewer samples / nodes.
ShardGraph graph_without_samples(const ShardGraph& graph,
                                 const std::vector<uint64_t>& ids);
ShardGraph graph_without_node(const ShardGraph& graph, uint32_t node_id);

// Concatenates node lists (ids offset to stay unique); no cross edges.
ShardGraph merge_graphs(const std::vector<ShardGraph>& parts);

}  // namespace shardsafe

#endif  // SHARDSAFE_SHARD_GRAPH_HPP_
