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

#include "shardsafe/shard_graph.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"

namespace shardsafe {
namespace {

using json = nlohmann::json;

std::vector<uint64_t> sorted_unique(std::vector<uint64_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

void canonicalize_edges(std::vector<std::pair<uint32_t, uint32_t>>& edges) {
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
}

// Uniform shard assignment shared by build_uniform and build_random_degree.
std::vector<ShardNode> uniform_shards(const EmbeddingDataset& dataset,
                                      uint32_t n, uint64_t seed) {
  if (n == 0) throw usage_error("shard count must be >= 1");
  if (n > dataset.size()) {
    throw usage_error("shard count " + std::to_string(n) +
                      " exceeds dataset size " + std::to_string(dataset.size()));
  }
  std::vector<uint64_t> ids;
  ids.reserve(dataset.size());
  for (const auto& s : dataset.samples) ids.push_back(s.id);
  Rng rng(derive_seed(seed, "uniform-shards"));
  rng.shuffle(ids);

  const size_t base = ids.size() / n;
  const size_t extra = ids.size() % n;
  std::vector<ShardNode> nodes(n);
  size_t pos = 0;
  for (uint32_t i = 0; i < n; ++i) {
    const size_t take = base + (i < extra ? 1 : 0);
    nodes[i].id = i;
    nodes[i].samples.assign(ids.begin() + pos, ids.begin() + pos + take);
    std::sort(nodes[i].samples.begin(), nodes[i].samples.end());
    pos += take;
  }
  return nodes;
}

}  // namespace

const ShardNode* ShardGraph::find_node(uint32_t id) const {
  auto it = std::lower_bound(
      nodes.begin(), nodes.end(), id,
      [](const ShardNode& n, uint32_t key) { return n.id < key; });
  if (it == nodes.end() || it->id != id) return nullptr;
  return &*it;
}

std::vector<uint32_t> ShardGraph::out_neighbors(uint32_t id) const {
  std::vector<uint32_t> out;
  for (const auto& [a, b] : edges) {
    if (a == id) out.push_back(b);
  }
  return out;
}

ShardGraph build_uniform(const EmbeddingDataset& dataset, uint32_t n,
                         uint64_t seed) {
  ShardGraph g;
  g.topology = "uniform";
  g.nodes = uniform_shards(dataset, n, seed);
  g.metadata["n"] = std::to_string(n);
  g.metadata["seed"] = std::to_string(seed);
  return g;
}

ShardGraph build_bilevel(const EmbeddingDataset& dataset, uint32_t n_c,
                         uint32_t n_f, uint64_t seed) {
  const uint32_t k = dataset.num_classes;
  if (n_c == 0) throw usage_error("n_c must be >= 1");
  if (n_f == 0 || n_f > k) {
    throw usage_error("n_f must be in [1, num_classes]; got " +
                      std::to_string(n_f) + " with K=" + std::to_string(k));
  }

  // Class-balanced coarse split: per class, seeded shuffle then round-robin.
  std::vector<std::vector<uint64_t>> per_class(k);
  for (const auto& s : dataset.samples) per_class[s.label].push_back(s.id);
  Rng coarse_rng(derive_seed(seed, "bilevel-coarse"));
  // coarse_of[c][j] = coarse shard of the j-th (shuffled) sample of class c
  std::vector<std::vector<std::vector<uint64_t>>> coarse_class_ids(
      n_c, std::vector<std::vector<uint64_t>>(k));
  for (uint32_t c = 0; c < k; ++c) {
    auto ids = per_class[c];
    coarse_rng.shuffle(ids);
    for (size_t j = 0; j < ids.size(); ++j) {
      coarse_class_ids[j % n_c][c].push_back(ids[j]);
    }
  }

  // Per coarse shard, partition the class set into n_f groups whose sizes
  // are ceil(K/n_f) or floor(K/n_f).
  Rng clique_rng(derive_seed(seed, "bilevel-cliques"));
  ShardGraph g;
  g.topology = "bilevel";
  g.metadata["n_c"] = std::to_string(n_c);
  g.metadata["n_f"] = std::to_string(n_f);
  g.metadata["classes"] = std::to_string(k);
  g.metadata["seed"] = std::to_string(seed);
  g.nodes.reserve(static_cast<size_t>(n_c) * n_f);
  for (uint32_t c_idx = 0; c_idx < n_c; ++c_idx) {
    std::vector<uint32_t> classes(k);
    for (uint32_t c = 0; c < k; ++c) classes[c] = c;
    clique_rng.shuffle(classes);
    const uint32_t base = k / n_f;
    const uint32_t extra = k % n_f;
    size_t pos = 0;
    for (uint32_t f = 0; f < n_f; ++f) {
      const uint32_t take = base + (f < extra ? 1 : 0);
      ShardNode node;
      node.id = c_idx * n_f + f;
      for (uint32_t t = 0; t < take; ++t) {
        const uint32_t cls = classes[pos + t];
        const auto& ids = coarse_class_ids[c_idx][cls];
        node.samples.insert(node.samples.end(), ids.begin(), ids.end());
      }
      pos += take;
      std::sort(node.samples.begin(), node.samples.end());
      g.nodes.push_back(std::move(node));
    }
  }
  return g;
}

ShardGraph build_random_degree(const EmbeddingDataset& dataset, uint32_t n,
                               uint32_t d, uint64_t seed) {
  if (n == 0) throw usage_error("shard count must be >= 1");
  if (d >= n) {
    throw usage_error("degree d=" + std::to_string(d) +
                      " must be < node count n=" + std::to_string(n));
  }
  ShardGraph g;
  g.topology = "random_degree";
  g.nodes = uniform_shards(dataset, n, seed);
  g.metadata["n"] = std::to_string(n);
  g.metadata["d"] = std::to_string(d);
  g.metadata["seed"] = std::to_string(seed);
  Rng rng(derive_seed(seed, "random-degree-edges"));
  for (uint32_t i = 0; i < n; ++i) {
    std::set<uint32_t> targets;
    while (targets.size() < d) {
      const auto t = static_cast<uint32_t>(rng.below(n));
      if (t != i) targets.insert(t);
    }
    for (uint32_t t : targets) g.edges.emplace_back(i, t);
  }
  canonicalize_edges(g.edges);
  return g;
}

RefinedShardGraph::RefinedShardGraph(ShardGraph parent,
                                     std::vector<RefinedNode> nodes)
    : parent_(std::move(parent)), nodes_(std::move(nodes)) {
  std::sort(nodes_.begin(), nodes_.end(),
            [](const RefinedNode& a, const RefinedNode& b) {
              return std::make_pair(a.parent, a.label) <
                     std::make_pair(b.parent, b.label);
            });
  for (uint32_t i = 0; i < nodes_.size(); ++i) {
    index_[{nodes_[i].parent, nodes_[i].label}] = i;
    for (uint64_t id : nodes_[i].samples) sample_node_[id] = i;
  }

  // Induced edges: for every parent edge (a, b), including the implicit
  // self edges, connect every refined node of a to every refined node of b.
  std::vector<std::vector<uint32_t>> by_parent_idx;
  std::map<uint32_t, std::vector<uint32_t>> by_parent;
  for (uint32_t i = 0; i < nodes_.size(); ++i) {
    by_parent[nodes_[i].parent].push_back(i);
  }
  out_.assign(nodes_.size(), {});
  in_.assign(nodes_.size(), {});
  auto connect = [&](uint32_t pa, uint32_t pb) {
    auto ita = by_parent.find(pa);
    auto itb = by_parent.find(pb);
    if (ita == by_parent.end() || itb == by_parent.end()) return;
    for (uint32_t u : ita->second) {
      for (uint32_t v : itb->second) {
        if (u == v) continue;  // self edges stay implicit
        out_[u].push_back(v);
        in_[v].push_back(u);
      }
    }
  };
  for (const auto& node : parent_.nodes) connect(node.id, node.id);
  for (const auto& [a, b] : parent_.edges) connect(a, b);
  for (auto& v : out_) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  for (auto& v : in_) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
}

std::optional<size_t> RefinedShardGraph::index_of(NodeKey key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<size_t> RefinedShardGraph::node_of_sample(uint64_t id) const {
  auto it = sample_node_.find(id);
  if (it == sample_node_.end()) return std::nullopt;
  return it->second;
}

std::vector<uint64_t> RefinedShardGraph::neighborhood_union(size_t idx) const {
  std::vector<uint64_t> ids = nodes_[idx].samples;
  for (uint32_t nb : out_[idx]) {
    ids.insert(ids.end(), nodes_[nb].samples.begin(), nodes_[nb].samples.end());
  }
  return sorted_unique(std::move(ids));
}

std::vector<uint32_t> RefinedShardGraph::pointing_at(size_t idx) const {
  std::vector<uint32_t> result = in_[idx];
  result.push_back(static_cast<uint32_t>(idx));  // implicit self edge
  std::sort(result.begin(), result.end());
  result.erase(std::unique(result.begin(), result.end()), result.end());
  return result;
}

bool RefinedShardGraph::is_disjoint_cliques() const {
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const auto comp = component_of(i);
    // Every member of the component must point at every other member.
    for (uint32_t u : comp) {
      if (out_[u].size() != comp.size() - 1) return false;
      for (uint32_t v : comp) {
        if (u == v) continue;
        if (!std::binary_search(out_[u].begin(), out_[u].end(), v)) {
          return false;
        }
      }
    }
  }
  return true;
}

std::vector<uint32_t> RefinedShardGraph::component_of(size_t idx) const {
  std::vector<char> seen(nodes_.size(), 0);
  std::vector<uint32_t> stack{static_cast<uint32_t>(idx)};
  seen[idx] = 1;
  std::vector<uint32_t> comp;
  while (!stack.empty()) {
    const uint32_t u = stack.back();
    stack.pop_back();
    comp.push_back(u);
    for (const auto& adj : {out_[u], in_[u]}) {
      for (uint32_t v : adj) {
        if (!seen[v]) {
          seen[v] = 1;
          stack.push_back(v);
        }
      }
    }
  }
  std::sort(comp.begin(), comp.end());
  return comp;
}

RefinedShardGraph refine(const ShardGraph& graph,
                         const EmbeddingDataset& dataset) {
  std::vector<RefinedNode> refined;
  for (const auto& node : graph.nodes) {
    std::map<uint32_t, std::vector<uint64_t>> by_label;
    for (uint64_t id : node.samples) {
      const Sample* s = dataset.find(id);
      if (s == nullptr) {
        throw data_error("graph node " + std::to_string(node.id) +
                         " references unknown sample id " + std::to_string(id));
      }
      by_label[s->label].push_back(id);
    }
    for (auto& [label, ids] : by_label) {
      RefinedNode rn;
      rn.parent = node.id;
      rn.label = label;
      rn.samples = std::move(ids);  // already ascending (node samples sorted)
      refined.push_back(std::move(rn));
    }
  }
  return RefinedShardGraph(graph, std::move(refined));
}

RetrainSet retrain_set(const RefinedShardGraph& graph, uint64_t sample_id) {
  const auto idx = graph.node_of_sample(sample_id);
  if (!idx.has_value()) {
    throw data_error("sample id " + std::to_string(sample_id) +
                     " is not in any shard");
  }
  RetrainSet result;
  result.affected_nodes = graph.pointing_at(*idx);
  std::vector<uint64_t> ids;
  for (uint32_t node : result.affected_nodes) {
    auto nb = graph.neighborhood_union(node);
    ids.insert(ids.end(), nb.begin(), nb.end());
  }
  result.sample_ids = sorted_unique(std::move(ids));
  return result;
}

std::vector<std::string> validate(const ShardGraph& graph) {
  std::vector<std::string> violations;
  std::set<uint32_t> ids;
  for (const auto& node : graph.nodes) {
    if (!ids.insert(node.id).second) {
      violations.push_back("duplicate node id " + std::to_string(node.id));
    }
  }
  std::unordered_map<uint64_t, uint32_t> owner;
  for (const auto& node : graph.nodes) {
    for (size_t i = 1; i < node.samples.size(); ++i) {
      if (node.samples[i] <= node.samples[i - 1]) {
        violations.push_back("node " + std::to_string(node.id) +
                             " sample list not strictly ascending");
        break;
      }
    }
    for (uint64_t id : node.samples) {
      auto [it, inserted] = owner.emplace(id, node.id);
      if (!inserted) {
        violations.push_back("sample " + std::to_string(id) +
                             " shared by nodes " + std::to_string(it->second) +
                             " and " + std::to_string(node.id));
      }
    }
  }
  std::set<std::pair<uint32_t, uint32_t>> seen_edges;
  for (const auto& [a, b] : graph.edges) {
    if (!ids.count(a) || !ids.count(b)) {
      violations.push_back("edge (" + std::to_string(a) + "," +
                           std::to_string(b) + ") references unknown node");
      continue;
    }
    if (a == b) {
      violations.push_back("explicit self loop on node " + std::to_string(a) +
                           " (self edges are implicit)");
    }
    if (!seen_edges.emplace(a, b).second) {
      violations.push_back("duplicate edge (" + std::to_string(a) + "," +
                           std::to_string(b) + ")");
    }
  }
  return violations;
}

std::vector<std::string> validate(const ShardGraph& graph,
                                  const EmbeddingDataset& dataset) {
  auto violations = validate(graph);
  std::unordered_set<uint64_t> covered;
  for (const auto& node : graph.nodes) {
    for (uint64_t id : node.samples) {
      if (dataset.find(id) == nullptr) {
        violations.push_back("node " + std::to_string(node.id) +
                             " references unknown sample id " +
                             std::to_string(id));
      }
      covered.insert(id);
    }
  }
  for (const auto& s : dataset.samples) {
    if (!covered.count(s.id)) {
      violations.push_back("sample " + std::to_string(s.id) +
                           " not assigned to any shard");
    }
  }
  return violations;
}

std::string graph_to_json(const ShardGraph& graph) {
  json j;
  j["version"] = 1;
  j["topology"] = graph.topology;
  j["metadata"] = graph.metadata;
  j["nodes"] = json::array();
  for (const auto& node : graph.nodes) {
    json n;
    n["id"] = node.id;
    n["samples"] = node.samples;
    j["nodes"].push_back(std::move(n));
  }
  j["edges"] = json::array();
  for (const auto& [a, b] : graph.edges) {
    j["edges"].push_back(json::array({a, b}));
  }
  return j.dump(2) + "\n";
}

ShardGraph graph_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw data_error(std::string("graph JSON parse error: ") + e.what());
  }
  if (!j.contains("version") || j["version"].get<int>() != 1) {
    throw data_error("graph JSON: missing or unsupported version");
  }
  ShardGraph g;
  g.topology = j.value("topology", std::string("custom"));
  if (j.contains("metadata")) {
    for (auto it = j["metadata"].begin(); it != j["metadata"].end(); ++it) {
      g.metadata[it.key()] = it.value().is_string()
                                 ? it.value().get<std::string>()
                                 : it.value().dump();
    }
  }
  for (const auto& n : j.at("nodes")) {
    ShardNode node;
    node.id = n.at("id").get<uint32_t>();
    node.samples = n.at("samples").get<std::vector<uint64_t>>();
    std::sort(node.samples.begin(), node.samples.end());
    g.nodes.push_back(std::move(node));
  }
  std::sort(g.nodes.begin(), g.nodes.end(),
            [](const ShardNode& a, const ShardNode& b) { return a.id < b.id; });
  for (const auto& e : j.at("edges")) {
    g.edges.emplace_back(e.at(0).get<uint32_t>(), e.at(1).get<uint32_t>());
  }
  canonicalize_edges(g.edges);
  auto violations = validate(g);
  if (!violations.empty()) {
    throw data_error("graph JSON violates invariants: " + violations.front());
  }
  return g;
}

void save_graph(const ShardGraph& graph, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  out << graph_to_json(graph);
  if (!out) throw data_error("write failed: " + path);
}

ShardGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return graph_from_json(buf.str());
}

uint64_t graph_digest(const ShardGraph& graph) {
  return fnv1a64(graph_to_json(graph));
}

ShardGraph graph_without_samples(const ShardGraph& graph,
                                 const std::vector<uint64_t>& ids) {
  std::unordered_set<uint64_t> removed(ids.begin(), ids.end());
  ShardGraph g = graph;
  for (auto& node : g.nodes) {
    std::vector<uint64_t> keep;
    keep.reserve(node.samples.size());
    for (uint64_t id : node.samples) {
      if (!removed.count(id)) keep.push_back(id);
    }
    node.samples = std::move(keep);
  }
  return g;
}

ShardGraph graph_without_node(const ShardGraph& graph, uint32_t node_id) {
  if (!graph.has_node(node_id)) {
    throw data_error("unknown shard id " + std::to_string(node_id));
  }
  ShardGraph g;
  g.topology = graph.topology;
  g.metadata = graph.metadata;
  for (const auto& node : graph.nodes) {
    if (node.id != node_id) g.nodes.push_back(node);
  }
  for (const auto& [a, b] : graph.edges) {
    if (a != node_id && b != node_id) g.edges.emplace_back(a, b);
  }
  return g;
}

ShardGraph merge_graphs(const std::vector<ShardGraph>& parts) {
  ShardGraph g;
  g.topology = "custom";
  uint32_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    uint32_t max_id = 0;
    for (const auto& node : parts[p].nodes) {
      ShardNode n = node;
      n.id += offset;
      max_id = std::max(max_id, n.id);
      g.nodes.push_back(std::move(n));
    }
    for (const auto& [a, b] : parts[p].edges) {
      g.edges.emplace_back(a + offset, b + offset);
    }
    g.metadata["part" + std::to_string(p)] = parts[p].topology;
    offset = parts[p].nodes.empty() ? offset : max_id + 1;
  }
  std::sort(g.nodes.begin(), g.nodes.end(),
            [](const ShardNode& a, const ShardNode& b) { return a.id < b.id; });
  canonicalize_edges(g.edges);
  return g;
}

}  // namespace shardsafe
