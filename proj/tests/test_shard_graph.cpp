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
#include <set>

#include <doctest.h>

#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"

using namespace shardsafe;

namespace {

EmbeddingDataset tiny_dataset(uint32_t classes, uint32_t per_class,
                              uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.samples_per_class = per_class;
  spec.token_count = 1;
  spec.dim = 4;
  spec.seed = seed;
  return generate_synthetic(spec);
}

std::set<uint64_t> all_ids(const EmbeddingDataset& d) {
  std::set<uint64_t> ids;
  for (const auto& s : d.samples) ids.insert(s.id);
  return ids;
}

void check_partition(const ShardGraph& g, const EmbeddingDataset& d) {
  std::set<uint64_t> seen;
  for (const auto& node : g.nodes) {
    for (uint64_t id : node.samples) {
      CHECK(seen.insert(id).second);  // pairwise disjoint
    }
  }
  CHECK(seen == all_ids(d));
}

// Brute-force oracle for the retrain set: scan the explicit refined edge
// lists, independent of the adjacency indexes the implementation keeps.
std::set<uint64_t> brute_force_retrain_set(const RefinedShardGraph& g,
                                           uint64_t sample_id) {
  size_t target = SIZE_MAX;
  for (size_t i = 0; i < g.num_nodes(); ++i) {
    const auto& s = g.nodes()[i].samples;
    if (std::find(s.begin(), s.end(), sample_id) != s.end()) target = i;
  }
  REQUIRE(target != SIZE_MAX);
  auto points_at = [&](size_t j, size_t i) {
    if (i == j) return true;  // implicit self edge
    const auto& out = g.out_edges(j);
    return std::find(out.begin(), out.end(), static_cast<uint32_t>(i)) !=
           out.end();
  };
  std::set<uint64_t> result;
  for (size_t j = 0; j < g.num_nodes(); ++j) {
    if (!points_at(j, target)) continue;
    for (size_t v = 0; v < g.num_nodes(); ++v) {
      if (!points_at(j, v)) continue;
      result.insert(g.nodes()[v].samples.begin(), g.nodes()[v].samples.end());
    }
  }
  return result;
}

}  // namespace

TEST_CASE("uniform sharding partitions the dataset") {
  const auto d = tiny_dataset(4, 25, 3);

  SUBCASE("single shard holds everything") {
    const auto g = build_uniform(d, 1, 9);
    REQUIRE(g.nodes.size() == 1);
    CHECK(g.nodes[0].samples.size() == d.size());
    CHECK(g.edges.empty());
  }
  SUBCASE("four shards of 25 each") {
    const auto g = build_uniform(d, 4, 9);
    REQUIRE(g.nodes.size() == 4);
    for (const auto& node : g.nodes) CHECK(node.samples.size() == 25);
    check_partition(g, d);
  }
  SUBCASE("same seed, same assignment") {
    const auto a = build_uniform(d, 4, 11);
    const auto b = build_uniform(d, 4, 11);
    CHECK(graph_to_json(a) == graph_to_json(b));
  }
  SUBCASE("shard sizes differ by at most one") {
    const auto g = build_uniform(d, 7, 1);
    size_t lo = SIZE_MAX, hi = 0;
    for (const auto& node : g.nodes) {
      lo = std::min(lo, node.samples.size());
      hi = std::max(hi, node.samples.size());
    }
    CHECK(hi - lo <= 1);
    check_partition(g, d);
  }
  SUBCASE("n > N is rejected") {
    CHECK_THROWS_AS(build_uniform(d, 101, 0), Error);
  }
}

TEST_CASE("bilevel sharding builds n_c * n_f class-group nodes") {
  SUBCASE("degenerate case equals no sharding") {
    const auto d = tiny_dataset(4, 5, 7);
    const auto g = build_bilevel(d, 1, 1, 5);
    REQUIRE(g.nodes.size() == 1);
    CHECK(g.nodes[0].samples.size() == d.size());
  }
  SUBCASE("K=64, (4,4): 16 cliques of exactly 16 classes, no edges") {
    const auto d = tiny_dataset(64, 4, 1);
    const auto g = build_bilevel(d, 4, 4, 2);
    REQUIRE(g.nodes.size() == 16);
    CHECK(g.edges.empty());
    check_partition(g, d);
    const auto refined = refine(g, d);
    std::map<uint32_t, std::set<uint32_t>> classes_per_node;
    for (const auto& rn : refined.nodes()) {
      classes_per_node[rn.parent].insert(rn.label);
    }
    for (const auto& [parent, classes] : classes_per_node) {
      CHECK(classes.size() == 16);
    }
  }
  SUBCASE("K=67 with n_f=8 gives clique sizes 8 or 9") {
    const auto d = tiny_dataset(67, 2, 3);
    const auto g = build_bilevel(d, 8, 8, 4);
    CHECK(g.nodes.size() == 64);
    const auto refined = refine(g, d);
    std::map<uint32_t, std::set<uint32_t>> classes_per_node;
    for (const auto& rn : refined.nodes()) {
      classes_per_node[rn.parent].insert(rn.label);
    }
    for (const auto& [parent, classes] : classes_per_node) {
      CHECK(classes.size() >= 8);
      CHECK(classes.size() <= 9);
    }
  }
  SUBCASE("coarse shards are class-balanced up to rounding") {
    const auto d = tiny_dataset(6, 9, 5);
    const auto g = build_bilevel(d, 3, 2, 6);
    // per class: 9 samples over 3 coarse shards = 3 each
    std::map<std::pair<uint32_t, uint32_t>, int> counts;  // (coarse, label)
    const auto refined = refine(g, d);
    for (const auto& rn : refined.nodes()) {
      counts[{rn.parent / 2, rn.label}] += static_cast<int>(rn.samples.size());
    }
    for (const auto& [key, count] : counts) CHECK(count == 3);
  }
  SUBCASE("n_f > K is rejected") {
    const auto d = tiny_dataset(4, 5, 7);
    CHECK_THROWS_AS(build_bilevel(d, 1, 5, 0), Error);
  }
}

TEST_CASE("random degree graphs have out-degree d") {
  const auto d = tiny_dataset(4, 10, 2);

  SUBCASE("d=0 equals uniform sharding") {
    const auto g = build_random_degree(d, 5, 0, 8);
    CHECK(g.edges.empty());
  }
  SUBCASE("d = n-1 forces the complete digraph") {
    const auto g = build_random_degree(d, 3, 2, 8);
    CHECK(g.edges.size() == 6);
  }
  SUBCASE("out-degree is d for every node and seed") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      const auto g = build_random_degree(d, 8, 3, seed);
      std::map<uint32_t, int> outdeg;
      for (const auto& [a, b] : g.edges) {
        CHECK(a != b);
        ++outdeg[a];
      }
      for (const auto& node : g.nodes) CHECK(outdeg[node.id] == 3);
      check_partition(g, d);
    }
  }
  SUBCASE("d >= n is rejected") {
    CHECK_THROWS_AS(build_random_degree(d, 4, 4, 0), Error);
  }
}

TEST_CASE("refinement follows the induced-edge definition") {
  const auto d = tiny_dataset(3, 4, 6);

  SUBCASE("one two-label shard refines into a 2-clique") {
    std::vector<uint64_t> ids01;
    for (const auto& s : d.samples) {
      if (s.label <= 1) ids01.push_back(s.id);
    }
    ShardGraph g;
    g.topology = "custom";
    g.nodes.push_back({0, ids01});
    const auto sub = remove_samples(d, [&] {
      std::vector<uint64_t> drop;
      for (const auto& s : d.samples) {
        if (s.label > 1) drop.push_back(s.id);
      }
      return drop;
    }());
    const auto refined = refine(g, sub);
    REQUIRE(refined.num_nodes() == 2);
    CHECK(refined.out_edges(0) == std::vector<uint32_t>{1});
    CHECK(refined.out_edges(1) == std::vector<uint32_t>{0});
  }
  SUBCASE("single-label shard refines to an isolated node") {
    std::vector<uint64_t> ids0;
    for (const auto& s : d.samples) {
      if (s.label == 0) ids0.push_back(s.id);
    }
    ShardGraph g;
    g.topology = "custom";
    g.nodes.push_back({0, ids0});
    std::vector<uint64_t> drop;
    for (const auto& s : d.samples) {
      if (s.label != 0) drop.push_back(s.id);
    }
    const auto refined = refine(g, remove_samples(d, drop));
    REQUIRE(refined.num_nodes() == 1);
    CHECK(refined.out_edges(0).empty());
    CHECK(refined.neighborhood_union(0) == refined.nodes()[0].samples);
  }
  SUBCASE("clique of 2 three-label shards is fully connected") {
    const auto big = tiny_dataset(3, 8, 9);
    auto g = build_uniform(big, 2, 4);
    g.edges = {{0, 1}, {1, 0}};
    const auto refined = refine(g, big);
    REQUIRE(refined.num_nodes() == 6);
    CHECK(refined.is_disjoint_cliques());
    for (size_t i = 0; i < 6; ++i) CHECK(refined.out_edges(i).size() == 5);
  }
  SUBCASE("refinement preserves parent data") {
    const auto g = build_uniform(d, 3, 1);
    const auto refined = refine(g, d);
    std::map<uint32_t, std::set<uint64_t>> per_parent;
    for (const auto& rn : refined.nodes()) {
      per_parent[rn.parent].insert(rn.samples.begin(), rn.samples.end());
    }
    for (const auto& node : g.nodes) {
      CHECK(per_parent[node.id] ==
            std::set<uint64_t>(node.samples.begin(), node.samples.end()));
    }
  }
}

TEST_CASE("neighborhood union and retrain set") {
  SUBCASE("edgeless: retrain set is exactly the containing shard") {
    const auto d = tiny_dataset(2, 8, 4);
    const auto g = build_uniform(d, 4, 5);
    const auto refined = refine(g, d);
    const uint64_t target = g.nodes[2].samples[0];
    const auto rs = retrain_set(refined, target);
    std::set<uint64_t> expected(g.nodes[2].samples.begin(),
                                g.nodes[2].samples.end());
    CHECK(std::set<uint64_t>(rs.sample_ids.begin(), rs.sample_ids.end()) ==
          expected);
  }
  SUBCASE("clique of d refined nodes: |M_x| = d * |S|") {
    const auto d = tiny_dataset(4, 8, 10);
    const auto g = build_bilevel(d, 1, 1, 3);  // one shard, 4-class clique
    const auto refined = refine(g, d);
    REQUIRE(refined.num_nodes() == 4);
    const auto rs = retrain_set(refined, d.samples[0].id);
    CHECK(rs.affected_nodes.size() == 4);
    CHECK(rs.sample_ids.size() == 4 * 8);
    // neighborhood_union is idempotent
    CHECK(refined.neighborhood_union(0) == refined.neighborhood_union(0));
  }
  SUBCASE("random graph matches the brute-force oracle") {
    const auto d = tiny_dataset(3, 16, 12);
    const auto g = build_random_degree(d, 8, 2, 99);
    const auto refined = refine(g, d);
    for (size_t i = 0; i < d.size(); i += 7) {
      const uint64_t id = d.samples[i].id;
      const auto rs = retrain_set(refined, id);
      CHECK(std::set<uint64_t>(rs.sample_ids.begin(), rs.sample_ids.end()) ==
            brute_force_retrain_set(refined, id));
    }
  }
  SUBCASE("unknown sample id is rejected") {
    const auto d = tiny_dataset(2, 4, 4);
    const auto refined = refine(build_uniform(d, 2, 1), d);
    CHECK_THROWS_AS(retrain_set(refined, 123456), Error);
  }
}

TEST_CASE("bilevel refined graphs are disjoint cliques and cost is local") {
  const auto d = tiny_dataset(8, 6, 14);
  const auto g = build_bilevel(d, 2, 4, 7);
  const auto refined = refine(g, d);
  CHECK(refined.is_disjoint_cliques());
  for (size_t i = 0; i < d.size(); i += 5) {
    const uint64_t id = d.samples[i].id;
    const auto rs = retrain_set(refined, id);
    const auto node = refined.node_of_sample(id);
    REQUIRE(node.has_value());
    const auto clique_union = refined.neighborhood_union(*node);
    CHECK(rs.sample_ids == clique_union);
  }
}

TEST_CASE("validate reports violations precisely") {
  const auto d = tiny_dataset(2, 6, 8);
  auto g = build_uniform(d, 3, 2);

  SUBCASE("well-formed graph passes") {
    CHECK(validate(g, d).empty());
  }
  SUBCASE("overlapping shards name the shared id") {
    g.nodes[1].samples = g.nodes[0].samples;
    const auto violations = validate(g);
    REQUIRE(!violations.empty());
    CHECK(violations.front().find(std::to_string(g.nodes[0].samples[0])) !=
          std::string::npos);
  }
  SUBCASE("explicit self loops are rejected") {
    g.edges.emplace_back(1, 1);
    const auto violations = validate(g);
    REQUIRE(!violations.empty());
    CHECK(violations.front().find("self loop") != std::string::npos);
  }
  SUBCASE("edges to unknown nodes are rejected") {
    g.edges.emplace_back(0, 17);
    CHECK(!validate(g).empty());
  }
}

TEST_CASE("graph JSON round-trips and digests are stable") {
  const auto d = tiny_dataset(5, 8, 20);
  const auto g = build_random_degree(d, 5, 2, 31);
  const auto text = graph_to_json(g);
  const auto parsed = graph_from_json(text);
  CHECK(graph_to_json(parsed) == text);
  CHECK(graph_digest(parsed) == graph_digest(g));
  CHECK(parsed.topology == "random_degree");
  CHECK(parsed.metadata.at("d") == "2");
}

TEST_CASE("graph reductions preserve node identity") {
  const auto d = tiny_dataset(3, 8, 25);
  auto g = build_random_degree(d, 6, 2, 77);

  SUBCASE("sample removal keeps all nodes") {
    const auto r =
        graph_without_samples(g, {d.samples[0].id, d.samples[5].id});
    CHECK(r.nodes.size() == g.nodes.size());
    size_t total = 0;
    for (const auto& node : r.nodes) total += node.samples.size();
    CHECK(total == d.size() - 2);
  }
  SUBCASE("node removal drops its edges but keeps other ids") {
    const auto r = graph_without_node(g, 3);
    CHECK(r.nodes.size() == g.nodes.size() - 1);
    CHECK(!r.has_node(3));
    for (const auto& [a, b] : r.edges) {
      CHECK(a != 3);
      CHECK(b != 3);
    }
    CHECK_THROWS_AS(graph_without_node(g, 42), Error);
  }
}
