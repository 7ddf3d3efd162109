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

#include "shardsafe/inca_adapter.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#include <doctest.h>

#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"
#include "shardsafe/shard_graph.hpp"

using namespace shardsafe;

namespace {

// Independent straight-line re-implementation of the adapter forward pass
// in doubles, written directly from the layer definitions. Kept free of
// any shared helpers so it can serve as an oracle.
std::vector<double> oracle_forward(const CrossAttentionParams& p,
                                   const std::vector<double>& tokens,
                                   uint32_t t_count,
                                   const std::vector<double>& q) {
  const uint32_t d = p.dim;
  const double eps = 1e-5;
  auto ln = [&](const std::vector<double>& x, const std::vector<float>& gain,
                const std::vector<float>& bias) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= d;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= d;
    std::vector<double> out(d);
    for (uint32_t i = 0; i < d; ++i) {
      out[i] = gain[i] * (x[i] - mean) / std::sqrt(var + eps) + bias[i];
    }
    return out;
  };
  auto matvec = [&](const std::vector<float>& m, const std::vector<double>& x) {
    std::vector<double> out(d, 0.0);
    for (uint32_t r = 0; r < d; ++r) {
      for (uint32_t c = 0; c < d; ++c) {
        out[r] += static_cast<double>(m[r * d + c]) * x[c];
      }
    }
    return out;
  };

  const auto q_proj = matvec(p.w_query, ln(q, p.ln_q_gain, p.ln_q_bias));
  std::vector<std::vector<double>> keys(t_count), values(t_count);
  for (uint32_t t = 0; t < t_count; ++t) {
    std::vector<double> row(tokens.begin() + t * d,
                            tokens.begin() + (t + 1) * d);
    const auto normed = ln(row, p.ln_in_gain, p.ln_in_bias);
    keys[t] = matvec(p.w_key, normed);
    values[t] = matvec(p.w_value, normed);
  }
  std::vector<double> scores(t_count, 0.0);
  for (uint32_t t = 0; t < t_count; ++t) {
    for (uint32_t i = 0; i < d; ++i) scores[t] += q_proj[i] * keys[t][i];
    scores[t] /= std::sqrt(static_cast<double>(d));
  }
  double max_score = scores[0];
  for (double s : scores) max_score = std::max(max_score, s);
  double z = 0.0;
  std::vector<double> attn(t_count);
  for (uint32_t t = 0; t < t_count; ++t) {
    attn[t] = std::exp(scores[t] - max_score);
    z += attn[t];
  }
  std::vector<double> context(d, 0.0);
  for (uint32_t t = 0; t < t_count; ++t) {
    for (uint32_t i = 0; i < d; ++i) context[i] += attn[t] / z * values[t][i];
  }
  return ln(matvec(p.w_out, context), p.ln_post_gain, p.ln_post_bias);
}

EmbeddingDataset two_cluster_dataset(uint32_t per_class, uint32_t dim,
                                     uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.samples_per_class = per_class;
  spec.token_count = 2;
  spec.dim = dim;
  spec.cluster_scale = 5.0;
  spec.noise_scale = 1.0;
  spec.seed = seed;
  return generate_synthetic(spec);
}

bool units_equal(const std::vector<QueryUnit>& a,
                 const std::vector<QueryUnit>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].key() != b[i].key()) return false;
    if (std::memcmp(a[i].query.data(), b[i].query.data(),
                    a[i].query.size() * sizeof(float)) != 0) {
      return false;
    }
    if (std::memcmp(a[i].head.data(), b[i].head.data(),
                    a[i].head.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

double train_accuracy(const CrossAttentionParams& params,
                      const EmbeddingDataset& d,
                      const std::vector<QueryUnit>& units) {
  size_t correct = 0;
  for (const auto& s : d.samples) {
    double best = -1e300;
    uint32_t best_label = 0;
    for (const auto& u : units) {
      const auto out = forward(params, {s.tokens.data(), s.tokens.size()},
                               d.token_count, {u.query.data(), u.query.size()},
                               {u.head.data(), u.head.size()}, 1);
      if (out.logits[0] > best) {
        best = out.logits[0];
        best_label = u.label;
      }
    }
    correct += best_label == s.label;
  }
  return static_cast<double>(correct) / d.size();
}

}  // namespace

TEST_CASE("init_shared is deterministic and finite") {
  for (uint32_t d : {4u, 64u, 1024u}) {
    const auto a = init_shared(d, 5);
    const auto b = init_shared(d, 5);
    CHECK(a.w_query == b.w_query);
    CHECK(a.w_out == b.w_out);
    for (float v : a.w_value) CHECK(std::isfinite(v));
  }
  const auto a = init_shared(16, 1);
  const auto c = init_shared(16, 2);
  CHECK(a.w_query != c.w_query);
}

TEST_CASE("forward matches the independent oracle") {
  const auto params = init_shared(4, 31);
  Rng rng(99);
  std::vector<double> tokens(8), q(4), v(4);
  for (auto& x : tokens) x = rng.gaussian();
  for (auto& x : q) x = rng.gaussian();
  for (auto& x : v) x = rng.gaussian();
  const auto expected = oracle_forward(params, tokens, 2, q);

  SUBCASE("f32 production path within 1e-6") {
    std::vector<float> tokens_f(tokens.begin(), tokens.end());
    std::vector<float> q_f(q.begin(), q.end());
    std::vector<float> v_f(v.begin(), v.end());
    const auto out = forward(params, {tokens_f.data(), tokens_f.size()}, 2,
                             {q_f.data(), q_f.size()},
                             {v_f.data(), v_f.size()}, 1);
    for (uint32_t i = 0; i < 4; ++i) {
      CHECK(std::abs(out.attended[i] - expected[i]) <= 1e-6);
    }
  }
  SUBCASE("f64 verification path within 1e-12") {
    const auto p64 = attn::Params<double>::from(params);
    attn::TokenContext<double> ctx;
    attn::prepare_tokens<double, double>(p64, tokens.data(), 2, &ctx);
    attn::QueryCache<double> cache;
    attn::query_forward<double>(p64, ctx, q.data(), &cache);
    for (uint32_t i = 0; i < 4; ++i) {
      CHECK(std::abs(cache.attended[i] - expected[i]) <= 1e-12);
    }
  }
}

TEST_CASE("zero head vector gives zero logit") {
  const auto params = init_shared(8, 7);
  Rng rng(3);
  std::vector<float> tokens(16), q(8);
  std::vector<float> v(8, 0.0f);
  for (auto& x : tokens) x = static_cast<float>(rng.gaussian());
  for (auto& x : q) x = static_cast<float>(rng.gaussian());
  const auto out = forward(params, {tokens.data(), tokens.size()}, 2,
                           {q.data(), q.size()}, {v.data(), v.size()}, 1);
  CHECK(out.logits[0] == 0.0f);
}

TEST_CASE("batched forward equals concatenated single-query forwards") {
  const auto params = init_shared(16, 11);
  Rng rng(17);
  std::vector<float> tokens(3 * 16);
  for (auto& x : tokens) x = static_cast<float>(rng.gaussian());
  std::vector<float> qs(5 * 16), vs(5 * 16);
  for (auto& x : qs) x = static_cast<float>(rng.gaussian());
  for (auto& x : vs) x = static_cast<float>(rng.gaussian());

  const auto batched = forward(params, {tokens.data(), tokens.size()}, 3,
                               {qs.data(), qs.size()}, {vs.data(), vs.size()},
                               5);
  for (size_t i = 0; i < 5; ++i) {
    const auto single =
        forward(params, {tokens.data(), tokens.size()}, 3,
                {qs.data() + i * 16, 16}, {vs.data() + i * 16, 16}, 1);
    CHECK(single.logits[0] == batched.logits[i]);  // exact, same arithmetic
    for (uint32_t j = 0; j < 16; ++j) {
      CHECK(single.attended[j] == batched.attended[i * 16 + j]);
    }
  }
}

TEST_CASE("softmax attention weights sum to one") {
  const auto params = init_shared(8, 23);
  const auto p = attn::Params<float>::from(params);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> tokens(5 * 8), q(8);
    for (auto& x : tokens) x = static_cast<float>(rng.gaussian());
    for (auto& x : q) x = static_cast<float>(rng.gaussian());
    attn::TokenContext<float> ctx;
    attn::prepare_tokens<float, float>(p, tokens.data(), 5, &ctx);
    attn::QueryCache<float> cache;
    attn::query_forward<float>(p, ctx, q.data(), &cache);
    double sum = 0.0;
    for (double a : cache.attn) sum += a;
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("dimension mismatches are rejected") {
  const auto params = init_shared(8, 1);
  std::vector<float> tokens(8), q(4), v(4);
  CHECK_THROWS_AS(forward(params, {tokens.data(), tokens.size()}, 1,
                          {q.data(), q.size()}, {v.data(), v.size()}, 1),
                  Error);
}

TEST_CASE("grad check: analytic matches finite differences") {
  const auto params = init_shared(8, 41);
  Rng rng(123);

  SUBCASE("random instances stay under 1e-4") {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> tokens(3 * 8), q(8), v(8);
      for (auto& x : tokens) x = rng.gaussian();
      for (auto& x : q) x = rng.gaussian();
      for (auto& x : v) x = rng.gaussian();
      const double target = trial % 2 == 0 ? 1.0 : 0.0;
      const auto result =
          grad_check(params, {q.data(), q.size()}, {v.data(), v.size()},
                     {tokens.data(), tokens.size()}, 3, target);
      CHECK(result.max_rel_error <= 1e-4);
    }
  }
  SUBCASE("zero-gradient point: both methods vanish") {
    std::vector<double> tokens(2 * 8), q(8);
    std::vector<double> v(8, 0.0);
    for (auto& x : tokens) x = rng.gaussian();
    for (auto& x : q) x = rng.gaussian();
    const auto result =
        grad_check(params, {q.data(), q.size()}, {v.data(), v.size()},
                   {tokens.data(), tokens.size()}, 2, 0.5);
    CHECK(result.max_abs_analytic <= 1e-12);
    CHECK(result.max_abs_numeric <= 1e-8);
  }
  SUBCASE("error shrinks with the step: 1e-2 -> 1e-3") {
    std::vector<double> tokens(3 * 8), q(8), v(8);
    for (auto& x : tokens) x = rng.gaussian();
    for (auto& x : q) x = rng.gaussian();
    for (auto& x : v) x = rng.gaussian();
    const auto coarse =
        grad_check(params, {q.data(), q.size()}, {v.data(), v.size()},
                   {tokens.data(), tokens.size()}, 3, 1.0, 1e-2);
    const auto fine =
        grad_check(params, {q.data(), q.size()}, {v.data(), v.size()},
                   {tokens.data(), tokens.size()}, 3, 1.0, 1e-3);
    CHECK(fine.max_rel_error < coarse.max_rel_error);
  }
}

TEST_CASE("training is deterministic and learns a separable clique") {
  const auto d = two_cluster_dataset(12, 8, 77);
  const auto graph = build_bilevel(d, 1, 1, 5);  // single 2-class clique
  const auto refined = refine(graph, d);
  const auto params = init_shared(d.dim, 3);
  TrainConfig config;
  config.epochs = 30;
  config.batch_size = 8;
  config.seed = 9;

  const auto a = train_queries(params, d, refined, config);
  const auto b = train_queries(params, d, refined, config);
  REQUIRE(a.units.size() == 2);
  CHECK(units_equal(a.units, b.units));
  CHECK(train_accuracy(params, d, a.units) == 1.0);

  SUBCASE("clique-CE mode also fits and is deterministic") {
    TrainConfig ce = config;
    ce.loss_mode = LossMode::kCliqueCe;
    const auto c1 = train_queries(params, d, refined, ce);
    const auto c2 = train_queries(params, d, refined, ce);
    CHECK(units_equal(c1.units, c2.units));
    CHECK(train_accuracy(params, d, c1.units) == 1.0);
    CHECK_FALSE(units_equal(c1.units, a.units));
  }
  SUBCASE("training loss decreases in trend") {
    TrainConfig stub = config;
    stub.epochs = 1;
    const auto early = train_queries(params, d, refined, stub);
    auto mean_bce = [&](const std::vector<QueryUnit>& units) {
      double total = 0.0;
      size_t count = 0;
      for (const auto& u : units) {
        for (const auto& s : d.samples) {
          const auto out =
              forward(params, {s.tokens.data(), s.tokens.size()},
                      d.token_count, {u.query.data(), u.query.size()},
                      {u.head.data(), u.head.size()}, 1);
          total += attn::bce_loss(out.logits[0], s.label == u.label ? 1.0 : 0.0);
          ++count;
        }
      }
      return total / static_cast<double>(count);
    };
    CHECK(mean_bce(a.units) < mean_bce(early.units));
  }
}

TEST_CASE("theta stays frozen through training") {
  const auto d = two_cluster_dataset(6, 8, 5);
  const auto refined = refine(build_uniform(d, 2, 3), d);
  const auto params = init_shared(d.dim, 21);
  const auto before = params;
  TrainConfig config;
  config.epochs = 3;
  config.seed = 1;
  (void)train_queries(params, d, refined, config);
  CHECK(std::memcmp(params.w_query.data(), before.w_query.data(),
                    params.w_query.size() * sizeof(float)) == 0);
  CHECK(params.ln_post_gain == before.ln_post_gain);
}

TEST_CASE("masking isolation: outside samples cannot touch a unit") {
  // Two disjoint shards, no edges: perturbing shard 1's tokens must leave
  // shard 0's trained unit bit-identical.
  auto d = two_cluster_dataset(10, 8, 31);
  std::vector<uint64_t> shard0, shard1;
  for (const auto& s : d.samples) {
    (s.label == 0 ? shard0 : shard1).push_back(s.id);
  }
  ShardGraph g;
  g.topology = "custom";
  g.nodes.push_back({0, shard0});
  g.nodes.push_back({1, shard1});
  const auto params = init_shared(d.dim, 8);
  TrainConfig config;
  config.epochs = 5;
  config.seed = 4;

  const auto base = train_queries(params, d, refine(g, d), config);
  auto perturbed = d;
  for (auto& s : perturbed.samples) {
    if (s.label == 1) {
      for (auto& t : s.tokens) t += 0.5f;
    }
  }
  const auto after = train_queries(params, perturbed, refine(g, perturbed),
                                   config);
  REQUIRE(base.units.size() == 2);
  REQUIRE(after.units.size() == 2);
  // unit (0,0) untouched, unit (1,1) changed
  CHECK(std::memcmp(base.units[0].query.data(), after.units[0].query.data(),
                    8 * sizeof(float)) == 0);
  CHECK(std::memcmp(base.units[0].head.data(), after.units[0].head.data(),
                    8 * sizeof(float)) == 0);
  CHECK(std::memcmp(base.units[1].query.data(), after.units[1].query.data(),
                    8 * sizeof(float)) != 0);
}

TEST_CASE("parallel training matches serial training bit for bit") {
  const auto d = two_cluster_dataset(8, 8, 63);
  const auto refined = refine(build_uniform(d, 4, 9), d);
  const auto params = init_shared(d.dim, 15);
  TrainConfig config;
  config.epochs = 4;
  config.seed = 2;
  const auto serial = train_queries(params, d, refined, config, {}, {}, 1);
  const auto parallel = train_queries(params, d, refined, config, {}, {}, 4);
  CHECK(units_equal(serial.units, parallel.units));
}

TEST_CASE("clique-CE on a non-clique graph is rejected") {
  const auto d = two_cluster_dataset(8, 8, 70);
  auto g = build_uniform(d, 3, 1);
  g.edges = {{0, 1}};  // asymmetric: not a clique
  TrainConfig config;
  config.loss_mode = LossMode::kCliqueCe;
  config.seed = 1;
  CHECK_THROWS_AS(
      train_queries(init_shared(d.dim, 1), d, refine(g, d), config), Error);
}
