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

#include "shardsafe/dp_engine.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>

#include <doctest.h>

#include "shardsafe/ensemble.hpp"
#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"

using namespace shardsafe;

namespace {

EmbeddingDataset clustered(uint32_t classes, uint32_t per_class,
                           uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.samples_per_class = per_class;
  spec.token_count = 2;
  spec.dim = 8;
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
                    a[i].query.size() * sizeof(float)) != 0 ||
        std::memcmp(a[i].head.data(), b[i].head.data(),
                    a[i].head.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("group privacy closed form") {
  SUBCASE("k = 1 is the identity") {
    const auto [eps, delta] = group_privacy(1.7, 1e-9, 1);
    CHECK(eps == 1.7);
    CHECK(delta == 1e-9);
  }
  SUBCASE("k = 2 at eps 1: delta_g = (e + 1) * delta") {
    const auto [eps, delta] = group_privacy(1.0, 1e-10, 2);
    CHECK(eps == 2.0);
    CHECK(delta == doctest::Approx((std::exp(1.0) + 1.0) * 1e-10)
                       .epsilon(1e-12));
    CHECK(delta == doctest::Approx(3.7183e-10).epsilon(1e-4));
  }
  SUBCASE("delta_g is strictly increasing in k") {
    double prev = 0.0;
    for (uint64_t k = 1; k <= 12; ++k) {
      const auto [eps, delta] = group_privacy(0.8, 1e-11, k);
      CHECK(delta > prev);
      prev = delta;
    }
  }
}

TEST_CASE("max_requests evaluates the budget bound") {
  SUBCASE("reference point: (1, 1e-10, 30, 1) gives k = 23") {
    CHECK(max_requests(1.0, 1e-10, 30.0, 1.0) == 23);
    // cross-check: budget holds at 23 and fails at 24
    CHECK(group_privacy(1.0, 1e-10, 23).second <= 1.0);
    CHECK(group_privacy(1.0, 1e-10, 24).second > 1.0);
  }
  SUBCASE("alpha branch binds: alpha_b = eps gives k = 1") {
    CHECK(max_requests(2.5, 1e-12, 2.5, 1.0) == 1);
  }
  SUBCASE("doubling delta never increases k") {
    double delta = 1e-13;
    uint64_t prev = max_requests(1.0, delta, 30.0, 1.0);
    for (int i = 0; i < 8; ++i) {
      delta *= 2.0;
      const uint64_t k = max_requests(1.0, delta, 30.0, 1.0);
      CHECK(k <= prev);
      prev = k;
    }
  }
  SUBCASE("guarantee holds at the returned k across parameters") {
    for (double eps : {0.5, 1.0, 2.0, 4.0}) {
      for (double delta : {1e-10, 1e-12}) {
        const uint64_t k = max_requests(eps, delta, 30.0, 1.0);
        const auto [eps_g, delta_g] = group_privacy(eps, delta, k);
        CHECK(eps_g <= 30.0);
        CHECK(delta_g <= 1.0);
      }
    }
  }
  SUBCASE("infeasible parameters raise a budget error") {
    CHECK_THROWS_AS(max_requests(40.0, 1e-10, 30.0, 1.0), Error);
    try {
      max_requests(40.0, 1e-10, 30.0, 1.0);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kBudget);
    }
  }
  SUBCASE("delta must stay below beta_b") {
    CHECK_THROWS_AS(max_requests(1.0, 0.5, 30.0, 0.5), Error);
  }
}

TEST_CASE("noise calibration formula") {
  CHECK(calibrate_noise(1.0, 1e-10, 1) ==
        doctest::Approx(std::sqrt(2.0 * std::log(1.25e10))));
  CHECK(calibrate_noise(2.0, 1e-10, 4) ==
        doctest::Approx(std::sqrt(2.0 * std::log(1.25e10))));
  CHECK(calibrate_noise(1.0, 1e-10, 4) >
        calibrate_noise(1.0, 1e-10, 1));
}

TEST_CASE("dp training") {
  const auto d = clustered(2, 10, 3);
  auto g = build_uniform(d, 2, 5);
  g.edges = {{0, 1}, {1, 0}};  // neighbors exist, so DP branch is exercised
  const auto refined = refine(g, d);
  const auto params = init_shared(d.dim, 9);
  TrainConfig config;
  config.epochs = 3;
  config.batch_size = 8;
  config.seed = 21;

  SUBCASE("degenerate mechanism equals non-private training exactly") {
    DpOptions off;
    off.enabled = true;
    off.clip_norm = 0.0;          // disables clipping
    off.sigma_for_steps = nullptr;  // disables noise
    const auto plain = train_queries(params, d, refined, config);
    const auto degenerate =
        train_queries(params, d, refined, config, {}, off);
    CHECK(units_equal(plain.units, degenerate.units));
  }
  SUBCASE("seeded noise is deterministic") {
    const DpConfig dp{1.0, 1e-10, 1.0};
    const auto a = dp_train_queries(params, d, refined, config, dp);
    const auto b = dp_train_queries(params, d, refined, config, dp);
    CHECK(units_equal(a.units, b.units));
    const auto plain = train_queries(params, d, refined, config);
    CHECK_FALSE(units_equal(a.units, plain.units));
  }
  SUBCASE("clipped neighbor gradients never exceed the clip norm") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> gq(8), gv(8);
      for (auto& x : gq) x = 3.0 * rng.gaussian();
      for (auto& x : gv) x = 3.0 * rng.gaussian();
      const double c = 0.25 + rng.uniform();
      clip_to_norm({gq.data(), gq.size()}, {gv.data(), gv.size()}, c);
      double norm_sq = 0.0;
      for (double g : gq) norm_sq += g * g;
      for (double g : gv) norm_sq += g * g;
      CHECK(std::sqrt(norm_sq) <= c * (1.0 + 1e-12));
    }
    // Gradients already inside the ball are untouched.
    std::vector<double> gq{0.1, 0.0}, gv{0.0, 0.1};
    CHECK(clip_to_norm({gq.data(), 2}, {gv.data(), 2}, 1.0) == 1.0);
    CHECK(gq[0] == 0.1);

    // And training with a tiny clip visibly bounds the neighbor influence.
    DpOptions tiny;
    tiny.enabled = true;
    tiny.clip_norm = 1e-6;
    tiny.sigma_for_steps = nullptr;
    const auto clipped = train_queries(params, d, refined, config, {}, tiny);
    const auto plain = train_queries(params, d, refined, config);
    CHECK_FALSE(units_equal(clipped.units, plain.units));
  }
  SUBCASE("dp training is restricted to masked-BCE") {
    TrainConfig ce = config;
    ce.loss_mode = LossMode::kCliqueCe;
    CHECK_THROWS_AS(
        dp_train_queries(params, d, refine(build_bilevel(d, 1, 1, 2), d), ce,
                         DpConfig{}),
        Error);
  }
}

TEST_CASE("dp model underperforms the exact model on average") {
  // Paired runs over 3 seeds; heavy noise should not beat exact training.
  double exact_total = 0.0, dp_total = 0.0;
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    const auto d = clustered(4, 12, seed);
    const auto g = build_bilevel(d, 1, 2, seed);
    TrainConfig config;
    config.epochs = 6;
    config.batch_size = 8;
    config.seed = seed;
    const auto exact = fit_safe_model(d, g, config, LambdaPolicy::fixed(0.0));
    const auto noisy =
        fit_safe_model(d, g, config, LambdaPolicy::fixed(0.0), {},
                       make_dp_options(DpConfig{1.0, 1e-10, 1.0}));
    exact_total += evaluate_accuracy(exact, d);
    dp_total += evaluate_accuracy(noisy, d);
  }
  CHECK(dp_total <= exact_total);
}

TEST_CASE("accountant ledger") {
  const DpConfig dp{1.0, 1e-10, 1.0};

  SUBCASE("fresh accountant starts at zero") {
    Accountant a(dp, Budget{30.0, 1.0});
    CHECK(a.count(3) == 0);
    CHECK(a.max_k() == 23);
    CHECK(a.within_budget());
  }
  SUBCASE("k requests pass, request k+1 demands retraining") {
    Accountant a(dp, Budget{8.0, 1.0});  // alpha branch: max_k = 8
    REQUIRE(a.max_k() == 8);
    for (int i = 0; i < 8; ++i) {
      CHECK(a.record_forget(0) == ForgetBudgetStatus::kOk);
      CHECK(a.within_budget());
    }
    CHECK(a.record_forget(0) == ForgetBudgetStatus::kRetrainRequired);
    CHECK(a.count(0) == 8);
    a.reset(0);
    CHECK(a.count(0) == 0);
    CHECK(a.record_forget(0) == ForgetBudgetStatus::kOk);
  }
  SUBCASE("counts are tracked per node") {
    Accountant a(dp, Budget{2.0, 1.0});
    CHECK(a.record_forget(0) == ForgetBudgetStatus::kOk);
    CHECK(a.record_forget(1) == ForgetBudgetStatus::kOk);
    CHECK(a.record_forget(0) == ForgetBudgetStatus::kOk);
    CHECK(a.record_forget(0) == ForgetBudgetStatus::kRetrainRequired);
    CHECK(a.record_forget(1) == ForgetBudgetStatus::kOk);
  }
  SUBCASE("JSON round trip preserves the ledger") {
    Accountant a(dp, Budget{30.0, 1.0});
    (void)a.record_forget(2);
    (void)a.record_forget(2);
    (void)a.record_forget(7);
    const auto path =
        (std::filesystem::temp_directory_path() / "accountant.json").string();
    a.save(path);
    const auto b = Accountant::load(path);
    CHECK(b.max_k() == a.max_k());
    CHECK(b.count(2) == 2);
    CHECK(b.count(7) == 1);
    CHECK(b.to_json() == a.to_json());
    std::filesystem::remove(path);
  }
}

TEST_CASE("dp-mode forgetting leaves neighbor units untouched") {
  // Under budget, only the owning node's unit is refit; inbound neighbors
  // trained on the forgotten sample under DP stay byte-identical.
  const auto d = clustered(2, 10, 13);
  auto g = build_uniform(d, 2, 7);
  g.edges = {{0, 1}, {1, 0}};
  const auto refined = refine(g, d);
  const auto params = init_shared(d.dim, 11);
  TrainConfig config;
  config.epochs = 3;
  config.batch_size = 8;
  config.seed = 31;
  const DpConfig dp{1.0, 1e-10, 1.0};
  const auto trained = dp_train_queries(params, d, refined, config, dp);

  // Forget a sample owned by parent 0: refit only nodes of parent 0.
  const uint64_t victim = g.nodes[0].samples[0];
  const auto owner = refined.node_of_sample(victim);
  REQUIRE(owner.has_value());
  const auto owner_key = refined.key_of(*owner);

  const auto reduced = remove_samples(d, {victim});
  const auto reduced_graph = refine(graph_without_samples(g, {victim}),
                                    reduced);
  std::map<NodeKey, uint32_t> counters;
  counters[owner_key] = 1;
  const auto refit = train_nodes(params, reduced, reduced_graph, config,
                                 {owner_key}, counters, make_dp_options(dp));
  REQUIRE(refit.units.size() == 1);
  for (const auto& unit : trained.units) {
    if (unit.key() == owner_key) continue;
    // all other units never touched
    CHECK(unit.retrain_count == 0);
  }
}
