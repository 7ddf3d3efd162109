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

#ifndef SHARDSAFE_DP_ENGINE_HPP_
#define SHARDSAFE_DP_ENGINE_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "shardsafe/inca_adapter.hpp"

namespace shardsafe {

struct DpConfig {
  double epsilon = 1.0;
  double delta = 1e-10;
  double clip_norm = 1.0;

  void validate() const;
};

struct Budget {
  double alpha_b = 30.0;
  double beta_b = 1.0;

  void validate() const;
};

// Gaussian-mechanism noise multiplier under basic composition over
// `steps` noisy steps: sigma = sqrt(2 ln(1.25/delta)) * sqrt(steps) / eps.
double calibrate_noise(double epsilon, double delta, uint64_t steps);

// Group privacy over k differing samples:
//   eps_g = k * eps,  delta_g = (e^{k eps} - 1) / (e^eps - 1) * delta.
std::pair<double, double> group_privacy(double epsilon, double delta,
                                        uint64_t k);

// Largest number of sequential forget requests the guarantee survives:
//   k = floor(min(alpha_b / eps, log(beta_b (e^eps - 1)/delta + 1) / eps)).
// Parameters yielding k < 1 raise a budget error.
uint64_t max_requests(double epsilon, double delta, double alpha_b,
                      double beta_b);

// Mixed-privacy training: own-node gradients exact, neighbor gradients
// clipped per sample and Gaussian-noised. Deterministic given seeds.
TrainOutcome dp_train_queries(const CrossAttentionParams& params,
                              const EmbeddingDataset& dataset,
                              const RefinedShardGraph& graph,
                              const TrainConfig& config, const DpConfig& dp,
                              unsigned jobs = 0);

DpOptions make_dp_options(const DpConfig& dp);

enum class ForgetBudgetStatus { kOk, kRetrainRequired };

// Per-shard ledger of served forget requests against the group-privacy
// budget. max_k is fixed at construction from (epsilon, delta, budget).
class Accountant {
 public:
  Accountant() = default;
  Accountant(const DpConfig& config, const Budget& budget);

  const DpConfig& config() const { return config_; }
  const Budget& budget() const { return budget_; }
  uint64_t max_k() const { return max_k_; }
  uint64_t count(uint32_t node) const;

  // Increments the node's count; when the budget would overflow, returns
  // kRetrainRequired without incrementing (the caller must run full exact
  // forgetting and reset).
  ForgetBudgetStatus record_forget(uint32_t node);
  void reset(uint32_t node);
  void reset_all();

  // Componentwise group_privacy(eps, delta, k) <= (alpha_b, beta_b) for
  // every recorded count.
  bool within_budget() const;

  std::string to_json() const;
  static Accountant from_json(const std::string& text);
  void save(const std::string& path) const;
  static Accountant load(const std::string& path);

 private:
  DpConfig config_;
  Budget budget_;
  uint64_t max_k_ = 0;
  std::map<uint32_t, uint64_t> counts_;
};

}  // namespace shardsafe

#endif  // SHARDSAFE_DP_ENGINE_HPP_
