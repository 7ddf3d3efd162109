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
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "shardsafe/error.hpp"

namespace shardsafe {

void DpConfig::validate() const {
  if (!(epsilon > 0.0)) throw usage_error("epsilon must be > 0");
  if (!(delta > 0.0 && delta < 1.0)) {
    throw usage_error("delta must be in (0, 1)");
  }
  if (!(clip_norm > 0.0)) throw usage_error("clip norm must be > 0");
}

void Budget::validate() const {
  if (!(alpha_b > 0.0)) throw usage_error("alpha_b must be > 0");
  if (!(beta_b > 0.0 && beta_b <= 1.0)) {
    throw usage_error("beta_b must be in (0, 1]");
  }
}

double calibrate_noise(double epsilon, double delta, uint64_t steps) {
  if (!(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0)) {
    throw usage_error("noise calibration needs epsilon > 0, delta in (0,1)");
  }
  return std::sqrt(2.0 * std::log(1.25 / delta)) *
         std::sqrt(static_cast<double>(steps)) / epsilon;
}

std::pair<double, double> group_privacy(double epsilon, double delta,
                                        uint64_t k) {
  if (k == 0) throw usage_error("group privacy needs k >= 1");
  const double eps_g = static_cast<double>(k) * epsilon;
  const double delta_g =
      std::expm1(static_cast<double>(k) * epsilon) / std::expm1(epsilon) *
      delta;
  return {eps_g, delta_g};
}

uint64_t max_requests(double epsilon, double delta, double alpha_b,
                      double beta_b) {
  DpConfig{epsilon, delta, 1.0}.validate();
  Budget{alpha_b, beta_b}.validate();
  if (!(delta < beta_b)) {
    throw usage_error("delta must be well below beta_b");
  }
  const double alpha_branch = alpha_b / epsilon;
  const double beta_branch =
      std::log1p(beta_b * std::expm1(epsilon) / delta) / epsilon;
  const double bound = std::min(alpha_branch, beta_branch);
  if (bound < 1.0) {
    throw budget_error(
        "budget admits no stochastic forget request; use exact "
        "retraining-only mode");
  }
  return static_cast<uint64_t>(std::floor(bound));
}

TrainOutcome dp_train_queries(const CrossAttentionParams& params,
                              const EmbeddingDataset& dataset,
                              const RefinedShardGraph& graph,
                              const TrainConfig& config, const DpConfig& dp,
                              unsigned jobs) {
  dp.validate();
  return train_queries(params, dataset, graph, config, {}, make_dp_options(dp),
                       jobs);
}

DpOptions make_dp_options(const DpConfig& dp) {
  dp.validate();
  DpOptions options;
  options.enabled = true;
  options.clip_norm = dp.clip_norm;
  const double epsilon = dp.epsilon;
  const double delta = dp.delta;
  options.sigma_for_steps = [epsilon, delta](uint64_t steps) {
    return calibrate_noise(epsilon, delta, steps);
  };
  return options;
}

Accountant::Accountant(const DpConfig& config, const Budget& budget)
    : config_(config), budget_(budget) {
  config_.validate();
  budget_.validate();
  max_k_ = max_requests(config.epsilon, config.delta, budget.alpha_b,
                        budget.beta_b);
}

uint64_t Accountant::count(uint32_t node) const {
  auto it = counts_.find(node);
  return it == counts_.end() ? 0 : it->second;
}

ForgetBudgetStatus Accountant::record_forget(uint32_t node) {
  const uint64_t current = count(node);
  if (current + 1 > max_k_) return ForgetBudgetStatus::kRetrainRequired;
  counts_[node] = current + 1;
  return ForgetBudgetStatus::kOk;
}

void Accountant::reset(uint32_t node) { counts_.erase(node); }

void Accountant::reset_all() { counts_.clear(); }

bool Accountant::within_budget() const {
  for (const auto& [node, k] : counts_) {
    if (k == 0) continue;
    const auto [eps_g, delta_g] =
        group_privacy(config_.epsilon, config_.delta, k);
    if (eps_g > budget_.alpha_b || delta_g > budget_.beta_b) return false;
  }
  return true;
}

std::string Accountant::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["epsilon"] = config_.epsilon;
  j["delta"] = config_.delta;
  j["clip_norm"] = config_.clip_norm;
  j["alpha_b"] = budget_.alpha_b;
  j["beta_b"] = budget_.beta_b;
  j["max_k"] = max_k_;
  j["counts"] = nlohmann::json::object();
  for (const auto& [node, k] : counts_) {
    j["counts"][std::to_string(node)] = k;
  }
  return j.dump(2) + "\n";
}

Accountant Accountant::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw data_error(std::string("accountant JSON parse error: ") + e.what());
  }
  if (!j.contains("version") || j["version"].get<int>() != 1) {
    throw data_error("accountant JSON: missing or unsupported version");
  }
  DpConfig config{j.at("epsilon").get<double>(), j.at("delta").get<double>(),
                  j.value("clip_norm", 1.0)};
  Budget budget{j.at("alpha_b").get<double>(), j.at("beta_b").get<double>()};
  Accountant a(config, budget);
  if (j.contains("counts")) {
    for (auto it = j["counts"].begin(); it != j["counts"].end(); ++it) {
      a.counts_[static_cast<uint32_t>(std::stoul(it.key()))] =
          it.value().get<uint64_t>();
    }
  }
  if (j.at("max_k").get<uint64_t>() != a.max_k_) {
    throw data_error("accountant JSON: stored max_k is inconsistent with "
                     "(epsilon, delta, budget)");
  }
  return a;
}

void Accountant::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  out << to_json();
  if (!out) throw data_error("write failed: " + path);
}

Accountant Accountant::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

}  // namespace shardsafe
