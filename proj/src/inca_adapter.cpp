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

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <set>
#include <thread>

#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"

namespace shardsafe {
namespace {

constexpr double kPi = 3.14159265358979323846;

uint32_t count_for(const std::map<NodeKey, uint32_t>& counts, NodeKey key) {
  auto it = counts.find(key);
  return it == counts.end() ? 0u : it->second;
}

double cosine_lr(double peak, uint32_t epoch, uint32_t total) {
  return 0.5 * peak * (1.0 + std::cos(kPi * static_cast<double>(epoch) /
                                      static_cast<double>(total)));
}

// Decoupled-weight-decay adaptive moment update over a double master copy.
struct AdamState {
  std::vector<double> m, v;
  uint64_t t = 0;

  explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(const TrainConfig& cfg, double lr, const double* grad,
            std::vector<double>& param) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < param.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      param[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) +
                        cfg.weight_decay * param[i]);
    }
  }
};

std::vector<double> gaussian_vector(Rng& rng, size_t n, double std_dev) {
  std::vector<double> v(n);
  for (auto& x : v) x = std_dev * rng.gaussian();
  return v;
}

struct ResolvedSample {
  uint64_t id = 0;
  const Sample* sample = nullptr;
};

std::vector<ResolvedSample> resolve(const EmbeddingDataset& dataset,
                                    const std::vector<uint64_t>& ids) {
  std::vector<ResolvedSample> out;
  out.reserve(ids.size());
  for (uint64_t id : ids) {
    const Sample* s = dataset.find(id);
    if (s == nullptr) {
      throw data_error("training references unknown sample id " +
                       std::to_string(id));
    }
    out.push_back({id, s});
  }
  return out;
}

// A training group: one unit in masked-BCE mode, a whole refined clique
// in clique-CE mode. Members are refined node indices sorted by key.
struct TrainGroup {
  std::vector<uint32_t> members;
};

std::vector<TrainGroup> make_groups(const RefinedShardGraph& graph,
                                    const TrainConfig& config,
                                    const std::vector<uint32_t>& selected) {
  std::vector<TrainGroup> groups;
  if (config.loss_mode == LossMode::kMaskedBce) {
    for (uint32_t idx : selected) groups.push_back({{idx}});
    return groups;
  }
  if (!graph.is_disjoint_cliques()) {
    throw usage_error(
        "clique-CE training requires a refined graph that is a disjoint "
        "union of cliques; use masked-BCE for general graphs");
  }
  std::set<uint32_t> pending(selected.begin(), selected.end());
  while (!pending.empty()) {
    const uint32_t idx = *pending.begin();
    auto comp = graph.component_of(idx);
    for (uint32_t member : comp) pending.erase(member);
    groups.push_back({std::move(comp)});
  }
  return groups;
}

struct GroupResult {
  std::vector<QueryUnit> units;
  std::vector<NodeKey> skipped;
};

// Trains one group. All randomness is derived from (config.seed, lead key,
// retrain count) so the result depends only on the group's own data.
GroupResult train_group(const attn::Params<float>& params,
                        const EmbeddingDataset& dataset,
                        const RefinedShardGraph& graph,
                        const TrainConfig& config,
                        const std::map<NodeKey, uint32_t>& retrain_counts,
                        const DpOptions& dp, const TrainGroup& group) {
  GroupResult result;
  const uint32_t d = params.dim;
  const bool ce = config.loss_mode == LossMode::kCliqueCe;

  std::vector<NodeKey> keys;
  for (uint32_t idx : group.members) keys.push_back(graph.key_of(idx));
  const NodeKey lead = keys.front();
  const uint32_t lead_count = count_for(retrain_counts, lead);

  // Training ids: the (shared) neighborhood union of the group.
  std::vector<uint64_t> ids = graph.neighborhood_union(group.members.front());
  if (ce && group.members.size() > 1) {
    ids.clear();
    for (uint32_t idx : group.members) {
      const auto& s = graph.nodes()[idx].samples;
      ids.insert(ids.end(), s.begin(), s.end());
    }
    std::sort(ids.begin(), ids.end());
  }
  for (uint32_t idx : group.members) {
    if (graph.nodes()[idx].samples.empty()) {
      result.skipped.push_back(graph.key_of(idx));
    }
  }
  if (!result.skipped.empty() && !ce) return result;

  const auto samples = resolve(dataset, ids);
  // Owner of each training sample: the member whose node contains it
  // (member count in BCE mode is 1; non-members are negatives).
  std::vector<int32_t> owner(samples.size(), -1);
  for (size_t m = 0; m < group.members.size(); ++m) {
    const auto& node = graph.nodes()[group.members[m]];
    for (size_t i = 0; i < samples.size(); ++i) {
      if (std::binary_search(node.samples.begin(), node.samples.end(),
                             samples[i].id)) {
        owner[i] = static_cast<int32_t>(m);
      }
    }
  }
  if (ce) {
    for (size_t i = 0; i < samples.size(); ++i) {
      if (owner[i] < 0) {
        throw data_error("clique union sample " +
                         std::to_string(samples[i].id) +
                         " is owned by no clique member");
      }
    }
  }

  const size_t n_members = group.members.size();
  const char* init_tag = ce ? "clique-init" : "unit-init";
  const char* order_tag = ce ? "clique-order" : "unit-order";
  Rng init_rng(derive_seed(config.seed, init_tag, lead.first, lead.second,
                           lead_count));
  const double init_std = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<std::vector<double>> q_master(n_members), v_master(n_members);
  for (size_t m = 0; m < n_members; ++m) {
    q_master[m] = gaussian_vector(init_rng, d, init_std);
    v_master[m] = gaussian_vector(init_rng, d, init_std);
    // Parameters live as f32; the double master mirrors their rounding.
    for (auto& x : q_master[m]) x = static_cast<float>(x);
    for (auto& x : v_master[m]) x = static_cast<float>(x);
  }

  std::vector<AdamState> adam;
  adam.reserve(n_members);
  for (size_t m = 0; m < n_members; ++m) adam.emplace_back(2 * d);

  const uint32_t batch =
      config.batch_size == 0
          ? static_cast<uint32_t>(samples.size())
          : std::min<uint32_t>(config.batch_size,
                               static_cast<uint32_t>(samples.size()));
  const uint64_t steps_per_epoch = (samples.size() + batch - 1) / batch;
  const uint64_t total_steps = steps_per_epoch * config.epochs;

  double sigma = 0.0;
  Rng noise_rng(derive_seed(config.seed, "dp-noise", lead.first, lead.second,
                            lead_count));
  if (dp.enabled && dp.sigma_for_steps) sigma = dp.sigma_for_steps(total_steps);

  Rng order_rng(derive_seed(config.seed, order_tag, lead.first, lead.second,
                            lead_count));
  std::vector<uint32_t> order(samples.size());
  for (uint32_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<float> q_f32(d), v_f32(d);
  attn::TokenContext<float> ctx;
  attn::QueryCache<float> cache;
  std::vector<attn::QueryCache<float>> caches(n_members);
  std::vector<std::vector<double>> grad_q(n_members, std::vector<double>(d)),
      grad_v(n_members, std::vector<double>(d));
  std::vector<double> sample_gq(d), sample_gv(d);
  std::vector<double> logits(n_members);

  for (uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(config.learning_rate, epoch, config.epochs);
    order_rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t end = std::min(order.size(), start + batch);
      // Canonical accumulation order: ascending sample index (= id order).
      std::vector<uint32_t> batch_idx(order.begin() + start,
                                      order.begin() + end);
      std::sort(batch_idx.begin(), batch_idx.end());
      for (auto& g : grad_q) std::fill(g.begin(), g.end(), 0.0);
      for (auto& g : grad_v) std::fill(g.begin(), g.end(), 0.0);

      for (uint32_t si : batch_idx) {
        const Sample& s = *samples[si].sample;
        attn::prepare_tokens<float, float>(params, s.tokens.data(),
                                           dataset.token_count, &ctx);
        if (!ce) {
          for (uint32_t i = 0; i < d; ++i) {
            q_f32[i] = static_cast<float>(q_master[0][i]);
            v_f32[i] = static_cast<float>(v_master[0][i]);
          }
          attn::query_forward<float>(params, ctx, q_f32.data(), &cache);
          const double y = attn::dot<float>(v_f32.data(),
                                            cache.attended.data(), d);
          const double target = owner[si] >= 0 ? 1.0 : 0.0;
          const double loss = attn::bce_loss(y, target);
          if (!std::isfinite(loss)) {
            throw data_error("NaN/inf loss at node (" +
                             std::to_string(lead.first) + "," +
                             std::to_string(lead.second) + "), epoch " +
                             std::to_string(epoch) + ", sample " +
                             std::to_string(s.id));
          }
          const double d_logit = attn::stable_sigmoid(y) - target;
          const bool is_neighbor = owner[si] < 0;
          if (dp.enabled && is_neighbor) {
            std::fill(sample_gq.begin(), sample_gq.end(), 0.0);
            std::fill(sample_gv.begin(), sample_gv.end(), 0.0);
            attn::query_backward<float>(params, ctx, v_f32.data(), cache,
                                        d_logit, sample_gq.data(),
                                        sample_gv.data());
            if (dp.clip_norm > 0.0) {
              clip_to_norm({sample_gq.data(), sample_gq.size()},
                           {sample_gv.data(), sample_gv.size()},
                           dp.clip_norm);
            }
            for (uint32_t i = 0; i < d; ++i) {
              grad_q[0][i] += sample_gq[i];
              grad_v[0][i] += sample_gv[i];
            }
          } else {
            attn::query_backward<float>(params, ctx, v_f32.data(), cache,
                                        d_logit, grad_q[0].data(),
                                        grad_v[0].data());
          }
        } else {
          for (size_t m = 0; m < n_members; ++m) {
            for (uint32_t i = 0; i < d; ++i) {
              q_f32[i] = static_cast<float>(q_master[m][i]);
            }
            attn::query_forward<float>(params, ctx, q_f32.data(), &caches[m]);
            std::vector<float> head(d);
            for (uint32_t i = 0; i < d; ++i) {
              head[i] = static_cast<float>(v_master[m][i]);
            }
            logits[m] =
                attn::dot<float>(head.data(), caches[m].attended.data(), d);
          }
          double max_logit = logits[0];
          for (double y : logits) max_logit = std::max(max_logit, y);
          double z = 0.0;
          for (double y : logits) z += std::exp(y - max_logit);
          const double log_z = std::log(z) + max_logit;
          const double loss = log_z - logits[static_cast<size_t>(owner[si])];
          if (!std::isfinite(loss)) {
            throw data_error("NaN/inf CE loss in clique led by (" +
                             std::to_string(lead.first) + "," +
                             std::to_string(lead.second) + ")");
          }
          for (size_t m = 0; m < n_members; ++m) {
            const double p = std::exp(logits[m] - log_z);
            const double d_logit =
                p - (static_cast<size_t>(owner[si]) == m ? 1.0 : 0.0);
            std::vector<float> head(d);
            for (uint32_t i = 0; i < d; ++i) {
              head[i] = static_cast<float>(v_master[m][i]);
            }
            attn::query_backward<float>(params, ctx, head.data(), caches[m],
                                        d_logit, grad_q[m].data(),
                                        grad_v[m].data());
          }
        }
      }

      const double inv_batch = 1.0 / static_cast<double>(batch_idx.size());
      for (size_t m = 0; m < n_members; ++m) {
        if (dp.enabled && sigma > 0.0) {
          const double noise_std = sigma * dp.clip_norm;
          for (uint32_t i = 0; i < d; ++i) {
            grad_q[m][i] += noise_std * noise_rng.gaussian();
          }
          for (uint32_t i = 0; i < d; ++i) {
            grad_v[m][i] += noise_std * noise_rng.gaussian();
          }
        }
        std::vector<double> grad(2 * d);
        for (uint32_t i = 0; i < d; ++i) grad[i] = grad_q[m][i] * inv_batch;
        for (uint32_t i = 0; i < d; ++i) {
          grad[d + i] = grad_v[m][i] * inv_batch;
        }
        std::vector<double> param(2 * d);
        for (uint32_t i = 0; i < d; ++i) param[i] = q_master[m][i];
        for (uint32_t i = 0; i < d; ++i) param[d + i] = v_master[m][i];
        adam[m].step(config, lr, grad.data(), param);
        for (uint32_t i = 0; i < d; ++i) {
          q_master[m][i] = static_cast<float>(param[i]);
          v_master[m][i] = static_cast<float>(param[d + i]);
        }
      }
    }
  }

  for (size_t m = 0; m < n_members; ++m) {
    if (graph.nodes()[group.members[m]].samples.empty()) continue;
    QueryUnit unit;
    unit.parent = keys[m].first;
    unit.label = keys[m].second;
    unit.retrain_count = count_for(retrain_counts, keys[m]);
    unit.query.resize(d);
    unit.head.resize(d);
    for (uint32_t i = 0; i < d; ++i) {
      unit.query[i] = static_cast<float>(q_master[m][i]);
      unit.head[i] = static_cast<float>(v_master[m][i]);
    }
    result.units.push_back(std::move(unit));
  }
  return result;
}

TrainOutcome run_groups(const CrossAttentionParams& raw_params,
                        const EmbeddingDataset& dataset,
                        const RefinedShardGraph& graph,
                        const TrainConfig& config,
                        const std::map<NodeKey, uint32_t>& retrain_counts,
                        const DpOptions& dp,
                        const std::vector<TrainGroup>& groups, unsigned jobs) {
  if (config.epochs == 0) throw usage_error("epochs must be >= 1");
  if (!(config.learning_rate > 0.0)) throw usage_error("lr must be > 0");
  if (dp.enabled && config.loss_mode == LossMode::kCliqueCe) {
    throw usage_error("mixed-privacy training is defined for masked-BCE only");
  }
  if (dataset.dim != raw_params.dim) {
    throw usage_error("dataset dim " + std::to_string(dataset.dim) +
                      " does not match adapter dim " +
                      std::to_string(raw_params.dim));
  }
  const auto params = attn::Params<float>::from(raw_params);

  std::vector<GroupResult> results(groups.size());
  if (jobs == 0) jobs = std::thread::hardware_concurrency();
  jobs = std::max(1u, std::min<unsigned>(jobs, groups.size()));

  if (jobs <= 1 || groups.size() <= 1) {
    for (size_t g = 0; g < groups.size(); ++g) {
      results[g] = train_group(params, dataset, graph, config,
                               retrain_counts, dp, groups[g]);
    }
  } else {
    std::atomic<size_t> next{0};
    std::exception_ptr first_error = nullptr;
    std::mutex error_mutex;
    auto worker = [&] {
      for (;;) {
        const size_t g = next.fetch_add(1);
        if (g >= groups.size()) return;
        try {
          results[g] = train_group(params, dataset, graph, config,
                                   retrain_counts, dp, groups[g]);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> threads;
    for (unsigned j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  TrainOutcome outcome;
  for (auto& r : results) {
    for (auto& u : r.units) outcome.units.push_back(std::move(u));
    for (auto& k : r.skipped) outcome.skipped_empty_nodes.push_back(k);
  }
  std::sort(outcome.units.begin(), outcome.units.end(),
            [](const QueryUnit& a, const QueryUnit& b) {
              return a.key() < b.key();
            });
  std::sort(outcome.skipped_empty_nodes.begin(),
            outcome.skipped_empty_nodes.end());
  return outcome;
}

}  // namespace

double clip_to_norm(std::span<double> grad_query, std::span<double> grad_head,
                    double max_norm) {
  double norm_sq = 0.0;
  for (double g : grad_query) norm_sq += g * g;
  for (double g : grad_head) norm_sq += g * g;
  const double norm = std::sqrt(norm_sq);
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double scale = max_norm / norm;
  for (auto& g : grad_query) g *= scale;
  for (auto& g : grad_head) g *= scale;
  return scale;
}

CrossAttentionParams init_shared(uint32_t dim, uint64_t seed) {
  if (dim == 0) throw usage_error("adapter dim must be >= 1");
  CrossAttentionParams p;
  p.dim = dim;
  p.seed = seed;
  Rng rng(derive_seed(seed, "cross-attention-init"));
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(dim));
  const size_t n = static_cast<size_t>(dim) * dim;
  auto fill = [&](std::vector<float>& m) {
    m.resize(n);
    for (auto& x : m) x = static_cast<float>(std_dev * rng.gaussian());
  };
  fill(p.w_query);
  fill(p.w_key);
  fill(p.w_value);
  fill(p.w_out);
  p.ln_in_gain.assign(dim, 1.0f);
  p.ln_in_bias.assign(dim, 0.0f);
  p.ln_q_gain.assign(dim, 1.0f);
  p.ln_q_bias.assign(dim, 0.0f);
  p.ln_post_gain.assign(dim, 1.0f);
  p.ln_post_bias.assign(dim, 0.0f);
  return p;
}

TrainOutcome train_queries(const CrossAttentionParams& params,
                           const EmbeddingDataset& dataset,
                           const RefinedShardGraph& graph,
                           const TrainConfig& config,
                           const std::map<NodeKey, uint32_t>& retrain_counts,
                           const DpOptions& dp, unsigned jobs) {
  std::vector<uint32_t> all(graph.num_nodes());
  for (uint32_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto groups = make_groups(graph, config, all);
  return run_groups(params, dataset, graph, config, retrain_counts, dp, groups,
                    jobs);
}

TrainOutcome train_nodes(const CrossAttentionParams& params,
                         const EmbeddingDataset& dataset,
                         const RefinedShardGraph& graph,
                         const TrainConfig& config,
                         const std::vector<NodeKey>& node_keys,
                         const std::map<NodeKey, uint32_t>& retrain_counts,
                         const DpOptions& dp, unsigned jobs) {
  std::vector<uint32_t> selected;
  for (const auto& key : node_keys) {
    const auto idx = graph.index_of(key);
    if (!idx.has_value()) {
      throw data_error("no refined node (" + std::to_string(key.first) + "," +
                       std::to_string(key.second) + ")");
    }
    selected.push_back(static_cast<uint32_t>(*idx));
  }
  std::sort(selected.begin(), selected.end());
  selected.erase(std::unique(selected.begin(), selected.end()),
                 selected.end());
  const auto groups = make_groups(graph, config, selected);
  return run_groups(params, dataset, graph, config, retrain_counts, dp, groups,
                    jobs);
}

ForwardResult forward(const CrossAttentionParams& params,
                      std::span<const float> tokens, uint32_t token_count,
                      std::span<const float> queries,
                      std::span<const float> heads, size_t n_queries) {
  const uint32_t d = params.dim;
  if (token_count == 0 ||
      tokens.size() != static_cast<size_t>(token_count) * d) {
    throw usage_error("token matrix size does not match (T, D)");
  }
  if (queries.size() != n_queries * d || heads.size() != n_queries * d) {
    throw usage_error("query/head size does not match (n, D)");
  }
  const auto p = attn::Params<float>::from(params);
  attn::TokenContext<float> ctx;
  attn::prepare_tokens<float, float>(p, tokens.data(), token_count, &ctx);
  ForwardResult out;
  out.attended.resize(n_queries * d);
  out.logits.resize(n_queries);
  attn::QueryCache<float> cache;
  for (size_t i = 0; i < n_queries; ++i) {
    attn::query_forward<float>(p, ctx, queries.data() + i * d, &cache);
    std::copy(cache.attended.begin(), cache.attended.end(),
              out.attended.begin() + i * d);
    out.logits[i] = static_cast<float>(
        attn::dot<float>(heads.data() + i * d, cache.attended.data(), d));
  }
  return out;
}

GradCheckResult grad_check(const CrossAttentionParams& params,
                           std::span<const double> query,
                           std::span<const double> head,
                           std::span<const double> tokens,
                           uint32_t token_count, double target, double step) {
  const uint32_t d = params.dim;
  if (query.size() != d || head.size() != d ||
      tokens.size() != static_cast<size_t>(token_count) * d) {
    throw usage_error("grad_check: dimension mismatch");
  }
  const auto p = attn::Params<double>::from(params);
  attn::TokenContext<double> ctx;
  attn::prepare_tokens<double, double>(p, tokens.data(), token_count, &ctx);

  auto loss_at = [&](const double* q, const double* v) {
    attn::QueryCache<double> cache;
    attn::query_forward<double>(p, ctx, q, &cache);
    const double y = attn::dot<double>(v, cache.attended.data(), d);
    return attn::bce_loss(y, target);
  };

  std::vector<double> analytic_q(d, 0.0), analytic_v(d, 0.0);
  {
    attn::QueryCache<double> cache;
    attn::query_forward<double>(p, ctx, query.data(), &cache);
    const double y = attn::dot<double>(head.data(), cache.attended.data(), d);
    const double d_logit = attn::stable_sigmoid(y) - target;
    attn::query_backward<double>(p, ctx, head.data(), cache, d_logit,
                                 analytic_q.data(), analytic_v.data());
  }

  std::vector<double> q(query.begin(), query.end());
  std::vector<double> v(head.begin(), head.end());
  std::vector<double> numeric_q(d), numeric_v(d);
  for (uint32_t i = 0; i < d; ++i) {
    const double orig = q[i];
    q[i] = orig + step;
    const double hi = loss_at(q.data(), v.data());
    q[i] = orig - step;
    const double lo = loss_at(q.data(), v.data());
    q[i] = orig;
    numeric_q[i] = (hi - lo) / (2.0 * step);
  }
  for (uint32_t i = 0; i < d; ++i) {
    const double orig = v[i];
    v[i] = orig + step;
    const double hi = loss_at(q.data(), v.data());
    v[i] = orig - step;
    const double lo = loss_at(q.data(), v.data());
    v[i] = orig;
    numeric_v[i] = (hi - lo) / (2.0 * step);
  }

  GradCheckResult result;
  double max_abs_diff = 0.0;
  for (uint32_t i = 0; i < d; ++i) {
    max_abs_diff = std::max(max_abs_diff, std::abs(analytic_q[i] - numeric_q[i]));
    max_abs_diff = std::max(max_abs_diff, std::abs(analytic_v[i] - numeric_v[i]));
    result.max_abs_analytic = std::max(
        {result.max_abs_analytic, std::abs(analytic_q[i]), std::abs(analytic_v[i])});
    result.max_abs_numeric = std::max(
        {result.max_abs_numeric, std::abs(numeric_q[i]), std::abs(numeric_v[i])});
  }
  const double denom =
      std::max({result.max_abs_analytic, result.max_abs_numeric, 1e-8});
  result.max_rel_error = max_abs_diff / denom;
  return result;
}

}  // namespace shardsafe
