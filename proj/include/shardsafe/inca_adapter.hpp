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

#ifndef SHARDSAFE_INCA_ADAPTER_HPP_
#define SHARDSAFE_INCA_ADAPTER_HPP_

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "shardsafe/embedding_store.hpp"
#include "shardsafe/shard_graph.hpp"

namespace shardsafe {

// Shared frozen single-head cross-attention block. Fully determined by
// (dim, seed): four D x D Gaussian projections with std 1/sqrt(D) and
// identity-initialized LayerNorms for inputs, queries, and output.
struct CrossAttentionParams {
  uint32_t dim = 0;
  uint64_t seed = 0;
  std::vector<float> w_query, w_key, w_value, w_out;  // D*D row-major
  std::vector<float> ln_in_gain, ln_in_bias;
  std::vector<float> ln_q_gain, ln_q_bias;
  std::vector<float> ln_post_gain, ln_post_bias;
};

CrossAttentionParams init_shared(uint32_t dim, uint64_t seed);

// Per refined node: learnable query and binary head. The retrain counter
// feeds the seed derivation so retrained units draw fresh streams.
struct QueryUnit {
  uint32_t parent = 0;
  uint32_t label = 0;
  uint32_t retrain_count = 0;
  std::vector<float> query, head;  // D each

  NodeKey key() const { return {parent, label}; }
};

enum class LossMode { kMaskedBce, kCliqueCe };

struct TrainConfig {
  uint32_t epochs = 30;
  double learning_rate = 0.05;  // cosine-annealed to 0
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint32_t batch_size = 32;  // 0 = full batch
  LossMode loss_mode = LossMode::kMaskedBce;
  uint64_t seed = 0;
};

// Mixed-privacy option: own-node samples contribute exact gradients,
// neighbor samples are per-sample clipped and the batch sum is
// Gaussian-noised. sigma_for_steps maps a unit's total step count to its
// noise multiplier. Only valid with masked-BCE training.
struct DpOptions {
  bool enabled = false;
  double clip_norm = 0.0;  // <= 0 disables clipping
  std::function<double(uint64_t steps)> sigma_for_steps;  // null -> sigma 0
};

// Rescales the joint (query, head) gradient to L2 norm <= max_norm;
// returns the factor applied (1 when already within the bound).
double clip_to_norm(std::span<double> grad_query, std::span<double> grad_head,
                    double max_norm);

struct TrainOutcome {
  std::vector<QueryUnit> units;              // sorted by (parent, label)
  std::vector<NodeKey> skipped_empty_nodes;  // nodes with no positives
};

// Trains one query/head pair per refined node. Each unit's schedule is a
// pure function of (config.seed, node key, retrain count) and its own
// neighborhood data, so retraining any subset reproduces scratch training
// byte-for-byte and samples outside a unit's neighborhood can never touch
// it. Clique-CE mode trains each refined clique jointly with softmax
// cross-entropy over the member logits; it requires the refined graph to
// be a disjoint union of cliques.
TrainOutcome train_queries(
    const CrossAttentionParams& params, const EmbeddingDataset& dataset,
    const RefinedShardGraph& graph, const TrainConfig& config,
    const std::map<NodeKey, uint32_t>& retrain_counts = {},
    const DpOptions& dp = {}, unsigned jobs = 0);

// Trains only the given nodes (expanded to whole cliques in CE mode).
TrainOutcome train_nodes(
    const CrossAttentionParams& params, const EmbeddingDataset& dataset,
    const RefinedShardGraph& graph, const TrainConfig& config,
    const std::vector<NodeKey>& node_keys,
    const std::map<NodeKey, uint32_t>& retrain_counts = {},
    const DpOptions& dp = {}, unsigned jobs = 0);

struct ForwardResult {
  std::vector<float> attended;  // n_queries * D
  std::vector<float> logits;    // n_queries
};

// Batched forward over a shared token matrix. Computing n queries in one
// call is arithmetically identical to n single-query calls.
ForwardResult forward(const CrossAttentionParams& params,
                      std::span<const float> tokens, uint32_t token_count,
                      std::span<const float> queries,
                      std::span<const float> heads, size_t n_queries);

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
};

// Analytic BCE gradient through the cross-attention vs central finite
// differences, both on the 64-bit path. The relative error is the max
// coordinate difference over the largest gradient magnitude.
GradCheckResult grad_check(const CrossAttentionParams& params,
                           std::span<const double> query,
                           std::span<const double> head,
                           std::span<const double> tokens,
                           uint32_t token_count, double target,
                           double step = 1e-3);

// -- Templated attention math -------------------------------------------
//
// Real = float is the production path (f32 buffers, f64 reductions);
// Real = double is the verification path used by grad_check.
namespace attn {

constexpr double kLayerNormEps = 1e-5;

template <typename Real>
struct Params {
  uint32_t dim = 0;
  std::vector<Real> w_query, w_key, w_value, w_out;
  std::vector<Real> ln_in_gain, ln_in_bias;
  std::vector<Real> ln_q_gain, ln_q_bias;
  std::vector<Real> ln_post_gain, ln_post_bias;

  static Params<Real> from(const CrossAttentionParams& p) {
    Params<Real> out;
    out.dim = p.dim;
    auto cast = [](const std::vector<float>& v) {
      return std::vector<Real>(v.begin(), v.end());
    };
    out.w_query = cast(p.w_query);
    out.w_key = cast(p.w_key);
    out.w_value = cast(p.w_value);
    out.w_out = cast(p.w_out);
    out.ln_in_gain = cast(p.ln_in_gain);
    out.ln_in_bias = cast(p.ln_in_bias);
    out.ln_q_gain = cast(p.ln_q_gain);
    out.ln_q_bias = cast(p.ln_q_bias);
    out.ln_post_gain = cast(p.ln_post_gain);
    out.ln_post_bias = cast(p.ln_post_bias);
    return out;
  }
};

template <typename Real>
struct LnCache {
  std::vector<Real> x_hat;
  double inv_std = 0.0;
};

template <typename Real>
void layer_norm(const Real* x, const Real* gain, const Real* bias, uint32_t d,
                Real* out, LnCache<Real>* cache) {
  double mean = 0.0;
  for (uint32_t i = 0; i < d; ++i) mean += static_cast<double>(x[i]);
  mean /= d;
  double var = 0.0;
  for (uint32_t i = 0; i < d; ++i) {
    const double dx = static_cast<double>(x[i]) - mean;
    var += dx * dx;
  }
  var /= d;
  const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  if (cache != nullptr) {
    cache->x_hat.resize(d);
    cache->inv_std = inv_std;
  }
  for (uint32_t i = 0; i < d; ++i) {
    const Real xh =
        static_cast<Real>((static_cast<double>(x[i]) - mean) * inv_std);
    if (cache != nullptr) cache->x_hat[i] = xh;
    out[i] = gain[i] * xh + bias[i];
  }
}

template <typename Real>
void layer_norm_backward(const Real* d_out, const Real* gain,
                         const LnCache<Real>& cache, uint32_t d, Real* d_x) {
  double mean_dxh = 0.0, mean_dxh_xh = 0.0;
  for (uint32_t i = 0; i < d; ++i) {
    const double dxh = static_cast<double>(d_out[i]) * gain[i];
    mean_dxh += dxh;
    mean_dxh_xh += dxh * static_cast<double>(cache.x_hat[i]);
  }
  mean_dxh /= d;
  mean_dxh_xh /= d;
  for (uint32_t i = 0; i < d; ++i) {
    const double dxh = static_cast<double>(d_out[i]) * gain[i];
    d_x[i] = static_cast<Real>(
        cache.inv_std *
        (dxh - mean_dxh - static_cast<double>(cache.x_hat[i]) * mean_dxh_xh));
  }
}

template <typename Real>
void mat_vec(const Real* m, const Real* v, uint32_t d, Real* out) {
  for (uint32_t r = 0; r < d; ++r) {
    double acc = 0.0;
    const Real* row = m + static_cast<size_t>(r) * d;
    for (uint32_t c = 0; c < d; ++c) {
      acc += static_cast<double>(row[c]) * static_cast<double>(v[c]);
    }
    out[r] = static_cast<Real>(acc);
  }
}

template <typename Real>
void mat_transpose_vec(const Real* m, const Real* v, uint32_t d, Real* out) {
  for (uint32_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (uint32_t r = 0; r < d; ++r) {
      acc += static_cast<double>(m[static_cast<size_t>(r) * d + c]) *
             static_cast<double>(v[r]);
    }
    out[c] = static_cast<Real>(acc);
  }
}

template <typename Real>
double dot(const Real* a, const Real* b, uint32_t d) {
  double acc = 0.0;
  for (uint32_t i = 0; i < d; ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

// Token-side precomputation shared by every query on the same sample.
template <typename Real>
struct TokenContext {
  uint32_t token_count = 0;
  uint32_t dim = 0;
  std::vector<Real> keys;    // T*D, W_k LN_in(z_t)
  std::vector<Real> values;  // T*D, W_v LN_in(z_t)
};

template <typename Real, typename In>
void prepare_tokens(const Params<Real>& p, const In* tokens,
                    uint32_t token_count, TokenContext<Real>* ctx) {
  const uint32_t d = p.dim;
  ctx->token_count = token_count;
  ctx->dim = d;
  ctx->keys.resize(static_cast<size_t>(token_count) * d);
  ctx->values.resize(static_cast<size_t>(token_count) * d);
  std::vector<Real> row(d), normed(d);
  for (uint32_t t = 0; t < token_count; ++t) {
    for (uint32_t i = 0; i < d; ++i) {
      row[i] = static_cast<Real>(tokens[static_cast<size_t>(t) * d + i]);
    }
    layer_norm<Real>(row.data(), p.ln_in_gain.data(), p.ln_in_bias.data(), d,
                     normed.data(), nullptr);
    mat_vec<Real>(p.w_key.data(), normed.data(), d,
                  ctx->keys.data() + static_cast<size_t>(t) * d);
    mat_vec<Real>(p.w_value.data(), normed.data(), d,
                  ctx->values.data() + static_cast<size_t>(t) * d);
  }
}

template <typename Real>
struct QueryCache {
  LnCache<Real> ln_q;
  std::vector<Real> q_normed;   // LN_q(q)
  std::vector<Real> q_proj;     // W_q q'
  std::vector<double> attn;     // T softmax weights
  std::vector<Real> context;    // sum_t attn_t * V_t
  std::vector<Real> out_proj;   // W_o context
  LnCache<Real> ln_post;
  std::vector<Real> attended;   // final e
};

template <typename Real>
void query_forward(const Params<Real>& p, const TokenContext<Real>& ctx,
                   const Real* q, QueryCache<Real>* cache) {
  const uint32_t d = p.dim;
  const uint32_t t_count = ctx.token_count;
  cache->q_normed.resize(d);
  cache->q_proj.resize(d);
  cache->attn.resize(t_count);
  cache->context.resize(d);
  cache->out_proj.resize(d);
  cache->attended.resize(d);

  layer_norm<Real>(q, p.ln_q_gain.data(), p.ln_q_bias.data(), d,
                   cache->q_normed.data(), &cache->ln_q);
  mat_vec<Real>(p.w_query.data(), cache->q_normed.data(), d,
                cache->q_proj.data());

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  double max_score = -1e300;
  std::vector<double> scores(t_count);
  for (uint32_t t = 0; t < t_count; ++t) {
    scores[t] = dot<Real>(cache->q_proj.data(),
                          ctx.keys.data() + static_cast<size_t>(t) * d, d) *
                scale;
    max_score = std::max(max_score, scores[t]);
  }
  double z = 0.0;
  for (uint32_t t = 0; t < t_count; ++t) {
    cache->attn[t] = std::exp(scores[t] - max_score);
    z += cache->attn[t];
  }
  for (uint32_t t = 0; t < t_count; ++t) cache->attn[t] /= z;

  for (uint32_t i = 0; i < d; ++i) {
    double acc = 0.0;
    for (uint32_t t = 0; t < t_count; ++t) {
      acc += cache->attn[t] *
             static_cast<double>(ctx.values[static_cast<size_t>(t) * d + i]);
    }
    cache->context[i] = static_cast<Real>(acc);
  }
  mat_vec<Real>(p.w_out.data(), cache->context.data(), d,
                cache->out_proj.data());
  layer_norm<Real>(cache->out_proj.data(), p.ln_post_gain.data(),
                   p.ln_post_bias.data(), d, cache->attended.data(),
                   &cache->ln_post);
}

// Gradient of (d_logit * logit) w.r.t. q and v, accumulated into grad_q
// and grad_v. Only the trainables receive gradients; theta stays frozen.
template <typename Real>
void query_backward(const Params<Real>& p, const TokenContext<Real>& ctx,
                    const Real* v, const QueryCache<Real>& cache,
                    double d_logit, double* grad_q, double* grad_v) {
  const uint32_t d = p.dim;
  const uint32_t t_count = ctx.token_count;
  for (uint32_t i = 0; i < d; ++i) {
    grad_v[i] += d_logit * static_cast<double>(cache.attended[i]);
  }
  std::vector<Real> d_attended(d);
  for (uint32_t i = 0; i < d; ++i) {
    d_attended[i] = static_cast<Real>(d_logit * static_cast<double>(v[i]));
  }
  std::vector<Real> d_out_proj(d);
  layer_norm_backward<Real>(d_attended.data(), p.ln_post_gain.data(),
                            cache.ln_post, d, d_out_proj.data());
  std::vector<Real> d_context(d);
  mat_transpose_vec<Real>(p.w_out.data(), d_out_proj.data(), d,
                          d_context.data());

  std::vector<double> d_attn(t_count);
  double attn_dot = 0.0;
  for (uint32_t t = 0; t < t_count; ++t) {
    d_attn[t] = dot<Real>(ctx.values.data() + static_cast<size_t>(t) * d,
                          d_context.data(), d);
    attn_dot += cache.attn[t] * d_attn[t];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Real> d_q_proj(d, Real(0));
  for (uint32_t t = 0; t < t_count; ++t) {
    const double d_score = cache.attn[t] * (d_attn[t] - attn_dot) * scale;
    const Real* key = ctx.keys.data() + static_cast<size_t>(t) * d;
    for (uint32_t i = 0; i < d; ++i) {
      d_q_proj[i] =
          static_cast<Real>(static_cast<double>(d_q_proj[i]) +
                            d_score * static_cast<double>(key[i]));
    }
  }
  std::vector<Real> d_q_normed(d);
  mat_transpose_vec<Real>(p.w_query.data(), d_q_proj.data(), d,
                          d_q_normed.data());
  std::vector<Real> d_q(d);
  layer_norm_backward<Real>(d_q_normed.data(), p.ln_q_gain.data(), cache.ln_q,
                            d, d_q.data());
  for (uint32_t i = 0; i < d; ++i) grad_q[i] += static_cast<double>(d_q[i]);
}

inline double stable_sigmoid(double y) {
  if (y >= 0.0) return 1.0 / (1.0 + std::exp(-y));
  const double e = std::exp(y);
  return e / (1.0 + e);
}

// Numerically stable binary cross entropy of logit y against target t.
inline double bce_loss(double y, double t) {
  return std::max(y, 0.0) - t * y + std::log1p(std::exp(-std::abs(y)));
}

}  // namespace attn
}  // namespace shardsafe

#endif  // SHARDSAFE_INCA_ADAPTER_HPP_
