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

#include "shardsafe/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <thread>

#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"

namespace shardsafe {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr char kModelMagic[4] = {'S', 'M', 'D', 'L'};
constexpr uint32_t kModelVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& value, const char* what) {
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) {
    throw data_error(std::string("truncated model file while reading ") + what);
  }
}

template <typename T>
void write_vec(std::ostream& out, const std::vector<T>& v) {
  write_pod(out, static_cast<uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_vec(std::istream& in, std::vector<T>& v, const char* what) {
  uint64_t n = 0;
  read_pod(in, n, what);
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) {
    throw data_error(std::string("truncated model file while reading ") + what);
  }
}

// Softmax over the finite entries; -inf scores get probability 0. Scores
// are standardized per sample first so the two branches (unbounded mean
// logits vs cosines in [-1, 1]) yield comparably concentrated
// probabilities and the lambda weight keeps its meaning. Standardizing is
// affine, so each branch's argmax is unchanged.
std::vector<double> softmax_scores(const std::vector<double>& scores) {
  std::vector<double> probs(scores.size(), 0.0);
  double mean = 0.0, var = 0.0;
  size_t finite = 0;
  for (double s : scores) {
    if (s == kNegInf) continue;
    mean += s;
    ++finite;
  }
  if (finite == 0) return probs;
  mean /= static_cast<double>(finite);
  for (double s : scores) {
    if (s == kNegInf) continue;
    var += (s - mean) * (s - mean);
  }
  const double std_dev = std::sqrt(var / static_cast<double>(finite));
  const double inv_scale = std_dev > 0.0 ? 1.0 / std_dev : 1.0;

  double max_score = kNegInf;
  for (double s : scores) max_score = std::max(max_score, s);
  double z = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] == kNegInf) continue;
    probs[i] = std::exp((scores[i] - max_score) * inv_scale);
    z += probs[i];
  }
  for (auto& p : probs) p /= z;
  return probs;
}

uint32_t argmax_label(const std::vector<double>& scores) {
  uint32_t best = 0;
  for (uint32_t k = 1; k < scores.size(); ++k) {
    if (scores[k] > scores[best]) best = k;
  }
  return best;
}

// Shared per-prediction state so batch evaluation reuses buffers.
struct Evaluator {
  explicit Evaluator(const SafeModel& model)
      : model_(model), params_(attn::Params<float>::from(model.attention)) {}

  std::vector<double> logits(std::span<const float> tokens) {
    if (model_.units.empty()) {
      throw data_error(
          "all adapter units are dropped; fall back to the prototype "
          "classifier");
    }
    const uint32_t d = params_.dim;
    attn::prepare_tokens<float, float>(params_, tokens.data(),
                                       model_.token_count, &ctx_);
    std::vector<double> sum(model_.num_classes, 0.0);
    std::vector<uint32_t> count(model_.num_classes, 0);
    for (const auto& unit : model_.units) {
      attn::query_forward<float>(params_, ctx_, unit.query.data(), &cache_);
      const double y =
          attn::dot<float>(unit.head.data(), cache_.attended.data(), d);
      sum[unit.label] += y;
      ++count[unit.label];
    }
    std::vector<double> out(model_.num_classes, kNegInf);
    for (uint32_t k = 0; k < model_.num_classes; ++k) {
      if (count[k] > 0) out[k] = sum[k] / count[k];
    }
    return out;
  }

  const SafeModel& model_;
  attn::Params<float> params_;
  attn::TokenContext<float> ctx_;
  attn::QueryCache<float> cache_;
};

Prediction predict_with(Evaluator& eval, const SafeModel& model,
                        std::span<const float> tokens) {
  Prediction pred;
  const auto proto_scores =
      prototype_scores(model.prototypes, tokens, model.token_count);
  if (model.units.empty()) {
    // Instant-forgetting fallback: serve pure prototypes.
    pred.lambda = 1.0;
    pred.probabilities = softmax_scores(proto_scores);
    pred.label = argmax_label(pred.probabilities);
    return pred;
  }
  pred.lambda = effective_lambda(model);
  const auto ens_scores = eval.logits(tokens);
  std::vector<char> covered(model.num_classes, 0);
  for (uint32_t k = 0; k < model.num_classes; ++k) {
    covered[k] = ens_scores[k] != kNegInf;
  }
  if (model.mix_raw_scores) {
    std::vector<double> mixed(model.num_classes, kNegInf);
    for (uint32_t k = 0; k < model.num_classes; ++k) {
      if (covered[k]) {
        mixed[k] = (1.0 - pred.lambda) * ens_scores[k] +
                   pred.lambda * proto_scores[k];
      } else if (pred.lambda > 0.0) {
        mixed[k] = proto_scores[k];
      }
    }
    pred.probabilities = std::move(mixed);
  } else {
    const auto ens_probs = softmax_scores(ens_scores);
    const auto proto_probs = softmax_scores(proto_scores);
    pred.probabilities =
        mix_branches(ens_probs, proto_probs, covered, pred.lambda);
  }
  pred.label = argmax_label(pred.probabilities);
  return pred;
}

}  // namespace

std::vector<double> mix_branches(const std::vector<double>& ensemble_probs,
                                 const std::vector<double>& proto_probs,
                                 const std::vector<char>& covered,
                                 double lambda) {
  std::vector<double> mixed(ensemble_probs.size(), 0.0);
  for (size_t k = 0; k < ensemble_probs.size(); ++k) {
    if (covered[k]) {
      mixed[k] =
          (1.0 - lambda) * ensemble_probs[k] + lambda * proto_probs[k];
    } else if (lambda > 0.0) {
      mixed[k] = proto_probs[k];
    }
  }
  return mixed;
}

const QueryUnit* SafeModel::find_unit(NodeKey key) const {
  auto it = std::lower_bound(units.begin(), units.end(), key,
                             [](const QueryUnit& u, NodeKey k) {
                               return u.key() < k;
                             });
  if (it == units.end() || it->key() != key) return nullptr;
  return &*it;
}

std::map<NodeKey, uint32_t> SafeModel::retrain_counts() const {
  std::map<NodeKey, uint32_t> counts;
  for (const auto& u : units) counts[u.key()] = u.retrain_count;
  for (const auto& t : tombstones) {
    counts[{t.parent, t.label}] = t.retrain_count;
  }
  return counts;
}

SafeModel fit_safe_model(const EmbeddingDataset& dataset,
                         const ShardGraph& graph, const TrainConfig& config,
                         LambdaPolicy lambda_policy,
                         const std::map<NodeKey, uint32_t>& retrain_counts,
                         const DpOptions& dp, unsigned jobs,
                         bool normalized_prototypes) {
  SafeModel model;
  model.attention =
      init_shared(dataset.dim, derive_seed(config.seed, "theta"));
  model.graph = refine(graph, dataset);
  model.num_classes = dataset.num_classes;
  model.token_count = dataset.token_count;
  model.train_config = config;
  model.lambda_policy = lambda_policy;
  model.graph_digest_value = graph_digest(graph);
  auto outcome = train_queries(model.attention, dataset, model.graph, config,
                               retrain_counts, dp, jobs);
  model.units = std::move(outcome.units);
  model.prototypes = fit_prototypes(dataset, normalized_prototypes);
  return model;
}

std::vector<double> ensemble_logits(const SafeModel& model,
                                    std::span<const float> tokens) {
  Evaluator eval(model);
  return eval.logits(tokens);
}

Prediction safe_predict(const SafeModel& model, std::span<const float> tokens) {
  Evaluator eval(model);
  return predict_with(eval, model, tokens);
}

double evaluate_accuracy(const SafeModel& model,
                         const EmbeddingDataset& dataset, unsigned jobs) {
  if (dataset.samples.empty()) return 0.0;
  if (jobs == 0) jobs = std::thread::hardware_concurrency();
  jobs = std::max(1u, std::min<unsigned>(jobs, dataset.samples.size()));
  std::atomic<size_t> next{0};
  std::atomic<size_t> correct{0};
  std::exception_ptr first_error = nullptr;
  std::mutex error_mutex;
  auto worker = [&] {
    Evaluator eval(model);
    try {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= dataset.samples.size()) return;
        const Sample& s = dataset.samples[i];
        const auto pred =
            predict_with(eval, model, {s.tokens.data(), s.tokens.size()});
        if (pred.label == s.label) correct.fetch_add(1);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (unsigned j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return static_cast<double>(correct.load()) /
         static_cast<double>(dataset.samples.size());
}

double effective_lambda(const SafeModel& model) {
  if (model.lambda_policy.mode == LambdaMode::kFixed) {
    return model.lambda_policy.fixed_value;
  }
  if (model.units.empty()) return 1.0;
  double total = 0.0;
  for (const auto& unit : model.units) {
    const auto idx = model.graph.index_of(unit.key());
    if (idx.has_value()) {
      total += static_cast<double>(model.graph.neighborhood_union(*idx).size());
    }
  }
  const double mean_size = total / static_cast<double>(model.units.size());
  return std::exp(-mean_size / 100.0);
}

SafeModel a_la_carte(const SafeModel& model, const EmbeddingDataset& dataset,
                     const std::vector<uint32_t>& forbidden_parents) {
  std::vector<NodeKey> forbidden;
  for (uint32_t parent : forbidden_parents) {
    if (!model.graph.parent().has_node(parent)) {
      throw data_error("forbidden shard " + std::to_string(parent) +
                       " is not in the graph");
    }
    for (size_t i = 0; i < model.graph.num_nodes(); ++i) {
      if (model.graph.nodes()[i].parent == parent) {
        forbidden.push_back(model.graph.key_of(i));
      }
    }
  }
  return a_la_carte_refined(model, dataset, forbidden);
}

SafeModel a_la_carte_refined(const SafeModel& model,
                             const EmbeddingDataset& dataset,
                             const std::vector<NodeKey>& forbidden_nodes) {
  std::set<uint32_t> forbidden_idx;
  std::set<uint32_t> forbidden_parents;
  for (const auto& key : forbidden_nodes) {
    const auto idx = model.graph.index_of(key);
    if (!idx.has_value()) {
      throw data_error("forbidden node (" + std::to_string(key.first) + "," +
                       std::to_string(key.second) + ") is not in the graph");
    }
    forbidden_idx.insert(static_cast<uint32_t>(*idx));
    forbidden_parents.insert(key.first);
  }

  SafeModel view = model;
  view.units.clear();
  for (const auto& unit : model.units) {
    const auto idx = model.graph.index_of(unit.key());
    if (!idx.has_value()) continue;
    if (forbidden_idx.count(static_cast<uint32_t>(*idx))) continue;
    bool touches_forbidden = false;
    for (uint32_t nb : model.graph.out_edges(*idx)) {
      if (forbidden_idx.count(nb)) {
        touches_forbidden = true;
        break;
      }
    }
    if (!touches_forbidden) view.units.push_back(unit);
  }
  if (view.units.empty()) {
    throw data_error("a-la-carte restriction leaves no permitted adapters");
  }

  // Permitted samples: everything outside the forbidden refined nodes.
  std::vector<uint64_t> forbidden_ids;
  for (uint32_t idx : forbidden_idx) {
    const auto& s = model.graph.nodes()[idx].samples;
    forbidden_ids.insert(forbidden_ids.end(), s.begin(), s.end());
  }
  const auto permitted = remove_samples(dataset, forbidden_ids);
  view.prototypes = fit_prototypes(permitted, model.prototypes.normalized);
  return view;
}

void save_model(const SafeModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.write(kModelMagic, 4);
  write_pod(out, kModelVersion);
  write_pod(out, model.attention.dim);
  write_pod(out, model.attention.seed);
  write_pod(out, model.token_count);
  write_pod(out, model.num_classes);

  const auto& cfg = model.train_config;
  write_pod(out, cfg.epochs);
  write_pod(out, cfg.learning_rate);
  write_pod(out, cfg.weight_decay);
  write_pod(out, cfg.beta1);
  write_pod(out, cfg.beta2);
  write_pod(out, cfg.adam_eps);
  write_pod(out, cfg.batch_size);
  write_pod(out, static_cast<uint8_t>(cfg.loss_mode));
  write_pod(out, cfg.seed);

  write_pod(out, static_cast<uint8_t>(model.lambda_policy.mode));
  write_pod(out, model.lambda_policy.fixed_value);
  write_pod(out, static_cast<uint8_t>(model.mix_raw_scores));

  write_pod(out, static_cast<uint8_t>(model.prototypes.normalized));
  write_pod(out, model.prototypes.dim);
  write_pod(out, model.prototypes.num_classes);
  write_vec(out, model.prototypes.counts);
  write_vec(out, model.prototypes.sums);

  write_pod(out, static_cast<uint64_t>(model.units.size()));
  for (const auto& u : model.units) {
    write_pod(out, u.parent);
    write_pod(out, u.label);
    write_pod(out, u.retrain_count);
    write_vec(out, u.query);
    write_vec(out, u.head);
  }
  write_pod(out, static_cast<uint64_t>(model.tombstones.size()));
  for (const auto& t : model.tombstones) {
    write_pod(out, t.parent);
    write_pod(out, t.label);
    write_pod(out, t.retrain_count);
  }

  const std::string graph_json = graph_to_json(model.graph.parent());
  write_pod(out, static_cast<uint64_t>(graph_json.size()));
  out.write(graph_json.data(),
            static_cast<std::streamsize>(graph_json.size()));
  write_pod(out, model.graph_digest_value);

  write_pod(out, static_cast<uint64_t>(model.graph.num_nodes()));
  for (const auto& node : model.graph.nodes()) {
    write_pod(out, node.parent);
    write_pod(out, node.label);
    write_vec(out, node.samples);
  }
  if (!out) throw data_error("write failed: " + path);
}

SafeModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kModelMagic, 4) != 0) {
    throw data_error("bad magic bytes, not a model file: " + path);
  }
  uint32_t version = 0;
  read_pod(in, version, "version");
  if (version != kModelVersion) {
    throw data_error("unsupported model version " + std::to_string(version));
  }
  SafeModel model;
  uint32_t dim = 0;
  uint64_t theta_seed = 0;
  read_pod(in, dim, "dim");
  read_pod(in, theta_seed, "theta seed");
  model.attention = init_shared(dim, theta_seed);
  read_pod(in, model.token_count, "token_count");
  read_pod(in, model.num_classes, "num_classes");

  auto& cfg = model.train_config;
  read_pod(in, cfg.epochs, "epochs");
  read_pod(in, cfg.learning_rate, "learning_rate");
  read_pod(in, cfg.weight_decay, "weight_decay");
  read_pod(in, cfg.beta1, "beta1");
  read_pod(in, cfg.beta2, "beta2");
  read_pod(in, cfg.adam_eps, "adam_eps");
  read_pod(in, cfg.batch_size, "batch_size");
  uint8_t loss_mode = 0;
  read_pod(in, loss_mode, "loss_mode");
  cfg.loss_mode = static_cast<LossMode>(loss_mode);
  read_pod(in, cfg.seed, "seed");

  uint8_t lambda_mode = 0;
  read_pod(in, lambda_mode, "lambda mode");
  model.lambda_policy.mode = static_cast<LambdaMode>(lambda_mode);
  read_pod(in, model.lambda_policy.fixed_value, "lambda value");
  uint8_t mix_raw = 0;
  read_pod(in, mix_raw, "mix flag");
  model.mix_raw_scores = mix_raw != 0;

  uint8_t normalized = 0;
  read_pod(in, normalized, "prototype flag");
  model.prototypes.normalized = normalized != 0;
  read_pod(in, model.prototypes.dim, "prototype dim");
  read_pod(in, model.prototypes.num_classes, "prototype classes");
  read_vec(in, model.prototypes.counts, "prototype counts");
  read_vec(in, model.prototypes.sums, "prototype sums");

  uint64_t n_units = 0;
  read_pod(in, n_units, "unit count");
  model.units.resize(n_units);
  for (auto& u : model.units) {
    read_pod(in, u.parent, "unit parent");
    read_pod(in, u.label, "unit label");
    read_pod(in, u.retrain_count, "unit counter");
    read_vec(in, u.query, "unit query");
    read_vec(in, u.head, "unit head");
  }
  uint64_t n_tombstones = 0;
  read_pod(in, n_tombstones, "tombstone count");
  model.tombstones.resize(n_tombstones);
  for (auto& t : model.tombstones) {
    read_pod(in, t.parent, "tombstone parent");
    read_pod(in, t.label, "tombstone label");
    read_pod(in, t.retrain_count, "tombstone counter");
  }

  uint64_t json_len = 0;
  read_pod(in, json_len, "graph json length");
  std::string graph_json(json_len, '\0');
  in.read(graph_json.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw data_error("truncated model file while reading graph json");
  ShardGraph parent = graph_from_json(graph_json);
  read_pod(in, model.graph_digest_value, "graph digest");

  uint64_t n_refined = 0;
  read_pod(in, n_refined, "refined node count");
  std::vector<RefinedNode> refined(n_refined);
  for (auto& node : refined) {
    read_pod(in, node.parent, "refined parent");
    read_pod(in, node.label, "refined label");
    read_vec(in, node.samples, "refined samples");
  }
  model.graph = RefinedShardGraph(std::move(parent), std::move(refined));
  return model;
}

}  // namespace shardsafe
