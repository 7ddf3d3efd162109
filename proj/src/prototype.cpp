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

#include "shardsafe/prototype.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "shardsafe/error.hpp"

namespace shardsafe {
namespace {

// Pooled, optionally normalized embedding of one sample.
std::vector<double> sample_embedding(const Sample& s, uint32_t token_count,
                                     uint32_t dim, bool normalized) {
  auto e = pooled_embedding({s.tokens.data(), s.tokens.size()}, token_count,
                            dim);
  if (normalized) {
    double norm_sq = 0.0;
    for (double x : e) norm_sq += x * x;
    if (norm_sq == 0.0) {
      throw data_error("zero-norm embedding for sample " +
                       std::to_string(s.id));
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (auto& x : e) x *= inv;
  }
  return e;
}

}  // namespace

std::vector<double> pooled_embedding(std::span<const float> tokens,
                                     uint32_t token_count, uint32_t dim) {
  std::vector<double> pooled(dim, 0.0);
  for (uint32_t t = 0; t < token_count; ++t) {
    for (uint32_t i = 0; i < dim; ++i) {
      pooled[i] += static_cast<double>(tokens[static_cast<size_t>(t) * dim + i]);
    }
  }
  for (auto& x : pooled) x /= token_count;
  return pooled;
}

PrototypeBank fit_prototypes(const EmbeddingDataset& dataset,
                             bool normalized) {
  if (dataset.samples.empty()) {
    throw data_error("cannot fit prototypes on an empty dataset");
  }
  PrototypeBank bank;
  bank.dim = dataset.dim;
  bank.num_classes = dataset.num_classes;
  bank.normalized = normalized;
  bank.sums.assign(static_cast<size_t>(dataset.num_classes) * dataset.dim,
                   0.0);
  bank.counts.assign(dataset.num_classes, 0);
  for (const auto& s : dataset.samples) {
    const auto e =
        sample_embedding(s, dataset.token_count, dataset.dim, normalized);
    double* sum = bank.sums.data() +
                  static_cast<size_t>(s.label) * dataset.dim;
    for (uint32_t i = 0; i < dataset.dim; ++i) sum[i] += e[i];
    ++bank.counts[s.label];
  }
  return bank;
}

std::vector<double> prototype_scores(const PrototypeBank& bank,
                                     std::span<const float> tokens,
                                     uint32_t token_count) {
  auto q = pooled_embedding(tokens, token_count, bank.dim);
  double qn = 0.0;
  for (double x : q) qn += x * x;
  qn = std::sqrt(qn);
  std::vector<double> scores(bank.num_classes,
                             -std::numeric_limits<double>::infinity());
  if (qn == 0.0) return scores;
  for (uint32_t k = 0; k < bank.num_classes; ++k) {
    if (bank.counts[k] == 0) continue;
    const double* sum = bank.sums.data() + static_cast<size_t>(k) * bank.dim;
    double dot = 0.0, pn = 0.0;
    for (uint32_t i = 0; i < bank.dim; ++i) {
      dot += q[i] * sum[i];
      pn += sum[i] * sum[i];
    }
    pn = std::sqrt(pn);
    scores[k] = pn == 0.0 ? 0.0 : dot / (qn * pn);
  }
  return scores;
}

void remove_from_prototypes(PrototypeBank& bank, const Sample& sample,
                            uint32_t token_count) {
  if (sample.label >= bank.num_classes || bank.counts[sample.label] == 0) {
    throw data_error("prototype underflow: class " +
                     std::to_string(sample.label) + " has no samples left");
  }
  const auto e =
      sample_embedding(sample, token_count, bank.dim, bank.normalized);
  double* sum =
      bank.sums.data() + static_cast<size_t>(sample.label) * bank.dim;
  for (uint32_t i = 0; i < bank.dim; ++i) sum[i] -= e[i];
  --bank.counts[sample.label];
  if (bank.counts[sample.label] == 0) {
    // No samples left: pin the sum to exact zero so the class drops out
    // identically to a scratch refit.
    for (uint32_t i = 0; i < bank.dim; ++i) sum[i] = 0.0;
  }
}

double mixing_weight(uint32_t d, uint64_t shard_size) {
  return std::exp(-(static_cast<double>(d) * static_cast<double>(shard_size)) /
                  100.0);
}

double max_abs_difference(const PrototypeBank& a, const PrototypeBank& b) {
  if (a.dim != b.dim || a.num_classes != b.num_classes) {
    return std::numeric_limits<double>::infinity();
  }
  double max_diff = 0.0;
  for (size_t i = 0; i < a.sums.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(a.sums[i] - b.sums[i]));
  }
  for (size_t k = 0; k < a.counts.size(); ++k) {
    if (a.counts[k] != b.counts[k]) {
      return std::numeric_limits<double>::infinity();
    }
  }
  return max_diff;
}

}  // namespace shardsafe
