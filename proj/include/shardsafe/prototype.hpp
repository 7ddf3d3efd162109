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

#ifndef SHARDSAFE_PROTOTYPE_HPP_
#define SHARDSAFE_PROTOTYPE_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include "shardsafe/embedding_store.hpp"

namespace shardsafe {

// Nearest-class-mean classifier over pooled embeddings with O(1) exact
// sample removal. Per class it keeps the 64-bit sum of (optionally
// L2-normalized) pooled embeddings and a count; the prototype is sum/N.
// Fit and updated at inference side only; adapter training never reads it.
struct PrototypeBank {
  uint32_t dim = 0;
  uint32_t num_classes = 0;
  bool normalized = true;          // Appendix-style normalized embeddings
  std::vector<double> sums;        // num_classes * dim
  std::vector<uint64_t> counts;    // num_classes

  bool has_class(uint32_t label) const {
    return label < num_classes && counts[label] > 0;
  }
};

// Token mean over the T rows, in 64-bit.
std::vector<double> pooled_embedding(std::span<const float> tokens,
                                     uint32_t token_count, uint32_t dim);

PrototypeBank fit_prototypes(const EmbeddingDataset& dataset,
                             bool normalized = true);

// Cosine similarity between the pooled query and each class prototype
// (higher = closer). Classes with no samples score -infinity.
std::vector<double> prototype_scores(const PrototypeBank& bank,
                                     std::span<const float> tokens,
                                     uint32_t token_count);

// Constant-time exact removal: subtracts the sample's embedding from its
// class sum and decrements the count.
void remove_from_prototypes(PrototypeBank& bank, const Sample& sample,
                            uint32_t token_count);

// Interpolation weight exp(-(d * shard_size) / 100): the prototype branch
// dominates when the per-adapter training set d*|S| is small.
double mixing_weight(uint32_t d, uint64_t shard_size);

double max_abs_difference(const PrototypeBank& a, const PrototypeBank& b);

}  // namespace shardsafe

#endif  // SHARDSAFE_PROTOTYPE_HPP_
