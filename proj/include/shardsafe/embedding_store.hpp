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

#ifndef SHARDSAFE_EMBEDDING_STORE_HPP_
#define SHARDSAFE_EMBEDDING_STORE_HPP_

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace shardsafe {

// One cached embedding: a T x D token matrix produced by some frozen
// upstream encoder, flattened row-major.
struct Sample {
  uint64_t id = 0;
  uint32_t source = 0;  // origin tag (e.g. data source or domain)
  uint32_t label = 0;
  std::vector<float> tokens;  // token_count * dim floats
};

// Immutable after construction. Samples are kept sorted by id so every
// downstream iteration order is reproducible.
struct EmbeddingDataset {
  uint32_t num_classes = 0;
  uint32_t token_count = 0;
  uint32_t dim = 0;
  std::vector<Sample> samples;  // ascending id
  std::map<std::string, std::string> metadata;

  size_t size() const { return samples.size(); }

  // Binary search by id; nullptr when absent.
  const Sample* find(uint64_t id) const;

  std::span<const float> tokens_of(const Sample& s) const {
    return {s.tokens.data(), s.tokens.size()};
  }
};

struct SyntheticSpec {
  uint32_t num_classes = 0;
  uint32_t samples_per_class = 0;
  uint32_t token_count = 1;
  uint32_t dim = 0;
  double cluster_scale = 5.0;  // inter-class mean separation
  double noise_scale = 1.0;    // intra-class std
  uint32_t num_domains = 1;
  uint64_t seed = 0;
};

// Gaussian blobs around seeded random unit directions, optionally offset
// per domain. Pure function of the spec (seed included); class counts are
// balanced exactly and ids are assigned sequentially in (class, domain,
// index) order.
EmbeddingDataset generate_synthetic(const SyntheticSpec& spec);

// SEMB1 container (little-endian): magic "SEMB", version u32 = 1, N u64,
// K u32, T u32, D u32, then N records of {id u64, source u32, label u32,
// T*D f32}, followed by an optional metadata block (u32 count, then
// length-prefixed key/value strings).
void save_dataset(const EmbeddingDataset& dataset, const std::string& path);
EmbeddingDataset load_dataset(const std::string& path);

// CSV import, header: id,source,label,v0..v{T*D-1}. The value columns are
// split into token_count rows of inferred dim.
EmbeddingDataset import_csv(const std::string& path, uint32_t token_count,
                            uint32_t num_classes = 0);

// New dataset without the given samples; survivor order preserved.
// Unknown ids raise a data error naming the id.
EmbeddingDataset remove_samples(const EmbeddingDataset& dataset,
                                const std::vector<uint64_t>& ids);

}  // namespace shardsafe

#endif  // SHARDSAFE_EMBEDDING_STORE_HPP_
