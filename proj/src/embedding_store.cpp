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

#include "shardsafe/embedding_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "shardsafe/error.hpp"
#include "shardsafe/rng.hpp"

namespace shardsafe {
namespace {

constexpr char kMagic[4] = {'S', 'E', 'M', 'B'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& value, const char* what) {
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw data_error(std::string("truncated payload while reading ") + what);
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const char* what) {
  uint32_t len = 0;
  read_pod(in, len, what);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw data_error(std::string("truncated payload while reading ") + what);
  return s;
}

// D-dimensional random unit direction.
std::vector<double> unit_direction(Rng& rng, uint32_t dim) {
  std::vector<double> v(dim);
  double norm_sq = 0.0;
  do {
    norm_sq = 0.0;
    for (auto& x : v) {
      x = rng.gaussian();
      norm_sq += x * x;
    }
  } while (norm_sq == 0.0);
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (auto& x : v) x *= inv;
  return v;
}

void validate_dataset(const EmbeddingDataset& d) {
  uint64_t prev_id = 0;
  bool first = true;
  for (const auto& s : d.samples) {
    if (!first && s.id <= prev_id) {
      throw data_error("duplicate or unsorted sample id " + std::to_string(s.id));
    }
    prev_id = s.id;
    first = false;
    if (s.label >= d.num_classes) {
      throw data_error("sample " + std::to_string(s.id) + " has label " +
                       std::to_string(s.label) + " >= num_classes " +
                       std::to_string(d.num_classes));
    }
    if (s.tokens.size() !=
        static_cast<size_t>(d.token_count) * static_cast<size_t>(d.dim)) {
      throw data_error("sample " + std::to_string(s.id) +
                       " has wrong token matrix size");
    }
    for (float v : s.tokens) {
      if (!std::isfinite(v)) {
        throw data_error("non-finite token value in sample " +
                         std::to_string(s.id));
      }
    }
  }
}

}  // namespace

const Sample* EmbeddingDataset::find(uint64_t id) const {
  auto it = std::lower_bound(
      samples.begin(), samples.end(), id,
      [](const Sample& s, uint64_t key) { return s.id < key; });
  if (it == samples.end() || it->id != id) return nullptr;
  return &*it;
}

EmbeddingDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes == 0 || spec.samples_per_class == 0 ||
      spec.token_count == 0 || spec.dim == 0 || spec.num_domains == 0) {
    throw usage_error("synthetic spec: all counts must be positive");
  }
  if (!(spec.noise_scale > 0.0)) {
    throw usage_error("synthetic spec: noise_scale must be > 0");
  }

  Rng mean_rng(derive_seed(spec.seed, "synthetic-means"));
  std::vector<std::vector<double>> means(spec.num_classes);
  for (auto& mu : means) {
    mu = unit_direction(mean_rng, spec.dim);
    for (auto& x : mu) x *= spec.cluster_scale;
  }

  Rng domain_rng(derive_seed(spec.seed, "synthetic-domains"));
  std::vector<std::vector<double>> offsets(spec.num_domains,
                                           std::vector<double>(spec.dim, 0.0));
  if (spec.num_domains > 1) {
    for (auto& off : offsets) {
      off = unit_direction(domain_rng, spec.dim);
      for (auto& x : off) x *= 0.5 * spec.cluster_scale;
    }
  }

  EmbeddingDataset out;
  out.num_classes = spec.num_classes;
  out.token_count = spec.token_count;
  out.dim = spec.dim;
  out.metadata["generator"] = "synthetic";
  out.metadata["classes"] = std::to_string(spec.num_classes);
  out.metadata["per_class"] = std::to_string(spec.samples_per_class);
  out.metadata["tokens"] = std::to_string(spec.token_count);
  out.metadata["dim"] = std::to_string(spec.dim);
  out.metadata["cluster_scale"] = std::to_string(spec.cluster_scale);
  out.metadata["noise_scale"] = std::to_string(spec.noise_scale);
  out.metadata["domains"] = std::to_string(spec.num_domains);
  out.metadata["seed"] = std::to_string(spec.seed);

  Rng sample_rng(derive_seed(spec.seed, "synthetic-samples"));
  uint64_t next_id = 0;
  const size_t tokens_len =
      static_cast<size_t>(spec.token_count) * static_cast<size_t>(spec.dim);
  out.samples.reserve(static_cast<size_t>(spec.num_classes) *
                      spec.samples_per_class);
  for (uint32_t c = 0; c < spec.num_classes; ++c) {
    for (uint32_t m = 0; m < spec.num_domains; ++m) {
      uint32_t count = spec.samples_per_class / spec.num_domains +
                       (m < spec.samples_per_class % spec.num_domains ? 1u : 0u);
      for (uint32_t j = 0; j < count; ++j) {
        Sample s;
        s.id = next_id++;
        s.source = m;
        s.label = c;
        s.tokens.resize(tokens_len);
        for (uint32_t t = 0; t < spec.token_count; ++t) {
          for (uint32_t i = 0; i < spec.dim; ++i) {
            const double v = means[c][i] + offsets[m][i] +
                             spec.noise_scale * sample_rng.gaussian();
            s.tokens[static_cast<size_t>(t) * spec.dim + i] =
                static_cast<float>(v);
          }
        }
        out.samples.push_back(std::move(s));
      }
    }
  }
  return out;
}

void save_dataset(const EmbeddingDataset& dataset, const std::string& path) {
  validate_dataset(dataset);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<uint64_t>(dataset.samples.size()));
  write_pod(out, dataset.num_classes);
  write_pod(out, dataset.token_count);
  write_pod(out, dataset.dim);
  for (const auto& s : dataset.samples) {
    write_pod(out, s.id);
    write_pod(out, s.source);
    write_pod(out, s.label);
    out.write(reinterpret_cast<const char*>(s.tokens.data()),
              static_cast<std::streamsize>(s.tokens.size() * sizeof(float)));
  }
  write_pod(out, static_cast<uint32_t>(dataset.metadata.size()));
  for (const auto& [k, v] : dataset.metadata) {
    write_string(out, k);
    write_string(out, v);
  }
  if (!out) throw data_error("write failed: " + path);
}

EmbeddingDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw data_error("bad magic bytes, not a SEMB1 file: " + path);
  }
  uint32_t version = 0;
  read_pod(in, version, "version");
  if (version != kVersion) {
    throw data_error("unsupported SEMB version " + std::to_string(version));
  }
  uint64_t n = 0;
  EmbeddingDataset d;
  read_pod(in, n, "record count");
  read_pod(in, d.num_classes, "num_classes");
  read_pod(in, d.token_count, "token_count");
  read_pod(in, d.dim, "dim");
  const size_t tokens_len =
      static_cast<size_t>(d.token_count) * static_cast<size_t>(d.dim);
  d.samples.resize(n);
  std::unordered_set<uint64_t> seen;
  seen.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    Sample& s = d.samples[i];
    read_pod(in, s.id, "record id");
    read_pod(in, s.source, "record source");
    read_pod(in, s.label, "record label");
    s.tokens.resize(tokens_len);
    in.read(reinterpret_cast<char*>(s.tokens.data()),
            static_cast<std::streamsize>(tokens_len * sizeof(float)));
    if (!in) throw data_error("truncated payload in record " + std::to_string(i));
    if (!seen.insert(s.id).second) {
      throw data_error("duplicate sample id " + std::to_string(s.id));
    }
  }
  // Optional trailing metadata block.
  uint32_t meta_count = 0;
  in.read(reinterpret_cast<char*>(&meta_count), sizeof(meta_count));
  if (in) {
    for (uint32_t i = 0; i < meta_count; ++i) {
      std::string k = read_string(in, "metadata key");
      std::string v = read_string(in, "metadata value");
      d.metadata.emplace(std::move(k), std::move(v));
    }
  }
  std::sort(d.samples.begin(), d.samples.end(),
            [](const Sample& a, const Sample& b) { return a.id < b.id; });
  validate_dataset(d);
  return d;
}

EmbeddingDataset import_csv(const std::string& path, uint32_t token_count,
                            uint32_t num_classes) {
  if (token_count == 0) throw usage_error("token_count must be >= 1");
  std::ifstream in(path);
  if (!in) throw data_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw data_error("empty CSV: " + path);
  size_t value_columns = 0;
  {
    std::stringstream header(line);
    std::string col;
    std::vector<std::string> cols;
    while (std::getline(header, col, ',')) cols.push_back(col);
    if (cols.size() < 4 || cols[0] != "id" || cols[1] != "source" ||
        cols[2] != "label") {
      throw data_error("CSV header must start with id,source,label,v0,...");
    }
    value_columns = cols.size() - 3;
  }
  if (value_columns % token_count != 0) {
    throw data_error("CSV value column count not divisible by token_count");
  }
  EmbeddingDataset d;
  d.token_count = token_count;
  d.dim = static_cast<uint32_t>(value_columns / token_count);
  uint32_t max_label = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    Sample s;
    if (!std::getline(row, cell, ',')) throw data_error("short CSV row");
    s.id = std::stoull(cell);
    if (!std::getline(row, cell, ',')) throw data_error("short CSV row");
    s.source = static_cast<uint32_t>(std::stoul(cell));
    if (!std::getline(row, cell, ',')) throw data_error("short CSV row");
    s.label = static_cast<uint32_t>(std::stoul(cell));
    max_label = std::max(max_label, s.label);
    s.tokens.reserve(value_columns);
    while (std::getline(row, cell, ',')) {
      s.tokens.push_back(std::stof(cell));
    }
    if (s.tokens.size() != value_columns) {
      throw data_error("row for id " + std::to_string(s.id) +
                       " has wrong value count");
    }
    d.samples.push_back(std::move(s));
  }
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  std::sort(d.samples.begin(), d.samples.end(),
            [](const Sample& a, const Sample& b) { return a.id < b.id; });
  d.metadata["generator"] = "csv:" + path;
  validate_dataset(d);
  return d;
}

EmbeddingDataset remove_samples(const EmbeddingDataset& dataset,
                                const std::vector<uint64_t>& ids) {
  std::unordered_set<uint64_t> to_remove;
  to_remove.reserve(ids.size());
  for (uint64_t id : ids) {
    if (dataset.find(id) == nullptr) {
      throw data_error("cannot remove unknown sample id " + std::to_string(id));
    }
    to_remove.insert(id);
  }
  EmbeddingDataset out;
  out.num_classes = dataset.num_classes;
  out.token_count = dataset.token_count;
  out.dim = dataset.dim;
  out.metadata = dataset.metadata;
  out.samples.reserve(dataset.samples.size() - to_remove.size());
  for (const auto& s : dataset.samples) {
    if (!to_remove.count(s.id)) out.samples.push_back(s);
  }
  return out;
}

}  // namespace shardsafe
