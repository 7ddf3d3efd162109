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

#ifndef SHARDSAFE_ERROR_HPP_
#define SHARDSAFE_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace shardsafe {

// Error categories map 1:1 to CLI exit codes:
//   kUsage -> 1, kData -> 2, kBudget -> 3.
enum class ErrorKind { kUsage, kData, kBudget };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& what) {
  return Error(ErrorKind::kUsage, what);
}
inline Error data_error(const std::string& what) {
  return Error(ErrorKind::kData, what);
}
inline Error budget_error(const std::string& what) {
  return Error(ErrorKind::kBudget, what);
}

}  // namespace shardsafe

#endif  // SHARDSAFE_ERROR_HPP_
