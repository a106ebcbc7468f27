// Copyright 2026 The DLF Authors. All Rights Reserved.
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

#pragma once

#include <stdexcept>
#include <string>

namespace dlf {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (shape, axis, sizes).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract violation: " + what) {}
};

// A mathematically invalid argument (log of non-positive, zero divisor, singular matrix).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain error: " + what) {}
};

// Invalid model / training configuration, detected at construction.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("configuration error: " + what) {}
};

// Non-finite value produced during evaluation or training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

// Malformed or missing input data (files, pixel ranges, checkpoints).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what) {}
};

// Bad command-line usage.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage error: " + what) {}
};

}  // namespace dlf
