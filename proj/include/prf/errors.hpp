// Copyright (c) the prf project authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace prf {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration, unknown backend, invalid scale spec, ... (exit 2)
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable/malformed inputs: manifests, images, checkpoints. (exit 3)
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite training loss. Carries the step at which it was detected. (exit 4)
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& msg, long step)
      : Error(msg + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// API misuse: shape mismatches, unsatisfied preconditions, sequencing bugs.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace prf
