/*
 Copyright 2026 The riskmpc Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#ifndef RISKMPC_ERROR_HPP
#define RISKMPC_ERROR_HPP

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace riskmpc {

// Base class for everything the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violations on user-supplied data (bad ensembles, bad specs).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Numerical failure. Carries the best iterate found so far.
class SolverError : public Error {
 public:
  SolverError(const std::string& what, std::vector<double> best_iterate = {},
              double best_value = 0.0)
      : Error(what), best_iterate_(std::move(best_iterate)), best_value_(best_value) {}

  const std::vector<double>& best_iterate() const noexcept { return best_iterate_; }
  double best_value() const noexcept { return best_value_; }

 private:
  std::vector<double> best_iterate_;
  double best_value_;
};

// A configured size cap (tree nodes, propagated atoms) was exceeded.
class ResourceError : public Error {
 public:
  using Error::Error;
};

}  // namespace riskmpc

#endif  // RISKMPC_ERROR_HPP
