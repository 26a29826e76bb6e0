#pragma once

#include <stdexcept>
#include <string>

namespace patchtraj {

// Bad arguments to a library call: shape mismatches, out-of-range parameters.
class invalid_input : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// A solver produced a non-finite value or otherwise broke down.
class numerical_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Pipeline configuration is unusable (missing fields, single-class folds, ...).
class config_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Input data on disk is missing or malformed.
class data_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw invalid_input(what);
}

} // namespace detail
} // namespace patchtraj
