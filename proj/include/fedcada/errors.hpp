#pragma once

#include <stdexcept>
#include <string>

namespace fedcada {

/// Invalid or inconsistent configuration (bad spec, wrong lengths, impossible partition).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value surfaced during training.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated input file.
class LoadError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Linear CKA is undefined when a centered matrix has zero norm.
class UndefinedSimilarity : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedcada
