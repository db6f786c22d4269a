#pragma once

#include <stdexcept>
#include <string>

namespace fpg {

// Incompatible tensor shapes or conv geometry.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input outside an op's mathematical domain (e.g. log of a non-positive value).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: non-scalar backward root, gate matrix of the wrong size, ...
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters or configuration files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed genome/checkpoint/config text, or unreadable files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fpg
