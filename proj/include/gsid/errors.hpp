#pragma once

#include <stdexcept>
#include <string>

namespace gsid {

// Bad argument values: non-finite inputs, empty sequences, wrong prefix length.
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Tensor/vector dimensions that do not line up.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Token, code or target index outside its valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Corpus, checkpoint or index files that are malformed or inconsistent.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unknown keys or invalid values in a run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss and could not continue.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gsid
