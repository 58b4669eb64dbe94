#pragma once

#include <stdexcept>
#include <string>

namespace pbc {

// Incompatible extents between a layer, tensor, or patch and its input.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or insufficient data: bad archive bytes, unbalanced requests.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A file the operation depends on (checkpoint, archive) does not exist.
class MissingArtifact : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

} // namespace pbc
