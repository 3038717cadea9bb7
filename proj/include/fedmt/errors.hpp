#pragma once

#include <stdexcept>
#include <string>

namespace fedmt {

// Bad user-supplied configuration (maps to CLI exit code 1).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Two parameter sets that should line up tensor-for-tensor do not.
class StructuralMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf showed up in a forward or backward pass.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A cluster assignment is not a partition of the client set.
class PartitionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateFeature : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace fedmt
