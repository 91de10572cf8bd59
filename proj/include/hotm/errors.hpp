#pragma once

#include <stdexcept>
#include <string>

namespace hotm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or layout disagreement between tensors.
struct DimensionError : Error {
    using Error::Error;
};

// API misuse: non-scalar loss, detached backward target, layout mismatch.
struct ContractError : Error {
    using Error::Error;
};

// Invalid caller-supplied values (labels out of range, empty pools, ...).
struct InputError : Error {
    using Error::Error;
};

// A spec or generator cannot be realized (bad arch, centers do not fit).
struct ConstructionError : Error {
    using Error::Error;
};

// Persisted files disagree with their manifest.
struct IntegrityError : Error {
    using Error::Error;
};

// Unknown on-disk format version.
struct VersionError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Invalid run configuration (e.g. growth factor <= 1).
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite loss while training a network on real data.
struct TrainingError : Error {
    TrainingError(const std::string& msg, int epoch_index)
        : Error(msg), epoch(epoch_index) {}
    int epoch;
};

// Non-finite values inside the distillation loop.
struct DivergenceError : Error {
    DivergenceError(const std::string& msg, long long at)
        : Error(msg), step(at) {}
    long long step;
};

// Expert displacement too small to normalize against.
struct DegenerateSegmentError : Error {
    using Error::Error;
};

// A triangle leg shorter than eps; the caller treats the potential as absent.
struct DegenerateAngleError : Error {
    using Error::Error;
};

}  // namespace hotm
