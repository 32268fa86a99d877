#pragma once

#include <stdexcept>
#include <string>

namespace wptsim {

/// Rejected input: physical-invariant or schema violation. Maps to CLI exit code 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Failure while simulating (non-finite state, commutation livelock, ...). Exit code 1.
class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace wptsim
