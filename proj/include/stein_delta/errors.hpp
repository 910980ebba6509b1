#pragma once

#include <stdexcept>
#include <string>

namespace stein_delta {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct RangeError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct ArgumentError : Error {
    using Error::Error;
};
struct CapabilityError : Error {
    using Error::Error;
};
struct PreconditionError : Error {
    using Error::Error;
};

}  // namespace stein_delta
