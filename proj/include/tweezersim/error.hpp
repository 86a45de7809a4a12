#pragma once

#include <stdexcept>
#include <string>

namespace tweezersim {

// Raised when inputs violate a documented precondition or type invariant.
class InvalidArgument : public std::invalid_argument {
public:
    explicit InvalidArgument(const std::string& what) : std::invalid_argument(what) {}
};

// Raised when a numerical procedure (root find, least squares) fails.
class NumericalFailure : public std::runtime_error {
public:
    explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message)
{
    if (!condition)
        throw InvalidArgument(message);
}

} // namespace tweezersim
