#pragma once

#include <stdexcept>
#include <string>

namespace xfake {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A caller-supplied value violates a documented precondition.
class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& what) : Error(what) {}
};

// An operation was called on an object in the wrong state
// (e.g. an ELBO loss requested from a non-variational model).
class InvalidState : public Error {
public:
    explicit InvalidState(const std::string& what) : Error(what) {}
};

// Filesystem / serialization failure.
class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what) {}
};

// Optimization produced a non-finite loss; carries the step index.
class NonFiniteLoss : public Error {
public:
    NonFiniteLoss(const std::string& what, int step) : Error(what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

}  // namespace xfake
