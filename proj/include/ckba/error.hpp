#pragma once

#include <stdexcept>
#include <string>

namespace ckba {

// Bad input, bad config, bad file. Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Something numerical did not work out. Maps to CLI exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateGramError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class DegenerateObservableError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class DegenerateSampleError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, int index)
        : NumericalError(what), index_(index) {}
    int index() const noexcept { return index_; }

private:
    int index_;
};

}  // namespace ckba
