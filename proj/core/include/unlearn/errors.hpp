#pragma once

#include <map>
#include <stdexcept>
#include <string>

namespace unlearn {

// Precondition violated by a caller-supplied value.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// The model lacks something an operation needs (e.g. batch-norm layers).
class CapabilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Optimization produced a non-finite loss.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, long step, std::map<std::string, double> breakdown = {})
        : std::runtime_error(what), step_(step), breakdown_(std::move(breakdown)) {}

    // Epoch index for classifier training, step index for generator training.
    long step() const { return step_; }
    const std::map<std::string, double>& breakdown() const { return breakdown_; }

private:
    long step_;
    std::map<std::string, double> breakdown_;
};

// Candidate generation accepted too few samples.
class YieldError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace unlearn
