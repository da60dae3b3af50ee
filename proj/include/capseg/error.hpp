#pragma once

#include <stdexcept>
#include <string>

namespace capseg {

/// Caller passed data that violates an operation's preconditions.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A configuration value is out of range or inconsistent with another.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A metric has no defined value for the input (e.g. Hausdorff distance
/// against an empty mask). Reported as missing, never as zero.
class UndefinedMetric : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Training produced a non-finite loss or gradient.
class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace capseg
