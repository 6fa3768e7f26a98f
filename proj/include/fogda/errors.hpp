#pragma once

#include <stdexcept>
#include <string>

namespace fogda {

// Bad configuration or usage. CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File missing, unreadable, corrupt or failing its checksum. CLI exit code 3.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf in a loss or gradient. CLI exit code 4.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace fogda
