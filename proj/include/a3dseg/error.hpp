#pragma once

#include <stdexcept>
#include <string>

namespace a3dseg {

// All library errors carry the module that raised them so the CLI can
// report "[module] message" and map the category to an exit code.
class Error : public std::runtime_error {
public:
    Error(std::string module, const std::string& msg)
        : std::runtime_error("[" + module + "] " + msg), module_(std::move(module)) {}
    const std::string& module() const noexcept { return module_; }

private:
    std::string module_;
};

// Bad user-provided configuration (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

// A caller violated a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Dataset or manifest problems (missing masks, empty domains, bad paths).
class DatasetError : public Error {
public:
    using Error::Error;
};

// Filesystem / serialization failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Metric undefined for the given inputs (e.g. ASD on an empty mask).
class MetricError : public Error {
public:
    using Error::Error;
};

}  // namespace a3dseg
