#pragma once

#include <stdexcept>
#include <string>

namespace dlab {

// Exit codes used by the lab CLI.
enum class ExitCode : int {
    ok         = 0,
    usage      = 2,
    dependency = 3,
    data       = 4,
};

class LabError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const { return ExitCode::data; }
};

class ParameterError : public LabError {
public:
    using LabError::LabError;
    ExitCode exit_code() const override { return ExitCode::usage; }
};

class ShapeError : public LabError {
public:
    using LabError::LabError;
};

class OrderingError : public LabError {
public:
    using LabError::LabError;
};

class ConfigurationError : public LabError {
public:
    using LabError::LabError;
    ExitCode exit_code() const override { return ExitCode::usage; }
};

class AccountingError : public LabError {
public:
    using LabError::LabError;
};

class VocabularyError : public LabError {
public:
    using LabError::LabError;
};

class CapacityError : public LabError {
public:
    using LabError::LabError;
};

class DataError : public LabError {
public:
    using LabError::LabError;
};

class DependencyError : public LabError {
public:
    using LabError::LabError;
    ExitCode exit_code() const override { return ExitCode::dependency; }
};

class FormatError : public LabError {
public:
    FormatError(const std::string& what, std::size_t offset)
        : LabError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace dlab
