#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ecoreg {

// Base for every library error. `ValidationError` and subclasses map to the
// CLI's "bad input" exit code; everything else is internal.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class SchemaError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConstantVariable : public ValidationError {
public:
    explicit ConstantVariable(std::string name)
        : ValidationError("variable '" + name + "' has zero weighted variance"),
          variable(std::move(name)) {}
    std::string variable;
};

class UnknownLevel : public ValidationError {
public:
    UnknownLevel(const std::string& variable, const std::string& level)
        : ValidationError("unknown level '" + level + "' for variable '" + variable + "'") {}
};

class NonFiniteInput : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class EmptySubset : public ValidationError {
public:
    EmptySubset() : ValidationError("mean embedding of an empty record subset") {}
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : ValidationError(file + ":" + std::to_string(line) + ": " + what), line(line) {}
    std::size_t line;
};

class SchemaMismatch : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class UnmappedGeography : public ValidationError {
public:
    explicit UnmappedGeography(const std::string& id)
        : ValidationError("geography '" + id + "' missing from crosswalk"), geo_id(id) {}
    std::string geo_id;
};

class MissingYear : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class EmptySubgroup : public ValidationError {
public:
    EmptySubgroup(const std::string& state, const std::string& group)
        : ValidationError("exit-poll subgroup '" + group + "' matches no records in state '" +
                          state + "'") {}
};

class NotCategorical : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class AlphaZero : public ValidationError {
public:
    AlphaZero() : ValidationError("lambda_max is undefined for alpha = 0") {}
};

class IncompatibleVersion : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class HashMismatch : public ValidationError {
public:
    using ValidationError::ValidationError;
};

}  // namespace ecoreg
