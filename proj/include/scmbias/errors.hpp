#pragma once

#include <stdexcept>
#include <string>

namespace scmbias {

// Error categories map 1:1 onto the CLI exit codes.
enum class ErrorCode : int {
    validation = 2,  // bad arguments, schema/invariant violations, parse failures
    data       = 3,  // missing or unusable input data (empty pools, span misalignment)
    numeric    = 4,  // degenerate or non-finite numerics
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }
    int exit_code() const noexcept { return static_cast<int>(code_); }

private:
    ErrorCode code_;
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& what) : Error(ErrorCode::validation, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorCode::data, what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorCode::numeric, what) {}
};

}  // namespace scmbias
