#pragma once

#include <stdexcept>
#include <string>

namespace deltascope {

/// Coarse failure classes. The CLI maps them onto process exit codes.
enum class ErrorCategory {
    usage,      // bad arguments, unsupported configuration
    data,       // malformed or inconsistent input data
    numerical,  // non-finite values during training
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

#define DELTASCOPE_DEFINE_ERROR(Name, Category)                                \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(Category, what) {}      \
    }

DELTASCOPE_DEFINE_ERROR(UsageError, ErrorCategory::usage);
DELTASCOPE_DEFINE_ERROR(ConfigError, ErrorCategory::usage);
DELTASCOPE_DEFINE_ERROR(StateError, ErrorCategory::usage);
DELTASCOPE_DEFINE_ERROR(DimensionError, ErrorCategory::data);
DELTASCOPE_DEFINE_ERROR(FormatError, ErrorCategory::data);
DELTASCOPE_DEFINE_ERROR(ValidationError, ErrorCategory::data);
DELTASCOPE_DEFINE_ERROR(DegenerateDatasetError, ErrorCategory::data);
DELTASCOPE_DEFINE_ERROR(CorruptionError, ErrorCategory::data);
DELTASCOPE_DEFINE_ERROR(IoError, ErrorCategory::data);
DELTASCOPE_DEFINE_ERROR(NumericalError, ErrorCategory::numerical);

#undef DELTASCOPE_DEFINE_ERROR

}  // namespace deltascope
