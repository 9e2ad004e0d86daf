#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nql {

enum class ErrorKind {
    NonStochasticRow,
    RewardOutOfRange,
    BadDiscount,
    ShapeMismatch,
    InvalidArgument,
    NonConvergence,
    Reducible,
    Periodic,
    FitDegenerate,
    WidthCapExceeded,
    DirectionMissing,
    SigmaSingular,
    ParseError,
    UnknownKey,
    MissingRequired,
    SchemaMismatch,
    NoData,
    Io,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::NonStochasticRow: return "NonStochasticRow";
    case ErrorKind::RewardOutOfRange: return "RewardOutOfRange";
    case ErrorKind::BadDiscount: return "BadDiscount";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::NonConvergence: return "NonConvergence";
    case ErrorKind::Reducible: return "Reducible";
    case ErrorKind::Periodic: return "Periodic";
    case ErrorKind::FitDegenerate: return "FitDegenerate";
    case ErrorKind::WidthCapExceeded: return "WidthCapExceeded";
    case ErrorKind::DirectionMissing: return "DirectionMissing";
    case ErrorKind::SigmaSingular: return "SigmaSingular";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::UnknownKey: return "UnknownKey";
    case ErrorKind::MissingRequired: return "MissingRequired";
    case ErrorKind::SchemaMismatch: return "SchemaMismatch";
    case ErrorKind::NoData: return "NoData";
    case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Config and input-file problems; the CLI maps these to exit code 1.
inline bool is_config_error(ErrorKind kind) {
    return kind == ErrorKind::ParseError || kind == ErrorKind::UnknownKey ||
           kind == ErrorKind::MissingRequired;
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

} // namespace nql
