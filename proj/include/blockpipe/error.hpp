#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace blockpipe {

enum class ErrorKind {
    InvalidInput,
    InvalidMask,
    UnsupportedCombination,
    InvalidAppend,
    UndefinedSimilarity,
    NonTermination,
    ProtocolViolation,
    DivergedTraining,
    InvalidToken,
    IncompleteDecode,
    Config,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

} // namespace blockpipe
