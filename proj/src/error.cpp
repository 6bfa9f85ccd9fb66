#include "blockpipe/error.hpp"

namespace blockpipe {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::InvalidMask: return "invalid-mask";
    case ErrorKind::UnsupportedCombination: return "unsupported-combination";
    case ErrorKind::InvalidAppend: return "invalid-append";
    case ErrorKind::UndefinedSimilarity: return "undefined-similarity";
    case ErrorKind::NonTermination: return "non-termination";
    case ErrorKind::ProtocolViolation: return "protocol-violation";
    case ErrorKind::DivergedTraining: return "diverged-training";
    case ErrorKind::InvalidToken: return "invalid-token";
    case ErrorKind::IncompleteDecode: return "incomplete-decode";
    case ErrorKind::Config: return "config";
    }
    return "unknown";
}

void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, std::string(to_string(kind)) + ": " + what);
}

} // namespace blockpipe
