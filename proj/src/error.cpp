#include "lorablend/error.hpp"

namespace lorablend {

std::string_view errc_name(Errc code) {
    switch (code) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::OffsetOverlap: return "OffsetOverlap";
    case Errc::UnknownDtype: return "UnknownDtype";
    case Errc::IoFailure: return "IoFailure";
    case Errc::ConvergenceFailure: return "ConvergenceFailure";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::OrphanedTensor: return "OrphanedTensor";
    case Errc::ShapeIncompatible: return "ShapeIncompatible";
    case Errc::RankShrinkRequested: return "RankShrinkRequested";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::AlphaOutOfRange: return "AlphaOutOfRange";
    case Errc::UnnormalizedScale: return "UnnormalizedScale";
    case Errc::NonMonotoneTable: return "NonMonotoneTable";
    case Errc::EmptyTable: return "EmptyTable";
    case Errc::EmptyAgeList: return "EmptyAgeList";
    case Errc::EmptyWorkSet: return "EmptyWorkSet";
    case Errc::InvalidParameter: return "InvalidParameter";
    case Errc::ParseFailure: return "ParseFailure";
    }
    return "Unknown";
}

Error::Error(Errc code, const std::string& what)
    : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

void fail(Errc code, const std::string& what) {
    throw Error(code, what);
}

} // namespace lorablend
