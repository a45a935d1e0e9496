#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lorablend {

enum class Errc {
    // tensor-store
    MalformedHeader,
    OffsetOverlap,
    UnknownDtype,
    IoFailure,
    // linalg
    ConvergenceFailure,
    DimensionMismatch,
    // lora-model
    OrphanedTensor,
    ShapeIncompatible,
    RankShrinkRequested,
    // fusion-engine
    ShapeMismatch,
    AlphaOutOfRange,
    UnnormalizedScale,
    // age-schedule
    NonMonotoneTable,
    EmptyTable,
    EmptyAgeList,
    EmptyWorkSet,
    InvalidParameter,
    // text inputs (calibration tables, CLI lists)
    ParseFailure,
};

std::string_view errc_name(Errc code);

// Every failure raised by the library carries one of the codes above so the
// CLI can map it onto a stable exit status.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what);

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& what);

} // namespace lorablend
