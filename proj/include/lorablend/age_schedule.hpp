#pragma once

#include "lorablend/fusion.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lorablend {

// Ages (years) represented by the young and old adapters.
struct AgeAnchors {
    double young_age = 15.0;
    double old_age = 75.0;

    // Throws InvalidParameter unless young_age < old_age (both finite).
    void validate() const;
};

struct CalibrationPoint {
    double age;
    double alpha;
};

// Monotone age -> alpha table: ages strictly increasing, alphas strictly
// decreasing (older means less weight on the young adapter).
class CalibrationTable {
public:
    // Throws EmptyTable, NonMonotoneTable or AlphaOutOfRange.
    explicit CalibrationTable(std::vector<CalibrationPoint> points);

    const std::vector<CalibrationPoint>& points() const noexcept { return points_; }
    bool covers(const AgeAnchors& anchors) const noexcept;

private:
    std::vector<CalibrationPoint> points_;
};

// One "age,alpha" pair per line; blank lines and '#' comments ignored.
CalibrationTable parse_calibration(std::string_view text);
CalibrationTable read_calibration_file(const std::filesystem::path& path);

// clamp((old - age) / (old - young), 0, 1)
double alpha_for_age(double age, const AgeAnchors& anchors);

// Piecewise-linear in age; clamped to the first/last alpha outside the table.
double apply_calibration(const CalibrationTable& table, double age);

struct SweepEntry {
    double target_age;
    double alpha;
    std::string output_name;
};

struct SweepPlan {
    std::vector<SweepEntry> entries; // ascending target_age, no duplicates
    AgeAnchors anchors;
    FusionMethod method = FusionMethod::Svd;
};

// "fused_age{age}_a{alpha with 3 decimals}", e.g. fused_age45_a0.500.
std::string sweep_output_name(double age, double alpha);

SweepPlan build_sweep(std::vector<double> ages, const AgeAnchors& anchors,
                      const std::optional<CalibrationTable>& table, FusionMethod method);

} // namespace lorablend
