#include "lorablend/age_schedule.hpp"

#include "lorablend/error.hpp"
#include "lorablend/format.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace lorablend {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::optional<double> to_number(std::string_view s) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

} // namespace

void AgeAnchors::validate() const {
    if (!std::isfinite(young_age) || !std::isfinite(old_age) || !(young_age < old_age)) {
        fail(Errc::InvalidParameter, "anchor ages must satisfy young < old (got " + format_double(young_age) + ", " +
                                         format_double(old_age) + ")");
    }
}

CalibrationTable::CalibrationTable(std::vector<CalibrationPoint> points) : points_(std::move(points)) {
    if (points_.empty()) fail(Errc::EmptyTable, "calibration table has no points");
    for (std::size_t i = 0; i < points_.size(); ++i) {
        const auto& p = points_[i];
        if (!std::isfinite(p.age)) fail(Errc::NonMonotoneTable, "non-finite age in calibration table");
        check_alpha(p.alpha);
        if (i > 0 && !(p.age > points_[i - 1].age)) {
            fail(Errc::NonMonotoneTable, "ages must be strictly increasing (" + format_double(points_[i - 1].age) +
                                             " then " + format_double(p.age) + ")");
        }
        if (i > 0 && !(p.alpha < points_[i - 1].alpha)) {
            fail(Errc::NonMonotoneTable, "alphas must be strictly decreasing (" +
                                             format_double(points_[i - 1].alpha) + " then " +
                                             format_double(p.alpha) + ")");
        }
    }
}

bool CalibrationTable::covers(const AgeAnchors& anchors) const noexcept {
    return points_.front().age <= anchors.young_age && points_.back().age >= anchors.old_age;
}

CalibrationTable parse_calibration(std::string_view text) {
    std::vector<CalibrationPoint> points;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto comma = line.find(',');
        std::optional<double> age;
        std::optional<double> alpha;
        if (comma != std::string_view::npos) {
            age = to_number(line.substr(0, comma));
            alpha = to_number(line.substr(comma + 1));
        }
        if (!age || !alpha) {
            fail(Errc::ParseFailure, "calibration line " + std::to_string(line_no) + ": expected 'age,alpha', got '" +
                                         std::string(line) + "'");
        }
        points.push_back({*age, *alpha});
    }
    return CalibrationTable(std::move(points));
}

CalibrationTable read_calibration_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::IoFailure, "cannot open calibration file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_calibration(ss.str());
}

double alpha_for_age(double age, const AgeAnchors& anchors) {
    anchors.validate();
    const double a = (anchors.old_age - age) / (anchors.old_age - anchors.young_age);
    return std::clamp(a, 0.0, 1.0);
}

double apply_calibration(const CalibrationTable& table, double age) {
    const auto& pts = table.points();
    if (age <= pts.front().age) return pts.front().alpha;
    if (age >= pts.back().age) return pts.back().alpha;
    const auto hi = std::upper_bound(pts.begin(), pts.end(), age,
                                     [](double a, const CalibrationPoint& p) { return a < p.age; });
    const auto lo = hi - 1;
    if (age == lo->age) return lo->alpha;
    const double t = (age - lo->age) / (hi->age - lo->age);
    return lo->alpha + t * (hi->alpha - lo->alpha);
}

std::string sweep_output_name(double age, double alpha) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", alpha);
    return "fused_age" + format_double(age) + "_a" + buf;
}

SweepPlan build_sweep(std::vector<double> ages, const AgeAnchors& anchors,
                      const std::optional<CalibrationTable>& table, FusionMethod method) {
    if (ages.empty()) fail(Errc::EmptyAgeList, "no target ages given");
    anchors.validate();
    for (double a : ages) {
        if (!std::isfinite(a)) fail(Errc::InvalidParameter, "target ages must be finite");
    }
    if (table && !table->covers(anchors)) {
        fail(Errc::InvalidParameter, "calibration table [" + format_double(table->points().front().age) + ", " +
                                         format_double(table->points().back().age) + "] does not cover anchors [" +
                                         format_double(anchors.young_age) + ", " + format_double(anchors.old_age) +
                                         "]");
    }
    std::sort(ages.begin(), ages.end());
    ages.erase(std::unique(ages.begin(), ages.end()), ages.end());

    SweepPlan plan;
    plan.anchors = anchors;
    plan.method = method;
    for (double age : ages) {
        const double alpha = table ? apply_calibration(*table, age) : alpha_for_age(age, anchors);
        plan.entries.push_back({age, alpha, sweep_output_name(age, alpha)});
    }
    return plan;
}

} // namespace lorablend
