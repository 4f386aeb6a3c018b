#pragma once

#include <map>
#include <string>
#include <vector>

#include "mandarin/common.hpp"

namespace mandarin::eval {

// Nondecreasing step function from pool-adjacent-violators, applied with
// linear interpolation between breakpoints and clamped at the ends.
struct CalibrationMap {
    std::vector<double> breakpoints;  // distinct raw scores, ascending
    std::vector<double> values;       // fitted values, nondecreasing in [0,1]

    bool identity() const { return breakpoints.empty(); }
};

CalibrationMap isotonic_fit(const std::vector<double>& probabilities, const std::vector<int>& labels,
                            WarningSink* warnings = nullptr);

double isotonic_apply(const CalibrationMap& map, double p);

// One map per branch/outcome/horizon, persisted as calibration.json.
struct CalibrationSet {
    // key: "<branch>/<outcome>/<horizon>"
    std::map<std::string, CalibrationMap> maps;

    static std::string key(const std::string& branch, const std::string& outcome, int horizon_h);
    const CalibrationMap* find(const std::string& branch, const std::string& outcome, int horizon_h) const;
    void save(const std::string& path) const;
    static CalibrationSet load(const std::string& path);
};

}  // namespace mandarin::eval
