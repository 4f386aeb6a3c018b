#include "mandarin/eval/isotonic.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <json.hpp>

namespace mandarin::eval {

using nlohmann::json;

CalibrationMap isotonic_fit(const std::vector<double>& probabilities, const std::vector<int>& labels,
                            WarningSink* warnings) {
    if (probabilities.size() != labels.size()) throw Error("isotonic_fit: size mismatch");
    if (probabilities.size() < 2) {
        warn(warnings, "isotonic_fit: fewer than 2 points; returning the identity map");
        return {};
    }
    // Aggregate ties on the raw score first; PAV then pools adjacent blocks
    // whose means violate monotonicity.
    std::map<double, std::pair<double, double>> by_score;  // score -> (sum_y, n)
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        auto& agg = by_score[probabilities[i]];
        agg.first += labels[i];
        agg.second += 1;
    }
    struct Block {
        double sum, n;
        std::size_t span;  // how many distinct scores it covers
    };
    std::vector<double> scores;
    std::vector<Block> stack;
    for (const auto& [score, agg] : by_score) {
        scores.push_back(score);
        Block b{agg.first, agg.second, 1};
        while (!stack.empty() && stack.back().sum * b.n >= b.sum * stack.back().n) {
            // prev mean >= cur mean: pool
            b.sum += stack.back().sum;
            b.n += stack.back().n;
            b.span += stack.back().span;
            stack.pop_back();
        }
        stack.push_back(b);
    }
    CalibrationMap map;
    map.breakpoints = scores;
    map.values.reserve(scores.size());
    for (const auto& b : stack) {
        const double v = b.sum / b.n;
        for (std::size_t i = 0; i < b.span; ++i) map.values.push_back(v);
    }
    return map;
}

double isotonic_apply(const CalibrationMap& map, double p) {
    if (map.identity()) return p;
    const auto& xs = map.breakpoints;
    const auto& ys = map.values;
    if (p <= xs.front()) return ys.front();
    if (p >= xs.back()) return ys.back();
    const auto it = std::upper_bound(xs.begin(), xs.end(), p);
    const std::size_t hi = static_cast<std::size_t>(it - xs.begin());
    const std::size_t lo = hi - 1;
    if (xs[hi] == xs[lo]) return ys[lo];
    const double f = (p - xs[lo]) / (xs[hi] - xs[lo]);
    return ys[lo] * (1.0 - f) + ys[hi] * f;
}

std::string CalibrationSet::key(const std::string& branch, const std::string& outcome, int horizon_h) {
    return branch + "/" + outcome + "/" + std::to_string(horizon_h);
}

const CalibrationMap* CalibrationSet::find(const std::string& branch, const std::string& outcome,
                                           int horizon_h) const {
    auto it = maps.find(key(branch, outcome, horizon_h));
    return it == maps.end() ? nullptr : &it->second;
}

void CalibrationSet::save(const std::string& path) const {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "calibration";
    json m = json::object();
    for (const auto& [k, map] : maps) m[k] = {{"breakpoints", map.breakpoints}, {"values", map.values}};
    j["maps"] = std::move(m);
    std::ofstream os(path);
    if (!os) throw Error("cannot write calibration to '" + path + "'");
    os << j.dump(2) << "\n";
}

CalibrationSet CalibrationSet::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("missing " + path + "; run `mandarin calibrate` first");
    json j = json::parse(is);
    if (j.value("schema_version", -1) != kSchemaVersion)
        throw Error("calibration artifact schema_version mismatch; re-run `mandarin calibrate`");
    CalibrationSet set;
    for (const auto& [k, m] : j.at("maps").items()) {
        CalibrationMap map;
        map.breakpoints = m.at("breakpoints").get<std::vector<double>>();
        map.values = m.at("values").get<std::vector<double>>();
        set.maps.emplace(k, std::move(map));
    }
    return set;
}

}  // namespace mandarin::eval
