#pragma once

#include <array>
#include <map>

#include "mandarin/eval/metrics.hpp"
#include "mandarin/eval/stats.hpp"

namespace mandarin::eval {

struct FullMetrics {
    double auroc = 0, auprc = 0, sensitivity = 0, specificity = 0, ppv = 0, npv = 0, brier = 0, threshold = 0;
};

inline constexpr std::array<const char*, 8> kMetricNames = {"auroc", "auprc", "sensitivity", "specificity",
                                                            "ppv",   "npv",   "brier",       "threshold"};

FullMetrics full_metrics(const std::vector<double>& scores, const std::vector<int>& labels);
std::vector<double> metrics_vector(const FullMetrics& m);

struct SampleMeta {
    std::string admission_id;
    double age = 0;
    std::string sex;   // "M" / "F"
    std::string race;  // "Black" / "White" / other
};

struct SubgroupSpec {
    double age_cutoff = 65.0;
    long min_admissions = 20;
    long bootstrap_iterations = 100;
};

struct SubgroupRow {
    std::string dimension;
    std::string group;
    long n_admissions = 0;
    long n_samples = 0;
    bool sufficient = true;
    std::map<std::string, std::array<double, 3>> metrics;  // name -> {median, lo, hi}
};

// Age / sex / race partitions with bootstrap CIs per subgroup. Every sample
// lands in exactly one group per dimension.
std::vector<SubgroupRow> subgroup_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                          const std::vector<SampleMeta>& metas, const SubgroupSpec& spec,
                                          std::uint64_t seed);

}  // namespace mandarin::eval
