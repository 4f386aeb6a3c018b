#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mandarin/common.hpp"

namespace mandarin::eval {

struct BootstrapResult {
    double median = 0;
    double lo = 0;   // 2.5%
    double hi = 0;   // 97.5%
    long skipped = 0;
    std::vector<double> draws;
};

// Admission-level bootstrap: resamples admission ids with replacement and
// hands the metric the concatenated sample indices. Iterations that throw
// (e.g. a single-class resample) are redrawn up to 10 times, then skipped and
// counted. Per-iteration seeds derive from `seed + iteration`, so scheduling
// cannot change the draws.
BootstrapResult bootstrap_ci(const std::vector<std::string>& admission_of_sample,
                             const std::function<double(const std::vector<std::size_t>&)>& metric,
                             long iterations, std::uint64_t seed);

// Vector-valued variant: one resampling drives several metrics at once.
std::vector<BootstrapResult> bootstrap_vector_ci(
    const std::vector<std::string>& admission_of_sample,
    const std::function<std::vector<double>(const std::vector<std::size_t>&)>& metrics, long n_metrics,
    long iterations, std::uint64_t seed);

// Two-sided rank-sum test with midranks for ties. Exact enumeration of
// P(|W - mu| >= |W_obs - mu|) when the pooled size is at most 20; the
// tie-corrected normal approximation with continuity correction otherwise.
double wilcoxon_rank_sum(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace mandarin::eval
