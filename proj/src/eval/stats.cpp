#include "mandarin/eval/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mandarin/rng.hpp"

namespace mandarin::eval {

namespace {

double quantile(std::vector<double> sorted, double q) {
    if (sorted.empty()) throw Error("quantile of empty draws");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double f = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - f) + sorted[hi] * f;
}

}  // namespace

std::vector<BootstrapResult> bootstrap_vector_ci(
    const std::vector<std::string>& admission_of_sample,
    const std::function<std::vector<double>(const std::vector<std::size_t>&)>& metrics, long n_metrics,
    long iterations, std::uint64_t seed) {
    if (admission_of_sample.empty()) throw Error("bootstrap: no samples");
    // Unique admissions in first-appearance order with their sample indices.
    std::vector<std::string> admissions;
    std::map<std::string, std::vector<std::size_t>> index_of;
    for (std::size_t i = 0; i < admission_of_sample.size(); ++i) {
        auto [it, fresh] = index_of.try_emplace(admission_of_sample[i]);
        if (fresh) admissions.push_back(admission_of_sample[i]);
        it->second.push_back(i);
    }

    std::vector<std::vector<double>> draws(n_metrics);
    long skipped = 0;
    for (long iter = 0; iter < iterations; ++iter) {
        Rng rng(seed + static_cast<std::uint64_t>(iter));
        bool done = false;
        for (int attempt = 0; attempt < 10 && !done; ++attempt) {
            std::vector<std::size_t> picked;
            for (std::size_t k = 0; k < admissions.size(); ++k) {
                const auto& adm = admissions[rng.uniform_index(admissions.size())];
                const auto& idx = index_of[adm];
                picked.insert(picked.end(), idx.begin(), idx.end());
            }
            try {
                std::vector<double> values = metrics(picked);
                if (static_cast<long>(values.size()) != n_metrics)
                    throw Error("bootstrap: metric count mismatch");
                for (long m = 0; m < n_metrics; ++m) draws[m].push_back(values[m]);
                done = true;
            } catch (const Error&) {
                // degenerate resample (e.g. one class): redraw
            }
        }
        if (!done) ++skipped;
    }

    std::vector<BootstrapResult> out(n_metrics);
    for (long m = 0; m < n_metrics; ++m) {
        BootstrapResult& r = out[m];
        r.skipped = skipped;
        r.draws = draws[m];
        if (r.draws.empty()) throw Error("bootstrap: every iteration failed");
        std::vector<double> sorted = r.draws;
        std::sort(sorted.begin(), sorted.end());
        r.median = quantile(sorted, 0.5);
        r.lo = quantile(sorted, 0.025);
        r.hi = quantile(sorted, 0.975);
    }
    return out;
}

BootstrapResult bootstrap_ci(const std::vector<std::string>& admission_of_sample,
                             const std::function<double(const std::vector<std::size_t>&)>& metric, long iterations,
                             std::uint64_t seed) {
    auto v = bootstrap_vector_ci(
        admission_of_sample,
        [&metric](const std::vector<std::size_t>& idx) { return std::vector<double>{metric(idx)}; }, 1, iterations,
        seed);
    return v.front();
}

namespace {

// Midranks of the pooled sample; returns (ranks, tie-correction term sum(t^3 - t)).
std::pair<std::vector<double>, double> midranks(const std::vector<double>& pooled_sorted) {
    const std::size_t n = pooled_sorted.size();
    std::vector<double> ranks(n);
    double tie_term = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && pooled_sorted[j] == pooled_sorted[i]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) ranks[k] = mid;
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    return {ranks, tie_term};
}

// Exact tail count over all C(n, k) subsets: #assignments with
// |sum(ranks) - mu| >= |observed - mu|.
void enumerate_subsets(const std::vector<double>& ranks, std::size_t next, long remaining, double sum, double mu,
                       double target, double& hits, double& total) {
    if (remaining == 0) {
        total += 1;
        if (std::abs(sum - mu) >= target - 1e-9) hits += 1;
        return;
    }
    if (ranks.size() - next < static_cast<std::size_t>(remaining)) return;
    enumerate_subsets(ranks, next + 1, remaining - 1, sum + ranks[next], mu, target, hits, total);
    enumerate_subsets(ranks, next + 1, remaining, sum, mu, target, hits, total);
}

}  // namespace

double wilcoxon_rank_sum(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw Error("wilcoxon_rank_sum: both samples must be nonempty");
    const std::size_t na = a.size(), nb = b.size(), n = na + nb;
    std::vector<std::pair<double, int>> pooled;
    pooled.reserve(n);
    for (double v : a) pooled.emplace_back(v, 0);
    for (double v : b) pooled.emplace_back(v, 1);
    std::sort(pooled.begin(), pooled.end(),
              [](const auto& x, const auto& y) { return x.first < y.first; });
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = pooled[i].first;
    auto [ranks, tie_term] = midranks(values);

    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (pooled[i].second == 0) w += ranks[i];
    const double mu = static_cast<double>(na) * static_cast<double>(n + 1) / 2.0;

    if (n <= 20) {
        double hits = 0, total = 0;
        enumerate_subsets(ranks, 0, static_cast<long>(na), 0.0, mu, std::abs(w - mu), hits, total);
        return hits / total;
    }

    const double nn = static_cast<double>(n);
    double var = (static_cast<double>(na) * static_cast<double>(nb) / 12.0) *
                 ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if (var <= 0) return 1.0;  // everything tied
    const double z = (std::abs(w - mu) - 0.5) / std::sqrt(var);
    if (z <= 0) return 1.0;
    const double p = std::erfc(z / std::sqrt(2.0));  // 2 * (1 - Phi(z))
    return std::min(1.0, p);
}

}  // namespace mandarin::eval
