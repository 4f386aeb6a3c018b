#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "mandarin/eval/attribution.hpp"
#include "mandarin/eval/isotonic.hpp"
#include "mandarin/eval/metrics.hpp"
#include "mandarin/eval/stats.hpp"
#include "mandarin/eval/subgroup.hpp"
#include "mandarin/rng.hpp"

using namespace mandarin;
using namespace mandarin::eval;

namespace {

// O(n^2) oracle: all positive-negative pairs, ties worth half.
double auroc_pairwise_oracle(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            den += 1;
            if (s[i] > s[j]) num += 1;
            else if (s[i] == s[j]) num += 0.5;
        }
    return num / den;
}

std::pair<std::vector<double>, std::vector<int>> random_instance(Rng& rng, int max_n) {
    const int n = 2 + static_cast<int>(rng.uniform_index(max_n - 1));
    std::vector<double> s(n);
    std::vector<int> y(n);
    bool has0 = false, has1 = false;
    for (int i = 0; i < n; ++i) {
        // coarse grid forces plenty of ties
        s[i] = std::round(rng.uniform() * 8.0) / 8.0;
        y[i] = rng.bernoulli(0.4) ? 1 : 0;
        (y[i] ? has1 : has0) = true;
    }
    if (!has0) y[0] = 0;
    if (!has1) y[n - 1] = 1;
    return {s, y};
}

}  // namespace

TEST_CASE("auroc spot values") {
    CHECK(auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == doctest::Approx(1.0));
    CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75));
    CHECK(auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(auroc({0.1, 0.2}, {1, 1}), Error);
}

TEST_CASE("auroc equals the pairwise oracle on 1000 random tied instances") {
    Rng rng(1234);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto [s, y] = random_instance(rng, 200);
        const double fast = auroc(s, y);
        const double slow = auroc_pairwise_oracle(s, y);
        worst = std::max(worst, std::abs(fast - slow));
        REQUIRE(std::abs(fast - slow) <= 1e-9);
    }
    MESSAGE("max |rank-based - pairwise| = " << worst);
}

TEST_CASE("auprc spot values") {
    CHECK(auprc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == doctest::Approx(1.0));
    // scores [.9,.8,.7]: labels [1,0,1]: precisions at recall steps 1/1, then 2/3
    CHECK(auprc({0.9, 0.8, 0.7}, {1, 0, 1}) == doctest::Approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0)));
    CHECK_THROWS_AS(auprc({0.5}, {1}), Error);
}

TEST_CASE("youden threshold spot example and oracle") {
    auto m = youden_threshold({0.2, 0.3, 0.7, 0.9}, {0, 0, 1, 1});
    CHECK(m.sensitivity == doctest::Approx(1.0));
    CHECK(m.specificity == doctest::Approx(1.0));
    CHECK(m.youden_j == doctest::Approx(1.0));
    CHECK(m.threshold == doctest::Approx(0.5));
    CHECK_THROWS_AS(youden_threshold({0.1, 0.9}, {1, 1}), Error);

    // exhaustive-scan oracle on 100 random instances
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        auto [s, y] = random_instance(rng, 60);
        auto got = youden_threshold(s, y);
        // oracle scans every candidate: all observed values and +/- offsets
        std::vector<double> cands = s;
        for (double v : s) {
            cands.push_back(std::nextafter(v, -1e9));
            cands.push_back(std::nextafter(v, 1e9));
        }
        cands.push_back(-1e9);
        cands.push_back(1e9);
        double best_j = -2;
        for (double thr : cands) {
            long tp = 0, fp = 0, tn = 0, fn = 0;
            for (std::size_t i = 0; i < s.size(); ++i) {
                const bool pred = s[i] >= thr;
                if (y[i] && pred) ++tp;
                else if (y[i]) ++fn;
                else if (pred) ++fp;
                else ++tn;
            }
            const double j = static_cast<double>(tp) / (tp + fn) + static_cast<double>(tn) / (tn + fp) - 1.0;
            best_j = std::max(best_j, j);
        }
        REQUIRE(got.youden_j == doctest::Approx(best_j).epsilon(1e-12));
        // reported confusion is consistent with the reported threshold
        long tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const bool pred = s[i] >= got.threshold;
            if (y[i] && pred) ++tp;
            else if (y[i]) ++fn;
            else if (pred) ++fp;
            else ++tn;
        }
        REQUIRE(got.sensitivity == doctest::Approx(static_cast<double>(tp) / (tp + fn)));
        REQUIRE(got.specificity == doctest::Approx(static_cast<double>(tn) / (tn + fp)));
    }
}

TEST_CASE("brier spot values") {
    CHECK(brier({1, 0, 1}, {1, 0, 1}) == doctest::Approx(0.0));
    CHECK(brier({0.5, 0.5}, {0, 1}) == doctest::Approx(0.25));
    CHECK(brier({0.8, 0.3}, {1, 0}) == doctest::Approx(0.065));
}

TEST_CASE("calibration curve bins") {
    SUBCASE("single occupied bin") {
        auto bins = calibration_curve(std::vector<double>(20, 0.05), std::vector<int>(20, 0));
        REQUIRE(bins.size() == 1);
        CHECK(bins[0].count == 20);
        CHECK(bins[0].mean_probability == doctest::Approx(0.05));
    }
    SUBCASE("counts add up and calibrated draws hug the diagonal") {
        Rng rng(5);
        std::vector<double> p;
        std::vector<int> y;
        for (int i = 0; i < 20000; ++i) {
            const double q = rng.uniform();
            p.push_back(q);
            y.push_back(rng.bernoulli(q) ? 1 : 0);
        }
        auto bins = calibration_curve(p, y);
        long total = 0;
        for (const auto& b : bins) {
            total += b.count;
            CHECK(std::abs(b.mean_probability - b.event_rate) < 0.05);
        }
        CHECK(total == 20000);
    }
}

// ---- isotonic regression ---------------------------------------------------------

namespace {

// Brute-force oracle: over all partitions of the distinct-score groups into
// consecutive blocks, fit block means, keep monotone fits, take min SSE.
std::vector<double> isotonic_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::map<double, std::pair<double, double>> agg;  // score -> (sum, n)
    for (std::size_t i = 0; i < scores.size(); ++i) {
        agg[scores[i]].first += labels[i];
        agg[scores[i]].second += 1;
    }
    std::vector<std::pair<double, double>> groups(agg.size());  // (sum, n) in score order
    std::size_t gi = 0;
    for (const auto& [sc, a] : agg) groups[gi++] = a;
    const std::size_t g = groups.size();

    std::vector<double> best;
    double best_sse = 1e300;
    for (unsigned mask = 0; mask < (1u << (g - 1)); ++mask) {
        // bit i set -> block boundary between group i and i+1
        std::vector<double> fit(g);
        double sse = 0;
        bool monotone = true;
        std::size_t start = 0;
        double prev_mean = -1e300;
        for (std::size_t i = 0; i < g; ++i) {
            const bool boundary = i + 1 == g || (mask >> i) & 1u;
            if (!boundary) continue;
            double sum = 0, n = 0;
            for (std::size_t k = start; k <= i; ++k) {
                sum += groups[k].first;
                n += groups[k].second;
            }
            const double mean = sum / n;
            if (mean < prev_mean - 1e-12) monotone = false;
            for (std::size_t k = start; k <= i; ++k) fit[k] = mean;
            prev_mean = mean;
            start = i + 1;
        }
        if (!monotone) continue;
        // SSE against the group aggregates: sum over groups of n*mean_y^2 terms
        // reduces to sum n*(fit - mean_y)^2 + const; compare with the constant dropped
        for (std::size_t k = 0; k < g; ++k) {
            const double mean_y = groups[k].first / groups[k].second;
            sse += groups[k].second * (fit[k] - mean_y) * (fit[k] - mean_y);
        }
        if (sse < best_sse - 1e-12) {
            best_sse = sse;
            best = fit;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("isotonic fit basics") {
    SUBCASE("already monotone data is unchanged") {
        auto map = isotonic_fit({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1});
        REQUIRE(map.values.size() == 4);
        CHECK(map.values[0] == doctest::Approx(0.0));
        CHECK(map.values[3] == doctest::Approx(1.0));
    }
    SUBCASE("one violating pair pools to 0.5") {
        auto map = isotonic_fit({0.3, 0.7}, {1, 0});
        REQUIRE(map.values.size() == 2);
        CHECK(map.values[0] == doctest::Approx(0.5));
        CHECK(map.values[1] == doctest::Approx(0.5));
    }
    SUBCASE("fewer than two points returns identity with a warning") {
        WarningSink w;
        auto map = isotonic_fit({0.4}, {1}, &w);
        CHECK(map.identity());
        CHECK(w.size() == 1);
        CHECK(isotonic_apply(map, 0.123) == doctest::Approx(0.123));
    }
}

TEST_CASE("isotonic fit matches brute force over all monotone block fits (n <= 8)") {
    Rng rng(99);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_index(7));
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) {
            s[i] = std::round(rng.uniform() * 4.0) / 4.0;  // ties likely
            y[i] = rng.bernoulli(0.5) ? 1 : 0;
        }
        auto map = isotonic_fit(s, y);
        auto oracle = isotonic_bruteforce(s, y);
        REQUIRE(map.values.size() == oracle.size());
        for (std::size_t i = 0; i < oracle.size(); ++i)
            REQUIRE(map.values[i] == doctest::Approx(oracle[i]).epsilon(1e-9));
        for (std::size_t i = 1; i < map.values.size(); ++i) REQUIRE(map.values[i] >= map.values[i - 1] - 1e-12);
    }
}

TEST_CASE("isotonic apply interpolates and clamps") {
    CalibrationMap map;
    map.breakpoints = {0.2, 0.4, 0.8};
    map.values = {0.1, 0.5, 0.9};
    CHECK(isotonic_apply(map, 0.0) == doctest::Approx(0.1));
    CHECK(isotonic_apply(map, 1.0) == doctest::Approx(0.9));
    CHECK(isotonic_apply(map, 0.3) == doctest::Approx(0.3));
    CHECK(isotonic_apply(map, 0.6) == doctest::Approx(0.7));
    CHECK(isotonic_apply(map, 0.4) == doctest::Approx(0.5));
}

TEST_CASE("isotonic calibration never worsens Brier on the calibration sample") {
    Rng rng(321);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> raw;
        std::vector<int> y;
        for (int i = 0; i < 400; ++i) {
            const double u = rng.uniform();
            raw.push_back(u * u);  // deliberately miscalibrated
            y.push_back(rng.bernoulli(u) ? 1 : 0);
        }
        auto map = isotonic_fit(raw, y);
        std::vector<double> cal;
        for (double p : raw) cal.push_back(isotonic_apply(map, p));
        CHECK(brier(cal, y) <= brier(raw, y) + 1e-12);
    }
}

TEST_CASE("calibration set round trip") {
    CalibrationSet set;
    CalibrationMap m;
    m.breakpoints = {0.1, 0.9};
    m.values = {0.2, 0.8};
    set.maps[CalibrationSet::key("no_abd", "delirium", 12)] = m;
    const std::string path = (std::filesystem::temp_directory_path() / "mandarin_cal.json").string();
    set.save(path);
    auto back = CalibrationSet::load(path);
    const CalibrationMap* found = back.find("no_abd", "delirium", 12);
    REQUIRE(found != nullptr);
    CHECK(found->values == m.values);
    CHECK(back.find("coma", "delirium", 12) == nullptr);
    std::filesystem::remove(path);
}

// ---- bootstrap -------------------------------------------------------------------

TEST_CASE("bootstrap basics") {
    std::vector<std::string> adm;
    std::vector<double> value;
    for (int a = 0; a < 30; ++a)
        for (int k = 0; k < 3; ++k) {
            adm.push_back("a" + std::to_string(a));
            value.push_back(a);
        }
    SUBCASE("constant metric gives zero-width CI") {
        auto r = bootstrap_ci(adm, [](const std::vector<std::size_t>&) { return 0.42; }, 100, 7);
        CHECK(r.median == doctest::Approx(0.42));
        CHECK(r.lo == doctest::Approx(0.42));
        CHECK(r.hi == doctest::Approx(0.42));
        CHECK(r.skipped == 0);
    }
    SUBCASE("same seed gives identical draws") {
        auto metric = [&value](const std::vector<std::size_t>& idx) {
            double s = 0;
            for (auto i : idx) s += value[i];
            return s / static_cast<double>(idx.size());
        };
        auto r1 = bootstrap_ci(adm, metric, 100, 9);
        auto r2 = bootstrap_ci(adm, metric, 100, 9);
        CHECK(r1.draws == r2.draws);
        auto r3 = bootstrap_ci(adm, metric, 100, 10);
        CHECK(r1.draws != r3.draws);
    }
    SUBCASE("admissions move as blocks") {
        auto metric = [&](const std::vector<std::size_t>& idx) {
            // every admission contributes all 3 samples or none
            std::map<std::string, long> counts;
            for (auto i : idx) counts[adm[i]] += 1;
            for (const auto& [a, c] : counts) REQUIRE(c % 3 == 0);
            return 0.0;
        };
        bootstrap_ci(adm, metric, 20, 3);
    }
}

TEST_CASE("bootstrap AUROC CI covers the true value in >= 90 of 100 replications") {
    const double true_auroc = 0.5 * std::erfc(-1.0 / (std::sqrt(2.0) * std::sqrt(2.0)));  // Phi(1/sqrt(2))
    int covered = 0;
    for (int rep = 0; rep < 100; ++rep) {
        Rng rng(5000 + rep);
        std::vector<std::string> adm;
        std::vector<double> score;
        std::vector<int> label;
        for (int a = 0; a < 100; ++a)
            for (int k = 0; k < 5; ++k) {
                adm.push_back("a" + std::to_string(a));
                const int y = rng.bernoulli(0.4) ? 1 : 0;
                label.push_back(y);
                score.push_back(rng.normal() + (y ? 1.0 : 0.0));
            }
        auto r = bootstrap_ci(
            adm,
            [&](const std::vector<std::size_t>& idx) {
                std::vector<double> s;
                std::vector<int> y;
                for (auto i : idx) {
                    s.push_back(score[i]);
                    y.push_back(label[i]);
                }
                return auroc(s, y);
            },
            100, 6000 + rep);
        if (true_auroc >= r.lo && true_auroc <= r.hi) ++covered;
    }
    MESSAGE("coverage: " << covered << "/100 (nominal 95%)");
    CHECK(covered >= 90);
}

// ---- wilcoxon ---------------------------------------------------------------------

namespace {

// Independent exact enumeration via bitmask subsets (n + m <= 16 here).
double wilcoxon_exact_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t na = a.size(), n = a.size() + b.size();
    std::vector<double> pooled;
    pooled.insert(pooled.end(), a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    std::sort(pooled.begin(), pooled.end());
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && pooled[j] == pooled[i]) ++j;
        for (std::size_t k = i; k < j; ++k) rank[k] = 0.5 * (i + 1 + j);
        i = j;
    }
    // observed W: ranks of a's values within pooled (consume tied slots in order)
    std::vector<bool> used(n, false);
    double w_obs = 0;
    for (double v : a)
        for (std::size_t k = 0; k < n; ++k)
            if (!used[k] && pooled[k] == v) {
                used[k] = true;
                w_obs += rank[k];
                break;
            }
    const double mu = static_cast<double>(na) * (n + 1) / 2.0;
    const double target = std::abs(w_obs - mu);
    long hits = 0, total = 0;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcount(mask)) != na) continue;
        double w = 0;
        for (std::size_t k = 0; k < n; ++k)
            if ((mask >> k) & 1u) w += rank[k];
        ++total;
        if (std::abs(w - mu) >= target - 1e-9) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("wilcoxon rank sum") {
    SUBCASE("identical samples give p = 1") {
        std::vector<double> a{1, 2, 3, 4, 5};
        CHECK(wilcoxon_rank_sum(a, a) == doctest::Approx(1.0));
    }
    SUBCASE("fully separated samples of 10 are overwhelmingly significant") {
        std::vector<double> a, b;
        for (int i = 0; i < 10; ++i) {
            a.push_back(i);
            b.push_back(100 + i);
        }
        CHECK(wilcoxon_rank_sum(a, b) < 0.001);
    }
    SUBCASE("matches exact enumeration for n <= 8 within 0.01") {
        Rng rng(55);
        double worst = 0;
        for (int trial = 0; trial < 200; ++trial) {
            const int na = 2 + static_cast<int>(rng.uniform_index(7));
            const int nb = 2 + static_cast<int>(rng.uniform_index(7));
            std::vector<double> a(na), b(nb);
            for (auto& v : a) v = std::round(rng.uniform() * 6.0);
            for (auto& v : b) v = std::round(rng.uniform() * 6.0 + rng.uniform());
            const double lib = wilcoxon_rank_sum(a, b);
            const double oracle = wilcoxon_exact_oracle(a, b);
            worst = std::max(worst, std::abs(lib - oracle));
            REQUIRE(std::abs(lib - oracle) <= 0.01);
        }
        MESSAGE("max |library - exact oracle| = " << worst);
    }
    SUBCASE("large samples fall back to a sane normal approximation") {
        Rng rng(66);
        std::vector<double> a(40), b(40);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal() + 0.1;
        const double p = wilcoxon_rank_sum(a, b);
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
        std::vector<double> c(40);
        for (auto& v : c) v = rng.normal() + 3.0;
        CHECK(wilcoxon_rank_sum(a, c) < 1e-6);
    }
}

// ---- subgroups -----------------------------------------------------------------------

TEST_CASE("subgroup metrics partition the cohort") {
    Rng rng(88);
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<SampleMeta> metas;
    for (int a = 0; a < 120; ++a) {
        SampleMeta m;
        m.admission_id = "a" + std::to_string(a);
        m.age = 30 + rng.uniform_index(60);
        m.sex = rng.bernoulli(0.5) ? "M" : "F";
        m.race = rng.bernoulli(0.2) ? "Black" : (rng.bernoulli(0.8) ? "White" : "Other");
        for (int k = 0; k < 2; ++k) {
            metas.push_back(m);
            const int y = rng.bernoulli(0.3) ? 1 : 0;
            labels.push_back(y);
            scores.push_back(rng.uniform() + 0.4 * y);  // same signal in every group
        }
    }
    SubgroupSpec spec;
    auto rows = subgroup_metrics(scores, labels, metas, spec, 42);
    std::map<std::string, long> sample_sum, adm_sum;
    for (const auto& r : rows) {
        sample_sum[r.dimension] += r.n_samples;
        adm_sum[r.dimension] += r.n_admissions;
    }
    for (const auto& [dim, n] : sample_sum) CHECK(n == static_cast<long>(metas.size()));
    for (const auto& [dim, n] : adm_sum) CHECK(n == 120);

    // identical score distributions: group AUROC CIs overlap within a dimension
    for (const std::string dim : {"age", "sex"}) {
        std::vector<std::array<double, 3>> cis;
        for (const auto& r : rows)
            if (r.dimension == dim && r.sufficient) cis.push_back(r.metrics.at("auroc"));
        REQUIRE(cis.size() == 2);
        CHECK(cis[0][1] <= cis[1][2]);
        CHECK(cis[1][1] <= cis[0][2]);
    }

    SUBCASE("small groups are reported as insufficient") {
        SubgroupSpec strict;
        strict.min_admissions = 1000;
        auto rows2 = subgroup_metrics(scores, labels, metas, strict, 42);
        for (const auto& r : rows2) CHECK_FALSE(r.sufficient);
    }
}

// ---- integrated gradients --------------------------------------------------------------

TEST_CASE("midpoint IG is exact for linear maps") {
    Rng rng(11);
    const long d = 12;
    Eigen::ArrayXd w(d), x(d);
    for (long i = 0; i < d; ++i) {
        w[i] = rng.uniform(-2, 2);
        x[i] = rng.uniform(-2, 2);
    }
    auto f = [&](const Eigen::ArrayXd& p, Eigen::ArrayXd* grad) {
        if (grad) *grad = w;
        return (w * p).sum();
    };
    for (long steps : {1L, 8L, 64L}) {
        Eigen::ArrayXd attr = ig_midpoint(f, x, steps);
        for (long i = 0; i < d; ++i) CHECK(attr[i] == doctest::Approx(w[i] * x[i]).epsilon(1e-12));
    }
}

TEST_CASE("midpoint IG satisfies completeness on a smooth nonlinear map") {
    Rng rng(12);
    const long d = 6;
    Eigen::ArrayXd a(d), x(d);
    for (long i = 0; i < d; ++i) {
        a[i] = rng.uniform(-1, 1);
        x[i] = rng.uniform(-1, 1);
    }
    auto f = [&](const Eigen::ArrayXd& p, Eigen::ArrayXd* grad) {
        const double z = (a * p).sum();
        const double v = std::tanh(z) + 0.3 * (p * p).sum();
        if (grad) *grad = a * (1.0 - std::tanh(z) * std::tanh(z)) + 0.6 * p;
        return v;
    };
    const double f1 = f(x, nullptr);
    const double f0 = f(Eigen::ArrayXd::Zero(d), nullptr);
    Eigen::ArrayXd attr = ig_midpoint(f, x, 256);
    CHECK(std::abs(attr.sum() - (f1 - f0)) <= 0.01 * std::abs(f1 - f0));
}

TEST_CASE("model attribution: completeness and convergence") {
    using namespace mandarin::model;
    using ingest::LabelState;
    ModelConfig cfg = ModelConfig::desk(6);
    cfg.l_max = 16;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_experts = 2;
    cfg.k_experts = 1;
    cfg.k_pool = 4;
    cfg.expert_hidden = 12;
    core::ParameterStore store(64);
    register_branch_parameters(store, cfg);
    // push the model off its init so attributions are nontrivial
    store.at("head0.w2").value *= 6.0;
    store.at("static.w2").value *= 2.0;

    Rng rng(65);
    ingest::PredictionSample s;
    s.admission_id = "adm1";
    s.prediction_time_h = 24;
    auto& q = s.sequence;
    q.l_max = cfg.l_max;
    q.n_valid = 9;
    q.time_h.assign(cfg.l_max, 0);
    q.time_of_day.assign(cfg.l_max, 0);
    q.value.assign(cfg.l_max, 0);
    q.code.assign(cfg.l_max, 0);
    q.mask.assign(cfg.l_max, 0);
    for (long i = 0; i < q.n_valid; ++i) {
        q.time_h[i] = 1.5 * static_cast<double>(i);
        q.time_of_day[i] = std::fmod(q.time_h[i], 24.0);
        q.value[i] = rng.uniform();
        q.code[i] = 1 + static_cast<int>(rng.uniform_index(6));
        q.mask[i] = 1;
    }
    for (auto& v : s.statics) v = rng.uniform();

    auto a256 = integrated_gradients(store, cfg, s, 0, 0, 256);
    const double delta = a256.f_input - a256.f_baseline;
    REQUIRE(std::abs(delta) > 1e-6);
    CHECK(a256.completeness_gap() <= 0.01 * std::abs(delta));

    auto a512 = integrated_gradients(store, cfg, s, 0, 0, 512);
    const double rel_change = std::abs(a512.sum() - a256.sum()) / std::max(1e-12, std::abs(a256.sum()));
    MESSAGE("IG sum change 256 -> 512 steps: " << rel_change);
    CHECK(rel_change < 0.005);
}

TEST_CASE("feature importance combiner") {
    using ingest::PredictionSample;
    ingest::VariableVocabulary vocab;
    ingest::VariableEntry e1, e2;
    e1.code = 1;
    e2.code = 2;
    vocab.variables["hr"] = e1;
    vocab.variables["spo2"] = e2;

    // two admissions; 'hr' occurs in both, 'spo2' in one
    auto make_sample = [&](const std::string& adm, std::vector<int> codes) {
        PredictionSample s;
        s.admission_id = adm;
        auto& q = s.sequence;
        q.l_max = 4;
        q.n_valid = static_cast<long>(codes.size());
        q.time_h.assign(4, 0);
        q.time_of_day.assign(4, 0);
        q.value.assign(4, 0.5);
        q.code.assign(4, 0);
        q.mask.assign(4, 0);
        for (std::size_t i = 0; i < codes.size(); ++i) {
            q.code[i] = codes[i];
            q.mask[i] = 1;
        }
        return s;
    };
    std::vector<PredictionSample> samples{make_sample("a1", {1, 2}), make_sample("a2", {1})};
    std::vector<const PredictionSample*> ptrs{&samples[0], &samples[1]};

    std::vector<Attribution> attrs(2);
    const long d = 3;
    for (int i = 0; i < 2; ++i) {
        attrs[i].len = samples[i].sequence.n_valid;
        attrs[i].conv = Eigen::ArrayXd::Zero(attrs[i].len * 3);
        attrs[i].emb = Eigen::ArrayXd::Zero(attrs[i].len * d);
        attrs[i].statics = Eigen::ArrayXd::Zero(2);
    }
    // hr gets emb attribution 0.3 per step; spo2 gets 0.6 on its single step
    attrs[0].emb.segment(0, d).setConstant(0.1);   // hr step sums to 0.3
    attrs[0].emb.segment(d, d).setConstant(0.2);   // spo2 step sums to 0.6
    attrs[1].emb.segment(0, d).setConstant(0.1);
    attrs[0].conv.segment(0, 3).setConstant(0.2);  // hr conv 0.6
    attrs[0].conv.segment(3, 3).setConstant(0.1);  // spo2 conv 0.3

    ImportanceOptions opt;
    opt.alpha = 0.5;
    auto report = feature_importance(ptrs, attrs, vocab, opt);
    REQUIRE(report.rows.size() == 2);
    for (const auto& r : report.rows)
        CHECK(r.importance ==
              doctest::Approx(r.presence * (opt.alpha * r.ig_emb + (1 - opt.alpha) * r.ig_conv)).epsilon(1e-12));
    // hr present in both admissions, spo2 in one
    const auto& hr = report.rows[0].feature == "hr" ? report.rows[0] : report.rows[1];
    const auto& spo2 = report.rows[0].feature == "spo2" ? report.rows[0] : report.rows[1];
    CHECK(hr.presence == doctest::Approx(1.0));
    CHECK(spo2.presence == doctest::Approx(0.5));
    CHECK(std::is_sorted(report.rows.begin(), report.rows.end(),
                         [](const ImportanceRow& a, const ImportanceRow& b) { return a.importance > b.importance; }));

    SUBCASE("alpha = 1 uses only the embedding layer") {
        ImportanceOptions o1;
        o1.alpha = 1.0;
        auto r1 = feature_importance(ptrs, attrs, vocab, o1);
        for (const auto& r : r1.rows) CHECK(r.importance == doctest::Approx(r.presence * r.ig_emb));
    }
    SUBCASE("alpha outside [0,1] is rejected") {
        ImportanceOptions bad;
        bad.alpha = 1.5;
        CHECK_THROWS_AS(feature_importance(ptrs, attrs, vocab, bad), Error);
    }
}
