#include "mandarin/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mandarin::eval {

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels, const char* op) {
    if (scores.size() != labels.size()) throw Error(std::string(op) + ": scores/labels size mismatch");
    long pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0)
        throw Error(std::string(op) + ": both classes required (" + std::to_string(pos) + " positive, " +
                    std::to_string(neg) + " negative)");
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "auroc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0;
    long n_pos = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                rank_sum_pos += mid_rank;
                ++n_pos;
            }
        i = j;
    }
    const long n_neg = static_cast<long>(n) - n_pos;
    return (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "auprc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    long total_pos = 0;
    for (int l : labels) total_pos += l;

    double area = 0;
    long tp = 0, fp = 0;
    double prev_recall = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) (labels[order[k]] ? tp : fp) += 1;
        const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return area;
}

ThresholdMetrics youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "youden_threshold");
    std::vector<double> distinct = scores;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<double> candidates;
    candidates.push_back(distinct.front() - 1.0);  // classify everything positive
    for (std::size_t i = 0; i + 1 < distinct.size(); ++i)
        candidates.push_back(0.5 * (distinct[i] + distinct[i + 1]));
    candidates.push_back(distinct.back() + 1.0);  // classify everything negative

    auto confusion = [&](double thr) {
        long tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const bool pred = scores[i] >= thr;
            if (labels[i] && pred) ++tp;
            else if (labels[i]) ++fn;
            else if (pred) ++fp;
            else ++tn;
        }
        ThresholdMetrics m;
        m.threshold = thr;
        m.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
        m.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
        m.ppv = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        m.npv = tn + fn > 0 ? static_cast<double>(tn) / static_cast<double>(tn + fn) : 0.0;
        m.youden_j = m.sensitivity + m.specificity - 1.0;
        return m;
    };

    ThresholdMetrics best = confusion(candidates.front());
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        const ThresholdMetrics m = confusion(candidates[i]);
        if (m.youden_j > best.youden_j + 1e-12) best = m;  // ties keep the lowest threshold
    }
    return best;
}

double brier(const std::vector<double>& probabilities, const std::vector<int>& labels) {
    if (probabilities.size() != labels.size() || probabilities.empty())
        throw Error("brier: probabilities/labels size mismatch or empty");
    double acc = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const double d = probabilities[i] - static_cast<double>(labels[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(probabilities.size());
}

std::vector<CalibrationBin> calibration_curve(const std::vector<double>& probabilities,
                                              const std::vector<int>& labels, int n_bins) {
    if (probabilities.size() != labels.size()) throw Error("calibration_curve: size mismatch");
    if (n_bins < 1) throw Error("calibration_curve: n_bins must be positive");
    std::vector<double> sum_p(n_bins, 0), sum_y(n_bins, 0);
    std::vector<long> count(n_bins, 0);
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const double p = probabilities[i];
        if (p < 0.0 || p > 1.0) throw Error("calibration_curve: probability outside [0,1]");
        int b = std::min(n_bins - 1, static_cast<int>(p * n_bins));
        sum_p[b] += p;
        sum_y[b] += labels[i];
        count[b] += 1;
    }
    std::vector<CalibrationBin> out;
    for (int b = 0; b < n_bins; ++b)
        if (count[b] > 0)
            out.push_back({sum_p[b] / static_cast<double>(count[b]), sum_y[b] / static_cast<double>(count[b]),
                           count[b]});
    return out;
}

}  // namespace mandarin::eval
