#pragma once

#include <vector>

#include "mandarin/common.hpp"

namespace mandarin::eval {

// Rank statistic with tie correction; equals the all-pairs comparison with
// ties counted as half. Requires both classes.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Step integration of the precision-recall curve (average precision).
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

struct ThresholdMetrics {
    double threshold = 0;
    double sensitivity = 0;
    double specificity = 0;
    double ppv = 0;
    double npv = 0;
    double youden_j = 0;
};

// Threshold maximizing sensitivity + specificity - 1 over all distinct score
// midpoints (predict positive at score >= threshold); ties -> lowest threshold.
ThresholdMetrics youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels);

double brier(const std::vector<double>& probabilities, const std::vector<int>& labels);

struct CalibrationBin {
    double mean_probability = 0;
    double event_rate = 0;
    long count = 0;
};

// Equal-width bins over [0,1]; empty bins omitted.
std::vector<CalibrationBin> calibration_curve(const std::vector<double>& probabilities,
                                              const std::vector<int>& labels, int n_bins = 10);

}  // namespace mandarin::eval
