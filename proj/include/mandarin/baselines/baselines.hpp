#pragma once

#include <Eigen/Dense>

#include "mandarin/ingest/pipeline.hpp"
#include "mandarin/pheno/types.hpp"

namespace mandarin::baselines {

// Neurological-score fusion: equal-weight mean of (15 - minGCS)/12,
// max(0, -minRASS)/5 and the max CAM, with missing components dropped.
// Only low RASS contributes risk. Throws when no component is observed.
double clinical_score(const pheno::WindowScores& w);

// Per retained variable: [min, max, mean, last, count/64, presence] over the
// sample's observation sequence, followed by the 12-entry static vector.
long stat_feature_dim(const ingest::VariableVocabulary& vocab);
Eigen::VectorXd build_stat_features(const ingest::PredictionSample& sample, const ingest::VariableVocabulary& vocab);

struct LogisticModel {
    Eigen::VectorXd weights;
    double intercept = 0;
};

// L2-penalized logistic regression fit by gradient descent on the numerics
// kernel: minimizes mean NLL + l2/(2n) * ||w||^2 (intercept unpenalized)
// until the gradient norm drops below `tol` or `max_iters` steps pass.
LogisticModel logistic_train(const Eigen::MatrixXd& features, const std::vector<int>& labels, double l2,
                             long max_iters = 4000, double tol = 1e-6);

double logistic_predict(const LogisticModel& model, const Eigen::VectorXd& features);
std::vector<double> logistic_predict(const LogisticModel& model, const Eigen::MatrixXd& features);

}  // namespace mandarin::baselines
