#pragma once

#include <Eigen/Dense>
#include <functional>

#include "mandarin/ingest/pipeline.hpp"
#include "mandarin/model/bundle.hpp"

namespace mandarin::eval {

// Integrated gradients against the three model input boundaries: the conv
// layer's continuous channels, the code-embedding output, and the static
// vector. Baseline is the all-zero input (all-padding sequence, zero statics)
// with the sample's validity mask held fixed.
struct Attribution {
    long len = 0;                 // valid steps attributed
    Eigen::ArrayXd conv;          // len x 3, flattened row-major
    Eigen::ArrayXd emb;           // len x d_model
    Eigen::ArrayXd statics;       // static_dim
    double f_input = 0;           // model output at the sample
    double f_baseline = 0;        // model output at the baseline
    double sum() const { return conv.sum() + emb.sum() + statics.sum(); }
    double completeness_gap() const { return std::abs(sum() - (f_input - f_baseline)); }
};

// Riemann-midpoint path integral from the zero baseline: the caller's f
// evaluates the scalar at alpha*x and, when grad is non-null, fills
// d f / d input there. Returns per-coordinate attributions x_i * mean_grad_i.
Eigen::ArrayXd ig_midpoint(const std::function<double(const Eigen::ArrayXd&, Eigen::ArrayXd*)>& f,
                           const Eigen::ArrayXd& x, long steps);

// Riemann-midpoint path integral with `steps` points for the chosen
// (target slot, horizon index) output probability.
Attribution integrated_gradients(core::ParameterStore& store, const model::ModelConfig& cfg,
                                 const ingest::PredictionSample& sample, int target_slot, int horizon_idx,
                                 long steps);

struct ImportanceOptions {
    double alpha = 0.5;               // embedding-vs-conv mixing weight
    bool signed_reduction = false;    // default: mean absolute attribution
};

struct ImportanceRow {
    std::string feature;
    double presence = 0;  // fraction of admissions where the feature occurs
    double ig_emb = 0;    // per-layer attribution, min-max normalized to [0,1]
    double ig_conv = 0;
    double importance = 0;  // presence * (alpha*ig_emb + (1-alpha)*ig_conv)
};

struct ImportanceReport {
    std::vector<ImportanceRow> rows;  // sorted by importance, descending
    double alpha = 0.5;
    std::string reduction = "mean_abs";
    std::string normalization = "minmax_per_layer";
};

ImportanceReport feature_importance(const std::vector<const ingest::PredictionSample*>& samples,
                                    const std::vector<Attribution>& attributions,
                                    const ingest::VariableVocabulary& vocab, const ImportanceOptions& options);

}  // namespace mandarin::eval
