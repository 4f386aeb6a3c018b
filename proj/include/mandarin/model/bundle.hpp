#pragma once

#include <array>
#include <memory>

#include "mandarin/core/store.hpp"
#include "mandarin/ingest/pipeline.hpp"
#include "mandarin/model/branch.hpp"
#include "mandarin/model/config.hpp"

namespace mandarin::model {

int branch_index(pheno::BrainStatus s);
const char* branch_name(int index);  // "no_abd", "delirium", "coma"

// On disk: directory with config.json, vocabulary.json and one checkpoint per
// status branch (calibration.json joins later, emitted by `calibrate`).
struct ModelBundle {
    ModelConfig config;
    ingest::VariableVocabulary vocab;
    std::array<std::unique_ptr<core::ParameterStore>, 3> branches;

    ModelBundle() = default;
    ModelBundle(ModelBundle&&) = default;
    ModelBundle& operator=(ModelBundle&&) = default;

    static ModelBundle fresh(const ModelConfig& cfg, const ingest::VariableVocabulary& vocab, std::uint64_t seed);
    void save(const std::string& dir) const;
    static ModelBundle load(const std::string& dir);
};

struct RiskOutput {
    std::array<std::array<double, 6>, 3> prob{};  // [target slot][horizon]
};

// Inference over one branch's samples (all must share the branch's status).
std::vector<RiskOutput> predict_branch(core::ParameterStore& store, const ModelConfig& cfg,
                                       const std::vector<const ingest::PredictionSample*>& samples,
                                       long batch_size = 64);

// Routes each sample to the branch matching its current status; output order
// matches the input order. Deceased current status raises.
std::vector<RiskOutput> predict(const ModelBundle& bundle,
                                const std::vector<const ingest::PredictionSample*>& samples, long batch_size = 64);

RiskOutput forward_one(const ModelBundle& bundle, const ingest::PredictionSample& sample);

}  // namespace mandarin::model
