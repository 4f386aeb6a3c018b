#pragma once

#include "mandarin/model/bundle.hpp"

namespace mandarin::model {

struct TrainConfig {
    long batch_size = 64;
    long max_epochs = 12;
    long patience = 3;
    core::AdamConfig adam;        // lr 1e-3, clip 1.0 defaults
    double w_pos_cap = 30.0;      // ceiling on N_neg/N_pos (<= 0 disables)
    bool permute_labels = false;  // control run: break the input-label pairing
};

struct ClassWeights {
    std::array<std::array<double, 6>, 3> w_pos{};
    std::array<std::array<bool, 6>, 3> active{};  // false when a class is missing
    bool any_active = false;
};

// N_neg / N_pos per target slot x horizon, censored entries excluded;
// optionally capped from above for stability on very rare outcomes.
ClassWeights compute_class_weights(const std::vector<const ingest::PredictionSample*>& train_samples,
                                   double w_pos_cap = 0.0);

struct BranchTrainLog {
    std::string branch;
    bool skipped = false;
    long n_train = 0, n_val = 0;
    std::vector<double> epoch_val_auroc;  // mean over usable targets at the 12 h horizon
    std::vector<double> epoch_loss;
    long best_epoch = -1;
    long steps = 0;
};

struct TrainResult {
    ModelBundle bundle;
    std::vector<BranchTrainLog> logs;
    WarningSink warnings;
};

// Trains the three status branches on the train split with early stopping on
// validation AUROC. Deterministic given the seed.
TrainResult train(const ingest::SampleSet& set, const ingest::VariableVocabulary& vocab, const ModelConfig& cfg,
                  const TrainConfig& tc, std::uint64_t seed);

}  // namespace mandarin::model
