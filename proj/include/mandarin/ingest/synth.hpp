#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mandarin/ingest/records.hpp"

namespace mandarin::ingest {

// Discrete-time cohort simulator: a per-window Markov chain over brain states
// whose transition logits are driven by planted latent covariates (hypoxia,
// sedation, renal dysfunction, sepsis) that also shape the emitted events.
// Everything is deterministic given the seed, and every sampled transition row
// is exported so acceptance tests can compare against the true dynamics.
struct SynthConfig {
    int n_admissions = 200;
    double readmission_fraction = 0.06;
    int max_windows = 56;
    double discharge_prob = 0.30;  // per-window discharge hazard once >= 2 windows exist

    // Base transition logits: rows NoABD/Delirium/Coma over destinations
    // NoABD/Delirium/Coma/Deceased.
    std::array<std::array<double, 4>, 3> base_logits = {{
        {3.3, -1.6, -1.8, -2.4},
        {1.0, 1.6, -0.9, -2.6},
        {0.7, -0.5, 1.7, -1.9},
    }};

    // Planted hazard weights. Hypoxia and sedation are graded: when the latent
    // episode is active its severity (a per-patient trait in [0.55, 1]) scales
    // the logit shift, so the true transition probabilities span a wide range
    // and the Bayes-optimal discriminator sits well above the desk targets.
    double w_hypoxia_to_delirium = 5.6;
    double w_sedation_to_coma = 6.0;
    double w_bun_to_death = 2.4;
    double w_dementia_to_delirium = 0.5;
    double w_age_to_death = 0.9;
    double w_sepsis_to_delirium = 0.5;

    // Latent per-window switches.
    double hypoxia_onset_prob = 0.12;
    double hypoxia_persist_prob = 0.72;
    double sedation_onset_prob = 0.10;
    double sedation_persist_prob = 0.75;
    double sepsis_onset_prob = 0.04;
    double sepsis_persist_prob = 0.70;

    double score_missing_prob = 0.0;  // windows emitted without any neuro score
    double vital_period_h = 6.0;
    double lab_period_h = 24.0;
    bool plant_excluded = false;  // append admissions every exclusion rule must drop

    void validate() const;
};

struct TruthRow {
    std::string admission_id;
    int source_window = 0;              // transition (source_window -> source_window+1)
    int from_state = 0;                 // pheno::BrainStatus numeric
    std::array<double, 4> probs{};      // exact sampling distribution used
    int next_state = 0;                 // realized destination
};

struct GroundTruth {
    std::vector<TruthRow> rows;
    Eigen::Matrix<double, 3, 4> mean_rows() const;  // expected dynamics per source state
    Eigen::Matrix<long, 3, 1> row_counts() const;

    void save(const std::string& path) const;
    static GroundTruth load(const std::string& path);
};

struct SynthResult {
    Cohort cohort;
    GroundTruth truth;
};

SynthResult generate_synthetic_cohort(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace mandarin::ingest
