#pragma once

#include <Eigen/Dense>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mandarin/common.hpp"

namespace mandarin::pheno {

enum class ScoreKind { GcsTotal, GcsEye, GcsVerbal, GcsMotor, Rass, Cam };

struct NeuroScore {
    std::string admission_id;
    ScoreKind kind;
    double time_h = 0;  // hours since ICU admission
    int value = 0;
};

// Validates the clinical ranges (GCS 3-15, components, RASS -5..4, CAM 0/1).
void validate_score(const NeuroScore& s);

enum class BrainStatus { NoAbd, Delirium, Coma, Deceased };

const char* to_string(BrainStatus s);
BrainStatus brain_status_from_string(const std::string& s);

enum class DeliriumSubtype { Hyperactive, Hypoactive };
enum class ComaSubtype { Induced, Miscellaneous };
enum class DeliriumPhenotype { Hypoxic, Septic, Metabolic, Sedative, Unclassified };

const char* to_string(DeliriumSubtype s);
const char* to_string(ComaSubtype s);
const char* to_string(DeliriumPhenotype s);

struct WindowSpan {
    int index = 0;
    double start_h = 0;
    double end_h = 0;
    bool partial = false;  // final remainder shorter than 12 h
};

// Aggregated score evidence for one 12-hour window.
struct WindowScores {
    std::optional<int> min_rass;
    std::optional<int> min_gcs;      // total, or sum of component minima when total absent
    bool any_cam_positive = false;
    bool any_cam_observed = false;
    bool has_any_score = false;
    std::vector<int> rass_values;
};

struct WindowAssessment {
    int window_index = 0;
    double window_start_h = 0;
    bool partial = false;
    WindowScores scores;
    bool carried_forward = false;  // no scores; status copied from previous window
    BrainStatus status = BrainStatus::NoAbd;
    std::optional<DeliriumSubtype> delirium_subtype;
    std::optional<ComaSubtype> coma_subtype;
    std::set<DeliriumPhenotype> delirium_phenotypes;
};

struct TransitionMatrix {
    // Rows: NoABD, Delirium, Coma. Columns: NoABD, Delirium, Coma, Deceased.
    Eigen::Matrix<long, 3, 4> counts = Eigen::Matrix<long, 3, 4>::Zero();
    Eigen::Matrix<double, 3, 4> probabilities = Eigen::Matrix<double, 3, 4>::Zero();
};

// Thresholds behind the delirium phenotype rules; every value is overridable.
struct PhenotypeRules {
    double lookback_h = 24.0;
    double spo2_hypoxic_below = 90.0;
    double temp_high_above = 38.3;
    double temp_low_below = 36.0;
    double wbc_high_above = 12.0;
    double wbc_low_below = 4.0;
    double glucose_low_below = 70.0;
    double glucose_high_above = 250.0;
    double sodium_low_below = 130.0;
    double sodium_high_above = 150.0;
    double bun_high_above = 40.0;
    std::set<std::string> sedative_codes = {"propofol",        "midazolam", "lorazepam",
                                            "dexmedetomidine", "ketamine",  "fentanyl_infusion"};
    double coma_lookback_h = 12.0;
};

}  // namespace mandarin::pheno
