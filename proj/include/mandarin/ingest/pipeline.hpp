#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mandarin/ingest/records.hpp"
#include "mandarin/pheno/engine.hpp"

namespace mandarin::ingest {

// ---- exclusions -------------------------------------------------------------------

struct ExclusionReport {
    long input = 0;
    long retained = 0;
    // (reason, count) in application order
    std::vector<std::pair<std::string, long>> reasons;
    double compliance_threshold = 0.40;
    std::map<std::string, double> hospital_compliance;
};

struct ExclusionResult {
    Cohort retained;
    ExclusionReport report;
};

ExclusionResult apply_exclusions(const Cohort& cohort, double compliance_threshold = 0.40);

// ---- vocabulary -------------------------------------------------------------------

struct VariableEntry {
    int code = 0;  // >= 1; 0 is reserved for padding
    double prevalence = 0;
    double p1 = 0, p99 = 0;
    double impossible_lo = -1e308, impossible_hi = 1e308;
    double scale_min = 0, scale_max = 1;
};

struct StaticBounds {
    double age_lo = 18, age_hi = 100;
    double bmi_lo = 10, bmi_hi = 60;
    double cci_lo = 0, cci_hi = 20;
};

struct VariableVocabulary {
    std::map<std::string, VariableEntry> variables;  // frozen; codes dense 1..N in key order
    StaticBounds static_bounds;

    const VariableEntry* find(const std::string& name) const;
    std::size_t size() const { return variables.size(); }
    std::string to_json() const;
    static VariableVocabulary from_json(const std::string& text);
    void save(const std::string& path) const;
    static VariableVocabulary load(const std::string& path);
    std::uint64_t fingerprint() const { return fnv1a(to_json()); }
};

// Reviewed per-variable physiologic plausibility bounds for the canonical units.
std::map<std::string, std::pair<double, double>> default_impossible_bounds();

// Built from the training split only; prevalence is per-stay presence and
// variables under `min_prevalence` are dropped.
VariableVocabulary build_vocabulary(const Cohort& train, WarningSink* warnings = nullptr,
                                    double min_prevalence = 0.05);

// Drops unknown codes, impossible values, and values outside [p1, p99].
std::vector<ClinicalEvent> clean_events(const std::vector<ClinicalEvent>& events, const VariableVocabulary& vocab);

// Min-max scaling with clamping to [0,1] for out-of-training-range values.
double scale_value(double x, double lo, double hi);
std::vector<ClinicalEvent> scale_events(const std::vector<ClinicalEvent>& events, const VariableVocabulary& vocab);

// [age, sex(M=1), race one-hot x3 (Black/White/Other), bmi, cci, cvd, chf, copd, dementia, renal]
inline constexpr int kStaticDim = 12;
std::array<double, kStaticDim> static_vector(const StaticInfo& s, const StaticBounds& b);

// ---- sequences & samples -------------------------------------------------------------

struct EventSequence {
    long l_max = 0;
    long n_valid = 0;
    std::vector<double> time_h;       // raw hours since admission
    std::vector<double> time_of_day;  // clock hours
    std::vector<double> value;        // scaled to [0,1]
    std::vector<int> code;            // 0 = padding
    std::vector<std::uint8_t> mask;
};

// Events strictly before `cutoff_h`, sorted by (time_h, code); keeps the most
// recent l_max when over-long, pads the tail otherwise.
EventSequence assemble_sequence(const std::vector<ClinicalEvent>& cleaned_scaled, const VariableVocabulary& vocab,
                                double cutoff_h, long l_max);

enum class Outcome { NoAbd = 0, Delirium = 1, Coma = 2, Mortality = 3 };
const char* to_string(Outcome o);
Outcome outcome_from_string(const std::string& s);

// The three prediction targets of a branch, in canonical order.
std::array<Outcome, 3> targets_for(pheno::BrainStatus current);

enum class LabelState : std::uint8_t { Negative = 0, Positive = 1, Censored = 2 };

inline constexpr std::array<int, 6> kHorizonsH = {12, 24, 36, 48, 60, 72};

struct PredictionSample {
    std::string admission_id;
    double prediction_time_h = 0;
    pheno::BrainStatus current_status = pheno::BrainStatus::NoAbd;
    EventSequence sequence;
    std::array<double, kStaticDim> statics{};
    std::array<std::array<LabelState, 6>, 3> labels{};  // [target slot][horizon]
    bool is_validation = false;
};

std::vector<PredictionSample> make_samples(const AdmissionRecord& adm,
                                           const std::vector<pheno::WindowAssessment>& trajectory,
                                           const VariableVocabulary& vocab, long l_max);

// ---- cohort split ---------------------------------------------------------------------

struct CohortSplit {
    std::set<std::string> train_patients;
    std::set<std::string> validation_patients;
};

// Patient-level 90/10 split, seeded.
CohortSplit split_cohort(const Cohort& cohort, std::uint64_t seed, double validation_fraction = 0.10);

// ---- sample container & binary round trip ----------------------------------------------

struct SampleSet {
    std::uint64_t vocab_fingerprint = 0;
    long l_max = 0;
    std::vector<PredictionSample> samples;

    void save(const std::string& path) const;
    static SampleSet load(const std::string& path);
};

}  // namespace mandarin::ingest
