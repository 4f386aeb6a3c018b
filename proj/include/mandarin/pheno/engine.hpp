#pragma once

#include "mandarin/pheno/types.hpp"

namespace mandarin::pheno {

// Minimal event view the labeling rules need (subtype / phenotype evidence).
struct TimedEvent {
    double time_h = 0;
    std::string code;
    double value = 0;
};

// Contiguous non-overlapping 12 h spans covering [0, los_h); a final remainder
// shorter than 12 h is kept and flagged partial.
std::vector<WindowSpan> partition_windows(double los_h);

// Score aggregation for one window. Scores at exactly los_h fold into the last
// window. GCS total falls back to the sum of component minima when no total
// was recorded but all three components were.
WindowScores aggregate_window_scores(const std::vector<NeuroScore>& scores, const WindowSpan& span, double los_h);

// The 12-hour status rules. Throws when the window holds no score at all.
BrainStatus label_window(const WindowScores& w);

DeliriumSubtype classify_delirium_subtype(const WindowScores& w);

ComaSubtype classify_coma_subtype(const WindowSpan& span, const std::vector<TimedEvent>& events,
                                  const PhenotypeRules& rules, WarningSink* warnings = nullptr);

std::set<DeliriumPhenotype> classify_delirium_phenotypes(const WindowSpan& span, const std::vector<TimedEvent>& events,
                                                         const PhenotypeRules& rules);

struct TrajectoryInput {
    double los_h = 0;
    bool died_in_icu = false;
    std::vector<NeuroScore> scores;
    std::vector<TimedEvent> events;
};

// One assessment per window; unassessed windows carry the previous status
// forward (first window defaults to NoABD). A terminal Deceased entry is
// appended when the patient died in the ICU.
std::vector<WindowAssessment> label_trajectory(const TrajectoryInput& input, const PhenotypeRules& rules,
                                               WarningSink* warnings = nullptr);

std::vector<BrainStatus> status_sequence(const std::vector<WindowAssessment>& assessments);

TransitionMatrix compute_transitions(const std::vector<std::vector<BrainStatus>>& trajectories);

struct AdmissionScoresView {
    double los_h = 0;
    const std::vector<NeuroScore>* scores = nullptr;
};

// Fraction of 12 h windows holding at least one GCS/RASS/CAM across the
// admissions of one hospital.
double compliance_fraction(const std::vector<AdmissionScoresView>& admissions);

}  // namespace mandarin::pheno
