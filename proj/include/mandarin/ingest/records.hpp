#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mandarin/common.hpp"
#include "mandarin/pheno/engine.hpp"

namespace mandarin::ingest {

// Canonical variable names the pipeline treats specially.
inline const std::array<std::string, 6> kRequiredVitals = {"hr", "rr", "sbp", "dbp", "temp", "spo2"};
inline const std::array<std::string, 6> kScoreVariables = {"gcs_total", "gcs_eye", "gcs_verbal",
                                                           "gcs_motor", "rass",    "cam"};

std::optional<pheno::ScoreKind> score_kind_for_variable(const std::string& variable);

struct StaticInfo {
    std::optional<double> age;
    std::optional<std::string> sex;   // "M" / "F"
    std::optional<std::string> race;  // "Black" / "White" / "Other"
    std::optional<double> bmi;
    std::optional<int> cci;
    int cvd = 0, chf = 0, copd = 0, dementia = 0, renal = 0;
};

struct ClinicalEvent {
    double time_h = 0;       // hours since ICU admission
    double time_of_day = 0;  // clock hours in [0, 24)
    std::string variable;
    double value = 0;
};

struct AdmissionRecord {
    std::string admission_id;
    std::string patient_id;
    std::string hospital_id;
    std::string icu_start_iso;
    std::string icu_end_iso;
    double los_h = 0;
    double admit_clock_h = 0;  // hour-of-day at ICU admission
    bool died_in_icu = false;
    StaticInfo statics;
    std::vector<ClinicalEvent> events;      // every event, scores included
    std::vector<pheno::NeuroScore> scores;  // parsed from the reserved score variables
};

struct Cohort {
    std::vector<AdmissionRecord> admissions;
};

// ---- ISO-8601 (YYYY-MM-DDTHH:MM:SS) ------------------------------------------

struct IsoTime {
    double epoch_h = 0;  // hours since 1970-01-01T00:00:00
    double clock_h = 0;  // hour of day
};
IsoTime parse_iso8601(const std::string& s);
std::string format_iso8601(double epoch_h);

// ---- canonical files -----------------------------------------------------------

// admissions.csv + events.jsonl, the one input format this toolchain defines.
void write_cohort(const Cohort& cohort, const std::string& dir);
Cohort read_cohort(const std::string& dir);

// pheno-facing event view (raw values, untouched by cleaning).
std::vector<pheno::TimedEvent> to_timed_events(const std::vector<ClinicalEvent>& events);

pheno::TrajectoryInput trajectory_input(const AdmissionRecord& adm);

}  // namespace mandarin::ingest
