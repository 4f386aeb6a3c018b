#include "mandarin/pheno/engine.hpp"

#include <algorithm>
#include <cmath>

namespace mandarin::pheno {

void validate_score(const NeuroScore& s) {
    auto in = [&](int lo, int hi) { return s.value >= lo && s.value <= hi; };
    bool ok = true;
    switch (s.kind) {
        case ScoreKind::GcsTotal: ok = in(3, 15); break;
        case ScoreKind::GcsEye: ok = in(1, 4); break;
        case ScoreKind::GcsVerbal: ok = in(1, 5); break;
        case ScoreKind::GcsMotor: ok = in(1, 6); break;
        case ScoreKind::Rass: ok = in(-5, 4); break;
        case ScoreKind::Cam: ok = in(0, 1); break;
    }
    if (!ok || s.time_h < 0)
        throw Error("invalid neurological score for admission " + s.admission_id + " (value " +
                    std::to_string(s.value) + " at " + std::to_string(s.time_h) + " h)");
}

const char* to_string(BrainStatus s) {
    switch (s) {
        case BrainStatus::NoAbd: return "no_abd";
        case BrainStatus::Delirium: return "delirium";
        case BrainStatus::Coma: return "coma";
        case BrainStatus::Deceased: return "deceased";
    }
    return "?";
}

BrainStatus brain_status_from_string(const std::string& s) {
    if (s == "no_abd") return BrainStatus::NoAbd;
    if (s == "delirium") return BrainStatus::Delirium;
    if (s == "coma") return BrainStatus::Coma;
    if (s == "deceased") return BrainStatus::Deceased;
    throw Error("unknown brain status '" + s + "'");
}

const char* to_string(DeliriumSubtype s) {
    return s == DeliriumSubtype::Hyperactive ? "hyperactive" : "hypoactive";
}

const char* to_string(ComaSubtype s) { return s == ComaSubtype::Induced ? "induced" : "miscellaneous"; }

const char* to_string(DeliriumPhenotype s) {
    switch (s) {
        case DeliriumPhenotype::Hypoxic: return "hypoxic";
        case DeliriumPhenotype::Septic: return "septic";
        case DeliriumPhenotype::Metabolic: return "metabolic";
        case DeliriumPhenotype::Sedative: return "sedative";
        case DeliriumPhenotype::Unclassified: return "unclassified";
    }
    return "?";
}

std::vector<WindowSpan> partition_windows(double los_h) {
    if (!(los_h > 0)) throw Error("invalid admission: non-positive ICU duration " + std::to_string(los_h) + " h");
    std::vector<WindowSpan> spans;
    const int full = static_cast<int>(los_h / 12.0);
    for (int k = 0; k < full; ++k) spans.push_back({k, 12.0 * k, 12.0 * (k + 1), false});
    const double rest = los_h - 12.0 * full;
    if (rest > 0) spans.push_back({full, 12.0 * full, los_h, true});
    return spans;
}

WindowScores aggregate_window_scores(const std::vector<NeuroScore>& scores, const WindowSpan& span, double los_h) {
    WindowScores w;
    std::optional<int> min_total, min_eye, min_verbal, min_motor;
    auto fold = [](std::optional<int>& acc, int v) { acc = acc ? std::min(*acc, v) : v; };
    const bool last_window = span.end_h >= los_h;
    for (const auto& s : scores) {
        const bool inside = s.time_h >= span.start_h && (s.time_h < span.end_h || (last_window && s.time_h <= span.end_h));
        if (!inside) continue;
        w.has_any_score = true;
        switch (s.kind) {
            case ScoreKind::Rass:
                fold(w.min_rass, s.value);
                w.rass_values.push_back(s.value);
                break;
            case ScoreKind::GcsTotal: fold(min_total, s.value); break;
            case ScoreKind::GcsEye: fold(min_eye, s.value); break;
            case ScoreKind::GcsVerbal: fold(min_verbal, s.value); break;
            case ScoreKind::GcsMotor: fold(min_motor, s.value); break;
            case ScoreKind::Cam:
                w.any_cam_observed = true;
                if (s.value > 0) w.any_cam_positive = true;
                break;
        }
    }
    if (min_total)
        w.min_gcs = min_total;
    else if (min_eye && min_verbal && min_motor)
        w.min_gcs = *min_eye + *min_verbal + *min_motor;
    return w;
}

BrainStatus label_window(const WindowScores& w) {
    if (!w.has_any_score) throw Error("unassessed window: no GCS/RASS/CAM recorded");
    // Coma: RASS below -3, or RASS exactly -3 with GCS at most 8.
    if (w.min_rass && *w.min_rass < -3) return BrainStatus::Coma;
    if (w.min_rass && *w.min_rass == -3) {
        if (w.min_gcs && *w.min_gcs <= 8) return BrainStatus::Coma;
        return BrainStatus::Delirium;  // RASS -3 with GCS above 8 (or unobserved GCS)
    }
    // Delirium: RASS above -3 (or unobserved) with a positive CAM.
    if (w.any_cam_positive) return BrainStatus::Delirium;
    return BrainStatus::NoAbd;
}

DeliriumSubtype classify_delirium_subtype(const WindowScores& w) {
    if (w.any_cam_positive) {
        for (int r : w.rass_values)
            if (r >= 1) return DeliriumSubtype::Hyperactive;
    }
    // CAM-negative delirium (RASS -3 / GCS > 8 path) and CAM-positive windows
    // with RASS in [-3, 0] are hypoactive.
    return DeliriumSubtype::Hypoactive;
}

ComaSubtype classify_coma_subtype(const WindowSpan& span, const std::vector<TimedEvent>& events,
                                  const PhenotypeRules& rules, WarningSink* warnings) {
    if (rules.sedative_codes.empty()) {
        warn(warnings, "empty sedative code set: all comas classified as miscellaneous");
        return ComaSubtype::Miscellaneous;
    }
    const double from = span.start_h - rules.coma_lookback_h;
    for (const auto& e : events) {
        if (e.time_h < from || e.time_h >= span.end_h) continue;
        if (rules.sedative_codes.count(e.code)) return ComaSubtype::Induced;
    }
    return ComaSubtype::Miscellaneous;
}

std::set<DeliriumPhenotype> classify_delirium_phenotypes(const WindowSpan& span, const std::vector<TimedEvent>& events,
                                                         const PhenotypeRules& rules) {
    std::set<DeliriumPhenotype> out;
    const double from = span.start_h - rules.lookback_h;
    bool temp_abnormal = false, wbc_abnormal = false;
    for (const auto& e : events) {
        if (e.time_h < from || e.time_h >= span.end_h) continue;
        if (e.code == "spo2" && e.value < rules.spo2_hypoxic_below) out.insert(DeliriumPhenotype::Hypoxic);
        if (e.code == "temp" && (e.value > rules.temp_high_above || e.value < rules.temp_low_below)) temp_abnormal = true;
        if (e.code == "wbc" && (e.value > rules.wbc_high_above || e.value < rules.wbc_low_below)) wbc_abnormal = true;
        if (e.code == "glucose" && (e.value < rules.glucose_low_below || e.value > rules.glucose_high_above))
            out.insert(DeliriumPhenotype::Metabolic);
        if (e.code == "sodium" && (e.value < rules.sodium_low_below || e.value > rules.sodium_high_above))
            out.insert(DeliriumPhenotype::Metabolic);
        if (e.code == "bun" && e.value > rules.bun_high_above) out.insert(DeliriumPhenotype::Metabolic);
        if (rules.sedative_codes.count(e.code)) out.insert(DeliriumPhenotype::Sedative);
    }
    if (temp_abnormal && wbc_abnormal) out.insert(DeliriumPhenotype::Septic);
    if (out.empty()) out.insert(DeliriumPhenotype::Unclassified);
    return out;
}

std::vector<WindowAssessment> label_trajectory(const TrajectoryInput& input, const PhenotypeRules& rules,
                                               WarningSink* warnings) {
    const auto spans = partition_windows(input.los_h);
    std::vector<WindowAssessment> out;
    out.reserve(spans.size() + 1);
    for (const auto& span : spans) {
        WindowAssessment a;
        a.window_index = span.index;
        a.window_start_h = span.start_h;
        a.partial = span.partial;
        a.scores = aggregate_window_scores(input.scores, span, input.los_h);
        if (a.scores.has_any_score) {
            a.status = label_window(a.scores);
        } else {
            a.carried_forward = true;
            a.status = out.empty() ? BrainStatus::NoAbd : out.back().status;
        }
        if (a.status == BrainStatus::Delirium) {
            if (a.carried_forward && !out.empty() && out.back().delirium_subtype)
                a.delirium_subtype = out.back().delirium_subtype;
            else
                a.delirium_subtype = classify_delirium_subtype(a.scores);
            a.delirium_phenotypes = classify_delirium_phenotypes(span, input.events, rules);
        } else if (a.status == BrainStatus::Coma) {
            a.coma_subtype = classify_coma_subtype(span, input.events, rules, warnings);
        }
        out.push_back(std::move(a));
    }
    if (input.died_in_icu) {
        WindowAssessment death;
        death.window_index = static_cast<int>(spans.size());
        death.window_start_h = input.los_h;
        death.status = BrainStatus::Deceased;
        out.push_back(std::move(death));
    }
    return out;
}

std::vector<BrainStatus> status_sequence(const std::vector<WindowAssessment>& assessments) {
    std::vector<BrainStatus> out;
    out.reserve(assessments.size());
    for (const auto& a : assessments) out.push_back(a.status);
    return out;
}

TransitionMatrix compute_transitions(const std::vector<std::vector<BrainStatus>>& trajectories) {
    if (trajectories.empty()) throw Error("compute_transitions: no trajectories");
    TransitionMatrix m;
    for (const auto& traj : trajectories) {
        for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
            if (traj[i] == BrainStatus::Deceased) continue;  // end outcome, never a source
            m.counts(static_cast<int>(traj[i]), static_cast<int>(traj[i + 1])) += 1;
        }
    }
    for (int r = 0; r < 3; ++r) {
        const double total = static_cast<double>(m.counts.row(r).sum());
        if (total > 0)
            for (int c = 0; c < 4; ++c) m.probabilities(r, c) = static_cast<double>(m.counts(r, c)) / total;
    }
    return m;
}

double compliance_fraction(const std::vector<AdmissionScoresView>& admissions) {
    long total = 0, scored = 0;
    for (const auto& adm : admissions) {
        for (const auto& span : partition_windows(adm.los_h)) {
            ++total;
            if (adm.scores && aggregate_window_scores(*adm.scores, span, adm.los_h).has_any_score) ++scored;
        }
    }
    if (total == 0) throw Error("compliance_fraction: no windows");
    return static_cast<double>(scored) / static_cast<double>(total);
}

}  // namespace mandarin::pheno
