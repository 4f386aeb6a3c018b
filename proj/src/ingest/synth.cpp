#include "mandarin/ingest/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mandarin/rng.hpp"

namespace mandarin::ingest {

using nlohmann::json;
using pheno::BrainStatus;

void SynthConfig::validate() const {
    if (n_admissions < 1) throw Error("synth config: n_admissions must be positive");
    if (max_windows < 3 || max_windows > 59) throw Error("synth config: max_windows must be in [3, 59]");
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(discharge_prob) || !prob(readmission_fraction) || !prob(score_missing_prob) ||
        !prob(hypoxia_onset_prob) || !prob(hypoxia_persist_prob) || !prob(sedation_onset_prob) ||
        !prob(sedation_persist_prob) || !prob(sepsis_onset_prob) || !prob(sepsis_persist_prob))
        throw Error("synth config: probabilities must lie in [0, 1]");
    if (vital_period_h <= 0 || lab_period_h <= 0) throw Error("synth config: event periods must be positive");
}

Eigen::Matrix<double, 3, 4> GroundTruth::mean_rows() const {
    Eigen::Matrix<double, 3, 4> sum = Eigen::Matrix<double, 3, 4>::Zero();
    Eigen::Matrix<long, 3, 1> n = Eigen::Matrix<long, 3, 1>::Zero();
    for (const auto& r : rows) {
        for (int c = 0; c < 4; ++c) sum(r.from_state, c) += r.probs[c];
        n(r.from_state) += 1;
    }
    for (int s = 0; s < 3; ++s)
        if (n(s) > 0) sum.row(s) /= static_cast<double>(n(s));
    return sum;
}

Eigen::Matrix<long, 3, 1> GroundTruth::row_counts() const {
    Eigen::Matrix<long, 3, 1> n = Eigen::Matrix<long, 3, 1>::Zero();
    for (const auto& r : rows) n(r.from_state) += 1;
    return n;
}

void GroundTruth::save(const std::string& path) const {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "ground_truth";
    json arr = json::array();
    for (const auto& r : rows)
        arr.push_back({{"a", r.admission_id},
                       {"w", r.source_window},
                       {"from", r.from_state},
                       {"p", r.probs},
                       {"next", r.next_state}});
    j["rows"] = std::move(arr);
    std::ofstream os(path);
    if (!os) throw Error("cannot write ground truth to '" + path + "'");
    os << j.dump() << "\n";
}

GroundTruth GroundTruth::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("missing " + path + "; run `mandarin synth` first");
    json j = json::parse(is);
    if (j.value("schema_version", -1) != kSchemaVersion)
        throw Error("ground truth artifact schema_version mismatch; re-run `mandarin synth`");
    GroundTruth t;
    for (const auto& r : j.at("rows")) {
        TruthRow row;
        row.admission_id = r.at("a").get<std::string>();
        row.source_window = r.at("w").get<int>();
        row.from_state = r.at("from").get<int>();
        for (int c = 0; c < 4; ++c) row.probs[c] = r.at("p")[c].get<double>();
        row.next_state = r.at("next").get<int>();
        t.rows.push_back(std::move(row));
    }
    return t;
}

namespace {

double round01(double x) { return std::round(x * 100.0) / 100.0; }

struct PatientTraits {
    double age = 60;
    double hypoxia_severity = 0.7;   // trait scaling the hypoxia episodes
    double sedation_severity = 0.7;  // trait scaling sedation depth
    std::string sex = "M";
    std::string race = "White";
    double bmi = 28;
    int cci = 2;
    int cvd = 0, chf = 0, copd = 0, dementia = 0, renal = 0;
    int renal_trait = 0;
    bool has_crp = false;
    bool has_lactate = false;
};

PatientTraits draw_traits(Rng& rng) {
    PatientTraits t;
    t.age = std::floor(rng.uniform(20.0, 92.0));
    t.sex = rng.bernoulli(0.54) ? "M" : "F";
    const double u = rng.uniform();
    t.race = u < 0.20 ? "Black" : (u < 0.90 ? "White" : "Other");
    t.bmi = std::clamp(std::round((28.0 + 5.0 * rng.normal()) * 10.0) / 10.0, 15.0, 55.0);
    t.cci = std::min(14, static_cast<int>(std::floor(-2.2 * std::log(std::max(1e-12, rng.uniform())))));
    t.cvd = rng.bernoulli(0.08);
    t.chf = rng.bernoulli(0.15);
    t.copd = rng.bernoulli(0.12);
    t.dementia = rng.bernoulli(t.age > 75 ? 0.16 : 0.04);
    t.renal = rng.bernoulli(0.12);
    t.renal_trait = t.renal ? 1 : rng.bernoulli(0.05);
    t.hypoxia_severity = rng.uniform(0.6, 1.0);
    t.sedation_severity = rng.uniform(0.6, 1.0);
    t.has_crp = rng.bernoulli(0.03);
    t.has_lactate = rng.bernoulli(0.20);
    return t;
}

struct WindowLatents {
    double hypoxia = 0;   // 0 when quiet, patient severity when the episode is on
    double sedation = 0;
    int sepsis = 0;
    double bun_latent = 14.0;
};

class AdmissionSim {
public:
    AdmissionSim(const SynthConfig& cfg, Rng& rng, const PatientTraits& traits)
        : cfg_(cfg), rng_(rng), traits_(traits) {}

    // Simulates one stay; fills events/scores/states/truth rows.
    void run(AdmissionRecord& adm, std::vector<TruthRow>& truth) {
        bool hypox = rng_.bernoulli(cfg_.hypoxia_onset_prob);
        bool sed = false;
        int sepsis = 0;
        BrainStatus state = initial_state();
        std::vector<BrainStatus> states{state};
        std::vector<WindowLatents> latents;

        int w = 0;
        while (true) {
            WindowLatents lat;
            lat.hypoxia = hypox ? traits_.hypoxia_severity : 0.0;
            lat.sedation = sed ? traits_.sedation_severity : 0.0;
            lat.sepsis = sepsis;
            lat.bun_latent = 14.0 + 12.0 * traits_.renal_trait + 0.25 * w * traits_.renal_trait;
            latents.push_back(lat);
            emit_window(adm, w, states[w], lat, 12.0 * (w + 1));

            // Transition to the next window.
            const bool allow_death = w >= 1;  // keeps every stay at >= 24 h
            const auto probs = transition_row(states[w], lat, allow_death);
            const int next = sample_categorical(probs);
            TruthRow row;
            row.admission_id = adm.admission_id;
            row.source_window = w;
            row.from_state = static_cast<int>(states[w]);
            row.probs = probs;
            row.next_state = next;
            truth.push_back(std::move(row));

            if (next == static_cast<int>(BrainStatus::Deceased)) {
                adm.died_in_icu = true;
                los_ = 12.0 * (w + 1);
                break;
            }
            states.push_back(static_cast<BrainStatus>(next));
            ++w;
            hypox = rng_.bernoulli(hypox ? cfg_.hypoxia_persist_prob : cfg_.hypoxia_onset_prob);
            sed = rng_.bernoulli(sed ? cfg_.sedation_persist_prob : cfg_.sedation_onset_prob);
            sepsis = rng_.bernoulli(sepsis ? cfg_.sepsis_persist_prob : cfg_.sepsis_onset_prob);

            const bool force_discharge = w + 1 >= cfg_.max_windows;
            if (force_discharge || (w >= 2 && rng_.bernoulli(cfg_.discharge_prob))) {
                // Final partial window for the sampled state.
                los_ = 12.0 * w + rng_.uniform(6.0, 11.5);
                WindowLatents lat2;
                lat2.hypoxia = hypox ? traits_.hypoxia_severity : 0.0;
                lat2.sedation = sed ? traits_.sedation_severity : 0.0;
                lat2.sepsis = sepsis;
                lat2.bun_latent = 14.0 + 12.0 * traits_.renal_trait + 0.25 * w * traits_.renal_trait;
                emit_window(adm, w, states[w], lat2, los_);
                break;
            }
        }
        adm.los_h = los_;
    }

    double los() const { return los_; }

private:
    BrainStatus initial_state() {
        const double u = rng_.uniform();
        if (u < 0.88) return BrainStatus::NoAbd;
        if (u < 0.955) return BrainStatus::Delirium;
        return BrainStatus::Coma;
    }

    std::array<double, 4> transition_row(BrainStatus from, const WindowLatents& lat, bool allow_death) const {
        const auto& base = cfg_.base_logits[static_cast<int>(from)];
        const double age_z = (traits_.age - 55.0) / 30.0;
        const double bun_z = (lat.bun_latent - 14.0) / 25.0;
        std::array<double, 4> logit = base;
        logit[1] += cfg_.w_hypoxia_to_delirium * lat.hypoxia + cfg_.w_dementia_to_delirium * traits_.dementia +
                    cfg_.w_sepsis_to_delirium * lat.sepsis;
        logit[2] += cfg_.w_sedation_to_coma * lat.sedation;
        logit[3] += cfg_.w_bun_to_death * bun_z + cfg_.w_age_to_death * age_z;
        if (!allow_death) logit[3] = -1e30;
        double mx = *std::max_element(logit.begin(), logit.end());
        std::array<double, 4> p{};
        double z = 0;
        for (int i = 0; i < 4; ++i) {
            p[i] = std::exp(logit[i] - mx);
            z += p[i];
        }
        for (auto& v : p) v /= z;
        return p;
    }

    int sample_categorical(const std::array<double, 4>& p) {
        const double u = rng_.uniform();
        double acc = 0;
        for (int i = 0; i < 4; ++i) {
            acc += p[i];
            if (u < acc) return i;
        }
        return 3;
    }

    void push_event(AdmissionRecord& adm, double time_h, const std::string& variable, double value) {
        ClinicalEvent e;
        e.time_h = round01(time_h);
        e.variable = variable;
        e.value = value;
        adm.events.push_back(std::move(e));
    }

    // Emits the events and scores of window `w` in state `state`, truncated at `end_h`.
    void emit_window(AdmissionRecord& adm, int w, BrainStatus state, const WindowLatents& lat, double end_h) {
        const double start = 12.0 * w;
        const double stop = std::min(end_h, start + 12.0);

        auto cadence = [&](double period, auto&& emit_one) {
            for (double t = start + rng_.uniform(0.2, 1.2); t < stop - 0.01; t += period + rng_.uniform(-0.8, 0.8))
                emit_one(t);
        };

        cadence(cfg_.vital_period_h, [&](double t) {
            push_event(adm, t, "hr", std::clamp(std::round(82 + 20 * lat.hypoxia - 6 * lat.sedation + 8 * rng_.normal()),
                                                35.0, 180.0));
        });
        cadence(cfg_.vital_period_h, [&](double t) {
            push_event(adm, t, "rr", std::clamp(std::round(16 + 8 * lat.hypoxia + 2.5 * rng_.normal()), 6.0, 45.0));
        });
        cadence(cfg_.vital_period_h, [&](double t) {
            push_event(adm, t, "sbp", std::clamp(std::round(122 - 10 * lat.sedation + 14 * rng_.normal()), 60.0, 220.0));
        });
        cadence(cfg_.vital_period_h, [&](double t) {
            push_event(adm, t, "dbp", std::clamp(std::round(72 - 6 * lat.sedation + 9 * rng_.normal()), 30.0, 130.0));
        });
        cadence(cfg_.vital_period_h, [&](double t) {
            const double v = 36.9 + 1.6 * lat.sepsis + 0.45 * rng_.normal();
            push_event(adm, t, "temp", std::clamp(std::round(v * 10) / 10, 34.0, 41.0));
        });
        // Hypoxic episodes trigger closer monitoring as well as lower values.
        cadence(lat.hypoxia > 0 ? cfg_.vital_period_h / 3.0 : cfg_.vital_period_h, [&](double t) {
            push_event(adm, t, "spo2",
                       std::clamp(std::round(97 - 11 * lat.hypoxia + 1.1 * rng_.normal()), 70.0, 100.0));
        });
        cadence(cfg_.lab_period_h, [&](double t) {
            const double v = 9 + 8 * lat.sepsis + 2.5 * rng_.normal();
            push_event(adm, t, "wbc", std::clamp(std::round(v * 10) / 10, 1.0, 40.0));
        });
        cadence(cfg_.lab_period_h, [&](double t) {
            double v = 135 + 30 * rng_.normal();
            if (rng_.bernoulli(0.05)) v += 140;
            push_event(adm, t, "glucose", std::clamp(std::round(v), 40.0, 500.0));
        });
        cadence(cfg_.lab_period_h, [&](double t) {
            push_event(adm, t, "sodium", std::clamp(std::round(139 + 3 * rng_.normal()), 120.0, 160.0));
        });
        cadence(cfg_.lab_period_h, [&](double t) {
            push_event(adm, t, "bun", std::clamp(std::round(lat.bun_latent + 3 * rng_.normal()), 3.0, 120.0));
        });
        cadence(cfg_.lab_period_h, [&](double t) {
            const double v = 1.0 + 0.8 * traits_.renal_trait + 0.3 * rng_.normal();
            push_event(adm, t, "creatinine", std::clamp(std::round(v * 100) / 100, 0.2, 8.0));
        });
        if (traits_.has_lactate)
            cadence(12.0, [&](double t) {
                const double v = 1.8 + 0.8 * std::abs(rng_.normal());
                push_event(adm, t, "lactate", std::clamp(std::round(v * 10) / 10, 0.2, 15.0));
            });
        if (traits_.has_crp)
            cadence(24.0, [&](double t) {
                push_event(adm, t, "crp", std::clamp(std::round(60 + 30 * rng_.normal()), 1.0, 300.0));
            });
        if (lat.sedation > 0)
            cadence(4.0, [&](double t) {
                push_event(adm, t, "propofol",
                           std::clamp(std::round(15 + 70 * lat.sedation + 6 * rng_.normal()), 5.0, 120.0));
            });
        if (rng_.bernoulli(0.04))
            push_event(adm, start + rng_.uniform(0.5, std::max(0.6, stop - start - 0.5)), "midazolam",
                       std::clamp(std::round((2 + 0.5 * rng_.normal()) * 10) / 10, 0.5, 10.0));

        emit_scores(adm, state, start, stop);
    }

    void emit_scores(AdmissionRecord& adm, BrainStatus state, double start, double stop) {
        if (rng_.bernoulli(cfg_.score_missing_prob)) return;
        const double slack = stop - start;
        auto at = [&](double offset) { return start + std::min(offset, slack - 0.1); };
        auto push_score = [&](double t, const char* var, int value) {
            push_event(adm, t, var, static_cast<double>(value));
        };
        switch (state) {
            case BrainStatus::NoAbd: {
                const double u = rng_.uniform();
                const int rass = u < 0.60 ? 0 : (u < 0.85 ? -1 : 1);
                push_score(at(0.8 + rng_.uniform(0, 0.4)), "rass", rass);
                push_score(at(6.2 + rng_.uniform(0, 0.4)), "rass", rng_.bernoulli(0.7) ? rass : 0);
                push_score(at(1.6), "cam", 0);
                const double g = rng_.uniform();
                push_score(at(2.4), "gcs_total", g < 0.2 ? 13 : (g < 0.5 ? 14 : 15));
                break;
            }
            case BrainStatus::Delirium: {
                if (rng_.bernoulli(0.15)) {
                    // RASS -3 with preserved GCS, no CAM documented.
                    push_score(at(0.9), "rass", -3);
                    push_score(at(2.1), "gcs_total", 9 + static_cast<int>(rng_.uniform_index(6)));
                } else {
                    const bool hyper = rng_.bernoulli(0.30);
                    push_score(at(0.9), "rass", hyper ? 1 + static_cast<int>(rng_.uniform_index(2))
                                                      : -2 + static_cast<int>(rng_.uniform_index(3)));
                    push_score(at(1.7), "cam", 1);
                    push_score(at(2.6), "gcs_total", 9 + static_cast<int>(rng_.uniform_index(6)));
                }
                break;
            }
            case BrainStatus::Coma: {
                if (rng_.bernoulli(0.20)) {
                    push_score(at(0.9), "rass", -3);
                    push_score(at(2.0), "gcs_total", 3 + static_cast<int>(rng_.uniform_index(6)));
                } else {
                    push_score(at(0.9), "rass", rng_.bernoulli(0.6) ? -4 : -5);
                    push_score(at(2.0), "gcs_total", 3 + static_cast<int>(rng_.uniform_index(6)));
                }
                break;
            }
            case BrainStatus::Deceased:
                break;
        }
    }

    const SynthConfig& cfg_;
    Rng& rng_;
    const PatientTraits& traits_;
    double los_ = 0;
};

std::string pad_id(const char* prefix, int i) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%s%06d", prefix, i);
    return buf;
}

void fill_statics(AdmissionRecord& adm, const PatientTraits& t) {
    adm.statics.age = t.age;
    adm.statics.sex = t.sex;
    adm.statics.race = t.race;
    adm.statics.bmi = t.bmi;
    adm.statics.cci = t.cci;
    adm.statics.cvd = t.cvd;
    adm.statics.chf = t.chf;
    adm.statics.copd = t.copd;
    adm.statics.dementia = t.dementia;
    adm.statics.renal = t.renal;
}

// Admissions that must fall to each exclusion rule, for pipeline tests.
void plant_excluded_admissions(Cohort& cohort, Rng& rng, const SynthConfig& cfg, std::vector<TruthRow>& truth) {
    SynthConfig sub = cfg;
    sub.plant_excluded = false;
    int k = 0;
    auto fresh = [&](const char* tag, double base_epoch) {
        PatientTraits t = draw_traits(rng);
        AdmissionRecord adm;
        adm.admission_id = std::string("x") + tag + pad_id("", ++k);
        adm.patient_id = "xp" + pad_id("", k);
        adm.hospital_id = "H1";
        fill_statics(adm, t);
        AdmissionSim sim(sub, rng, t);
        sim.run(adm, truth);
        const double start = base_epoch;
        adm.icu_start_iso = format_iso8601(start);
        adm.icu_end_iso = format_iso8601(start + adm.los_h);
        adm.admit_clock_h = parse_iso8601(adm.icu_start_iso).clock_h;
        return adm;
    };
    const double epoch0 = parse_iso8601("2021-06-01T08:00:00").epoch_h;

    {  // LOS below 24 h
        AdmissionRecord a = fresh("short", epoch0);
        a.los_h = 20.0;
        a.icu_end_iso = format_iso8601(epoch0 + 20.0);
        std::erase_if(a.events, [&](const ClinicalEvent& e) { return e.time_h > 19.5; });
        cohort.admissions.push_back(std::move(a));
    }
    {  // LOS above 30 d: stretch the stay without touching events
        AdmissionRecord a = fresh("long", epoch0 + 100);
        a.los_h = 31.0 * 24.0;
        a.icu_end_iso = format_iso8601(epoch0 + 100 + a.los_h);
        cohort.admissions.push_back(std::move(a));
    }
    {  // missing BMI
        AdmissionRecord a = fresh("nobmi", epoch0 + 200);
        a.statics.bmi.reset();
        cohort.admissions.push_back(std::move(a));
    }
    {  // missing one required vital entirely
        AdmissionRecord a = fresh("novital", epoch0 + 300);
        std::erase_if(a.events, [](const ClinicalEvent& e) { return e.variable == "spo2"; });
        cohort.admissions.push_back(std::move(a));
    }
    {  // no neuro scores at all
        AdmissionRecord a = fresh("noscore", epoch0 + 400);
        std::erase_if(a.events, [](const ClinicalEvent& e) { return score_kind_for_variable(e.variable).has_value(); });
        cohort.admissions.push_back(std::move(a));
    }
    for (int i = 0; i < 3; ++i) {  // low-compliance hospital
        AdmissionRecord a = fresh("lowcomp", epoch0 + 500 + 50 * i);
        a.hospital_id = "H9";
        // keep scores only in the first window: compliance well below 40%
        std::erase_if(a.events, [](const ClinicalEvent& e) {
            return score_kind_for_variable(e.variable).has_value() && e.time_h >= 12.0;
        });
        cohort.admissions.push_back(std::move(a));
    }
}

}  // namespace

SynthResult generate_synthetic_cohort(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    SynthResult out;

    const double epoch0 = parse_iso8601("2019-01-01T00:00:00").epoch_h;
    int admission_counter = 0;
    int patient_counter = 0;
    while (admission_counter < cfg.n_admissions) {
        const PatientTraits traits = draw_traits(rng);
        const std::string patient_id = pad_id("p", ++patient_counter);
        const int stays = (rng.bernoulli(cfg.readmission_fraction) && admission_counter + 2 <= cfg.n_admissions) ? 2 : 1;
        for (int s = 0; s < stays; ++s) {
            AdmissionRecord adm;
            adm.admission_id = pad_id("a", ++admission_counter);
            adm.patient_id = patient_id;
            adm.hospital_id = "H" + std::to_string(1 + (admission_counter % 3));
            fill_statics(adm, traits);
            AdmissionSim sim(cfg, rng, traits);
            sim.run(adm, out.truth.rows);
            const double start = epoch0 + 13.0 * admission_counter + rng.uniform(0.0, 6.0);
            adm.icu_start_iso = format_iso8601(start);
            const double start_snapped = parse_iso8601(adm.icu_start_iso).epoch_h;
            adm.icu_end_iso = format_iso8601(start_snapped + adm.los_h);
            // Snap LOS to the second-resolved timestamps so round trips are exact.
            adm.los_h = parse_iso8601(adm.icu_end_iso).epoch_h - start_snapped;
            adm.admit_clock_h = parse_iso8601(adm.icu_start_iso).clock_h;
            for (auto& e : adm.events) e.time_of_day = std::fmod(adm.admit_clock_h + e.time_h, 24.0);
            out.cohort.admissions.push_back(std::move(adm));
        }
    }
    if (cfg.plant_excluded) plant_excluded_admissions(out.cohort, rng, cfg, out.truth.rows);

    // Canonical event order within each admission.
    for (auto& adm : out.cohort.admissions) {
        std::stable_sort(adm.events.begin(), adm.events.end(), [](const ClinicalEvent& a, const ClinicalEvent& b) {
            if (a.time_h != b.time_h) return a.time_h < b.time_h;
            return a.variable < b.variable;
        });
        // Score events double as NeuroScore entries.
        adm.scores.clear();
        for (const auto& e : adm.events) {
            if (auto kind = score_kind_for_variable(e.variable)) {
                pheno::NeuroScore sc;
                sc.admission_id = adm.admission_id;
                sc.kind = *kind;
                sc.time_h = e.time_h;
                sc.value = static_cast<int>(std::llround(e.value));
                adm.scores.push_back(std::move(sc));
            }
        }
    }
    return out;
}

}  // namespace mandarin::ingest
