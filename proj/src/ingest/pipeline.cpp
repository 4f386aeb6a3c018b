#include "mandarin/ingest/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mandarin/rng.hpp"

namespace mandarin::ingest {

using nlohmann::json;

// ---- exclusions ----------------------------------------------------------------------

ExclusionResult apply_exclusions(const Cohort& cohort, double compliance_threshold) {
    ExclusionResult out;
    out.report.input = static_cast<long>(cohort.admissions.size());
    out.report.compliance_threshold = compliance_threshold;

    long n_demo = 0, n_outcome = 0, n_vitals = 0, n_short = 0, n_long = 0, n_compliance = 0;
    std::vector<const AdmissionRecord*> surviving;

    for (const auto& a : cohort.admissions) {
        const auto& st = a.statics;
        if (!st.age || !st.sex || !st.race || !st.bmi) {
            ++n_demo;
            continue;
        }
        if (a.scores.empty()) {
            ++n_outcome;
            continue;
        }
        bool vitals_ok = true;
        for (const auto& vital : kRequiredVitals) {
            bool seen = false;
            for (const auto& e : a.events)
                if (e.variable == vital) {
                    seen = true;
                    break;
                }
            if (!seen) {
                vitals_ok = false;
                break;
            }
        }
        if (!vitals_ok) {
            ++n_vitals;
            continue;
        }
        if (a.los_h < 24.0) {
            ++n_short;
            continue;
        }
        if (a.los_h > 30.0 * 24.0) {
            ++n_long;
            continue;
        }
        surviving.push_back(&a);
    }

    // Hospital compliance over the admissions that survived the per-admission rules.
    std::map<std::string, std::vector<pheno::AdmissionScoresView>> by_hospital;
    for (const auto* a : surviving) by_hospital[a->hospital_id].push_back({a->los_h, &a->scores});
    std::set<std::string> failing;
    for (const auto& [hospital, views] : by_hospital) {
        const double frac = pheno::compliance_fraction(views);
        out.report.hospital_compliance[hospital] = frac;
        if (frac < compliance_threshold) failing.insert(hospital);
    }
    for (const auto* a : surviving) {
        if (failing.count(a->hospital_id)) {
            ++n_compliance;
            continue;
        }
        out.retained.admissions.push_back(*a);
    }

    out.report.retained = static_cast<long>(out.retained.admissions.size());
    out.report.reasons = {{"missing_demographics", n_demo}, {"missing_outcome", n_outcome},
                          {"missing_vitals", n_vitals},     {"los_below_24h", n_short},
                          {"los_above_30d", n_long},        {"hospital_compliance", n_compliance}};
    if (out.retained.admissions.empty()) throw Error("apply_exclusions: no admissions retained");
    return out;
}

// ---- vocabulary ----------------------------------------------------------------------

std::map<std::string, std::pair<double, double>> default_impossible_bounds() {
    return {
        {"hr", {20, 300}},       {"rr", {2, 80}},        {"sbp", {30, 300}},
        {"dbp", {10, 200}},      {"temp", {25, 45}},     {"spo2", {50, 100}},
        {"wbc", {0.1, 200}},     {"glucose", {10, 2000}},{"sodium", {90, 200}},
        {"bun", {1, 300}},       {"creatinine", {0.1, 40}}, {"lactate", {0.1, 30}},
        {"platelets", {1, 2000}},{"gcs_total", {3, 15}}, {"gcs_eye", {1, 4}},
        {"gcs_verbal", {1, 5}},  {"gcs_motor", {1, 6}},  {"rass", {-5, 4}},
        {"cam", {0, 1}},         {"propofol", {0, 1000}},{"midazolam", {0, 100}},
        {"fentanyl_infusion", {0, 1000}},
    };
}

namespace {

// Linear-interpolation percentile on a sorted vector (q in [0,1]).
double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw Error("percentile of empty vector");
    if (sorted.size() == 1) return sorted[0];
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace

const VariableEntry* VariableVocabulary::find(const std::string& name) const {
    auto it = variables.find(name);
    return it == variables.end() ? nullptr : &it->second;
}

VariableVocabulary build_vocabulary(const Cohort& train, WarningSink* warnings, double min_prevalence) {
    if (train.admissions.empty()) throw Error("build_vocabulary: empty training cohort");
    const auto impossible = default_impossible_bounds();
    const double n_stays = static_cast<double>(train.admissions.size());

    std::map<std::string, long> presence;
    for (const auto& a : train.admissions) {
        std::set<std::string> seen;
        for (const auto& e : a.events) seen.insert(e.variable);
        for (const auto& v : seen) presence[v] += 1;
    }

    VariableVocabulary vocab;
    for (const auto& [name, count] : presence) {
        const double prevalence = static_cast<double>(count) / n_stays;
        if (prevalence < min_prevalence) continue;

        VariableEntry entry;
        entry.prevalence = prevalence;
        if (auto it = impossible.find(name); it != impossible.end()) {
            entry.impossible_lo = it->second.first;
            entry.impossible_hi = it->second.second;
        }
        std::vector<double> values;
        for (const auto& a : train.admissions)
            for (const auto& e : a.events)
                if (e.variable == name && e.value >= entry.impossible_lo && e.value <= entry.impossible_hi)
                    values.push_back(e.value);
        if (values.empty()) {
            warn(warnings, "variable '" + name + "' has no plausible values; dropped");
            continue;
        }
        std::sort(values.begin(), values.end());
        entry.p1 = percentile_sorted(values, 0.01);
        entry.p99 = percentile_sorted(values, 0.99);
        double lo = 1e308, hi = -1e308;
        for (double v : values)
            if (v >= entry.p1 && v <= entry.p99) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        if (!(lo < hi)) {
            warn(warnings, "variable '" + name + "' has a degenerate value range; dropped");
            continue;
        }
        entry.scale_min = lo;
        entry.scale_max = hi;
        vocab.variables.emplace(name, entry);
    }
    // Dense stable codes in lexicographic order; 0 stays reserved for padding.
    int code = 1;
    for (auto& [name, entry] : vocab.variables) entry.code = code++;

    // Static scaling bounds from the training cohort.
    double age_lo = 1e308, age_hi = -1e308, bmi_lo = 1e308, bmi_hi = -1e308, cci_lo = 1e308, cci_hi = -1e308;
    for (const auto& a : train.admissions) {
        if (a.statics.age) {
            age_lo = std::min(age_lo, *a.statics.age);
            age_hi = std::max(age_hi, *a.statics.age);
        }
        if (a.statics.bmi) {
            bmi_lo = std::min(bmi_lo, *a.statics.bmi);
            bmi_hi = std::max(bmi_hi, *a.statics.bmi);
        }
        if (a.statics.cci) {
            cci_lo = std::min(cci_lo, static_cast<double>(*a.statics.cci));
            cci_hi = std::max(cci_hi, static_cast<double>(*a.statics.cci));
        }
    }
    if (age_lo < age_hi) vocab.static_bounds = {age_lo, age_hi, bmi_lo, bmi_hi, cci_lo, cci_hi};
    return vocab;
}

std::string VariableVocabulary::to_json() const {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "vocabulary";
    json vars = json::object();
    for (const auto& [name, e] : variables) {
        vars[name] = {{"code", e.code},
                      {"prevalence", e.prevalence},
                      {"p1", e.p1},
                      {"p99", e.p99},
                      {"impossible_lo", e.impossible_lo},
                      {"impossible_hi", e.impossible_hi},
                      {"scale_min", e.scale_min},
                      {"scale_max", e.scale_max}};
    }
    j["variables"] = vars;
    j["static_bounds"] = {{"age", {static_bounds.age_lo, static_bounds.age_hi}},
                          {"bmi", {static_bounds.bmi_lo, static_bounds.bmi_hi}},
                          {"cci", {static_bounds.cci_lo, static_bounds.cci_hi}}};
    return j.dump(2);
}

VariableVocabulary VariableVocabulary::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("schema_version", -1) != kSchemaVersion)
        throw Error("vocabulary artifact has schema_version " + j.value("schema_version", json()).dump() +
                    ", expected " + std::to_string(kSchemaVersion) + "; re-run `mandarin ingest`");
    VariableVocabulary v;
    for (const auto& [name, e] : j.at("variables").items()) {
        VariableEntry entry;
        entry.code = e.at("code").get<int>();
        entry.prevalence = e.at("prevalence").get<double>();
        entry.p1 = e.at("p1").get<double>();
        entry.p99 = e.at("p99").get<double>();
        entry.impossible_lo = e.at("impossible_lo").get<double>();
        entry.impossible_hi = e.at("impossible_hi").get<double>();
        entry.scale_min = e.at("scale_min").get<double>();
        entry.scale_max = e.at("scale_max").get<double>();
        v.variables.emplace(name, entry);
    }
    const auto& sb = j.at("static_bounds");
    v.static_bounds.age_lo = sb.at("age")[0].get<double>();
    v.static_bounds.age_hi = sb.at("age")[1].get<double>();
    v.static_bounds.bmi_lo = sb.at("bmi")[0].get<double>();
    v.static_bounds.bmi_hi = sb.at("bmi")[1].get<double>();
    v.static_bounds.cci_lo = sb.at("cci")[0].get<double>();
    v.static_bounds.cci_hi = sb.at("cci")[1].get<double>();
    return v;
}

void VariableVocabulary::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write vocabulary to '" + path + "'");
    os << to_json() << "\n";
}

VariableVocabulary VariableVocabulary::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("missing " + path + "; run `mandarin ingest` first");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json(text);
}

// ---- cleaning & scaling ------------------------------------------------------------------

std::vector<ClinicalEvent> clean_events(const std::vector<ClinicalEvent>& events, const VariableVocabulary& vocab) {
    std::vector<ClinicalEvent> out;
    out.reserve(events.size());
    for (const auto& e : events) {
        const VariableEntry* entry = vocab.find(e.variable);
        if (!entry) continue;
        if (e.value < entry->impossible_lo || e.value > entry->impossible_hi) continue;
        if (e.value < entry->p1 || e.value > entry->p99) continue;  // closed interval retained
        out.push_back(e);
    }
    return out;
}

double scale_value(double x, double lo, double hi) {
    if (!(hi > lo)) throw Error("scale_value: degenerate range");
    return std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
}

std::vector<ClinicalEvent> scale_events(const std::vector<ClinicalEvent>& events, const VariableVocabulary& vocab) {
    std::vector<ClinicalEvent> out;
    out.reserve(events.size());
    for (const auto& e : events) {
        const VariableEntry* entry = vocab.find(e.variable);
        if (!entry) throw Error("scale_events: variable '" + e.variable + "' missing from vocabulary");
        ClinicalEvent s = e;
        s.value = scale_value(e.value, entry->scale_min, entry->scale_max);
        out.push_back(std::move(s));
    }
    return out;
}

std::array<double, kStaticDim> static_vector(const StaticInfo& s, const StaticBounds& b) {
    std::array<double, kStaticDim> v{};
    v[0] = s.age ? scale_value(*s.age, b.age_lo, b.age_hi) : 0.0;
    v[1] = s.sex && *s.sex == "M" ? 1.0 : 0.0;
    const std::string race = s.race.value_or("Other");
    v[2] = race == "Black" ? 1.0 : 0.0;
    v[3] = race == "White" ? 1.0 : 0.0;
    v[4] = (race != "Black" && race != "White") ? 1.0 : 0.0;
    v[5] = s.bmi ? scale_value(*s.bmi, b.bmi_lo, b.bmi_hi) : 0.0;
    v[6] = s.cci ? scale_value(static_cast<double>(*s.cci), b.cci_lo, b.cci_hi) : 0.0;
    v[7] = s.cvd;
    v[8] = s.chf;
    v[9] = s.copd;
    v[10] = s.dementia;
    v[11] = s.renal;
    return v;
}

// ---- sequences -----------------------------------------------------------------------------

EventSequence assemble_sequence(const std::vector<ClinicalEvent>& cleaned_scaled, const VariableVocabulary& vocab,
                                double cutoff_h, long l_max) {
    struct Item {
        double time_h, time_of_day, value;
        int code;
    };
    std::vector<Item> items;
    for (const auto& e : cleaned_scaled) {
        if (!(e.time_h < cutoff_h)) continue;
        const VariableEntry* entry = vocab.find(e.variable);
        if (!entry) throw Error("assemble_sequence: variable '" + e.variable + "' missing from vocabulary");
        items.push_back({e.time_h, e.time_of_day, e.value, entry->code});
    }
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
        if (a.time_h != b.time_h) return a.time_h < b.time_h;
        return a.code < b.code;  // simultaneous events ordered by code, deterministically
    });
    if (static_cast<long>(items.size()) > l_max)
        items.erase(items.begin(), items.end() - l_max);  // keep the most recent

    EventSequence seq;
    seq.l_max = l_max;
    seq.n_valid = static_cast<long>(items.size());
    seq.time_h.assign(l_max, 0.0);
    seq.time_of_day.assign(l_max, 0.0);
    seq.value.assign(l_max, 0.0);
    seq.code.assign(l_max, 0);
    seq.mask.assign(l_max, 0);
    for (long i = 0; i < seq.n_valid; ++i) {
        seq.time_h[i] = items[i].time_h;
        seq.time_of_day[i] = items[i].time_of_day;
        seq.value[i] = items[i].value;
        seq.code[i] = items[i].code;
        seq.mask[i] = 1;
    }
    return seq;
}

// ---- samples --------------------------------------------------------------------------------

const char* to_string(Outcome o) {
    switch (o) {
        case Outcome::NoAbd: return "no_abd";
        case Outcome::Delirium: return "delirium";
        case Outcome::Coma: return "coma";
        case Outcome::Mortality: return "mortality";
    }
    return "?";
}

Outcome outcome_from_string(const std::string& s) {
    if (s == "no_abd") return Outcome::NoAbd;
    if (s == "delirium") return Outcome::Delirium;
    if (s == "coma") return Outcome::Coma;
    if (s == "mortality") return Outcome::Mortality;
    throw Error("unknown outcome '" + s + "'");
}

std::array<Outcome, 3> targets_for(pheno::BrainStatus current) {
    using pheno::BrainStatus;
    switch (current) {
        case BrainStatus::NoAbd: return {Outcome::Delirium, Outcome::Coma, Outcome::Mortality};
        case BrainStatus::Delirium: return {Outcome::NoAbd, Outcome::Coma, Outcome::Mortality};
        case BrainStatus::Coma: return {Outcome::NoAbd, Outcome::Delirium, Outcome::Mortality};
        case BrainStatus::Deceased: break;
    }
    throw Error("targets_for: deceased is not a valid current status");
}

namespace {

LabelState status_label(const std::vector<pheno::WindowAssessment>& traj, long n_windows, pheno::BrainStatus target,
                        double t, double h, double los, bool died) {
    // Target windows overlap (t, t+h] with positive duration: k in [t/12, (t+h)/12).
    const long first = static_cast<long>(t / 12.0);
    const long past_end = static_cast<long>((t + h) / 12.0);
    for (long k = first; k < past_end && k < n_windows; ++k)
        if (traj[k].status == target) return LabelState::Positive;
    if (los >= t + h) return LabelState::Negative;   // horizon fully observed
    if (died) return LabelState::Negative;           // death precludes later occurrence
    return LabelState::Censored;                     // discharged alive before t+h
}

LabelState mortality_label(double t, double h, double los, bool died) {
    if (died && los <= t + h) return LabelState::Positive;
    if (los >= t + h) return LabelState::Negative;
    return LabelState::Censored;
}

}  // namespace

std::vector<PredictionSample> make_samples(const AdmissionRecord& adm,
                                           const std::vector<pheno::WindowAssessment>& trajectory,
                                           const VariableVocabulary& vocab, long l_max) {
    const long n_windows =
        static_cast<long>(trajectory.size()) - (adm.died_in_icu && !trajectory.empty() &&
                                                        trajectory.back().status == pheno::BrainStatus::Deceased
                                                    ? 1
                                                    : 0);
    const auto cleaned = clean_events(adm.events, vocab);
    const auto scaled = scale_events(cleaned, vocab);
    const auto statics = static_vector(adm.statics, vocab.static_bounds);

    std::vector<PredictionSample> out;
    for (double t = 12.0; t < adm.los_h; t += 12.0) {
        const long current_window = static_cast<long>(t / 12.0) - 1;
        if (current_window < 0 || current_window >= n_windows) break;
        const pheno::BrainStatus current = trajectory[current_window].status;
        if (current == pheno::BrainStatus::Deceased) break;

        PredictionSample s;
        s.admission_id = adm.admission_id;
        s.prediction_time_h = t;
        s.current_status = current;
        s.sequence = assemble_sequence(scaled, vocab, t, l_max);
        s.statics = statics;
        const auto targets = targets_for(current);
        for (int slot = 0; slot < 3; ++slot) {
            for (int hi = 0; hi < static_cast<int>(kHorizonsH.size()); ++hi) {
                const double h = kHorizonsH[hi];
                if (targets[slot] == Outcome::Mortality)
                    s.labels[slot][hi] = mortality_label(t, h, adm.los_h, adm.died_in_icu);
                else
                    s.labels[slot][hi] =
                        status_label(trajectory, n_windows, static_cast<pheno::BrainStatus>(targets[slot]), t, h,
                                     adm.los_h, adm.died_in_icu);
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---- split -----------------------------------------------------------------------------------

CohortSplit split_cohort(const Cohort& cohort, std::uint64_t seed, double validation_fraction) {
    std::set<std::string> patients;
    for (const auto& a : cohort.admissions) patients.insert(a.patient_id);
    if (patients.size() < 10) throw Error("split_cohort: need at least 10 patients, got " +
                                          std::to_string(patients.size()));
    std::vector<std::string> ordered(patients.begin(), patients.end());
    Rng rng(seed);
    rng.shuffle(ordered);
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                                    validation_fraction * static_cast<double>(ordered.size()))));
    CohortSplit split;
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        if (i < n_val)
            split.validation_patients.insert(ordered[i]);
        else
            split.train_patients.insert(ordered[i]);
    }
    return split;
}

// ---- binary sample container -------------------------------------------------------------------

namespace {

constexpr char kSampleMagic[8] = {'M', 'N', 'D', 'R', 'S', 'M', 'P', '1'};

template <typename T>
void wpod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T rpod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw Error("samples artifact: truncated file");
    return v;
}

void wstr(std::ostream& os, const std::string& s) {
    wpod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string rstr(std::istream& is) {
    const auto n = rpod<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw Error("samples artifact: truncated file");
    return s;
}

}  // namespace

void SampleSet::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write samples to '" + path + "'");
    os.write(kSampleMagic, sizeof(kSampleMagic));
    wpod<std::uint32_t>(os, static_cast<std::uint32_t>(kSchemaVersion));
    wpod<std::uint64_t>(os, vocab_fingerprint);
    wpod<std::uint32_t>(os, static_cast<std::uint32_t>(kStaticDim));
    wpod<std::uint32_t>(os, static_cast<std::uint32_t>(l_max));
    wpod<std::uint64_t>(os, samples.size());
    for (const auto& s : samples) {
        wstr(os, s.admission_id);
        wpod<double>(os, s.prediction_time_h);
        wpod<std::uint8_t>(os, static_cast<std::uint8_t>(s.current_status));
        wpod<std::uint8_t>(os, s.is_validation ? 1 : 0);
        wpod<std::uint32_t>(os, static_cast<std::uint32_t>(s.sequence.n_valid));
        for (long i = 0; i < s.sequence.n_valid; ++i) {
            wpod<float>(os, static_cast<float>(s.sequence.time_h[i]));
            wpod<float>(os, static_cast<float>(s.sequence.time_of_day[i]));
            wpod<float>(os, static_cast<float>(s.sequence.value[i]));
            wpod<std::uint32_t>(os, static_cast<std::uint32_t>(s.sequence.code[i]));
        }
        for (double v : s.statics) wpod<float>(os, static_cast<float>(v));
        for (const auto& row : s.labels)
            for (LabelState l : row) wpod<std::uint8_t>(os, static_cast<std::uint8_t>(l));
    }
    if (!os) throw Error("write to '" + path + "' failed");
}

SampleSet SampleSet::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("missing " + path + "; run `mandarin ingest` first");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kSampleMagic, sizeof(kSampleMagic)) != 0)
        throw Error("'" + path + "' is not a samples artifact");
    if (rpod<std::uint32_t>(is) != static_cast<std::uint32_t>(kSchemaVersion))
        throw Error("samples artifact schema_version mismatch; re-run `mandarin ingest`");
    SampleSet set;
    set.vocab_fingerprint = rpod<std::uint64_t>(is);
    if (rpod<std::uint32_t>(is) != static_cast<std::uint32_t>(kStaticDim))
        throw Error("samples artifact static dimension mismatch");
    set.l_max = rpod<std::uint32_t>(is);
    const auto n = rpod<std::uint64_t>(is);
    set.samples.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        PredictionSample s;
        s.admission_id = rstr(is);
        s.prediction_time_h = rpod<double>(is);
        s.current_status = static_cast<pheno::BrainStatus>(rpod<std::uint8_t>(is));
        s.is_validation = rpod<std::uint8_t>(is) != 0;
        const long n_valid = rpod<std::uint32_t>(is);
        auto& q = s.sequence;
        q.l_max = set.l_max;
        q.n_valid = n_valid;
        q.time_h.assign(set.l_max, 0.0);
        q.time_of_day.assign(set.l_max, 0.0);
        q.value.assign(set.l_max, 0.0);
        q.code.assign(set.l_max, 0);
        q.mask.assign(set.l_max, 0);
        for (long j = 0; j < n_valid; ++j) {
            q.time_h[j] = rpod<float>(is);
            q.time_of_day[j] = rpod<float>(is);
            q.value[j] = rpod<float>(is);
            q.code[j] = static_cast<int>(rpod<std::uint32_t>(is));
            q.mask[j] = 1;
        }
        for (auto& v : s.statics) v = rpod<float>(is);
        for (auto& row : s.labels)
            for (auto& l : row) l = static_cast<LabelState>(rpod<std::uint8_t>(is));
        set.samples.push_back(std::move(s));
    }
    return set;
}

}  // namespace mandarin::ingest
