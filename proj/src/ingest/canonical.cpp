#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mandarin/ingest/records.hpp"
#include "mandarin/pheno/engine.hpp"

namespace mandarin::ingest {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<pheno::ScoreKind> score_kind_for_variable(const std::string& variable) {
    using pheno::ScoreKind;
    if (variable == "gcs_total") return ScoreKind::GcsTotal;
    if (variable == "gcs_eye") return ScoreKind::GcsEye;
    if (variable == "gcs_verbal") return ScoreKind::GcsVerbal;
    if (variable == "gcs_motor") return ScoreKind::GcsMotor;
    if (variable == "rass") return ScoreKind::Rass;
    if (variable == "cam") return ScoreKind::Cam;
    return std::nullopt;
}

// ---- ISO-8601 -------------------------------------------------------------------

namespace {

// Days since 1970-01-01 for a civil date (Howard Hinnant's algorithm).
long days_from_civil(long y, unsigned m, unsigned d) {
    y -= m <= 2;
    const long era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long>(doe) - 719468;
}

void civil_from_days(long z, long& y, unsigned& m, unsigned& d) {
    z += 719468;
    const long era = (z >= 0 ? z : z - 146096) / 146097;
    const auto doe = static_cast<unsigned long>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<long>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y += m <= 2;
}

}  // namespace

IsoTime parse_iso8601(const std::string& s) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    if (std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &sec) != 6)
        throw Error("unparseable ISO-8601 timestamp '" + s + "'");
    IsoTime t;
    t.clock_h = h + mi / 60.0 + sec / 3600.0;
    t.epoch_h = 24.0 * static_cast<double>(days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d))) +
                t.clock_h;
    return t;
}

std::string format_iso8601(double epoch_h) {
    long total_sec = static_cast<long>(std::llround(epoch_h * 3600.0));
    long days = total_sec / 86400;
    long rem = total_sec % 86400;
    if (rem < 0) {
        rem += 86400;
        days -= 1;
    }
    long y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04ld-%02u-%02uT%02ld:%02ld:%02ld", y, m, d, rem / 3600, (rem % 3600) / 60,
                  rem % 60);
    return buf;
}

// ---- CSV helpers -----------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void check_schema_comment(const std::string& line, const std::string& path) {
    const std::string want = "# mandarin schema_version=" + std::to_string(kSchemaVersion);
    if (line.rfind(want, 0) != 0)
        throw Error("artifact '" + path + "' has an unexpected schema header ('" + line +
                    "'); regenerate it with this toolchain version");
}

}  // namespace

// ---- writing ----------------------------------------------------------------------

void write_cohort(const Cohort& cohort, const std::string& dir) {
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "admissions.csv");
        if (!os) throw Error("cannot write admissions.csv under '" + dir + "'");
        os << "# mandarin schema_version=" << kSchemaVersion << " kind=admissions\n";
        os << "admission_id,patient_id,hospital_id,icu_start,icu_end,died_in_icu,age,sex,race,bmi,cci,cvd,chf,copd,"
              "dementia,renal\n";
        for (const auto& a : cohort.admissions) {
            const auto& st = a.statics;
            os << a.admission_id << ',' << a.patient_id << ',' << a.hospital_id << ',' << a.icu_start_iso << ','
               << a.icu_end_iso << ',' << (a.died_in_icu ? 1 : 0) << ',';
            if (st.age) os << fmt_double(*st.age);
            os << ',';
            if (st.sex) os << *st.sex;
            os << ',';
            if (st.race) os << *st.race;
            os << ',';
            if (st.bmi) os << fmt_double(*st.bmi);
            os << ',';
            if (st.cci) os << *st.cci;
            os << ',' << st.cvd << ',' << st.chf << ',' << st.copd << ',' << st.dementia << ',' << st.renal << '\n';
        }
    }
    {
        std::ofstream os(fs::path(dir) / "events.jsonl");
        if (!os) throw Error("cannot write events.jsonl under '" + dir + "'");
        os << R"({"schema_version":)" << kSchemaVersion << R"(,"kind":"events"})" << "\n";
        for (const auto& a : cohort.admissions) {
            for (const auto& e : a.events) {
                os << R"({"admission_id":")" << a.admission_id << R"(","time_h":)" << fmt_double(e.time_h)
                   << R"(,"variable":")" << e.variable << R"(","value":)" << fmt_double(e.value) << "}\n";
            }
        }
    }
}

// ---- reading ----------------------------------------------------------------------

Cohort read_cohort(const std::string& dir) {
    const fs::path adm_path = fs::path(dir) / "admissions.csv";
    const fs::path ev_path = fs::path(dir) / "events.jsonl";
    if (!fs::exists(adm_path))
        throw Error("missing " + adm_path.string() + "; run `mandarin synth` or point --out at a data directory");
    if (!fs::exists(ev_path))
        throw Error("missing " + ev_path.string() + "; run `mandarin synth` or point --out at a data directory");

    Cohort cohort;
    std::map<std::string, std::size_t> index;
    {
        std::ifstream is(adm_path);
        std::string line;
        std::getline(is, line);
        check_schema_comment(line, adm_path.string());
        std::getline(is, line);  // column header
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto f = split_csv_line(line);
            if (f.size() != 16) throw Error("admissions.csv: expected 16 fields, got " + std::to_string(f.size()));
            AdmissionRecord a;
            a.admission_id = f[0];
            a.patient_id = f[1];
            a.hospital_id = f[2];
            a.icu_start_iso = f[3];
            a.icu_end_iso = f[4];
            a.died_in_icu = f[5] == "1";
            const IsoTime start = parse_iso8601(a.icu_start_iso);
            const IsoTime end = parse_iso8601(a.icu_end_iso);
            a.los_h = end.epoch_h - start.epoch_h;
            a.admit_clock_h = start.clock_h;
            if (!(a.los_h > 0))
                throw Error("admission " + a.admission_id + ": icu_end must be after icu_start");
            if (!f[6].empty()) a.statics.age = std::stod(f[6]);
            if (a.statics.age && *a.statics.age < 18)
                throw Error("admission " + a.admission_id + ": age below 18 violates the cohort contract");
            if (!f[7].empty()) a.statics.sex = f[7];
            if (!f[8].empty()) a.statics.race = f[8];
            if (!f[9].empty()) a.statics.bmi = std::stod(f[9]);
            if (!f[10].empty()) a.statics.cci = std::stoi(f[10]);
            a.statics.cvd = f[11] == "1";
            a.statics.chf = f[12] == "1";
            a.statics.copd = f[13] == "1";
            a.statics.dementia = f[14] == "1";
            a.statics.renal = f[15] == "1";
            index[a.admission_id] = cohort.admissions.size();
            cohort.admissions.push_back(std::move(a));
        }
    }
    {
        std::ifstream is(ev_path);
        std::string line;
        std::getline(is, line);
        json header = json::parse(line);
        if (header.value("schema_version", -1) != kSchemaVersion)
            throw Error("events.jsonl has schema_version " + header.value("schema_version", json()).dump() +
                        ", expected " + std::to_string(kSchemaVersion) + "; regenerate the data directory");
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            const std::string adm_id = j.at("admission_id").get<std::string>();
            auto it = index.find(adm_id);
            if (it == index.end()) throw Error("events.jsonl references unknown admission '" + adm_id + "'");
            AdmissionRecord& a = cohort.admissions[it->second];
            ClinicalEvent e;
            e.time_h = j.at("time_h").get<double>();
            e.variable = j.at("variable").get<std::string>();
            e.value = j.at("value").get<double>();
            if (e.time_h < 0 || e.time_h > a.los_h)
                throw Error("admission " + adm_id + ": event at " + std::to_string(e.time_h) +
                            " h falls outside the stay");
            e.time_of_day = std::fmod(a.admit_clock_h + e.time_h, 24.0);
            if (auto kind = score_kind_for_variable(e.variable)) {
                pheno::NeuroScore s;
                s.admission_id = adm_id;
                s.kind = *kind;
                s.time_h = e.time_h;
                s.value = static_cast<int>(std::llround(e.value));
                pheno::validate_score(s);
                a.scores.push_back(std::move(s));
            }
            a.events.push_back(std::move(e));
        }
    }
    return cohort;
}

std::vector<pheno::TimedEvent> to_timed_events(const std::vector<ClinicalEvent>& events) {
    std::vector<pheno::TimedEvent> out;
    out.reserve(events.size());
    for (const auto& e : events) out.push_back({e.time_h, e.variable, e.value});
    return out;
}

pheno::TrajectoryInput trajectory_input(const AdmissionRecord& adm) {
    pheno::TrajectoryInput in;
    in.los_h = adm.los_h;
    in.died_in_icu = adm.died_in_icu;
    in.scores = adm.scores;
    in.events = to_timed_events(adm.events);
    return in;
}

}  // namespace mandarin::ingest
