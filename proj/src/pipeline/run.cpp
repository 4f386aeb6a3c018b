#include "mandarin/pipeline/run.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "mandarin/baselines/baselines.hpp"
#include "mandarin/eval/attribution.hpp"
#include "mandarin/eval/isotonic.hpp"
#include "mandarin/eval/metrics.hpp"
#include "mandarin/eval/stats.hpp"
#include "mandarin/eval/subgroup.hpp"
#include "mandarin/model/train.hpp"
#include "mandarin/rng.hpp"
#include "mandarin/threads.hpp"

namespace mandarin::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using ingest::LabelState;
using ingest::Outcome;
using ingest::PredictionSample;
using pheno::BrainStatus;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// Outputs are deterministic; wall-clock facts live only in run_meta.json.
struct StageWriter {
    fs::path dir;
    std::string command;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
    WarningSink warnings;

    StageWriter(const RunConfig& cfg, const std::string& stage, const std::string& cmd)
        : dir(cfg.dir(stage)), command(cmd) {
        fs::create_directories(dir);
        std::ofstream os(dir / "run_config.json");
        os << cfg.to_json() << "\n";
    }

    void finish() {
        for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
        json meta;
        meta["command"] = command;
        meta["schema_version"] = kSchemaVersion;
        const auto now = std::chrono::system_clock::now();
        meta["written_at_unix"] = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
        meta["duration_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        meta["warnings"] = warnings;
        std::ofstream os(dir / "run_meta.json");
        os << meta.dump(2) << "\n";
    }
};

void require_artifact(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) throw Error("missing " + p.string() + "; run `mandarin " + producer + "` first");
}

// ---- shared loading -----------------------------------------------------------------

struct LabeledCohort {
    ingest::Cohort retained;
    ingest::ExclusionReport report;
    std::vector<std::vector<pheno::WindowAssessment>> trajectories;  // per retained admission
};

LabeledCohort load_labeled_cohort(const RunConfig& cfg, WarningSink* warnings) {
    const std::string data_dir = cfg.dir("data");
    require_artifact(fs::path(data_dir) / "admissions.csv", "synth");
    ingest::Cohort cohort = ingest::read_cohort(data_dir);
    auto excl = ingest::apply_exclusions(cohort, cfg.compliance_threshold);
    LabeledCohort out;
    out.report = std::move(excl.report);
    out.retained = std::move(excl.retained);
    out.trajectories.reserve(out.retained.admissions.size());
    for (const auto& adm : out.retained.admissions)
        out.trajectories.push_back(pheno::label_trajectory(ingest::trajectory_input(adm), cfg.phenotype, warnings));
    return out;
}

struct PredictionRow {
    std::string admission_id;
    double prediction_time_h;
    std::string branch;
    std::string outcome;
    int horizon_h;
    double raw;
    double calibrated;
};

void write_predictions_csv(const std::string& path, const std::vector<PredictionRow>& rows) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path);
    os << "# mandarin schema_version=" << kSchemaVersion << " kind=predictions\n";
    os << "admission_id,prediction_time_h,branch,outcome,horizon_h,probability_raw,probability_calibrated\n";
    for (const auto& r : rows)
        os << r.admission_id << ',' << fmt(r.prediction_time_h) << ',' << r.branch << ',' << r.outcome << ','
           << r.horizon_h << ',' << fmt(r.raw) << ',' << fmt(r.calibrated) << '\n';
}

std::vector<PredictionRow> read_predictions_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("missing " + path + "; run `mandarin predict` first");
    std::string line;
    std::getline(is, line);
    if (line.rfind("# mandarin schema_version=" + std::to_string(kSchemaVersion), 0) != 0)
        throw Error("predictions artifact has an unexpected schema header; re-run `mandarin predict`");
    std::getline(is, line);  // column header
    std::vector<PredictionRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        PredictionRow r;
        std::vector<std::string> f;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                f.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        f.push_back(cur);
        if (f.size() != 7) throw Error("predictions.csv: malformed row");
        r.admission_id = f[0];
        r.prediction_time_h = std::stod(f[1]);
        r.branch = f[2];
        r.outcome = f[3];
        r.horizon_h = std::stoi(f[4]);
        r.raw = std::stod(f[5]);
        r.calibrated = std::stod(f[6]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Seeded 10% admission-level calibration subset of the validation split.
std::set<std::string> calibration_admissions(const ingest::SampleSet& set, double fraction, std::uint64_t seed) {
    std::set<std::string> val_adm;
    for (const auto& s : set.samples)
        if (s.is_validation) val_adm.insert(s.admission_id);
    std::vector<std::string> ordered(val_adm.begin(), val_adm.end());
    Rng rng(seed ^ 0xCA11B8A7E5EEDULL);
    rng.shuffle(ordered);
    const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ordered.size())));
    return {ordered.begin(), ordered.begin() + std::min(n, ordered.size())};
}

int horizon_index(int horizon_h) {
    for (std::size_t i = 0; i < ingest::kHorizonsH.size(); ++i)
        if (ingest::kHorizonsH[i] == horizon_h) return static_cast<int>(i);
    throw Error("unknown horizon " + std::to_string(horizon_h) + " h");
}

model::ModelConfig resolve_model_config(const RunConfig& cfg, long vocab_size) {
    model::ModelConfig mc = model::ModelConfig::from_preset(cfg.preset, vocab_size);
    for (const auto& [key, value] : cfg.model_overrides) {
        if (key == "l_max") mc.l_max = static_cast<long>(value);
        else if (key == "d_model") mc.d_model = static_cast<long>(value);
        else if (key == "conv_kernel") mc.conv_kernel = static_cast<long>(value);
        else if (key == "n_blocks") mc.n_blocks = static_cast<long>(value);
        else if (key == "n_heads") mc.n_heads = static_cast<long>(value);
        else if (key == "n_experts") mc.n_experts = static_cast<long>(value);
        else if (key == "k_experts") mc.k_experts = static_cast<long>(value);
        else if (key == "k_pool") mc.k_pool = static_cast<long>(value);
        else if (key == "expert_hidden") mc.expert_hidden = static_cast<long>(value);
        else if (key == "load_balance_lambda") mc.load_balance_lambda = value;
        else throw Error("run config: unknown model override '" + key + "'");
    }
    mc.validate();
    return mc;
}

}  // namespace

// ---- synth ------------------------------------------------------------------------------

void cmd_synth(const RunConfig& cfg) {
    StageWriter stage(cfg, "data", "synth");
    auto result = ingest::generate_synthetic_cohort(cfg.generator, cfg.seed);
    ingest::write_cohort(result.cohort, stage.dir.string());
    result.truth.save((stage.dir / "ground_truth.json").string());
    stage.finish();
}

// ---- ingest -----------------------------------------------------------------------------

void cmd_ingest(const RunConfig& cfg) {
    StageWriter stage(cfg, "ingest", "ingest");
    LabeledCohort labeled = load_labeled_cohort(cfg, &stage.warnings);

    // Patient-level split decides which admissions may shape the vocabulary.
    auto split = ingest::split_cohort(labeled.retained, cfg.seed);
    ingest::Cohort train_cohort;
    for (const auto& adm : labeled.retained.admissions)
        if (split.train_patients.count(adm.patient_id)) train_cohort.admissions.push_back(adm);
    if (train_cohort.admissions.empty()) throw Error("ingest: empty training split");
    auto vocab = ingest::build_vocabulary(train_cohort, &stage.warnings);
    for (const auto& [name, entry] : vocab.variables) {
        bool in_train = false;
        for (const auto& adm : train_cohort.admissions)
            for (const auto& e : adm.events)
                if (e.variable == name) {
                    in_train = true;
                    break;
                }
        if (!in_train) throw Error("ingest: variable '" + name + "' entered the vocabulary without training support");
    }

    ingest::SampleSet set;
    set.vocab_fingerprint = vocab.fingerprint();
    set.l_max = cfg.resolved_l_max();
    for (std::size_t i = 0; i < labeled.retained.admissions.size(); ++i) {
        const auto& adm = labeled.retained.admissions[i];
        auto samples = ingest::make_samples(adm, labeled.trajectories[i], vocab, set.l_max);
        const bool is_val = split.validation_patients.count(adm.patient_id) > 0;
        for (auto& s : samples) {
            s.is_validation = is_val;
            set.samples.push_back(std::move(s));
        }
    }

    // Pipeline hygiene: monotone labels, leak-free sequences, report reconciliation.
    for (const auto& s : set.samples) {
        for (int slot = 0; slot < 3; ++slot) {
            bool positive_seen = false;
            for (int h = 0; h < 6; ++h) {
                if (positive_seen && s.labels[slot][h] != LabelState::Positive)
                    throw Error("ingest: label monotonicity violated for admission " + s.admission_id);
                if (s.labels[slot][h] == LabelState::Positive) positive_seen = true;
            }
        }
        for (long i = 0; i < s.sequence.n_valid; ++i)
            if (!(s.sequence.time_h[i] < s.prediction_time_h))
                throw Error("ingest: leakage detected for admission " + s.admission_id);
    }
    long reason_total = 0;
    for (const auto& [reason, count] : labeled.report.reasons) reason_total += count;
    if (reason_total != labeled.report.input - labeled.report.retained)
        throw Error("ingest: exclusion report does not reconcile");

    vocab.save((stage.dir / "vocabulary.json").string());
    set.save((stage.dir / "samples.bin").string());
    {
        json report;
        report["schema_version"] = kSchemaVersion;
        report["kind"] = "exclusion_report";
        report["input"] = labeled.report.input;
        report["retained"] = labeled.report.retained;
        json reasons = json::array();
        for (const auto& [reason, count] : labeled.report.reasons)
            reasons.push_back({{"reason", reason}, {"count", count}});
        report["reasons"] = std::move(reasons);
        report["compliance_threshold"] = labeled.report.compliance_threshold;
        report["hospital_compliance"] = labeled.report.hospital_compliance;
        std::ofstream os(stage.dir / "exclusion_report.json");
        os << report.dump(2) << "\n";
    }
    {
        std::ofstream os(stage.dir / "cohort_meta.csv");
        os << "# mandarin schema_version=" << kSchemaVersion << " kind=cohort_meta\n";
        os << "admission_id,patient_id,hospital_id,split,age,sex,race,died_in_icu,los_h\n";
        for (const auto& adm : labeled.retained.admissions) {
            const bool is_val = split.validation_patients.count(adm.patient_id) > 0;
            os << adm.admission_id << ',' << adm.patient_id << ',' << adm.hospital_id << ','
               << (is_val ? "validation" : "train") << ',' << fmt(adm.statics.age.value_or(0)) << ','
               << adm.statics.sex.value_or("") << ',' << adm.statics.race.value_or("") << ','
               << (adm.died_in_icu ? 1 : 0) << ',' << fmt(adm.los_h) << '\n';
        }
    }
    stage.finish();
}

// ---- label --------------------------------------------------------------------------------

void cmd_label(const RunConfig& cfg) {
    StageWriter stage(cfg, "labels", "label");
    LabeledCohort labeled = load_labeled_cohort(cfg, &stage.warnings);
    std::ofstream os(stage.dir / "labels.csv");
    os << "# mandarin schema_version=" << kSchemaVersion << " kind=labels\n";
    os << "admission_id,window_index,window_start_h,status,delirium_subtype,coma_subtype,phenotypes,partial_flag\n";
    for (std::size_t i = 0; i < labeled.retained.admissions.size(); ++i) {
        const auto& adm = labeled.retained.admissions[i];
        for (const auto& w : labeled.trajectories[i]) {
            os << adm.admission_id << ',' << w.window_index << ',' << fmt(w.window_start_h) << ','
               << pheno::to_string(w.status) << ',';
            if (w.delirium_subtype) os << pheno::to_string(*w.delirium_subtype);
            os << ',';
            if (w.coma_subtype) os << pheno::to_string(*w.coma_subtype);
            os << ',';
            bool first = true;
            for (const auto& ph : w.delirium_phenotypes) {
                if (!first) os << ';';
                os << pheno::to_string(ph);
                first = false;
            }
            os << ',' << (w.partial ? 1 : 0) << '\n';
        }
    }
    stage.finish();
}

// ---- transitions ----------------------------------------------------------------------------

void cmd_transitions(const RunConfig& cfg) {
    StageWriter stage(cfg, "transitions", "transitions");
    const fs::path labels_path = fs::path(cfg.dir("labels")) / "labels.csv";
    require_artifact(labels_path, "label");

    std::ifstream is(labels_path);
    std::string line;
    std::getline(is, line);
    if (line.rfind("# mandarin schema_version=" + std::to_string(kSchemaVersion), 0) != 0)
        throw Error("labels artifact has an unexpected schema header; re-run `mandarin label`");
    std::getline(is, line);
    std::vector<std::vector<BrainStatus>> trajectories;
    std::string current_adm;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                f.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        f.push_back(cur);
        if (f[0] != current_adm) {
            trajectories.emplace_back();
            current_adm = f[0];
        }
        trajectories.back().push_back(pheno::brain_status_from_string(f[3]));
    }
    auto m = pheno::compute_transitions(trajectories);

    const char* names[4] = {"no_abd", "delirium", "coma", "deceased"};
    {
        std::ofstream os(stage.dir / "transition_counts.csv");
        os << "# mandarin schema_version=" << kSchemaVersion << " kind=transition_counts\n";
        os << "from,to_no_abd,to_delirium,to_coma,to_deceased\n";
        for (int r = 0; r < 3; ++r) {
            os << names[r];
            for (int c = 0; c < 4; ++c) os << ',' << m.counts(r, c);
            os << '\n';
        }
    }
    {
        std::ofstream os(stage.dir / "transition_probs.csv");
        os << "# mandarin schema_version=" << kSchemaVersion << " kind=transition_probs\n";
        os << "from,to_no_abd,to_delirium,to_coma,to_deceased\n";
        for (int r = 0; r < 3; ++r) {
            os << names[r];
            for (int c = 0; c < 4; ++c) os << ',' << fmt(m.probabilities(r, c));
            os << '\n';
        }
    }
    {
        std::ofstream os(stage.dir / "sankey.csv");
        os << "# mandarin schema_version=" << kSchemaVersion << " kind=sankey\n";
        os << "source,target,count\n";
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c)
                if (m.counts(r, c) > 0) os << names[r] << ',' << names[c] << ',' << m.counts(r, c) << '\n';
    }
    stage.finish();
}

// ---- train ----------------------------------------------------------------------------------

void cmd_train(const RunConfig& cfg) {
    StageWriter stage(cfg, "model", "train");
    const fs::path ingest_dir = cfg.dir("ingest");
    auto vocab = ingest::VariableVocabulary::load((ingest_dir / "vocabulary.json").string());
    auto set = ingest::SampleSet::load((ingest_dir / "samples.bin").string());
    if (set.vocab_fingerprint != vocab.fingerprint())
        throw Error("samples.bin does not match vocabulary.json; re-run `mandarin ingest`");

    model::ModelConfig mc = resolve_model_config(cfg, static_cast<long>(vocab.size()));
    if (mc.l_max != set.l_max)
        throw Error("samples were built with l_max " + std::to_string(set.l_max) + " but the model wants " +
                    std::to_string(mc.l_max) + "; re-run `mandarin ingest`");
    model::TrainConfig tc;
    tc.batch_size = cfg.training.batch_size;
    tc.max_epochs = cfg.training.max_epochs;
    tc.patience = cfg.training.patience;
    tc.adam.lr = cfg.training.lr;

    auto result = model::train(set, vocab, mc, tc, cfg.seed);
    for (const auto& w : result.warnings) stage.warnings.push_back(w);
    result.bundle.save(stage.dir.string());

    json log;
    log["schema_version"] = kSchemaVersion;
    log["kind"] = "training_log";
    json branches = json::array();
    for (const auto& b : result.logs) {
        json jb;
        jb["branch"] = b.branch;
        jb["skipped"] = b.skipped;
        jb["n_train"] = b.n_train;
        jb["n_val"] = b.n_val;
        jb["epoch_val_auroc"] = b.epoch_val_auroc;
        jb["epoch_loss"] = b.epoch_loss;
        jb["best_epoch"] = b.best_epoch;
        jb["steps"] = b.steps;
        branches.push_back(std::move(jb));
    }
    log["branches"] = std::move(branches);
    std::ofstream os(stage.dir / "training_log.json");
    os << log.dump(2) << "\n";
    stage.finish();
}

// ---- predict ----------------------------------------------------------------------------------

void cmd_predict(const RunConfig& cfg) {
    StageWriter stage(cfg, "predictions", "predict");
    auto bundle = model::ModelBundle::load(cfg.dir("model"));
    auto set = ingest::SampleSet::load((fs::path(cfg.dir("ingest")) / "samples.bin").string());
    if (set.vocab_fingerprint != bundle.vocab.fingerprint())
        throw Error("samples.bin does not match the model bundle's vocabulary; re-run `mandarin ingest` and `train`");

    eval::CalibrationSet calibration;
    const fs::path cal_path = fs::path(cfg.dir("model")) / "calibration.json";
    if (fs::exists(cal_path)) calibration = eval::CalibrationSet::load(cal_path.string());

    std::vector<const PredictionSample*> ptrs;
    ptrs.reserve(set.samples.size());
    for (const auto& s : set.samples) ptrs.push_back(&s);
    auto risks = model::predict(bundle, ptrs);

    std::vector<PredictionRow> rows;
    rows.reserve(set.samples.size() * 18);
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
        const auto& s = set.samples[i];
        const int b = model::branch_index(s.current_status);
        const auto targets = ingest::targets_for(s.current_status);
        for (int slot = 0; slot < 3; ++slot) {
            for (std::size_t h = 0; h < ingest::kHorizonsH.size(); ++h) {
                PredictionRow r;
                r.admission_id = s.admission_id;
                r.prediction_time_h = s.prediction_time_h;
                r.branch = model::branch_name(b);
                r.outcome = ingest::to_string(targets[slot]);
                r.horizon_h = ingest::kHorizonsH[h];
                r.raw = risks[i].prob[slot][h];
                const eval::CalibrationMap* map = calibration.find(r.branch, r.outcome, r.horizon_h);
                r.calibrated = map ? eval::isotonic_apply(*map, r.raw) : r.raw;
                rows.push_back(std::move(r));
            }
        }
    }
    std::sort(rows.begin(), rows.end(), [](const PredictionRow& a, const PredictionRow& b) {
        return std::tie(a.admission_id, a.prediction_time_h, a.outcome, a.horizon_h) <
               std::tie(b.admission_id, b.prediction_time_h, b.outcome, b.horizon_h);
    });
    write_predictions_csv((stage.dir / "predictions.csv").string(), rows);
    stage.finish();
}

// ---- calibrate ----------------------------------------------------------------------------------

void cmd_calibrate(const RunConfig& cfg) {
    StageWriter stage(cfg, "model", "calibrate");
    auto bundle = model::ModelBundle::load(cfg.dir("model"));
    auto set = ingest::SampleSet::load((fs::path(cfg.dir("ingest")) / "samples.bin").string());
    if (set.vocab_fingerprint != bundle.vocab.fingerprint())
        throw Error("samples.bin does not match the model bundle's vocabulary; re-run `mandarin ingest` and `train`");

    const auto cal_adm = calibration_admissions(set, cfg.evaluate.calibration_fraction, cfg.seed);
    std::vector<const PredictionSample*> cal_samples;
    for (const auto& s : set.samples)
        if (s.is_validation && cal_adm.count(s.admission_id)) cal_samples.push_back(&s);
    if (cal_samples.empty()) throw Error("calibrate: empty calibration sample; run `mandarin ingest` on a larger cohort");

    auto risks = model::predict(bundle, cal_samples);
    eval::CalibrationSet calibration;
    for (int b = 0; b < 3; ++b) {
        const auto targets = ingest::targets_for(static_cast<BrainStatus>(b));
        for (int slot = 0; slot < 3; ++slot) {
            for (std::size_t h = 0; h < ingest::kHorizonsH.size(); ++h) {
                std::vector<double> probs;
                std::vector<int> labels;
                for (std::size_t i = 0; i < cal_samples.size(); ++i) {
                    const auto& s = *cal_samples[i];
                    if (model::branch_index(s.current_status) != b) continue;
                    const LabelState l = s.labels[slot][h];
                    if (l == LabelState::Censored) continue;
                    probs.push_back(risks[i].prob[slot][h]);
                    labels.push_back(l == LabelState::Positive ? 1 : 0);
                }
                if (probs.size() < 2) continue;  // identity calibration for this cell
                auto map = eval::isotonic_fit(probs, labels, &stage.warnings);
                calibration.maps[eval::CalibrationSet::key(model::branch_name(b),
                                                           ingest::to_string(targets[slot]),
                                                           ingest::kHorizonsH[h])] = std::move(map);
            }
        }
    }
    // The calibration admissions are recorded so evaluation can hold them out.
    json extra;
    extra["admissions"] = std::vector<std::string>(cal_adm.begin(), cal_adm.end());
    calibration.save((stage.dir / "calibration.json").string());
    {
        std::ifstream is(stage.dir / "calibration.json");
        json j = json::parse(is);
        j["calibration_admissions"] = extra["admissions"];
        std::ofstream os(stage.dir / "calibration.json");
        os << j.dump(2) << "\n";
    }
    stage.finish();
}

// ---- evaluate ----------------------------------------------------------------------------------

namespace {

struct EvalJoined {
    // per sample index into SampleSet
    std::vector<std::size_t> eval_samples;               // validation minus calibration admissions
    std::map<std::string, std::size_t> sample_at;        // admission|t -> sample index
};

std::string sample_key(const std::string& adm, double t) { return adm + "|" + fmt(t); }

}  // namespace

void cmd_evaluate(const RunConfig& cfg) {
    StageWriter stage(cfg, "eval", "evaluate");
    auto set = ingest::SampleSet::load((fs::path(cfg.dir("ingest")) / "samples.bin").string());
    auto predictions = read_predictions_csv((fs::path(cfg.dir("predictions")) / "predictions.csv").string());
    auto vocab = ingest::VariableVocabulary::load((fs::path(cfg.dir("ingest")) / "vocabulary.json").string());
    if (set.vocab_fingerprint != vocab.fingerprint())
        throw Error("samples.bin does not match vocabulary.json; re-run `mandarin ingest`");

    // demographics for subgroups
    std::map<std::string, eval::SampleMeta> meta_of;
    {
        const fs::path meta_path = fs::path(cfg.dir("ingest")) / "cohort_meta.csv";
        require_artifact(meta_path, "ingest");
        std::ifstream is(meta_path);
        std::string line;
        std::getline(is, line);
        std::getline(is, line);
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::vector<std::string> f;
            std::string cur;
            for (char c : line) {
                if (c == ',') {
                    f.push_back(cur);
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            f.push_back(cur);
            eval::SampleMeta m;
            m.admission_id = f[0];
            m.age = std::stod(f[4]);
            m.sex = f[5];
            m.race = f[6];
            meta_of[m.admission_id] = std::move(m);
        }
    }

    // calibration holdout
    std::set<std::string> cal_adm;
    bool calibrated = false;
    {
        const fs::path cal_path = fs::path(cfg.dir("model")) / "calibration.json";
        if (fs::exists(cal_path)) {
            calibrated = true;
            std::ifstream is(cal_path);
            json j = json::parse(is);
            for (const auto& a : j.value("calibration_admissions", json::array()))
                cal_adm.insert(a.get<std::string>());
        }
    }

    // index samples and check prediction monotonicity (raw probabilities)
    std::map<std::string, std::size_t> sample_at;
    for (std::size_t i = 0; i < set.samples.size(); ++i)
        sample_at[sample_key(set.samples[i].admission_id, set.samples[i].prediction_time_h)] = i;

    struct CellData {
        std::vector<double> raw, calibrated;
        std::vector<int> label;
        std::vector<std::string> admission;
        std::vector<std::size_t> sample_index;
    };
    std::map<std::string, CellData> cells;  // branch/outcome/h

    {
        std::map<std::string, std::pair<int, double>> last_h;  // admission|t|outcome -> (h, raw)
        for (const auto& r : predictions) {
            const std::string k = sample_key(r.admission_id, r.prediction_time_h) + "|" + r.outcome;
            auto it = last_h.find(k);
            if (it != last_h.end() && r.horizon_h > it->second.first && r.raw < it->second.second - 1e-12)
                throw Error("evaluate: predictions violate horizon monotonicity for admission " + r.admission_id +
                            " at " + fmt(r.prediction_time_h) + " h (" + r.outcome + ")");
            last_h[k] = {r.horizon_h, r.raw};

            auto sit = sample_at.find(sample_key(r.admission_id, r.prediction_time_h));
            if (sit == sample_at.end())
                throw Error("evaluate: prediction row has no matching sample; re-run `mandarin predict`");
            const auto& s = set.samples[sit->second];
            if (!s.is_validation || cal_adm.count(r.admission_id)) continue;
            const auto targets = ingest::targets_for(s.current_status);
            int slot = -1;
            for (int t = 0; t < 3; ++t)
                if (ingest::to_string(targets[t]) == r.outcome) slot = t;
            if (slot < 0) throw Error("evaluate: outcome '" + r.outcome + "' does not belong to branch " + r.branch);
            const LabelState l = s.labels[slot][horizon_index(r.horizon_h)];
            if (l == LabelState::Censored) continue;
            CellData& cell = cells[r.branch + "/" + r.outcome + "/" + std::to_string(r.horizon_h)];
            cell.raw.push_back(r.raw);
            cell.calibrated.push_back(r.calibrated);
            cell.label.push_back(l == LabelState::Positive ? 1 : 0);
            cell.admission.push_back(r.admission_id);
            cell.sample_index.push_back(sit->second);
        }
    }

    // clinical baseline scores per sample (carry back to the last scored window)
    std::map<std::string, double> clinical_of;  // admission|t
    {
        LabeledCohort labeled = load_labeled_cohort(cfg, &stage.warnings);
        for (std::size_t i = 0; i < labeled.retained.admissions.size(); ++i) {
            const auto& adm = labeled.retained.admissions[i];
            const auto& traj = labeled.trajectories[i];
            const long n_windows =
                static_cast<long>(traj.size()) - (adm.died_in_icu && !traj.empty() &&
                                                          traj.back().status == BrainStatus::Deceased
                                                      ? 1
                                                      : 0);
            for (double t = 12.0; t < adm.los_h; t += 12.0) {
                const long w = static_cast<long>(t / 12.0) - 1;
                if (w < 0 || w >= n_windows) break;
                double score = 0.0;  // no scored window before t: no evidence, zero risk
                for (long k = w; k >= 0; --k) {
                    if (traj[k].scores.has_any_score) {
                        score = baselines::clinical_score(traj[k].scores);
                        break;
                    }
                }
                clinical_of[sample_key(adm.admission_id, t)] = score;
            }
        }
    }

    // logistic baseline: one model per cell, trained on the training split
    std::map<std::string, baselines::LogisticModel> lr_models;
    {
        std::array<std::vector<std::size_t>, 3> train_by_branch;
        for (std::size_t i = 0; i < set.samples.size(); ++i)
            if (!set.samples[i].is_validation)
                train_by_branch[model::branch_index(set.samples[i].current_status)].push_back(i);
        for (int b = 0; b < 3; ++b) {
            if (train_by_branch[b].empty()) continue;
            Eigen::MatrixXd X(train_by_branch[b].size(), baselines::stat_feature_dim(vocab));
            for (std::size_t r = 0; r < train_by_branch[b].size(); ++r)
                X.row(r) = baselines::build_stat_features(set.samples[train_by_branch[b][r]], vocab).transpose();
            const auto targets = ingest::targets_for(static_cast<BrainStatus>(b));
            for (int slot = 0; slot < 3; ++slot)
                for (std::size_t h = 0; h < ingest::kHorizonsH.size(); ++h) {
                    std::vector<int> y;
                    std::vector<long> keep;
                    for (std::size_t r = 0; r < train_by_branch[b].size(); ++r) {
                        const LabelState l = set.samples[train_by_branch[b][r]].labels[slot][h];
                        if (l == LabelState::Censored) continue;
                        keep.push_back(static_cast<long>(r));
                        y.push_back(l == LabelState::Positive ? 1 : 0);
                    }
                    const long pos = std::count(y.begin(), y.end(), 1);
                    if (keep.empty() || pos == 0 || pos == static_cast<long>(y.size())) continue;
                    Eigen::MatrixXd Xk(keep.size(), X.cols());
                    for (std::size_t r = 0; r < keep.size(); ++r) Xk.row(r) = X.row(keep[r]);
                    const std::string key = std::string(model::branch_name(b)) + "/" +
                                            ingest::to_string(targets[slot]) + "/" +
                                            std::to_string(ingest::kHorizonsH[h]);
                    lr_models[key] =
                        baselines::logistic_train(Xk, y, 1.0, cfg.training.lr_baseline_iters, 1e-7);
                }
        }
    }

    json report;
    report["schema_version"] = kSchemaVersion;
    report["kind"] = "metrics_report";
    report["calibrated"] = calibrated;
    report["calibration_admissions_excluded"] = static_cast<long>(cal_adm.size());
    json jcells = json::object();

    std::ofstream roc_os(stage.dir / "roc_points.csv");
    roc_os << "# mandarin schema_version=" << kSchemaVersion << " kind=roc_points\n";
    roc_os << "branch,outcome,horizon_h,fpr,tpr\n";
    std::ofstream cal_os(stage.dir / "calibration_curve.csv");
    cal_os << "# mandarin schema_version=" << kSchemaVersion << " kind=calibration_curve\n";
    cal_os << "branch,outcome,horizon_h,kind,bin_mean_probability,bin_event_rate,bin_count\n";

    for (auto& [key, cell] : cells) {
        json jcell;
        jcell["n"] = cell.raw.size();
        jcell["positives"] = std::count(cell.label.begin(), cell.label.end(), 1);
        const long pos = std::count(cell.label.begin(), cell.label.end(), 1);
        if (pos == 0 || pos == static_cast<long>(cell.label.size())) {
            jcell["degenerate"] = true;
            jcells[key] = std::move(jcell);
            continue;
        }

        // model + baselines on the same bootstrap resamples
        std::vector<double> clinical(cell.raw.size()), lr(cell.raw.size(), 0.0);
        for (std::size_t i = 0; i < cell.raw.size(); ++i) {
            const auto& s = set.samples[cell.sample_index[i]];
            clinical[i] = clinical_of.at(sample_key(s.admission_id, s.prediction_time_h));
        }
        const bool have_lr = lr_models.count(key) > 0;
        if (have_lr) {
            const auto& m = lr_models.at(key);
            for (std::size_t i = 0; i < cell.raw.size(); ++i) {
                const Eigen::VectorXd f = baselines::build_stat_features(set.samples[cell.sample_index[i]], vocab);
                lr[i] = baselines::logistic_predict(m, f);
            }
        }

        const long n_metrics = static_cast<long>(eval::kMetricNames.size());
        // layout: model metrics, clinical auroc, lr auroc, calibrated brier
        auto results = eval::bootstrap_vector_ci(
            cell.admission,
            [&](const std::vector<std::size_t>& idx) {
                std::vector<double> sc, sc_cl, sc_lr, sc_cal;
                std::vector<int> y;
                for (auto i : idx) {
                    sc.push_back(cell.raw[i]);
                    sc_cl.push_back(clinical[i]);
                    sc_lr.push_back(lr[i]);
                    sc_cal.push_back(cell.calibrated[i]);
                    y.push_back(cell.label[i]);
                }
                std::vector<double> out = eval::metrics_vector(eval::full_metrics(sc, y));
                out.push_back(eval::auroc(sc_cl, y));
                out.push_back(have_lr ? eval::auroc(sc_lr, y) : 0.5);
                out.push_back(eval::brier(sc_cal, y));
                return out;
            },
            n_metrics + 3, cfg.evaluate.bootstrap_iterations, cfg.seed);

        json jmodel;
        for (long m = 0; m < n_metrics; ++m)
            jmodel[eval::kMetricNames[m]] = {{"median", results[m].median}, {"lo", results[m].lo},
                                             {"hi", results[m].hi}};
        jcell["model"] = std::move(jmodel);
        jcell["clinical"] = {{"auroc", {{"median", results[n_metrics].median},
                                        {"lo", results[n_metrics].lo},
                                        {"hi", results[n_metrics].hi}}}};
        if (have_lr)
            jcell["logistic"] = {{"auroc", {{"median", results[n_metrics + 1].median},
                                            {"lo", results[n_metrics + 1].lo},
                                            {"hi", results[n_metrics + 1].hi}}}};
        jcell["brier_calibrated"] = {{"median", results[n_metrics + 2].median},
                                     {"lo", results[n_metrics + 2].lo},
                                     {"hi", results[n_metrics + 2].hi}};

        // Wilcoxon over the shared bootstrap draws (model vs each baseline AUROC)
        jcell["significance"] = {
            {"model_vs_clinical_auroc_p", eval::wilcoxon_rank_sum(results[0].draws, results[n_metrics].draws)}};
        if (have_lr)
            jcell["significance"]["model_vs_logistic_auroc_p"] =
                eval::wilcoxon_rank_sum(results[0].draws, results[n_metrics + 1].draws);

        // plot data series
        {
            std::vector<std::size_t> order(cell.raw.size());
            std::iota(order.begin(), order.end(), 0u);
            std::sort(order.begin(), order.end(),
                      [&](std::size_t a, std::size_t b) { return cell.raw[a] > cell.raw[b]; });
            const double np = pos, nn = static_cast<double>(cell.raw.size()) - pos;
            double tp = 0, fp = 0;
            std::string branch, outcome, horizon;
            {
                std::size_t p1 = key.find('/');
                std::size_t p2 = key.find('/', p1 + 1);
                branch = key.substr(0, p1);
                outcome = key.substr(p1 + 1, p2 - p1 - 1);
                horizon = key.substr(p2 + 1);
            }
            roc_os << branch << ',' << outcome << ',' << horizon << ",0,0\n";
            for (std::size_t i = 0; i < order.size(); ++i) {
                (cell.label[order[i]] ? tp : fp) += 1;
                if (i + 1 < order.size() && cell.raw[order[i + 1]] == cell.raw[order[i]]) continue;
                roc_os << branch << ',' << outcome << ',' << horizon << ',' << fmt(fp / nn) << ',' << fmt(tp / np)
                       << '\n';
            }
            for (const char* kind : {"raw", "calibrated"}) {
                const auto& probs = std::string(kind) == "raw" ? cell.raw : cell.calibrated;
                for (const auto& bin : eval::calibration_curve(probs, cell.label))
                    cal_os << branch << ',' << outcome << ',' << horizon << ',' << kind << ','
                           << fmt(bin.mean_probability) << ',' << fmt(bin.event_rate) << ',' << bin.count << '\n';
            }
        }
        jcells[key] = std::move(jcell);
    }
    report["cells"] = std::move(jcells);

    // subgroup analysis at the 12 h horizon
    if (cfg.toggles.subgroups) {
        eval::SubgroupSpec spec;
        spec.age_cutoff = cfg.evaluate.age_cutoff;
        spec.min_admissions = cfg.evaluate.min_group_admissions;
        spec.bootstrap_iterations = cfg.evaluate.bootstrap_iterations;
        json jsub = json::object();
        for (const auto& [key, cell] : cells) {
            if (key.substr(key.size() - 3) != "/12") continue;
            const long pos = std::count(cell.label.begin(), cell.label.end(), 1);
            if (pos == 0 || pos == static_cast<long>(cell.label.size())) continue;
            std::vector<eval::SampleMeta> metas;
            for (auto i : cell.sample_index) metas.push_back(meta_of.at(set.samples[i].admission_id));
            auto rows = eval::subgroup_metrics(cell.raw, cell.label, metas, spec, cfg.seed);
            json jrows = json::array();
            for (const auto& r : rows) {
                json jr;
                jr["dimension"] = r.dimension;
                jr["group"] = r.group;
                jr["n_admissions"] = r.n_admissions;
                jr["n_samples"] = r.n_samples;
                jr["sufficient"] = r.sufficient;
                for (const auto& [name, ci] : r.metrics)
                    jr[name] = {{"median", ci[0]}, {"lo", ci[1]}, {"hi", ci[2]}};
                jrows.push_back(std::move(jr));
            }
            jsub[key] = std::move(jrows);
        }
        report["subgroups"] = std::move(jsub);
    }

    std::ofstream os(stage.dir / "metrics_report.json");
    os << report.dump(2) << "\n";
    stage.finish();
}

// ---- explain ----------------------------------------------------------------------------------

void cmd_explain(const RunConfig& cfg) {
    StageWriter stage(cfg, "explain", "explain");
    auto bundle = model::ModelBundle::load(cfg.dir("model"));
    auto set = ingest::SampleSet::load((fs::path(cfg.dir("ingest")) / "samples.bin").string());
    if (set.vocab_fingerprint != bundle.vocab.fingerprint())
        throw Error("samples.bin does not match the model bundle's vocabulary; re-run `mandarin ingest` and `train`");

    const BrainStatus branch_status = pheno::brain_status_from_string(cfg.explain.branch);
    const int b = model::branch_index(branch_status);
    const auto targets = ingest::targets_for(branch_status);
    int slot = -1;
    for (int t = 0; t < 3; ++t)
        if (ingest::to_string(targets[t]) == cfg.explain.outcome) slot = t;
    if (slot < 0)
        throw Error("explain: outcome '" + cfg.explain.outcome + "' is not a target of branch " + cfg.explain.branch);
    const int h_idx = horizon_index(cfg.explain.horizon_h);

    std::vector<const PredictionSample*> pool;
    for (const auto& s : set.samples)
        if (s.is_validation && model::branch_index(s.current_status) == b) pool.push_back(&s);
    if (pool.empty()) throw Error("explain: no validation samples in branch " + cfg.explain.branch);
    Rng rng(cfg.seed ^ 0xE1A7ULL);
    rng.shuffle(pool);
    if (static_cast<long>(pool.size()) > cfg.explain.samples) pool.resize(cfg.explain.samples);

    std::vector<eval::Attribution> attrs(pool.size());
    parallel_chunks(pool.size(), [&](int, std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            attrs[i] = eval::integrated_gradients(*bundle.branches[b], bundle.config, *pool[i], slot, h_idx,
                                                  cfg.explain.steps);
    });

    double worst_gap = 0, mean_gap = 0;
    for (const auto& a : attrs) {
        const double denom = std::max(1e-9, std::abs(a.f_input - a.f_baseline));
        worst_gap = std::max(worst_gap, a.completeness_gap() / denom);
        mean_gap += a.completeness_gap() / denom;
    }
    mean_gap /= static_cast<double>(attrs.size());

    eval::ImportanceOptions opt;
    opt.alpha = cfg.explain.alpha;
    opt.signed_reduction = cfg.explain.signed_reduction;
    auto report = eval::feature_importance(pool, attrs, bundle.vocab, opt);

    {
        std::ofstream os(stage.dir / "importance.csv");
        os << "# mandarin schema_version=" << kSchemaVersion << " kind=importance alpha=" << fmt(report.alpha)
           << " reduction=" << report.reduction << " normalization=" << report.normalization << "\n";
        os << "feature,p,ig_emb,ig_conv,importance\n";
        for (const auto& r : report.rows)
            os << r.feature << ',' << fmt(r.presence) << ',' << fmt(r.ig_emb) << ',' << fmt(r.ig_conv) << ','
               << fmt(r.importance) << '\n';
    }
    {
        json j;
        j["schema_version"] = kSchemaVersion;
        j["kind"] = "explain_summary";
        j["branch"] = cfg.explain.branch;
        j["outcome"] = cfg.explain.outcome;
        j["horizon_h"] = cfg.explain.horizon_h;
        j["samples"] = attrs.size();
        j["steps"] = cfg.explain.steps;
        j["alpha"] = report.alpha;
        j["reduction"] = report.reduction;
        j["normalization"] = report.normalization;
        j["mean_completeness_gap_ratio"] = mean_gap;
        j["worst_completeness_gap_ratio"] = worst_gap;
        std::ofstream os(stage.dir / "explain_summary.json");
        os << j.dump(2) << "\n";
    }
    stage.finish();
}

// ---- report ----------------------------------------------------------------------------------

void cmd_report(const RunConfig& cfg) {
    StageWriter stage(cfg, "report", "report");
    std::ofstream os(stage.dir / "report.txt");
    os << "MANDARIN run report\n";
    os << "===================\n\n";

    {
        const fs::path p = fs::path(cfg.dir("ingest")) / "exclusion_report.json";
        require_artifact(p, "ingest");
        std::ifstream is(p);
        json j = json::parse(is);
        os << "Cohort\n------\n";
        os << "admissions in: " << j["input"].get<long>() << ", retained: " << j["retained"].get<long>() << "\n";
        for (const auto& r : j["reasons"])
            os << "  excluded (" << r["reason"].get<std::string>() << "): " << r["count"].get<long>() << "\n";
        os << "\n";
    }
    {
        const fs::path p = fs::path(cfg.dir("transitions")) / "transition_probs.csv";
        if (fs::exists(p)) {
            os << "Brain-status transition probabilities (rows: from; cols: no_abd, delirium, coma, deceased)\n";
            std::ifstream is(p);
            std::string line;
            std::getline(is, line);
            std::getline(is, line);
            while (std::getline(is, line)) os << "  " << line << "\n";
            os << "\n";
        }
    }
    {
        const fs::path p = fs::path(cfg.dir("eval")) / "metrics_report.json";
        if (fs::exists(p)) {
            std::ifstream is(p);
            json j = json::parse(is);
            os << "Discrimination at the 12 h horizon (median AUROC [95% CI])\n";
            for (const auto& [key, cell] : j["cells"].items()) {
                if (key.size() < 3 || key.substr(key.size() - 3) != "/12") continue;
                if (!cell.contains("model")) continue;
                const auto& a = cell["model"]["auroc"];
                os << "  " << key << ": model " << fmt(a["median"].get<double>()) << " ["
                   << fmt(a["lo"].get<double>()) << ", " << fmt(a["hi"].get<double>()) << "]";
                if (cell.contains("clinical"))
                    os << "; clinical " << fmt(cell["clinical"]["auroc"]["median"].get<double>());
                if (cell.contains("logistic"))
                    os << "; logistic " << fmt(cell["logistic"]["auroc"]["median"].get<double>());
                if (cell.contains("significance"))
                    os << "; p(model vs clinical) = "
                       << fmt(cell["significance"]["model_vs_clinical_auroc_p"].get<double>());
                os << "\n";
            }
            os << "\nPlot data series: eval/roc_points.csv, eval/calibration_curve.csv\n\n";
        }
    }
    {
        const fs::path p = fs::path(cfg.dir("explain")) / "importance.csv";
        if (fs::exists(p)) {
            os << "Top feature importances\n";
            std::ifstream is(p);
            std::string line;
            std::getline(is, line);
            std::getline(is, line);
            int shown = 0;
            while (std::getline(is, line) && shown < 10) {
                os << "  " << line << "\n";
                ++shown;
            }
            os << "  (full ranking: explain/importance.csv)\n";
        }
    }
    stage.finish();
}

void run_command(const std::string& name, const RunConfig& cfg) {
    if (name == "synth") cmd_synth(cfg);
    else if (name == "ingest") cmd_ingest(cfg);
    else if (name == "label") cmd_label(cfg);
    else if (name == "transitions") cmd_transitions(cfg);
    else if (name == "train") cmd_train(cfg);
    else if (name == "predict") cmd_predict(cfg);
    else if (name == "calibrate") cmd_calibrate(cfg);
    else if (name == "evaluate") cmd_evaluate(cfg);
    else if (name == "explain") cmd_explain(cfg);
    else if (name == "report") cmd_report(cfg);
    else throw Error("unknown command '" + name + "'");
}

}  // namespace mandarin::pipeline
