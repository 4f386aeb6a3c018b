#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mandarin/model/config.hpp"
#include "mandarin/pipeline/run.hpp"

namespace mandarin::pipeline {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw Error("run config: unknown key '" + key + "' in " + where);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    RunConfig cfg;
    reject_unknown(j, {"seed", "preset", "generator", "model", "training", "pipeline", "phenotype", "evaluate",
                       "explain", "schema_version", "out_dir"},
                   "top level");
    get_if(j, "seed", cfg.seed);
    get_if(j, "preset", cfg.preset);
    get_if(j, "out_dir", cfg.out_dir);

    if (j.contains("generator")) {
        const json& g = j.at("generator");
        reject_unknown(g,
                       {"n_admissions", "readmission_fraction", "max_windows", "discharge_prob", "base_logits",
                        "w_hypoxia_to_delirium", "w_sedation_to_coma", "w_bun_to_death", "w_dementia_to_delirium",
                        "w_age_to_death", "w_sepsis_to_delirium", "hypoxia_onset_prob", "hypoxia_persist_prob",
                        "sedation_onset_prob", "sedation_persist_prob", "sepsis_onset_prob", "sepsis_persist_prob",
                        "score_missing_prob", "vital_period_h", "lab_period_h", "plant_excluded"},
                       "generator");
        auto& s = cfg.generator;
        get_if(g, "n_admissions", s.n_admissions);
        get_if(g, "readmission_fraction", s.readmission_fraction);
        get_if(g, "max_windows", s.max_windows);
        get_if(g, "discharge_prob", s.discharge_prob);
        if (g.contains("base_logits"))
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 4; ++c) s.base_logits[r][c] = g.at("base_logits")[r][c].get<double>();
        get_if(g, "w_hypoxia_to_delirium", s.w_hypoxia_to_delirium);
        get_if(g, "w_sedation_to_coma", s.w_sedation_to_coma);
        get_if(g, "w_bun_to_death", s.w_bun_to_death);
        get_if(g, "w_dementia_to_delirium", s.w_dementia_to_delirium);
        get_if(g, "w_age_to_death", s.w_age_to_death);
        get_if(g, "w_sepsis_to_delirium", s.w_sepsis_to_delirium);
        get_if(g, "hypoxia_onset_prob", s.hypoxia_onset_prob);
        get_if(g, "hypoxia_persist_prob", s.hypoxia_persist_prob);
        get_if(g, "sedation_onset_prob", s.sedation_onset_prob);
        get_if(g, "sedation_persist_prob", s.sedation_persist_prob);
        get_if(g, "sepsis_onset_prob", s.sepsis_onset_prob);
        get_if(g, "sepsis_persist_prob", s.sepsis_persist_prob);
        get_if(g, "score_missing_prob", s.score_missing_prob);
        get_if(g, "vital_period_h", s.vital_period_h);
        get_if(g, "lab_period_h", s.lab_period_h);
        get_if(g, "plant_excluded", s.plant_excluded);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m,
                       {"l_max", "d_model", "conv_kernel", "n_blocks", "n_heads", "n_experts", "k_experts", "k_pool",
                        "expert_hidden", "load_balance_lambda"},
                       "model");
        for (const auto& [key, value] : m.items()) cfg.model_overrides[key] = value.get<double>();
    }
    if (j.contains("training")) {
        const json& t = j.at("training");
        reject_unknown(t, {"batch_size", "max_epochs", "patience", "lr", "lr_baseline_iters"}, "training");
        get_if(t, "batch_size", cfg.training.batch_size);
        get_if(t, "max_epochs", cfg.training.max_epochs);
        get_if(t, "patience", cfg.training.patience);
        get_if(t, "lr", cfg.training.lr);
        get_if(t, "lr_baseline_iters", cfg.training.lr_baseline_iters);
    }
    if (j.contains("pipeline")) {
        const json& p = j.at("pipeline");
        reject_unknown(p, {"calibrate", "explain", "subgroups"}, "pipeline");
        get_if(p, "calibrate", cfg.toggles.calibrate);
        get_if(p, "explain", cfg.toggles.explain);
        get_if(p, "subgroups", cfg.toggles.subgroups);
    }
    if (j.contains("phenotype")) {
        const json& p = j.at("phenotype");
        reject_unknown(p,
                       {"lookback_h", "spo2_hypoxic_below", "temp_high_above", "temp_low_below", "wbc_high_above",
                        "wbc_low_below", "glucose_low_below", "glucose_high_above", "sodium_low_below",
                        "sodium_high_above", "bun_high_above", "sedative_codes", "coma_lookback_h",
                        "compliance_threshold"},
                       "phenotype");
        auto& r = cfg.phenotype;
        get_if(p, "lookback_h", r.lookback_h);
        get_if(p, "spo2_hypoxic_below", r.spo2_hypoxic_below);
        get_if(p, "temp_high_above", r.temp_high_above);
        get_if(p, "temp_low_below", r.temp_low_below);
        get_if(p, "wbc_high_above", r.wbc_high_above);
        get_if(p, "wbc_low_below", r.wbc_low_below);
        get_if(p, "glucose_low_below", r.glucose_low_below);
        get_if(p, "glucose_high_above", r.glucose_high_above);
        get_if(p, "sodium_low_below", r.sodium_low_below);
        get_if(p, "sodium_high_above", r.sodium_high_above);
        get_if(p, "bun_high_above", r.bun_high_above);
        get_if(p, "coma_lookback_h", r.coma_lookback_h);
        if (p.contains("sedative_codes")) {
            r.sedative_codes.clear();
            for (const auto& c : p.at("sedative_codes")) r.sedative_codes.insert(c.get<std::string>());
        }
        get_if(p, "compliance_threshold", cfg.compliance_threshold);
    }
    if (j.contains("evaluate")) {
        const json& e = j.at("evaluate");
        reject_unknown(e, {"bootstrap_iterations", "age_cutoff", "min_group_admissions", "calibration_fraction"},
                       "evaluate");
        get_if(e, "bootstrap_iterations", cfg.evaluate.bootstrap_iterations);
        get_if(e, "age_cutoff", cfg.evaluate.age_cutoff);
        get_if(e, "min_group_admissions", cfg.evaluate.min_group_admissions);
        get_if(e, "calibration_fraction", cfg.evaluate.calibration_fraction);
    }
    if (j.contains("explain")) {
        const json& e = j.at("explain");
        reject_unknown(e, {"samples", "steps", "alpha", "signed_reduction", "branch", "outcome", "horizon_h"},
                       "explain");
        get_if(e, "samples", cfg.explain.samples);
        get_if(e, "steps", cfg.explain.steps);
        get_if(e, "alpha", cfg.explain.alpha);
        get_if(e, "signed_reduction", cfg.explain.signed_reduction);
        get_if(e, "branch", cfg.explain.branch);
        get_if(e, "outcome", cfg.explain.outcome);
        get_if(e, "horizon_h", cfg.explain.horizon_h);
    }
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string RunConfig::to_json() const {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = seed;
    j["preset"] = preset;
    const auto& g = generator;
    j["generator"] = {{"n_admissions", g.n_admissions},
                      {"readmission_fraction", g.readmission_fraction},
                      {"max_windows", g.max_windows},
                      {"discharge_prob", g.discharge_prob},
                      {"base_logits", g.base_logits},
                      {"w_hypoxia_to_delirium", g.w_hypoxia_to_delirium},
                      {"w_sedation_to_coma", g.w_sedation_to_coma},
                      {"w_bun_to_death", g.w_bun_to_death},
                      {"w_dementia_to_delirium", g.w_dementia_to_delirium},
                      {"w_age_to_death", g.w_age_to_death},
                      {"w_sepsis_to_delirium", g.w_sepsis_to_delirium},
                      {"hypoxia_onset_prob", g.hypoxia_onset_prob},
                      {"hypoxia_persist_prob", g.hypoxia_persist_prob},
                      {"sedation_onset_prob", g.sedation_onset_prob},
                      {"sedation_persist_prob", g.sedation_persist_prob},
                      {"sepsis_onset_prob", g.sepsis_onset_prob},
                      {"sepsis_persist_prob", g.sepsis_persist_prob},
                      {"score_missing_prob", g.score_missing_prob},
                      {"vital_period_h", g.vital_period_h},
                      {"lab_period_h", g.lab_period_h},
                      {"plant_excluded", g.plant_excluded}};
    j["model"] = model_overrides;
    j["training"] = {{"batch_size", training.batch_size},
                     {"max_epochs", training.max_epochs},
                     {"patience", training.patience},
                     {"lr", training.lr},
                     {"lr_baseline_iters", training.lr_baseline_iters}};
    j["pipeline"] = {{"calibrate", toggles.calibrate}, {"explain", toggles.explain}, {"subgroups", toggles.subgroups}};
    j["phenotype"] = {{"lookback_h", phenotype.lookback_h},
                      {"spo2_hypoxic_below", phenotype.spo2_hypoxic_below},
                      {"temp_high_above", phenotype.temp_high_above},
                      {"temp_low_below", phenotype.temp_low_below},
                      {"wbc_high_above", phenotype.wbc_high_above},
                      {"wbc_low_below", phenotype.wbc_low_below},
                      {"glucose_low_below", phenotype.glucose_low_below},
                      {"glucose_high_above", phenotype.glucose_high_above},
                      {"sodium_low_below", phenotype.sodium_low_below},
                      {"sodium_high_above", phenotype.sodium_high_above},
                      {"bun_high_above", phenotype.bun_high_above},
                      {"sedative_codes", phenotype.sedative_codes},
                      {"coma_lookback_h", phenotype.coma_lookback_h},
                      {"compliance_threshold", compliance_threshold}};
    j["evaluate"] = {{"bootstrap_iterations", evaluate.bootstrap_iterations},
                     {"age_cutoff", evaluate.age_cutoff},
                     {"min_group_admissions", evaluate.min_group_admissions},
                     {"calibration_fraction", evaluate.calibration_fraction}};
    j["explain"] = {{"samples", explain.samples},   {"steps", explain.steps},
                    {"alpha", explain.alpha},       {"signed_reduction", explain.signed_reduction},
                    {"branch", explain.branch},     {"outcome", explain.outcome},
                    {"horizon_h", explain.horizon_h}};
    return j.dump(2);
}

long RunConfig::resolved_l_max() const {
    auto it = model_overrides.find("l_max");
    if (it != model_overrides.end()) return static_cast<long>(it->second);
    return model::ModelConfig::from_preset(preset, 1).l_max;
}

std::string RunConfig::dir(const std::string& stage) const {
    return (std::filesystem::path(out_dir) / stage).string();
}

}  // namespace mandarin::pipeline
