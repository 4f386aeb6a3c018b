#pragma once

#include <map>
#include <string>

#include "mandarin/ingest/synth.hpp"
#include "mandarin/pheno/types.hpp"

namespace mandarin::pipeline {

struct TrainingOptions {
    long batch_size = 48;
    long max_epochs = 16;
    long patience = 4;
    double lr = 3e-3;
    long lr_baseline_iters = 1200;
};

struct PipelineToggles {
    bool calibrate = true;
    bool explain = true;
    bool subgroups = true;
};

struct EvaluateOptions {
    long bootstrap_iterations = 100;
    double age_cutoff = 65.0;
    long min_group_admissions = 20;
    double calibration_fraction = 0.10;
};

struct ExplainOptions {
    long samples = 50;
    long steps = 64;
    double alpha = 0.5;
    bool signed_reduction = false;
    std::string branch = "no_abd";
    std::string outcome = "delirium";
    int horizon_h = 12;
};

// One config drives every command; it is resolved once and serialized into
// each output directory as run_config.json. Unknown keys are rejected.
struct RunConfig {
    std::uint64_t seed = 7;
    std::string preset = "desk";
    std::string out_dir = "run";
    ingest::SynthConfig generator;
    std::map<std::string, double> model_overrides;  // numeric ModelConfig fields
    TrainingOptions training;
    PipelineToggles toggles;
    pheno::PhenotypeRules phenotype;
    double compliance_threshold = 0.40;
    EvaluateOptions evaluate;
    ExplainOptions explain;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_json_file(const std::string& path);
    std::string to_json() const;

    long resolved_l_max() const;

    // data/, ingest/, labels/, transitions/, model/, predictions/, eval/,
    // explain/, report/ under out_dir
    std::string dir(const std::string& stage) const;
};

// The ten pipeline stages. Each validates its upstream artifacts, writes its
// outputs plus run_config.json, and confines timestamps to run_meta.json.
void cmd_synth(const RunConfig& cfg);
void cmd_ingest(const RunConfig& cfg);
void cmd_label(const RunConfig& cfg);
void cmd_transitions(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_predict(const RunConfig& cfg);
void cmd_calibrate(const RunConfig& cfg);
void cmd_evaluate(const RunConfig& cfg);
void cmd_explain(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);

void run_command(const std::string& name, const RunConfig& cfg);

}  // namespace mandarin::pipeline
