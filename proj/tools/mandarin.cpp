#include <CLI11.hpp>
#include <iostream>

#include "mandarin/pipeline/run.hpp"

using mandarin::pipeline::RunConfig;

int main(int argc, char** argv) {
    CLI::App app{"MANDARIN: ICU acute-brain-dysfunction phenotyping, risk modeling, and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path;
    std::string out_dir = "run";
    std::string preset;
    std::uint64_t seed = 0;
    bool seed_set = false, preset_set = false;
    int patients = 0;

    app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--out", out_dir, "run directory holding every stage's artifacts");
    app.add_option_function<std::uint64_t>(
           "--seed", [&](std::uint64_t v) { seed = v; seed_set = true; }, "master seed")
        ->type_name("N");
    app.add_option_function<std::string>(
           "--preset", [&](const std::string& v) { preset = v; preset_set = true; }, "model preset")
        ->check(CLI::IsMember({"desk", "paper-scale"}))
        ->type_name("NAME");

    const std::vector<std::string> commands = {"synth",   "ingest",    "label",    "transitions", "train",
                                               "predict", "calibrate", "evaluate", "explain",     "report"};
    std::map<std::string, CLI::App*> subs;
    for (const auto& name : commands) subs[name] = app.add_subcommand(name);
    subs["synth"]->add_option("--patients", patients, "admissions to simulate");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_json_file(config_path);
        cfg.out_dir = out_dir;
        if (seed_set) cfg.seed = seed;
        if (preset_set) cfg.preset = preset;
        if (patients > 0) cfg.generator.n_admissions = patients;

        for (const auto& name : commands) {
            if (subs[name]->parsed()) {
                mandarin::pipeline::run_command(name, cfg);
                return 0;
            }
        }
        std::cerr << "no command given\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
