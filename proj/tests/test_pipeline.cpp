#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "mandarin/eval/isotonic.hpp"
#include "mandarin/ingest/pipeline.hpp"
#include "mandarin/pipeline/run.hpp"

using namespace mandarin;
using namespace mandarin::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

RunConfig small_config(const std::string& out) {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.preset = "desk";
    cfg.out_dir = out;
    cfg.generator.n_admissions = 120;
    cfg.training.max_epochs = 2;
    cfg.training.patience = 2;
    cfg.explain.samples = 4;
    cfg.explain.steps = 8;
    cfg.evaluate.bootstrap_iterations = 25;
    cfg.evaluate.calibration_fraction = 0.5;  // tiny cohort: keep the maps non-trivial
    return cfg;
}

// Every deterministic artifact in the run tree (run_meta.json carries wall
// clock and is the one allowed difference).
std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        if (entry.path().filename() == "run_meta.json") continue;
        out[fs::relative(entry.path(), root).string()] = slurp(entry.path());
    }
    return out;
}

}  // namespace

TEST_CASE("end-to-end pipeline: every stage runs and same-seed reruns are byte-identical") {
    const fs::path root = fs::temp_directory_path() / "mandarin_e2e";
    fs::remove_all(root);
    auto run_all = [&](const std::string& dir) {
        RunConfig cfg = small_config((root / dir).string());
        for (const char* cmd : {"synth", "ingest", "label", "transitions", "train", "predict", "calibrate",
                                "predict", "evaluate", "explain", "report"})
            run_command(cmd, cfg);
        return cfg;
    };
    RunConfig cfg = run_all("a");

    for (const char* artifact :
         {"data/admissions.csv", "data/events.jsonl", "data/ground_truth.json", "ingest/vocabulary.json",
          "ingest/samples.bin", "ingest/exclusion_report.json", "ingest/cohort_meta.csv", "labels/labels.csv",
          "transitions/transition_probs.csv", "transitions/sankey.csv", "model/config.json",
          "model/branch_noabd.ckpt", "model/branch_delirium.ckpt", "model/branch_coma.ckpt",
          "model/calibration.json", "predictions/predictions.csv", "eval/metrics_report.json",
          "eval/roc_points.csv", "eval/calibration_curve.csv", "explain/importance.csv", "report/report.txt"})
        CHECK(fs::exists(root / "a" / artifact));

    SUBCASE("rerun is byte-identical modulo run_meta.json") {
        run_all("b");
        auto ta = tree_bytes(root / "a");
        auto tb = tree_bytes(root / "b");
        REQUIRE(ta.size() == tb.size());
        for (const auto& [rel, bytes] : ta) {
            CAPTURE(rel);
            REQUIRE(tb.count(rel) == 1);
            REQUIRE(bytes == tb.at(rel));
        }
    }

    SUBCASE("calibrated predictions differ from raw once calibration exists") {
        const auto preds = slurp(root / "a" / "predictions" / "predictions.csv");
        std::istringstream is(preds);
        std::string line;
        std::getline(is, line);
        std::getline(is, line);
        bool any_diff = false;
        while (std::getline(is, line)) {
            const auto last_comma = line.rfind(',');
            const auto prev_comma = line.rfind(',', last_comma - 1);
            const double raw = std::stod(line.substr(prev_comma + 1, last_comma - prev_comma - 1));
            const double cal = std::stod(line.substr(last_comma + 1));
            if (std::abs(raw - cal) > 1e-12) any_diff = true;
        }
        CHECK(any_diff);
    }

    SUBCASE("sankey triples agree with the counts matrix") {
        std::istringstream counts(slurp(root / "a" / "transitions" / "transition_counts.csv"));
        std::string line;
        std::getline(counts, line);
        std::getline(counts, line);
        long total_counts = 0;
        while (std::getline(counts, line)) {
            std::istringstream row(line);
            std::string cell;
            std::getline(row, cell, ',');
            while (std::getline(row, cell, ',')) total_counts += std::stol(cell);
        }
        std::istringstream sankey(slurp(root / "a" / "transitions" / "sankey.csv"));
        std::getline(sankey, line);
        std::getline(sankey, line);
        long total_sankey = 0;
        while (std::getline(sankey, line)) {
            const auto pos = line.rfind(',');
            total_sankey += std::stol(line.substr(pos + 1));
        }
        CHECK(total_sankey == total_counts);
    }

    SUBCASE("evaluate rejects monotonicity-violating predictions") {
        // tamper: swap the 12h and 72h raw probabilities of the first sample block
        const fs::path pred_path = root / "a" / "predictions" / "predictions.csv";
        auto text = slurp(pred_path);
        std::istringstream is(text);
        std::vector<std::string> lines;
        std::string line;
        while (std::getline(is, line)) lines.push_back(line);
        // first data line is horizon 12 of some outcome; find its 72h partner 5 rows later
        auto split = [](const std::string& l) {
            std::vector<std::string> f;
            std::string cur;
            for (char c : l)
                if (c == ',') {
                    f.push_back(cur);
                    cur.clear();
                } else
                    cur.push_back(c);
            f.push_back(cur);
            return f;
        };
        auto f12 = split(lines[2]);
        auto f72 = split(lines[7]);
        REQUIRE(f12[3] == f72[3]);  // same outcome
        f12[5] = "0.9";
        f72[5] = "0.1";
        auto join = [](const std::vector<std::string>& f) {
            std::string out = f[0];
            for (std::size_t i = 1; i < f.size(); ++i) out += "," + f[i];
            return out;
        };
        lines[2] = join(f12);
        lines[7] = join(f72);
        {
            std::ofstream os(pred_path);
            for (const auto& l : lines) os << l << "\n";
        }
        RunConfig cfg2 = small_config((root / "a").string());
        CHECK_THROWS_WITH_AS(cmd_evaluate(cfg2), doctest::Contains("monotonicity"), Error);
        // restore for later subcases
        std::ofstream os(pred_path);
        os << text;
    }
    fs::remove_all(root);
}

TEST_CASE("missing upstream artifacts name the producing command") {
    const fs::path root = fs::temp_directory_path() / "mandarin_missing";
    fs::remove_all(root);
    RunConfig cfg = small_config(root.string());
    CHECK_THROWS_WITH_AS(cmd_ingest(cfg), doctest::Contains("synth"), Error);
    cmd_synth(cfg);
    CHECK_THROWS_WITH_AS(cmd_train(cfg), doctest::Contains("ingest"), Error);
    cmd_ingest(cfg);
    CHECK_THROWS_WITH_AS(cmd_predict(cfg), doctest::Contains("train"), Error);
    CHECK_THROWS_WITH_AS(cmd_transitions(cfg), doctest::Contains("label"), Error);
    fs::remove_all(root);
}

TEST_CASE("artifact schema version mismatches are refused") {
    const fs::path root = fs::temp_directory_path() / "mandarin_version";
    fs::remove_all(root);
    RunConfig cfg = small_config(root.string());
    cmd_synth(cfg);
    cmd_ingest(cfg);
    // tamper with the vocabulary artifact version
    const fs::path vocab_path = root / "ingest" / "vocabulary.json";
    json j = json::parse(slurp(vocab_path));
    j["schema_version"] = 99;
    std::ofstream(vocab_path) << j.dump(2);
    CHECK_THROWS_WITH_AS(cmd_train(cfg), doctest::Contains("schema_version"), Error);
    fs::remove_all(root);
}

TEST_CASE("run config rejects unknown keys and round trips") {
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"sed": 1})"), doctest::Contains("unknown key"), Error);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"generator": {"admissions": 5}})"),
                         doctest::Contains("unknown key"), Error);
    CHECK_THROWS_WITH_AS(RunConfig::from_json_text(R"({"model": {"width": 8}})"), doctest::Contains("unknown key"),
                         Error);
    RunConfig cfg;
    cfg.seed = 123;
    cfg.generator.n_admissions = 55;
    cfg.model_overrides["d_model"] = 16;
    RunConfig back = RunConfig::from_json_text(cfg.to_json());
    CHECK(back.seed == 123);
    CHECK(back.generator.n_admissions == 55);
    CHECK(back.model_overrides.at("d_model") == 16);
}

TEST_CASE("calibration holdout admissions are excluded from evaluation") {
    const fs::path root = fs::temp_directory_path() / "mandarin_cal_holdout";
    fs::remove_all(root);
    RunConfig cfg = small_config(root.string());
    for (const char* cmd : {"synth", "ingest", "train", "predict", "calibrate", "predict", "evaluate"})
        run_command(cmd, cfg);
    json cal = json::parse(slurp(root / "model" / "calibration.json"));
    json report = json::parse(slurp(root / "eval" / "metrics_report.json"));
    CHECK(report["calibrated"].get<bool>());
    CHECK(report["calibration_admissions_excluded"].get<long>() ==
          static_cast<long>(cal["calibration_admissions"].size()));
    CHECK(cal["calibration_admissions"].size() > 0);
    fs::remove_all(root);
}
