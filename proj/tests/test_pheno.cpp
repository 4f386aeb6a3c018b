#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>

#include "mandarin/pheno/engine.hpp"
#include "mandarin/rng.hpp"

using namespace mandarin;
using namespace mandarin::pheno;

namespace {

// Independent transcription of the 12-hour status rules, used as the oracle:
//   coma:      lowest RASS < -3, or lowest RASS == -3 and lowest GCS <= 8
//   delirium:  lowest RASS == -3 and lowest GCS > 8, or lowest RASS > -3 and
//              at least one positive CAM
//   no ABD:    neither
// cam: 0 = observed negative, 1 = observed positive, 2 = not observed.
BrainStatus truth_table(int rass, int gcs, int cam) {
    const bool coma = (rass < -3) || (rass == -3 && gcs <= 8);
    const bool delirium = (rass == -3 && gcs > 8) || (rass > -3 && cam == 1);
    REQUIRE_FALSE((coma && delirium));
    if (coma) return BrainStatus::Coma;
    if (delirium) return BrainStatus::Delirium;
    return BrainStatus::NoAbd;
}

WindowScores make_scores(std::optional<int> rass, std::optional<int> gcs, int cam) {
    WindowScores w;
    w.min_rass = rass;
    w.min_gcs = gcs;
    w.any_cam_observed = cam != 2;
    w.any_cam_positive = cam == 1;
    w.has_any_score = rass || gcs || cam != 2;
    if (rass) w.rass_values.push_back(*rass);
    return w;
}

NeuroScore score(ScoreKind kind, double time_h, int value) {
    NeuroScore s;
    s.admission_id = "a";
    s.kind = kind;
    s.time_h = time_h;
    s.value = value;
    return s;
}

}  // namespace

TEST_CASE("label_window agrees with the exhaustive truth table on all 390 combinations") {
    const auto t0 = std::chrono::steady_clock::now();
    int checked = 0;
    for (int rass = -5; rass <= 4; ++rass)
        for (int gcs = 3; gcs <= 15; ++gcs)
            for (int cam = 0; cam <= 2; ++cam) {
                const BrainStatus expect = truth_table(rass, gcs, cam);
                const BrainStatus got = label_window(make_scores(rass, gcs, cam));
                if (got != expect) {
                    CAPTURE(rass);
                    CAPTURE(gcs);
                    CAPTURE(cam);
                    REQUIRE(got == expect);
                }
                ++checked;
            }
    CHECK(checked == 390);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs < 1.0);
}

TEST_CASE("label_window spot examples") {
    CHECK(label_window(make_scores(-4, 15, 1)) == BrainStatus::Coma);
    CHECK(label_window(make_scores(-3, 10, 2)) == BrainStatus::Delirium);
    CHECK(label_window(make_scores(0, 15, 0)) == BrainStatus::NoAbd);
    CHECK(label_window(make_scores(-3, 8, 2)) == BrainStatus::Coma);
    CHECK_THROWS_AS(label_window(make_scores(std::nullopt, std::nullopt, 2)), Error);
}

TEST_CASE("label_window partial observations") {
    // CAM positive with no RASS observed counts as delirium.
    CHECK(label_window(make_scores(std::nullopt, std::nullopt, 1)) == BrainStatus::Delirium);
    // RASS -3 with no GCS cannot satisfy the coma criterion.
    CHECK(label_window(make_scores(-3, std::nullopt, 2)) == BrainStatus::Delirium);
    // GCS alone never fires a rule.
    CHECK(label_window(make_scores(std::nullopt, 5, 2)) == BrainStatus::NoAbd);
}

TEST_CASE("partition_windows covers the stay") {
    SUBCASE("exact division") {
        auto spans = partition_windows(36.0);
        REQUIRE(spans.size() == 3);
        for (const auto& s : spans) CHECK_FALSE(s.partial);
        CHECK(spans[2].end_h == 36.0);
    }
    SUBCASE("remainder becomes a partial window") {
        auto spans = partition_windows(30.0);
        REQUIRE(spans.size() == 3);
        CHECK_FALSE(spans[1].partial);
        CHECK(spans[2].partial);
        CHECK(spans[2].start_h == 24.0);
        CHECK(spans[2].end_h == 30.0);
    }
    SUBCASE("short stay still yields one partial window") {
        auto spans = partition_windows(11.0);
        REQUIRE(spans.size() == 1);
        CHECK(spans[0].partial);
    }
    SUBCASE("non-positive duration is rejected") {
        CHECK_THROWS_AS(partition_windows(0.0), Error);
        CHECK_THROWS_AS(partition_windows(-4.0), Error);
    }
}

TEST_CASE("window score aggregation") {
    std::vector<NeuroScore> scores{score(ScoreKind::Rass, 1.0, -1), score(ScoreKind::Rass, 5.0, 2),
                                   score(ScoreKind::GcsTotal, 2.0, 14), score(ScoreKind::Cam, 3.0, 0)};
    WindowSpan span{0, 0.0, 12.0, false};
    auto w = aggregate_window_scores(scores, span, 24.0);
    CHECK(w.min_rass == -1);
    CHECK(w.min_gcs == 14);
    CHECK(w.any_cam_observed);
    CHECK_FALSE(w.any_cam_positive);
    CHECK(w.rass_values.size() == 2);

    SUBCASE("gcs total from component minima when no total present") {
        std::vector<NeuroScore> comp{score(ScoreKind::GcsEye, 1.0, 3), score(ScoreKind::GcsEye, 2.0, 4),
                                     score(ScoreKind::GcsVerbal, 1.0, 4), score(ScoreKind::GcsMotor, 1.0, 5)};
        auto v = aggregate_window_scores(comp, span, 24.0);
        CHECK(v.min_gcs == 3 + 4 + 5);
    }
    SUBCASE("components alone are not enough") {
        std::vector<NeuroScore> comp{score(ScoreKind::GcsEye, 1.0, 3), score(ScoreKind::GcsVerbal, 1.0, 4)};
        auto v = aggregate_window_scores(comp, span, 24.0);
        CHECK_FALSE(v.min_gcs.has_value());
        CHECK(v.has_any_score);
    }
    SUBCASE("score at exactly end of stay folds into the last window") {
        std::vector<NeuroScore> at_end{score(ScoreKind::Rass, 24.0, 0)};
        WindowSpan last{1, 12.0, 24.0, false};
        CHECK(aggregate_window_scores(at_end, last, 24.0).has_any_score);
        CHECK_FALSE(aggregate_window_scores(at_end, span, 24.0).has_any_score);
    }
}

TEST_CASE("label_trajectory basics") {
    PhenotypeRules rules;
    SUBCASE("all-normal survivor") {
        TrajectoryInput in;
        in.los_h = 36;
        for (int w = 0; w < 3; ++w) {
            in.scores.push_back(score(ScoreKind::Rass, 12.0 * w + 1, 0));
            in.scores.push_back(score(ScoreKind::Cam, 12.0 * w + 2, 0));
        }
        auto traj = label_trajectory(in, rules);
        REQUIRE(traj.size() == 3);
        for (const auto& a : traj) CHECK(a.status == BrainStatus::NoAbd);
    }
    SUBCASE("death appends a terminal entry") {
        TrajectoryInput in;
        in.los_h = 24;
        in.died_in_icu = true;
        in.scores.push_back(score(ScoreKind::Rass, 1, 0));
        in.scores.push_back(score(ScoreKind::Rass, 13, -4));
        auto traj = label_trajectory(in, rules);
        REQUIRE(traj.size() == 3);
        CHECK(traj[0].status == BrainStatus::NoAbd);
        CHECK(traj[1].status == BrainStatus::Coma);
        CHECK(traj[2].status == BrainStatus::Deceased);
    }
    SUBCASE("unassessed window carries the previous status forward") {
        TrajectoryInput in;
        in.los_h = 24;
        in.scores.push_back(score(ScoreKind::Rass, 1, 0));
        in.scores.push_back(score(ScoreKind::Cam, 2, 1));
        auto traj = label_trajectory(in, rules);
        REQUIRE(traj.size() == 2);
        CHECK(traj[0].status == BrainStatus::Delirium);
        CHECK(traj[1].status == BrainStatus::Delirium);
        CHECK(traj[1].carried_forward);
        CHECK(traj[1].delirium_subtype.has_value());       // inherited
        CHECK_FALSE(traj[1].delirium_phenotypes.empty());  // recomputed, at least unclassified
    }
    SUBCASE("first window with no scores defaults to NoABD") {
        TrajectoryInput in;
        in.los_h = 24;
        in.scores.push_back(score(ScoreKind::Rass, 13, 0));
        auto traj = label_trajectory(in, rules);
        CHECK(traj[0].status == BrainStatus::NoAbd);
        CHECK(traj[0].carried_forward);
    }
    SUBCASE("delirium windows always have subtype and nonempty phenotypes") {
        TrajectoryInput in;
        in.los_h = 48;
        in.scores.push_back(score(ScoreKind::Cam, 1, 1));
        in.scores.push_back(score(ScoreKind::Rass, 2, 1));
        in.scores.push_back(score(ScoreKind::Cam, 13, 1));
        in.scores.push_back(score(ScoreKind::Rass, 14, -2));
        in.scores.push_back(score(ScoreKind::Rass, 25, -3));
        in.scores.push_back(score(ScoreKind::GcsTotal, 26, 12));
        in.scores.push_back(score(ScoreKind::Rass, 37, 0));
        in.scores.push_back(score(ScoreKind::Cam, 38, 1));
        auto traj = label_trajectory(in, rules);
        for (const auto& a : traj) {
            REQUIRE(a.status == BrainStatus::Delirium);
            CHECK(a.delirium_subtype.has_value());
            CHECK_FALSE(a.delirium_phenotypes.empty());
        }
        CHECK(*traj[0].delirium_subtype == DeliriumSubtype::Hyperactive);
        CHECK(*traj[1].delirium_subtype == DeliriumSubtype::Hypoactive);
        CHECK(*traj[2].delirium_subtype == DeliriumSubtype::Hypoactive);
    }
}

TEST_CASE("delirium subtype classification") {
    CHECK(classify_delirium_subtype(make_scores(2, std::nullopt, 1)) == DeliriumSubtype::Hyperactive);
    CHECK(classify_delirium_subtype(make_scores(-1, std::nullopt, 1)) == DeliriumSubtype::Hypoactive);
    CHECK(classify_delirium_subtype(make_scores(-3, 12, 2)) == DeliriumSubtype::Hypoactive);
    // positive RASS without CAM positivity stays hypoactive
    CHECK(classify_delirium_subtype(make_scores(-3, 12, 0)) == DeliriumSubtype::Hypoactive);
}

TEST_CASE("coma subtype classification") {
    PhenotypeRules rules;
    WindowSpan span{2, 24.0, 36.0, false};
    SUBCASE("sedative shortly before the window means induced") {
        std::vector<TimedEvent> ev{{21.0, "propofol", 50.0}};
        CHECK(classify_coma_subtype(span, ev, rules) == ComaSubtype::Induced);
    }
    SUBCASE("no medication events at all") {
        CHECK(classify_coma_subtype(span, {}, rules) == ComaSubtype::Miscellaneous);
    }
    SUBCASE("sedative outside the 12 h lookback") {
        std::vector<TimedEvent> ev{{4.0, "propofol", 50.0}};  // 20 h before window start
        CHECK(classify_coma_subtype(span, ev, rules) == ComaSubtype::Miscellaneous);
    }
    SUBCASE("lookback boundary is inclusive") {
        std::vector<TimedEvent> at{{12.0, "midazolam", 2.0}};
        CHECK(classify_coma_subtype(span, at, rules) == ComaSubtype::Induced);
        std::vector<TimedEvent> before{{11.999, "midazolam", 2.0}};
        CHECK(classify_coma_subtype(span, before, rules) == ComaSubtype::Miscellaneous);
    }
    SUBCASE("empty sedative set warns and yields miscellaneous") {
        PhenotypeRules empty = rules;
        empty.sedative_codes.clear();
        std::vector<TimedEvent> ev{{30.0, "propofol", 50.0}};
        WarningSink warnings;
        CHECK(classify_coma_subtype(span, ev, empty, &warnings) == ComaSubtype::Miscellaneous);
        REQUIRE(warnings.size() == 1);
    }
}

TEST_CASE("delirium phenotype classification") {
    PhenotypeRules rules;
    WindowSpan span{3, 36.0, 48.0, false};
    SUBCASE("low SpO2 within the prior 24 h is hypoxic") {
        std::vector<TimedEvent> ev{{20.0, "spo2", 84.0}};
        auto ph = classify_delirium_phenotypes(span, ev, rules);
        CHECK(ph.count(DeliriumPhenotype::Hypoxic) == 1);
    }
    SUBCASE("no qualifying events falls back to unclassified") {
        std::vector<TimedEvent> ev{{40.0, "hr", 80.0}};
        auto ph = classify_delirium_phenotypes(span, ev, rules);
        CHECK(ph == std::set<DeliriumPhenotype>{DeliriumPhenotype::Unclassified});
    }
    SUBCASE("multi-factor episodes keep every firing phenotype") {
        std::vector<TimedEvent> ev{{37.0, "propofol", 30.0}, {38.0, "wbc", 18.0}, {39.0, "temp", 38.9}};
        auto ph = classify_delirium_phenotypes(span, ev, rules);
        CHECK(ph.count(DeliriumPhenotype::Sedative) == 1);
        CHECK(ph.count(DeliriumPhenotype::Septic) == 1);
        CHECK(ph.count(DeliriumPhenotype::Unclassified) == 0);
    }
    SUBCASE("septic needs both temperature and WBC abnormality") {
        std::vector<TimedEvent> ev{{38.0, "wbc", 18.0}};
        auto ph = classify_delirium_phenotypes(span, ev, rules);
        CHECK(ph.count(DeliriumPhenotype::Septic) == 0);
    }
    SUBCASE("events outside the lookback are ignored") {
        std::vector<TimedEvent> ev{{11.0, "spo2", 80.0}};  // 25 h before window start
        auto ph = classify_delirium_phenotypes(span, ev, rules);
        CHECK(ph.count(DeliriumPhenotype::Hypoxic) == 0);
    }
}

TEST_CASE("compute_transitions hand counts") {
    using B = BrainStatus;
    std::vector<std::vector<B>> trajs{{B::NoAbd, B::NoAbd, B::Delirium, B::Coma, B::Deceased}};
    auto m = compute_transitions(trajs);
    CHECK(m.counts(0, 0) == 1);
    CHECK(m.counts(0, 1) == 1);
    CHECK(m.counts(1, 2) == 1);
    CHECK(m.counts(2, 3) == 1);
    CHECK(m.counts.sum() == 4);

    SUBCASE("single-status trajectory normalizes to identity row") {
        auto mm = compute_transitions({{B::NoAbd, B::NoAbd}});
        CHECK(mm.probabilities(0, 0) == doctest::Approx(1.0));
    }
    SUBCASE("empty input is an error") { CHECK_THROWS_AS(compute_transitions({}), Error); }
}

TEST_CASE("compute_transitions matches a brute-force pair scan on random trajectories") {
    using B = BrainStatus;
    Rng rng(404);
    std::vector<std::vector<B>> trajs;
    for (int i = 0; i < 20; ++i) {
        std::vector<B> traj;
        int len = 2 + static_cast<int>(rng.uniform_index(8));
        for (int j = 0; j < len; ++j) traj.push_back(static_cast<B>(rng.uniform_index(3)));
        if (rng.bernoulli(0.3)) traj.push_back(B::Deceased);
        trajs.push_back(traj);
    }
    long brute[3][4] = {};
    for (const auto& traj : trajs)
        for (std::size_t i = 0; i + 1 < traj.size(); ++i)
            if (traj[i] != B::Deceased) brute[static_cast<int>(traj[i])][static_cast<int>(traj[i + 1])]++;

    auto m = compute_transitions(trajs);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) CHECK(m.counts(r, c) == brute[r][c]);
        if (m.counts.row(r).sum() > 0) CHECK(std::abs(m.probabilities.row(r).sum() - 1.0) <= 1e-9);
    }
}

TEST_CASE("compliance fraction") {
    std::vector<NeuroScore> full, sparse;
    for (int w = 0; w < 10; ++w) full.push_back(score(ScoreKind::Rass, 12.0 * w + 1, 0));
    for (int w = 0; w < 3; ++w) sparse.push_back(score(ScoreKind::Rass, 12.0 * w + 1, 0));

    SUBCASE("every window scored") {
        CHECK(compliance_fraction({{120.0, &full}}) == doctest::Approx(1.0));
    }
    SUBCASE("3 of 10 windows scored") {
        CHECK(compliance_fraction({{120.0, &sparse}}) == doctest::Approx(0.3));
    }
    SUBCASE("empty cohort is an error") { CHECK_THROWS_AS(compliance_fraction({}), Error); }
}

TEST_CASE("score validation enforces clinical ranges") {
    CHECK_THROWS_AS(validate_score(score(ScoreKind::GcsTotal, 1, 16)), Error);
    CHECK_THROWS_AS(validate_score(score(ScoreKind::Rass, 1, 5)), Error);
    CHECK_THROWS_AS(validate_score(score(ScoreKind::Cam, 1, 2)), Error);
    CHECK_THROWS_AS(validate_score(score(ScoreKind::Rass, -1, 0)), Error);
    CHECK_NOTHROW(validate_score(score(ScoreKind::Rass, 1, -5)));
    CHECK_NOTHROW(validate_score(score(ScoreKind::GcsEye, 1, 4)));
}
