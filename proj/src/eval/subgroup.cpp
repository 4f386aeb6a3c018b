#include "mandarin/eval/subgroup.hpp"

#include <set>

namespace mandarin::eval {

FullMetrics full_metrics(const std::vector<double>& scores, const std::vector<int>& labels) {
    FullMetrics m;
    m.auroc = auroc(scores, labels);
    m.auprc = auprc(scores, labels);
    const ThresholdMetrics t = youden_threshold(scores, labels);
    m.sensitivity = t.sensitivity;
    m.specificity = t.specificity;
    m.ppv = t.ppv;
    m.npv = t.npv;
    m.threshold = t.threshold;
    std::vector<double> clamped = scores;
    for (auto& v : clamped) v = std::min(1.0, std::max(0.0, v));
    m.brier = brier(clamped, labels);
    return m;
}

std::vector<double> metrics_vector(const FullMetrics& m) {
    return {m.auroc, m.auprc, m.sensitivity, m.specificity, m.ppv, m.npv, m.brier, m.threshold};
}

std::vector<SubgroupRow> subgroup_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                          const std::vector<SampleMeta>& metas, const SubgroupSpec& spec,
                                          std::uint64_t seed) {
    if (scores.size() != labels.size() || scores.size() != metas.size())
        throw Error("subgroup_metrics: scores/labels/metas size mismatch");

    auto group_of = [&](const SampleMeta& m, const std::string& dimension) -> std::string {
        if (dimension == "age") return m.age <= spec.age_cutoff ? "young" : "old";
        if (dimension == "sex") return m.sex == "M" ? "male" : "female";
        if (m.race == "Black") return "black";
        if (m.race == "White") return "white";
        return "other";
    };

    std::vector<SubgroupRow> out;
    std::uint64_t salt = 0;
    for (const std::string dimension : {"age", "sex", "race"}) {
        std::map<std::string, std::vector<std::size_t>> members;
        if (dimension == "age") members = {{"young", {}}, {"old", {}}};
        else if (dimension == "sex") members = {{"male", {}}, {"female", {}}};
        else members = {{"black", {}}, {"white", {}}, {"other", {}}};
        for (std::size_t i = 0; i < metas.size(); ++i) members[group_of(metas[i], dimension)].push_back(i);

        for (const auto& [group, idx] : members) {
            SubgroupRow row;
            row.dimension = dimension;
            row.group = group;
            row.n_samples = static_cast<long>(idx.size());
            std::set<std::string> adm;
            for (auto i : idx) adm.insert(metas[i].admission_id);
            row.n_admissions = static_cast<long>(adm.size());
            if (row.n_admissions < spec.min_admissions) {
                row.sufficient = false;
                out.push_back(std::move(row));
                continue;
            }
            std::vector<std::string> adm_of;
            std::vector<double> s;
            std::vector<int> y;
            for (auto i : idx) {
                adm_of.push_back(metas[i].admission_id);
                s.push_back(scores[i]);
                y.push_back(labels[i]);
            }
            try {
                auto results = bootstrap_vector_ci(
                    adm_of,
                    [&](const std::vector<std::size_t>& pick) {
                        std::vector<double> ps;
                        std::vector<int> ys;
                        ps.reserve(pick.size());
                        for (auto i : pick) {
                            ps.push_back(s[i]);
                            ys.push_back(y[i]);
                        }
                        return metrics_vector(full_metrics(ps, ys));
                    },
                    static_cast<long>(kMetricNames.size()), spec.bootstrap_iterations, seed + salt);
                for (std::size_t m = 0; m < kMetricNames.size(); ++m)
                    row.metrics[kMetricNames[m]] = {results[m].median, results[m].lo, results[m].hi};
            } catch (const Error&) {
                row.sufficient = false;  // single-class subgroup
            }
            out.push_back(std::move(row));
            ++salt;
        }
        ++salt;
    }
    return out;
}

}  // namespace mandarin::eval
