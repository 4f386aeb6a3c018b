#include "mandarin/eval/attribution.hpp"

#include <cmath>
#include <map>
#include <set>

namespace mandarin::eval {

using namespace mandarin::core;
using model::Batch;
using model::BranchForward;

namespace {

double forward_scaled(ParameterStore& store, const model::ModelConfig& cfg, const Batch& batch, const Array& conv_x,
                      const Array& emb_x, const Array& stat_x, int slot, int horizon_idx, Array* g_conv,
                      Array* g_emb, Array* g_stat, const model::RoutingPlan* pin, model::RoutingPlan* capture) {
    Tape t;
    t.set_grad_enabled(g_conv != nullptr);
    TapeParams P(t, store);
    Var conv = t.leaf({batch.n * batch.len, 3}, conv_x, g_conv != nullptr);
    Var emb = t.leaf({batch.n * batch.len, cfg.d_model}, emb_x, g_conv != nullptr);
    Var stat = t.leaf({batch.n, cfg.static_dim}, stat_x, g_conv != nullptr);
    BranchForward f = model::branch_forward(t, P, cfg, batch, conv, emb, stat, pin, capture);
    Var scalar = pick(t, f.probs[slot], horizon_idx);
    const double value = t.value(scalar)[0];
    if (g_conv) {
        t.backward(scalar);
        auto take = [&](Var v, Array& dst) {
            const Array& g = t.grad(v);
            if (g.size() == 0) dst.setZero();
            else dst = g;
        };
        take(conv, *g_conv);
        take(emb, *g_emb);
        take(stat, *g_stat);
    }
    return value;
}

}  // namespace

Eigen::ArrayXd ig_midpoint(const std::function<double(const Eigen::ArrayXd&, Eigen::ArrayXd*)>& f,
                           const Eigen::ArrayXd& x, long steps) {
    if (steps < 1) throw Error("integrated_gradients: steps must be positive");
    Eigen::ArrayXd mean_grad = Eigen::ArrayXd::Zero(x.size());
    Eigen::ArrayXd grad(x.size());
    for (long s = 1; s <= steps; ++s) {
        const double alpha = (2.0 * static_cast<double>(s) - 1.0) / (2.0 * static_cast<double>(steps));
        grad.setZero();
        f(Eigen::ArrayXd(alpha * x), &grad);
        if (!grad.isFinite().all())
            throw Error("integrated_gradients: non-finite gradient at path step " + std::to_string(s));
        mean_grad += grad;
    }
    mean_grad /= static_cast<double>(steps);
    return x * mean_grad;
}

Attribution integrated_gradients(ParameterStore& store, const model::ModelConfig& cfg,
                                 const ingest::PredictionSample& sample, int target_slot, int horizon_idx,
                                 long steps) {
    if (target_slot < 0 || target_slot > 2 || horizon_idx < 0 || horizon_idx > 5)
        throw Error("integrated_gradients: target slot/horizon out of range");

    const ingest::PredictionSample* ptr = &sample;
    Batch batch = model::make_batch(std::span(&ptr, 1), cfg);
    const long rows = batch.n * batch.len;
    const long n_conv = rows * 3;
    const long n_emb = rows * cfg.d_model;
    const long n_stat = cfg.static_dim;

    // Embedding-layer output for the sample's codes.
    const Array& table = store.at("embed.code").value;
    Array x(n_conv + n_emb + n_stat);
    x.segment(0, n_conv) = batch.conv_in;
    for (long i = 0; i < rows; ++i) {
        const int c = batch.codes[i];
        for (long d = 0; d < cfg.d_model; ++d) x[n_conv + i * cfg.d_model + d] = table[c * cfg.d_model + d];
    }
    x.segment(n_conv + n_emb, n_stat) = batch.statics;

    // Freeze the discrete routing and pooling choices at the input point; the
    // attributed function is then smooth along the path, which the path
    // integral requires.
    model::RoutingPlan plan;
    forward_scaled(store, cfg, batch, batch.conv_in, x.segment(n_conv, n_emb), batch.statics, target_slot,
                   horizon_idx, nullptr, nullptr, nullptr, nullptr, &plan);

    auto evaluate = [&](const Eigen::ArrayXd& point, Eigen::ArrayXd* grad) -> double {
        Array gc(n_conv), ge(n_emb), gs(n_stat);
        const Array conv_x = point.segment(0, n_conv);
        const Array emb_x = point.segment(n_conv, n_emb);
        const Array stat_x = point.segment(n_conv + n_emb, n_stat);
        const double v = forward_scaled(store, cfg, batch, conv_x, emb_x, stat_x, target_slot, horizon_idx,
                                        grad ? &gc : nullptr, grad ? &ge : nullptr, grad ? &gs : nullptr, &plan,
                                        nullptr);
        if (grad) {
            grad->segment(0, n_conv) = gc;
            grad->segment(n_conv, n_emb) = ge;
            grad->segment(n_conv + n_emb, n_stat) = gs;
        }
        return v;
    };

    const Eigen::ArrayXd attr = ig_midpoint(evaluate, x, steps);
    Attribution a;
    a.len = batch.len;
    a.conv = attr.segment(0, n_conv);
    a.emb = attr.segment(n_conv, n_emb);
    a.statics = attr.segment(n_conv + n_emb, n_stat);
    a.f_input = evaluate(x, nullptr);
    a.f_baseline = evaluate(Eigen::ArrayXd::Zero(x.size()), nullptr);
    return a;
}

ImportanceReport feature_importance(const std::vector<const ingest::PredictionSample*>& samples,
                                    const std::vector<Attribution>& attributions,
                                    const ingest::VariableVocabulary& vocab, const ImportanceOptions& options) {
    if (samples.size() != attributions.size()) throw Error("feature_importance: samples/attributions mismatch");
    if (options.alpha < 0 || options.alpha > 1) throw Error("feature_importance: alpha must lie in [0,1]");

    std::map<int, std::string> name_of;
    for (const auto& [name, entry] : vocab.variables) name_of[entry.code] = name;

    std::map<int, double> emb_acc, conv_acc;
    std::map<int, long> occurrences;
    std::map<int, std::set<std::string>> adm_with;
    std::set<std::string> all_adm;
    for (std::size_t si = 0; si < samples.size(); ++si) {
        const auto& s = *samples[si];
        const auto& a = attributions[si];
        all_adm.insert(s.admission_id);
        const long d = a.emb.size() / std::max<long>(1, a.len);
        for (long i = 0; i < s.sequence.n_valid && i < a.len; ++i) {
            const int code = s.sequence.code[i];
            double step_emb = 0, step_conv = 0;
            for (long j = 0; j < d; ++j) step_emb += a.emb[i * d + j];
            for (long j = 0; j < 3; ++j) step_conv += a.conv[i * 3 + j];
            if (!options.signed_reduction) {
                step_emb = std::abs(step_emb);
                step_conv = std::abs(step_conv);
            }
            emb_acc[code] += step_emb;
            conv_acc[code] += step_conv;
            occurrences[code] += 1;
            adm_with[code].insert(s.admission_id);
        }
    }

    std::vector<ImportanceRow> rows;
    for (const auto& [code, count] : occurrences) {
        ImportanceRow r;
        auto it = name_of.find(code);
        r.feature = it == name_of.end() ? ("code_" + std::to_string(code)) : it->second;
        r.presence = static_cast<double>(adm_with[code].size()) / static_cast<double>(all_adm.size());
        r.ig_emb = emb_acc[code] / static_cast<double>(count);
        r.ig_conv = conv_acc[code] / static_cast<double>(count);
        rows.push_back(std::move(r));
    }

    // The two layers live on different scales: min-max normalize each before mixing.
    auto normalize = [&rows](double ImportanceRow::* field) {
        if (rows.empty()) return;
        double lo = rows.front().*field, hi = rows.front().*field;
        for (const auto& r : rows) {
            lo = std::min(lo, r.*field);
            hi = std::max(hi, r.*field);
        }
        for (auto& r : rows) r.*field = hi > lo ? (r.*field - lo) / (hi - lo) : 1.0;
    };
    normalize(&ImportanceRow::ig_emb);
    normalize(&ImportanceRow::ig_conv);
    for (auto& r : rows)
        r.importance = r.presence * (options.alpha * r.ig_emb + (1.0 - options.alpha) * r.ig_conv);

    std::sort(rows.begin(), rows.end(), [](const ImportanceRow& a, const ImportanceRow& b) {
        if (a.importance != b.importance) return a.importance > b.importance;
        return a.feature < b.feature;
    });
    ImportanceReport report;
    report.rows = std::move(rows);
    report.alpha = options.alpha;
    report.reduction = options.signed_reduction ? "mean_signed" : "mean_abs";
    return report;
}

}  // namespace mandarin::eval
