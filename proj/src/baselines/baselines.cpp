#include "mandarin/baselines/baselines.hpp"

#include <cmath>

#include "mandarin/core/store.hpp"
#include "mandarin/core/tensor.hpp"

namespace mandarin::baselines {

double clinical_score(const pheno::WindowScores& w) {
    double sum = 0;
    int parts = 0;
    if (w.min_gcs) {
        sum += (15.0 - static_cast<double>(*w.min_gcs)) / 12.0;
        ++parts;
    }
    if (w.min_rass) {
        sum += std::max(0.0, -static_cast<double>(*w.min_rass)) / 5.0;
        ++parts;
    }
    if (w.any_cam_observed) {
        sum += w.any_cam_positive ? 1.0 : 0.0;
        ++parts;
    }
    if (parts == 0) throw Error("clinical_score: no GCS/RASS/CAM component observed in the window");
    return sum / static_cast<double>(parts);
}

long stat_feature_dim(const ingest::VariableVocabulary& vocab) {
    return 6 * static_cast<long>(vocab.size()) + ingest::kStaticDim;
}

Eigen::VectorXd build_stat_features(const ingest::PredictionSample& sample, const ingest::VariableVocabulary& vocab) {
    const long n_vars = static_cast<long>(vocab.size());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(stat_feature_dim(vocab));
    std::vector<double> vmin(n_vars + 1, 0), vmax(n_vars + 1, 0), vsum(n_vars + 1, 0), vlast(n_vars + 1, 0);
    std::vector<long> vcount(n_vars + 1, 0);
    const auto& q = sample.sequence;
    for (long i = 0; i < q.n_valid; ++i) {
        const int c = q.code[i];
        if (c < 1 || c > n_vars) throw Error("build_stat_features: code outside the vocabulary");
        if (vcount[c] == 0) {
            vmin[c] = vmax[c] = q.value[i];
        } else {
            vmin[c] = std::min(vmin[c], q.value[i]);
            vmax[c] = std::max(vmax[c], q.value[i]);
        }
        vsum[c] += q.value[i];
        vlast[c] = q.value[i];  // sequence is time-sorted
        vcount[c] += 1;
    }
    for (long c = 1; c <= n_vars; ++c) {
        const long base = (c - 1) * 6;
        if (vcount[c] > 0) {
            out[base + 0] = vmin[c];
            out[base + 1] = vmax[c];
            out[base + 2] = vsum[c] / static_cast<double>(vcount[c]);
            out[base + 3] = vlast[c];
            out[base + 4] = static_cast<double>(vcount[c]) / 64.0;
            out[base + 5] = 1.0;
        }
    }
    for (long j = 0; j < ingest::kStaticDim; ++j) out[6 * n_vars + j] = sample.statics[j];
    return out;
}

LogisticModel logistic_train(const Eigen::MatrixXd& features, const std::vector<int>& labels, double l2,
                             long max_iters, double tol) {
    using namespace mandarin::core;
    const long n = features.rows();
    const long d = features.cols();
    if (n != static_cast<long>(labels.size()) || n == 0) throw Error("logistic_train: features/labels mismatch");
    long pos = 0;
    for (int y : labels) pos += y;
    if (pos == 0 || pos == n) throw Error("logistic_train: both classes required");

    Array x(n * d);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < d; ++j) x[i * d + j] = features(i, j);
    Array label(n);
    for (long i = 0; i < n; ++i) label[i] = labels[i];

    ParameterStore store(0);
    store.add("w", {d, 1}, Init::Zeros);
    store.add("b", {1}, Init::Zeros);
    AdamConfig adam;
    adam.clip_norm = 0;

    for (long it = 0; it < max_iters; ++it) {
        Tape t;
        TapeParams P(t, store);
        Var w = P["w"];
        Var p = sigmoid(t, linear(t, t.leaf({n, d}, x), w, P["b"]));
        auto bce = weighted_bce(t, p, label, Array::Ones(n), Array::Ones(n));
        Var penalty = scale(t, sum_all(t, mul(t, w, w)), l2 / (2.0 * static_cast<double>(n)));
        Var loss = add(t, bce.loss, penalty);
        t.backward(loss);
        P.flush_grads();

        double g2 = 0;
        for (const auto& name : store.names()) g2 += store.at(name).grad.square().sum();
        if (std::sqrt(g2) < tol) {
            store.zero_grads();
            break;
        }
        adam.lr = 0.25 / (1.0 + static_cast<double>(it) / 200.0);
        adam_step(store, adam);
    }

    LogisticModel model;
    model.weights = Eigen::VectorXd(d);
    for (long j = 0; j < d; ++j) model.weights[j] = store.at("w").value[j];
    model.intercept = store.at("b").value[0];
    return model;
}

double logistic_predict(const LogisticModel& model, const Eigen::VectorXd& x) {
    if (x.size() != model.weights.size()) throw Error("logistic_predict: feature dimension mismatch");
    return 1.0 / (1.0 + std::exp(-(model.weights.dot(x) + model.intercept)));
}

std::vector<double> logistic_predict(const LogisticModel& model, const Eigen::MatrixXd& features) {
    std::vector<double> out(features.rows());
    for (long i = 0; i < features.rows(); ++i) {
        const Eigen::VectorXd row = features.row(i).transpose();
        out[i] = logistic_predict(model, row);
    }
    return out;
}

}  // namespace mandarin::baselines
