#include "mandarin/model/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mandarin/eval/metrics.hpp"
#include "mandarin/rng.hpp"
#include "mandarin/threads.hpp"

namespace mandarin::model {

using namespace mandarin::core;
using ingest::LabelState;
using ingest::PredictionSample;

ClassWeights compute_class_weights(const std::vector<const PredictionSample*>& train_samples,
                                   double w_pos_cap) {
    ClassWeights cw;
    for (int slot = 0; slot < 3; ++slot)
        for (int h = 0; h < 6; ++h) {
            long pos = 0, neg = 0;
            for (const auto* s : train_samples) {
                const LabelState l = s->labels[slot][h];
                if (l == LabelState::Positive) ++pos;
                else if (l == LabelState::Negative) ++neg;
            }
            if (pos > 0 && neg > 0) {
                double w = static_cast<double>(neg) / static_cast<double>(pos);
                if (w_pos_cap > 0) w = std::min(w, w_pos_cap);
                cw.w_pos[slot][h] = w;
                cw.active[slot][h] = true;
                cw.any_active = true;
            }
        }
    return cw;
}

namespace {

struct Snapshot {
    std::vector<std::pair<std::string, Array>> values;
};

Snapshot take_snapshot(const ParameterStore& store) {
    Snapshot s;
    for (const auto& name : store.names()) s.values.emplace_back(name, store.at(name).value);
    return s;
}

void restore_snapshot(ParameterStore& store, const Snapshot& s) {
    for (const auto& [name, value] : s.values) store.at(name).value = value;
}

double validation_auroc(ParameterStore& store, const ModelConfig& cfg,
                        const std::vector<const PredictionSample*>& val) {
    if (val.empty()) return std::nan("");
    auto risks = predict_branch(store, cfg, val, 64);
    double sum = 0;
    int used = 0;
    for (int slot = 0; slot < 3; ++slot) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (std::size_t i = 0; i < val.size(); ++i) {
            const LabelState l = val[i]->labels[slot][0];
            if (l == LabelState::Censored) continue;
            scores.push_back(risks[i].prob[slot][0]);
            labels.push_back(l == LabelState::Positive ? 1 : 0);
        }
        const long pos = std::count(labels.begin(), labels.end(), 1);
        if (pos == 0 || pos == static_cast<long>(labels.size()) || labels.empty()) continue;
        sum += eval::auroc(scores, labels);
        ++used;
    }
    return used ? sum / used : std::nan("");
}

// One optimizer step over a batch, split across workers with a deterministic
// worker-index merge.
double train_batch(ParameterStore& store, const ModelConfig& cfg, const TrainConfig& tc,
                   const std::vector<const PredictionSample*>& batch, const ClassWeights& cw) {
    // Batch-level unmasked counts keep per-chunk losses summable to the batch mean.
    std::array<std::array<long, 6>, 3> counts{};
    for (const auto* s : batch)
        for (int slot = 0; slot < 3; ++slot)
            for (int h = 0; h < 6; ++h)
                if (s->labels[slot][h] != LabelState::Censored) ++counts[slot][h];

    const int workers = std::max(1, std::min<int>(worker_count(), static_cast<int>(batch.size())));
    struct WorkerOut {
        std::unique_ptr<Tape> tape;
        std::unique_ptr<TapeParams> params;
        double loss = 0;
    };
    std::vector<WorkerOut> outs(workers);
    const std::size_t chunk = (batch.size() + workers - 1) / workers;

    parallel_chunks(static_cast<std::size_t>(workers), [&](int, std::size_t wbegin, std::size_t wend) {
        for (std::size_t w = wbegin; w < wend; ++w) {
            const std::size_t lo = std::min(batch.size(), w * chunk);
            const std::size_t hi = std::min(batch.size(), lo + chunk);
            if (lo >= hi) continue;
            std::vector<const PredictionSample*> part(batch.begin() + lo, batch.begin() + hi);
            Batch b = make_batch(part, cfg);
            auto tape = std::make_unique<Tape>();
            auto params = std::make_unique<TapeParams>(*tape, store);
            BranchForward f = branch_forward(*tape, *params, cfg, b);

            Var total{};
            for (int slot = 0; slot < 3; ++slot) {
                for (int h = 0; h < 6; ++h) {
                    if (!cw.active[slot][h] || counts[slot][h] == 0) continue;
                    std::vector<long> col(b.n);
                    for (long i = 0; i < b.n; ++i) col[i] = i * 6 + h;
                    Var p = gather_elems(*tape, f.probs[slot], col);
                    Array label(b.n), weight(b.n), mask(b.n);
                    for (long i = 0; i < b.n; ++i) {
                        label[i] = b.label[slot][i * 6 + h];
                        mask[i] = b.mask[slot][i * 6 + h];
                        weight[i] = label[i] > 0.5 ? cw.w_pos[slot][h] : 1.0;
                    }
                    auto bce = weighted_bce(*tape, p, label, weight, mask, 1e-7, counts[slot][h]);
                    if (bce.all_masked) continue;
                    total = total.valid() ? add(*tape, total, bce.loss) : bce.loss;
                }
            }
            if (cfg.load_balance_lambda > 0 && f.aux_loss.valid()) {
                const double frac = static_cast<double>(b.n) / static_cast<double>(batch.size());
                Var aux = scale(*tape, f.aux_loss, cfg.load_balance_lambda * frac);
                total = total.valid() ? add(*tape, total, aux) : aux;
            }
            if (!total.valid()) continue;
            outs[w].loss = tape->value(total)[0];
            tape->backward(total);
            outs[w].tape = std::move(tape);
            outs[w].params = std::move(params);
        }
    });

    double loss = 0;
    for (auto& o : outs) {
        if (!o.params) continue;
        o.params->flush_grads();
        loss += o.loss;
    }
    adam_step(store, tc.adam);
    return loss;
}

}  // namespace

TrainResult train(const ingest::SampleSet& set, const ingest::VariableVocabulary& vocab, const ModelConfig& cfg,
                  const TrainConfig& tc, std::uint64_t seed) {
    cfg.validate();
    if (static_cast<long>(vocab.size()) != cfg.vocab_size)
        throw Error("train: vocabulary has " + std::to_string(vocab.size()) + " variables but the model expects " +
                    std::to_string(cfg.vocab_size));
    if (set.vocab_fingerprint != vocab.fingerprint())
        throw Error("train: samples artifact was built with a different vocabulary; re-run `mandarin ingest`");

    TrainResult result;
    result.bundle = ModelBundle::fresh(cfg, vocab, seed);

    for (int b = 0; b < 3; ++b) {
        BranchTrainLog log;
        log.branch = branch_name(b);

        std::vector<PredictionSample> owned;  // filled only for the permuted control
        std::vector<const PredictionSample*> train_samples, val_samples;
        {
            std::vector<const PredictionSample*> all;
            for (const auto& s : set.samples)
                if (branch_index(s.current_status) == b) all.push_back(&s);
            if (tc.permute_labels) {
                owned.reserve(all.size());
                for (const auto* s : all) owned.push_back(*s);
                std::vector<std::size_t> train_idx, val_idx;
                for (std::size_t i = 0; i < owned.size(); ++i)
                    (owned[i].is_validation ? val_idx : train_idx).push_back(i);
                Rng prng(seed * 7919 + static_cast<std::uint64_t>(b));
                auto permute = [&](std::vector<std::size_t>& idx) {
                    std::vector<std::array<std::array<LabelState, 6>, 3>> labels;
                    labels.reserve(idx.size());
                    for (auto i : idx) labels.push_back(owned[i].labels);
                    prng.shuffle(labels);
                    for (std::size_t k = 0; k < idx.size(); ++k) owned[idx[k]].labels = labels[k];
                };
                permute(train_idx);
                permute(val_idx);
                for (const auto& s : owned) (s.is_validation ? val_samples : train_samples).push_back(&s);
            } else {
                for (const auto* s : all) (s->is_validation ? val_samples : train_samples).push_back(s);
            }
        }
        log.n_train = static_cast<long>(train_samples.size());
        log.n_val = static_cast<long>(val_samples.size());

        const ClassWeights cw = compute_class_weights(train_samples, tc.w_pos_cap);
        if (!cw.any_active || train_samples.empty()) {
            log.skipped = true;
            warn(&result.warnings, "branch " + log.branch + " skipped: no usable positive labels in training split");
            result.logs.push_back(std::move(log));
            continue;
        }

        ParameterStore& store = *result.bundle.branches[b];

        // Long sequences batch together so padding stays tight.
        std::vector<std::size_t> order(train_samples.size());
        std::iota(order.begin(), order.end(), 0u);
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            const auto* a = train_samples[x];
            const auto* c = train_samples[y];
            if (a->sequence.n_valid != c->sequence.n_valid) return a->sequence.n_valid > c->sequence.n_valid;
            if (a->admission_id != c->admission_id) return a->admission_id < c->admission_id;
            return a->prediction_time_h < c->prediction_time_h;
        });
        std::vector<std::vector<const PredictionSample*>> batches;
        for (std::size_t lo = 0; lo < order.size(); lo += tc.batch_size) {
            std::vector<const PredictionSample*> batch;
            for (std::size_t i = lo; i < std::min(order.size(), lo + tc.batch_size); ++i)
                batch.push_back(train_samples[order[i]]);
            batches.push_back(std::move(batch));
        }

        Rng shuffle_rng(seed * 31 + static_cast<std::uint64_t>(b));
        Snapshot best = take_snapshot(store);
        double best_metric = -1;
        long since_best = 0;
        for (long epoch = 0; epoch < tc.max_epochs; ++epoch) {
            std::vector<std::size_t> batch_order(batches.size());
            std::iota(batch_order.begin(), batch_order.end(), 0u);
            shuffle_rng.shuffle(batch_order);
            double epoch_loss = 0;
            for (auto bi : batch_order) {
                epoch_loss += train_batch(store, cfg, tc, batches[bi], cw);
                ++log.steps;
            }
            log.epoch_loss.push_back(epoch_loss / static_cast<double>(batches.size()));

            const double metric = validation_auroc(store, cfg, val_samples);
            log.epoch_val_auroc.push_back(metric);
            if (std::isnan(metric)) {
                // No usable validation signal: keep the latest parameters.
                best = take_snapshot(store);
                log.best_epoch = epoch;
                continue;
            }
            if (metric > best_metric + 1e-9) {
                best_metric = metric;
                best = take_snapshot(store);
                log.best_epoch = epoch;
                since_best = 0;
            } else if (++since_best >= tc.patience) {
                break;
            }
        }
        restore_snapshot(store, best);
        result.logs.push_back(std::move(log));
    }
    return result;
}

}  // namespace mandarin::model
