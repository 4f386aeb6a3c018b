#include "mandarin/model/bundle.hpp"

#include <filesystem>
#include <fstream>

#include "mandarin/threads.hpp"

namespace mandarin::model {

namespace fs = std::filesystem;
using namespace mandarin::core;

int branch_index(pheno::BrainStatus s) {
    switch (s) {
        case pheno::BrainStatus::NoAbd: return 0;
        case pheno::BrainStatus::Delirium: return 1;
        case pheno::BrainStatus::Coma: return 2;
        case pheno::BrainStatus::Deceased: break;
    }
    throw Error("no branch exists for a deceased current status");
}

const char* branch_name(int index) {
    switch (index) {
        case 0: return "no_abd";
        case 1: return "delirium";
        case 2: return "coma";
    }
    throw Error("branch index out of range");
}

namespace {
const char* branch_ckpt(int index) {
    switch (index) {
        case 0: return "branch_noabd.ckpt";
        case 1: return "branch_delirium.ckpt";
        case 2: return "branch_coma.ckpt";
    }
    throw Error("branch index out of range");
}
}  // namespace

ModelBundle ModelBundle::fresh(const ModelConfig& cfg, const ingest::VariableVocabulary& vocab, std::uint64_t seed) {
    ModelBundle b;
    b.config = cfg;
    b.vocab = vocab;
    for (int i = 0; i < 3; ++i) {
        b.branches[i] = std::make_unique<ParameterStore>(seed + static_cast<std::uint64_t>(i));
        register_branch_parameters(*b.branches[i], cfg);
    }
    return b;
}

void ModelBundle::save(const std::string& dir) const {
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "config.json");
        if (!os) throw Error("cannot write model config under '" + dir + "'");
        os << config.to_json() << "\n";
    }
    vocab.save((fs::path(dir) / "vocabulary.json").string());
    for (int i = 0; i < 3; ++i) branches[i]->save((fs::path(dir) / branch_ckpt(i)).string());
}

ModelBundle ModelBundle::load(const std::string& dir) {
    const fs::path cfg_path = fs::path(dir) / "config.json";
    if (!fs::exists(cfg_path)) throw Error("missing " + cfg_path.string() + "; run `mandarin train` first");
    ModelBundle b;
    {
        std::ifstream is(cfg_path);
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        b.config = ModelConfig::from_json(text);
    }
    b.vocab = ingest::VariableVocabulary::load((fs::path(dir) / "vocabulary.json").string());
    for (int i = 0; i < 3; ++i) {
        const fs::path p = fs::path(dir) / branch_ckpt(i);
        if (!fs::exists(p)) throw Error("missing " + p.string() + "; run `mandarin train` first");
        b.branches[i] = std::make_unique<ParameterStore>(ParameterStore::load(p.string()));
        if (b.branches[i]->total_parameters() != branch_parameter_count(b.config))
            throw Error("checkpoint " + p.string() + " does not match the model configuration");
    }
    return b;
}

std::vector<RiskOutput> predict_branch(ParameterStore& store, const ModelConfig& cfg,
                                       const std::vector<const ingest::PredictionSample*>& samples, long batch_size) {
    std::vector<RiskOutput> out(samples.size());
    if (samples.empty()) return out;
    const long n_batches = (static_cast<long>(samples.size()) + batch_size - 1) / batch_size;
    parallel_chunks(static_cast<std::size_t>(n_batches), [&](int, std::size_t begin, std::size_t end) {
        for (std::size_t bi = begin; bi < end; ++bi) {
            const std::size_t lo = bi * static_cast<std::size_t>(batch_size);
            const std::size_t hi = std::min(samples.size(), lo + static_cast<std::size_t>(batch_size));
            std::vector<const ingest::PredictionSample*> chunk(samples.begin() + lo, samples.begin() + hi);
            Batch batch = make_batch(chunk, cfg);
            Tape t;
            t.set_grad_enabled(false);
            TapeParams P(t, store);
            BranchForward f = branch_forward(t, P, cfg, batch);
            for (int slot = 0; slot < 3; ++slot) {
                const Array& p = t.value(f.probs[slot]);
                for (long i = 0; i < batch.n; ++i)
                    for (int h = 0; h < 6; ++h) out[lo + i].prob[slot][h] = p[i * 6 + h];
            }
        }
    });
    return out;
}

std::vector<RiskOutput> predict(const ModelBundle& bundle,
                                const std::vector<const ingest::PredictionSample*>& samples, long batch_size) {
    std::vector<RiskOutput> out(samples.size());
    for (int b = 0; b < 3; ++b) {
        std::vector<const ingest::PredictionSample*> mine;
        std::vector<std::size_t> where;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (branch_index(samples[i]->current_status) == b) {
                mine.push_back(samples[i]);
                where.push_back(i);
            }
        if (mine.empty()) continue;
        auto risks = predict_branch(*bundle.branches[b], bundle.config, mine, batch_size);
        for (std::size_t i = 0; i < where.size(); ++i) out[where[i]] = risks[i];
    }
    return out;
}

RiskOutput forward_one(const ModelBundle& bundle, const ingest::PredictionSample& sample) {
    return predict(bundle, {&sample}, 1).front();
}

}  // namespace mandarin::model
