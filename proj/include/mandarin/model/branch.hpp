#pragma once

#include <span>

#include "mandarin/core/store.hpp"
#include "mandarin/core/tensor.hpp"
#include "mandarin/ingest/pipeline.hpp"
#include "mandarin/model/config.hpp"

namespace mandarin::model {

// Registers every parameter tensor of one branch into a fresh seeded store.
void register_branch_parameters(core::ParameterStore& store, const ModelConfig& cfg);

// Dense batch view over prediction samples, trimmed to the longest valid
// sequence in the batch. Conv channels are (time_h / 720, time_of_day / 24,
// value); both scalings keep the channels in [0,1] over a 30-day stay.
struct Batch {
    long n = 0;
    long len = 0;
    std::vector<long> lengths;
    std::vector<int> codes;          // n*len, 0-padded
    core::Array conv_in;             // n*len x 3
    core::Array statics;             // n x static_dim
    core::Array valid_rowmask;       // n*len
    std::vector<long> valid_rows;    // flat indices of valid positions
    std::array<core::Array, 3> label;  // n x 6 per target slot (censored -> 0)
    std::array<core::Array, 3> mask;   // 1 where the label is observed
};

Batch make_batch(std::span<const ingest::PredictionSample* const> samples, const ModelConfig& cfg);

struct BranchForward {
    std::array<core::Var, 3> probs;  // [n x 6] monotone probabilities per target slot
    core::Var aux_loss;              // mean router load-balance loss over blocks
};

// The discrete decisions of one forward pass: expert assignments per block and
// the pooled step selection. Replaying a captured plan makes the forward pass
// smooth in its inputs, which integrated gradients needs.
struct RoutingPlan {
    std::vector<std::vector<long>> expert_of_block;  // per block: [n_tokens * k] expert ids
    std::vector<long> pool_rows;
    std::vector<long> pool_counts;
};

// Inputs are injectable so integrated gradients can attribute against the
// conv-layer input, the code-embedding output, and the static vector.
// `pin` replays a captured routing plan; `capture` exports this pass's plan.
BranchForward branch_forward(core::Tape& tape, core::TapeParams& params, const ModelConfig& cfg, const Batch& batch,
                             core::Var conv_in, core::Var code_emb, core::Var statics,
                             const RoutingPlan* pin = nullptr, RoutingPlan* capture = nullptr);

// Standard entry: builds the input leaves from the batch (embedding via table
// lookup) and runs the forward pass.
BranchForward branch_forward(core::Tape& tape, core::TapeParams& params, const ModelConfig& cfg, const Batch& batch);

// Discrete-hazard head: q_j = sigmoid(z_j), p(h_k) = 1 - prod_{j<=k}(1 - q_j).
core::Var cdf_layer(core::Tape& tape, core::Var hazard_logits);

}  // namespace mandarin::model
