#include "mandarin/model/branch.hpp"

#include <cmath>

namespace mandarin::model {

using namespace mandarin::core;

void register_branch_parameters(ParameterStore& store, const ModelConfig& cfg) {
    cfg.validate();
    const long d = cfg.d_model;
    store.add("embed.conv.w", {cfg.conv_kernel * 3, d}, Init::XavierUniform);
    store.add("embed.conv.b", {d}, Init::Zeros);
    auto& code_table = store.add("embed.code", {cfg.vocab_size + 1, d}, Init::Embedding);
    for (long j = 0; j < d; ++j) code_table.value[j] = 0.0;  // padding row stays zero
    for (long b = 0; b < cfg.n_blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        store.add(p + "ln1.g", {d}, Init::XavierUniform);
        store.add(p + "ln1.b", {d}, Init::Zeros);
        for (const char* name : {"wq", "wk", "wv", "wo"}) store.add(p + "attn." + name, {d, d}, Init::XavierUniform);
        for (const char* name : {"bq", "bk", "bv", "bo"}) store.add(p + "attn." + name, {d}, Init::Zeros);
        store.add(p + "ln2.g", {d}, Init::XavierUniform);
        store.add(p + "ln2.b", {d}, Init::Zeros);
        store.add(p + "router.w", {d, cfg.n_experts}, Init::XavierUniform);
        store.add(p + "router.b", {cfg.n_experts}, Init::Zeros);
        for (long e = 0; e < cfg.n_experts; ++e) {
            const std::string q = p + "expert" + std::to_string(e) + ".";
            store.add(q + "w1", {d, cfg.expert_hidden}, Init::XavierUniform);
            store.add(q + "b1", {cfg.expert_hidden}, Init::Zeros);
            store.add(q + "w2", {cfg.expert_hidden, d}, Init::XavierUniform);
            store.add(q + "b2", {d}, Init::Zeros);
        }
    }
    store.add("pool.score.w", {d, 1}, Init::XavierUniform);
    store.add("pool.score.b", {1}, Init::Zeros);
    store.add("static.w1", {cfg.static_dim, d}, Init::XavierUniform);
    store.add("static.b1", {d}, Init::Zeros);
    store.add("static.w2", {d, d}, Init::XavierUniform);
    store.add("static.b2", {d}, Init::Zeros);
    const long n_horizons = static_cast<long>(cfg.horizons.size());
    for (int o = 0; o < 3; ++o) {
        const std::string p = "head" + std::to_string(o) + ".";
        store.add(p + "w1", {d, d}, Init::XavierUniform);
        store.add(p + "b1", {d}, Init::Zeros);
        store.add(p + "w2", {d, n_horizons}, Init::XavierUniform);
        store.add(p + "b2", {n_horizons}, Init::Zeros);
    }
}

Batch make_batch(std::span<const ingest::PredictionSample* const> samples, const ModelConfig& cfg) {
    if (samples.empty()) throw Error("make_batch: empty batch");
    Batch b;
    b.n = static_cast<long>(samples.size());
    for (const auto* s : samples) {
        if (s->current_status == pheno::BrainStatus::Deceased)
            throw Error("make_batch: sample for admission " + s->admission_id + " has deceased current status");
        if (s->sequence.n_valid < 1)
            throw Error("make_batch: admission " + s->admission_id + " has an empty observation sequence at " +
                        std::to_string(s->prediction_time_h) + " h");
        b.len = std::max(b.len, s->sequence.n_valid);
    }
    b.lengths.resize(b.n);
    b.codes.assign(b.n * b.len, 0);
    b.conv_in = Array::Zero(b.n * b.len * 3);
    b.statics = Array::Zero(b.n * cfg.static_dim);
    b.valid_rowmask = Array::Zero(b.n * b.len);
    for (int slot = 0; slot < 3; ++slot) {
        b.label[slot] = Array::Zero(b.n * 6);
        b.mask[slot] = Array::Zero(b.n * 6);
    }
    for (long i = 0; i < b.n; ++i) {
        const auto& s = *samples[i];
        b.lengths[i] = s.sequence.n_valid;
        for (long j = 0; j < s.sequence.n_valid; ++j) {
            const long row = i * b.len + j;
            b.codes[row] = s.sequence.code[j];
            b.conv_in[row * 3 + 0] = s.sequence.time_h[j] / 720.0;
            b.conv_in[row * 3 + 1] = s.sequence.time_of_day[j] / 24.0;
            b.conv_in[row * 3 + 2] = s.sequence.value[j];
            b.valid_rowmask[row] = 1.0;
            b.valid_rows.push_back(row);
        }
        for (long j = 0; j < cfg.static_dim; ++j) b.statics[i * cfg.static_dim + j] = s.statics[j];
        for (int slot = 0; slot < 3; ++slot)
            for (int h = 0; h < 6; ++h) {
                const auto l = s.labels[slot][h];
                b.label[slot][i * 6 + h] = l == ingest::LabelState::Positive ? 1.0 : 0.0;
                b.mask[slot][i * 6 + h] = l == ingest::LabelState::Censored ? 0.0 : 1.0;
            }
    }
    return b;
}

Var cdf_layer(Tape& t, Var hazard_logits) {
    Var q = sigmoid(t, hazard_logits);
    Var survive = affine(t, q, -1.0, 1.0);      // 1 - q
    Var cum = cumprod(t, survive);              // prod_{j<=k} (1 - q_j)
    return affine(t, cum, -1.0, 1.0);           // 1 - prod
}

namespace {

// Router + experts over the valid-token matrix; returns the MoE output and
// adds this block's load-balance loss (Switch-style: E * sum_e f_e * P_e).
Var moe_feed_forward(Tape& t, TapeParams& P, const ModelConfig& cfg, const std::string& prefix, Var tokens,
                     Var& aux_accum, const std::vector<long>* pinned_experts, std::vector<long>* captured_experts) {
    const long n_tokens = t.rows(tokens);
    Var logits = linear(t, tokens, P[prefix + "router.w"], P[prefix + "router.b"]);
    Var probs = softmax(t, logits, -1);

    std::vector<long> assignment;  // [n_tokens * k] expert ids
    if (pinned_experts) {
        if (static_cast<long>(pinned_experts->size()) != n_tokens * cfg.k_experts)
            throw Error("moe: pinned routing plan does not match the batch");
        assignment = *pinned_experts;
    } else {
        TopK picked = top_k(t, probs, cfg.k_experts);
        assignment = picked.indices;
    }
    if (captured_experts) *captured_experts = assignment;

    // Gather the routed probabilities and renormalize per token.
    std::vector<long> prob_idx(assignment.size());
    for (long tok = 0; tok < n_tokens; ++tok)
        for (long j = 0; j < cfg.k_experts; ++j)
            prob_idx[tok * cfg.k_experts + j] = tok * cfg.n_experts + assignment[tok * cfg.k_experts + j];
    Var picked_mat = reshape(t, gather_elems(t, probs, prob_idx), {n_tokens, cfg.k_experts});
    Var denom = rows_sum(t, picked_mat);
    Var weights = div_rows(t, picked_mat, denom);  // [n_tokens x k]

    // Token lists per expert, in token order.
    std::vector<std::vector<long>> token_of(cfg.n_experts), slot_of(cfg.n_experts);
    for (long tok = 0; tok < n_tokens; ++tok)
        for (long j = 0; j < cfg.k_experts; ++j) {
            const long e = assignment[tok * cfg.k_experts + j];
            token_of[e].push_back(tok);
            slot_of[e].push_back(tok * cfg.k_experts + j);
        }

    Var out{};
    for (long e = 0; e < cfg.n_experts; ++e) {
        if (token_of[e].empty()) continue;
        const std::string q = prefix + "expert" + std::to_string(e) + ".";
        Var xe = rows_gather(t, tokens, token_of[e]);
        Var he = gelu(t, linear(t, xe, P[q + "w1"], P[q + "b1"]));
        Var oe = linear(t, he, P[q + "w2"], P[q + "b2"]);
        Var we = gather_elems(t, weights, slot_of[e]);
        Var scattered = rows_scatter_weighted(t, oe, we, token_of[e], n_tokens);
        out = out.valid() ? add(t, out, scattered) : scattered;
    }

    // f_e: fraction of routed slots landing on e; P_e: mean router probability.
    Array f(cfg.n_experts);
    for (long e = 0; e < cfg.n_experts; ++e)
        f[e] = static_cast<double>(token_of[e].size()) / static_cast<double>(n_tokens * cfg.k_experts);
    Var mean_prob = col_mean(t, probs);
    Var aux = scale(t, dot_const(t, mean_prob, f), static_cast<double>(cfg.n_experts));
    aux_accum = aux_accum.valid() ? add(t, aux_accum, aux) : aux;
    return out;
}

}  // namespace

BranchForward branch_forward(Tape& t, TapeParams& P, const ModelConfig& cfg, const Batch& batch, Var conv_in,
                             Var code_emb, Var statics, const RoutingPlan* pin, RoutingPlan* capture) {
    const long d = cfg.d_model;
    const long total = batch.n * batch.len;
    if (pin && static_cast<long>(pin->expert_of_block.size()) != cfg.n_blocks)
        throw Error("branch_forward: routing plan block count mismatch");
    if (capture) capture->expert_of_block.assign(cfg.n_blocks, {});

    Var conv_out = conv1d(t, conv_in, P["embed.conv.w"], P["embed.conv.b"], batch.n, batch.len, cfg.conv_kernel);
    Var x = add(t, conv_out, code_emb);

    // Positional encoding anchored at the sequence end (as if front-padded):
    // the most recent event always lands on the same position index, so
    // recency has a stable signature regardless of sequence length.
    Array pe_table = sinusoidal_positional_encoding(cfg.l_max, d);
    Array pe = Array::Zero(total * d);
    for (long i = 0; i < batch.n; ++i) {
        const long offset = cfg.l_max - batch.lengths[i];
        for (long j = 0; j < batch.lengths[i]; ++j)
            for (long k = 0; k < d; ++k)
                pe[(i * batch.len + j) * d + k] = pe_table[(offset + j) * d + k];
    }
    x = add_const(t, x, pe);
    x = rows_scale_const(t, x, batch.valid_rowmask);

    Var aux{};
    for (long b = 0; b < cfg.n_blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        Var a = layer_norm(t, x, P[p + "ln1.g"], P[p + "ln1.b"]);
        Var q = linear(t, a, P[p + "attn.wq"], P[p + "attn.bq"]);
        Var k = linear(t, a, P[p + "attn.wk"], P[p + "attn.bk"]);
        Var v = linear(t, a, P[p + "attn.wv"], P[p + "attn.bv"]);
        Var ctx = masked_attention(t, q, k, v, batch.lengths, cfg.n_heads);
        x = add(t, x, linear(t, ctx, P[p + "attn.wo"], P[p + "attn.bo"]));

        Var h = layer_norm(t, x, P[p + "ln2.g"], P[p + "ln2.b"]);
        Var tokens = rows_gather(t, h, batch.valid_rows);
        Var moe = moe_feed_forward(t, P, cfg, p, tokens, aux, pin ? &pin->expert_of_block[b] : nullptr,
                                   capture ? &capture->expert_of_block[b] : nullptr);
        Var moe_full = rows_scatter(t, moe, batch.valid_rows, total);
        x = add(t, x, moe_full);
    }
    if (cfg.n_blocks > 1) aux = scale(t, aux, 1.0 / static_cast<double>(cfg.n_blocks));

    Var pooled{};
    if (pin) {
        pooled = mean_rows_groups(t, x, pin->pool_rows, pin->pool_counts);
    } else {
        Var scores = linear(t, x, P["pool.score.w"], P["pool.score.b"]);
        pooled = topk_mean_pool(t, x, scores, batch.lengths, cfg.k_pool, capture ? &capture->pool_rows : nullptr,
                                capture ? &capture->pool_counts : nullptr);
    }

    Var s1 = gelu(t, linear(t, statics, P["static.w1"], P["static.b1"]));
    Var s2 = linear(t, s1, P["static.w2"], P["static.b2"]);
    Var fused = add(t, pooled, s2);

    BranchForward out;
    out.aux_loss = aux;
    for (int o = 0; o < 3; ++o) {
        const std::string p = "head" + std::to_string(o) + ".";
        Var h1 = gelu(t, linear(t, fused, P[p + "w1"], P[p + "b1"]));
        Var z = linear(t, h1, P[p + "w2"], P[p + "b2"]);
        out.probs[o] = cdf_layer(t, z);
    }
    return out;
}

BranchForward branch_forward(Tape& t, TapeParams& P, const ModelConfig& cfg, const Batch& batch) {
    Var conv_in = t.leaf({batch.n * batch.len, 3}, batch.conv_in);
    Var emb = embedding_lookup(t, batch.codes, P["embed.code"]);
    Var statics = t.leaf({batch.n, cfg.static_dim}, batch.statics);
    return branch_forward(t, P, cfg, batch, conv_in, emb, statics);
}

}  // namespace mandarin::model
