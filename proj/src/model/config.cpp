#include "mandarin/model/config.hpp"

#include <json.hpp>

namespace mandarin::model {

using nlohmann::json;

ModelConfig ModelConfig::desk(long vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.preset = "desk";
    return c;
}

ModelConfig ModelConfig::paper_scale(long vocab_size) {
    ModelConfig c;
    c.d_model = 80;
    c.n_heads = 4;
    c.n_blocks = 2;
    c.n_experts = 8;
    c.k_experts = 2;
    c.expert_hidden = 160;
    c.k_pool = 32;
    c.vocab_size = vocab_size;
    c.preset = "paper-scale";
    return c;
}

ModelConfig ModelConfig::from_preset(const std::string& name, long vocab_size) {
    if (name == "desk") return desk(vocab_size);
    if (name == "paper-scale") return paper_scale(vocab_size == 0 ? 150 : vocab_size);
    throw Error("unknown preset '" + name + "' (expected desk or paper-scale)");
}

void ModelConfig::validate() const {
    if (l_max < 1 || d_model < 2 || n_blocks < 1 || expert_hidden < 1) throw Error("model config: invalid sizes");
    if (d_model % n_heads != 0) throw Error("model config: d_model must be divisible by n_heads");
    if (k_experts < 1 || k_experts > n_experts) throw Error("model config: need 1 <= k_experts <= n_experts");
    if (k_pool < 1 || k_pool > l_max) throw Error("model config: need 1 <= k_pool <= l_max");
    if (vocab_size < 1) throw Error("model config: vocab_size must be positive");
    if (conv_kernel < 1 || conv_kernel % 2 == 0) throw Error("model config: conv_kernel must be odd");
    for (std::size_t i = 1; i < horizons.size(); ++i)
        if (horizons[i] <= horizons[i - 1]) throw Error("model config: horizons must be strictly increasing");
}

std::string ModelConfig::to_json() const {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "model_config";
    j["preset"] = preset;
    j["l_max"] = l_max;
    j["d_model"] = d_model;
    j["conv_kernel"] = conv_kernel;
    j["n_blocks"] = n_blocks;
    j["n_heads"] = n_heads;
    j["n_experts"] = n_experts;
    j["k_experts"] = k_experts;
    j["k_pool"] = k_pool;
    j["expert_hidden"] = expert_hidden;
    j["vocab_size"] = vocab_size;
    j["static_dim"] = static_dim;
    j["horizons"] = horizons;
    j["load_balance_lambda"] = load_balance_lambda;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("schema_version", -1) != kSchemaVersion)
        throw Error("model config artifact schema_version mismatch; re-run `mandarin train`");
    ModelConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.l_max = j.at("l_max").get<long>();
    c.d_model = j.at("d_model").get<long>();
    c.conv_kernel = j.at("conv_kernel").get<long>();
    c.n_blocks = j.at("n_blocks").get<long>();
    c.n_heads = j.at("n_heads").get<long>();
    c.n_experts = j.at("n_experts").get<long>();
    c.k_experts = j.at("k_experts").get<long>();
    c.k_pool = j.at("k_pool").get<long>();
    c.expert_hidden = j.at("expert_hidden").get<long>();
    c.vocab_size = j.at("vocab_size").get<long>();
    c.static_dim = j.at("static_dim").get<long>();
    for (std::size_t i = 0; i < c.horizons.size(); ++i) c.horizons[i] = j.at("horizons")[i].get<int>();
    c.load_balance_lambda = j.at("load_balance_lambda").get<double>();
    c.validate();
    return c;
}

long branch_parameter_count(const ModelConfig& cfg) {
    const long d = cfg.d_model, h = cfg.expert_hidden, e = cfg.n_experts, s = cfg.static_dim;
    const long n_horizons = static_cast<long>(cfg.horizons.size());
    long total = 0;
    total += cfg.conv_kernel * 3 * d + d;       // temporal conv + bias
    total += (cfg.vocab_size + 1) * d;          // code table (row 0 = padding)
    const long per_block = 2 * d               // ln1
                           + 4 * (d * d + d)   // attention projections
                           + 2 * d             // ln2
                           + (d * e + e)       // router
                           + e * (d * h + h + h * d + d);  // experts
    total += cfg.n_blocks * per_block;
    total += d + 1;                             // pooling score projection
    total += s * d + d + d * d + d;             // static embedder
    total += 3 * (d * d + d + d * n_horizons + n_horizons);  // outcome heads
    return total;
}

long parameter_count(const ModelConfig& cfg) { return 3 * branch_parameter_count(cfg); }

}  // namespace mandarin::model
