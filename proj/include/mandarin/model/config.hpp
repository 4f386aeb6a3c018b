#pragma once

#include <array>
#include <string>

#include "mandarin/common.hpp"

namespace mandarin::model {

struct ModelConfig {
    long l_max = 256;
    long d_model = 32;
    long conv_kernel = 1;  // width 1 keeps simultaneous events order-insensitive
    long n_blocks = 2;
    long n_heads = 4;
    long n_experts = 4;
    long k_experts = 2;
    long k_pool = 32;
    long expert_hidden = 32;
    long vocab_size = 0;  // retained variables; code table has vocab_size+1 rows
    long static_dim = 12;
    std::array<int, 6> horizons = {12, 24, 36, 48, 60, 72};
    double load_balance_lambda = 0.01;
    std::string preset = "desk";

    static ModelConfig desk(long vocab_size);
    static ModelConfig paper_scale(long vocab_size = 150);
    static ModelConfig from_preset(const std::string& name, long vocab_size);

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Closed-form parameter count over all three branches for this configuration.
long parameter_count(const ModelConfig& cfg);
long branch_parameter_count(const ModelConfig& cfg);

}  // namespace mandarin::model
