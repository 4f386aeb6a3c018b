#pragma once

#include <map>
#include <string>
#include <vector>

#include "mandarin/core/tensor.hpp"
#include "mandarin/rng.hpp"

namespace mandarin::core {

enum class Init { Zeros, XavierUniform, Embedding };

struct ParamTensor {
    Dims shape;
    Array value;
    Array grad;
    Array m;  // Adam first moment
    Array v;  // Adam second moment
};

// Named parameter tensors with seeded init, Adam state and a step counter.
// Registration order is part of the seeded state: creating the same parameters
// in the same order from the same seed yields identical values.
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed);

    ParamTensor& add(const std::string& name, const Dims& shape, Init init);
    bool has(const std::string& name) const { return params_.count(name) > 0; }
    ParamTensor& at(const std::string& name);
    const ParamTensor& at(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }

    long total_parameters() const;
    void zero_grads();
    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }
    Rng& rng() { return rng_; }

    // Versioned binary checkpoint: magic, schema version, step counter, RNG
    // state, then name-indexed little-endian float32 arrays (value + moments).
    void save(const std::string& path) const;
    static ParameterStore load(const std::string& path);

    // Adds `other`'s grads into this store (used for worker merge).
    void accumulate_grads(const ParameterStore& other);

private:
    std::vector<std::string> order_;
    std::map<std::string, ParamTensor> params_;
    Rng rng_;
    std::uint64_t step_ = 0;
    std::string rng_state_;  // populated by load() until first rng use

    friend class TapeParams;
};

// Leases parameters from a store into a tape and routes gradients back.
class TapeParams {
public:
    TapeParams(Tape& tape, ParameterStore& store) : tape_(tape), store_(store) {}

    Var operator[](const std::string& name);

    // Accumulates leased-node grads into the store's grad buffers.
    void flush_grads();

private:
    Tape& tape_;
    ParameterStore& store_;
    std::vector<std::pair<std::string, Var>> leased_;
};

struct AdamConfig {
    Scalar lr = 1e-3;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    Scalar clip_norm = 1.0;  // <= 0 disables clipping
};

// One Adam update over all parameters; raises naming the offending parameter
// if any gradient is non-finite. Grads are cleared afterwards.
void adam_step(ParameterStore& store, const AdamConfig& cfg);

// ---- finite differences -------------------------------------------------------

struct FdCoord {
    std::string name;
    long index;
};

struct FdReport {
    Scalar max_rel_err = 0.0;
    long checked = 0;
};

// Central-difference check of reverse-mode gradients. `loss` must evaluate the
// scalar objective from the store's current values; `grad` must populate
// store grads (they are zeroed first). Empty `coords` checks every coordinate
// of every parameter. Relative error is |a-b| / max(1, |a|, |b|).
FdReport finite_difference_check(ParameterStore& store,
                                 const std::function<Scalar()>& loss,
                                 const std::function<void()>& grad,
                                 const std::vector<FdCoord>& coords = {},
                                 Scalar eps = 1e-5);

}  // namespace mandarin::core
