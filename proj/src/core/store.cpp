#include "mandarin/core/store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace mandarin::core {

namespace {

constexpr char kMagic[8] = {'M', 'N', 'D', 'R', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw Error("checkpoint: truncated file");
    return v;
}

void write_f32_array(std::ostream& os, const Array& a) {
    for (long i = 0; i < a.size(); ++i) write_pod<float>(os, static_cast<float>(a[i]));
}

Array read_f32_array(std::istream& is, long n) {
    Array a(n);
    for (long i = 0; i < n; ++i) a[i] = static_cast<Scalar>(read_pod<float>(is));
    return a;
}

}  // namespace

ParameterStore::ParameterStore(std::uint64_t seed) : rng_(seed) {}

ParamTensor& ParameterStore::add(const std::string& name, const Dims& shape, Init init) {
    if (params_.count(name)) throw Error("parameter '" + name + "' already registered");
    ParamTensor p;
    p.shape = shape;
    const long n = numel(shape);
    p.value = Array::Zero(n);
    p.grad = Array::Zero(n);
    p.m = Array::Zero(n);
    p.v = Array::Zero(n);
    switch (init) {
        case Init::Zeros:
            break;
        case Init::XavierUniform: {
            const long fan_in = shape.size() >= 2 ? shape[0] : n;
            const long fan_out = shape.size() >= 2 ? shape[1] : n;
            const Scalar limit = std::sqrt(6.0 / static_cast<Scalar>(fan_in + fan_out));
            for (long i = 0; i < n; ++i) p.value[i] = rng_.uniform(-limit, limit);
            break;
        }
        case Init::Embedding:
            for (long i = 0; i < n; ++i) p.value[i] = rng_.normal(0.0, 0.02);
            break;
    }
    order_.push_back(name);
    return params_.emplace(name, std::move(p)).first->second;
}

ParamTensor& ParameterStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
}

const ParamTensor& ParameterStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
}

long ParameterStore::total_parameters() const {
    long total = 0;
    for (const auto& [name, p] : params_) total += p.value.size();
    return total;
}

void ParameterStore::zero_grads() {
    for (auto& [name, p] : params_) p.grad.setZero();
}

void ParameterStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(kSchemaVersion));
    write_pod<std::uint64_t>(os, step_);
    const std::string rng_state = rng_.serialize();
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(rng_state.size()));
    os.write(rng_state.data(), static_cast<std::streamsize>(rng_state.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(order_.size()));
    for (const auto& name : order_) {
        const ParamTensor& p = params_.at(name);
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.shape.size()));
        for (long d : p.shape) write_pod<std::int64_t>(os, d);
        write_f32_array(os, p.value);
        write_f32_array(os, p.m);
        write_f32_array(os, p.v);
    }
    if (!os) throw Error("checkpoint: write to '" + path + "' failed");
}

ParameterStore ParameterStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw Error("checkpoint: '" + path + "' is not a checkpoint file");
    const auto version = read_pod<std::uint32_t>(is);
    if (version != static_cast<std::uint32_t>(kSchemaVersion))
        throw Error("checkpoint: '" + path + "' has schema_version " + std::to_string(version) + ", expected " +
                    std::to_string(kSchemaVersion));
    ParameterStore store(0);
    store.step_ = read_pod<std::uint64_t>(is);
    const auto rng_len = read_pod<std::uint32_t>(is);
    std::string rng_state(rng_len, '\0');
    is.read(rng_state.data(), rng_len);
    store.rng_.deserialize(rng_state);
    const auto n_params = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const auto name_len = read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto ndim = read_pod<std::uint32_t>(is);
        Dims shape(ndim);
        for (auto& d : shape) d = read_pod<std::int64_t>(is);
        const long n = numel(shape);
        ParamTensor p;
        p.shape = shape;
        p.value = read_f32_array(is, n);
        p.m = read_f32_array(is, n);
        p.v = read_f32_array(is, n);
        p.grad = Array::Zero(n);
        store.order_.push_back(name);
        store.params_.emplace(name, std::move(p));
    }
    return store;
}

void ParameterStore::accumulate_grads(const ParameterStore& other) {
    for (const auto& name : order_) {
        const auto it = other.params_.find(name);
        if (it == other.params_.end()) continue;
        at(name).grad += it->second.grad;
    }
}

Var TapeParams::operator[](const std::string& name) {
    for (const auto& [n, v] : leased_)
        if (n == name) return v;
    ParamTensor& p = store_.at(name);
    Var v = tape_.leaf(p.shape, p.value, true);
    leased_.emplace_back(name, v);
    return v;
}

void TapeParams::flush_grads() {
    for (const auto& [name, v] : leased_) {
        const Array& g = tape_.grad(v);
        if (g.size()) store_.at(name).grad += g;
    }
}

void adam_step(ParameterStore& store, const AdamConfig& cfg) {
    for (const auto& name : store.names()) {
        const ParamTensor& p = store.at(name);
        if (!p.grad.isFinite().all()) throw Error("adam_step: non-finite gradient in parameter '" + name + "'");
    }
    Scalar sq_norm = 0;
    for (const auto& name : store.names()) sq_norm += store.at(name).grad.square().sum();
    const Scalar norm = std::sqrt(sq_norm);
    Scalar gscale = 1.0;
    if (cfg.clip_norm > 0 && norm > cfg.clip_norm) gscale = cfg.clip_norm / norm;

    store.set_step(store.step() + 1);
    const auto t = static_cast<Scalar>(store.step());
    const Scalar bc1 = 1.0 - std::pow(cfg.beta1, t);
    const Scalar bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (const auto& name : store.names()) {
        ParamTensor& p = store.at(name);
        const Array g = p.grad * gscale;
        p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * g;
        p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * g.square();
        p.value -= cfg.lr * (p.m / bc1) / ((p.v / bc2).sqrt() + cfg.eps);
        p.grad.setZero();
    }
}

FdReport finite_difference_check(ParameterStore& store,
                                 const std::function<Scalar()>& loss,
                                 const std::function<void()>& grad,
                                 const std::vector<FdCoord>& coords,
                                 Scalar eps) {
    std::vector<FdCoord> todo = coords;
    if (todo.empty()) {
        for (const auto& name : store.names()) {
            const long n = store.at(name).value.size();
            for (long i = 0; i < n; ++i) todo.push_back({name, i});
        }
    }
    FdReport report;
    if (todo.empty()) return report;

    store.zero_grads();
    grad();
    std::map<std::string, Array> saved;
    for (const auto& name : store.names()) saved[name] = store.at(name).grad;
    store.zero_grads();

    for (const auto& c : todo) {
        ParamTensor& p = store.at(c.name);
        const Scalar orig = p.value[c.index];
        p.value[c.index] = orig + eps;
        const Scalar up = loss();
        p.value[c.index] = orig - eps;
        const Scalar down = loss();
        p.value[c.index] = orig;
        const Scalar fd = (up - down) / (2.0 * eps);
        const Scalar an = saved.at(c.name)[c.index];
        const Scalar rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
        report.max_rel_err = std::max(report.max_rel_err, rel);
        ++report.checked;
    }
    return report;
}

}  // namespace mandarin::core
