#include "mandarin/core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
namespace {
// Tape buffers are large and short-lived; keeping them on the heap instead of
// per-allocation mmaps avoids page-fault churn in the training loop.
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    }
} malloc_tuning;
}  // namespace
#endif

namespace mandarin::core {

long numel(const Dims& dims) {
    long n = 1;
    for (long d : dims) n *= d;
    return n;
}

std::string dims_to_string(const Dims& dims) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << "x";
        os << dims[i];
    }
    os << "]";
    return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const Dims& a, const Dims& b) {
    throw Error(std::string(op) + ": incompatible shapes " + dims_to_string(a) + " and " + dims_to_string(b));
}

long last_dim(const Dims& d) { return d.empty() ? 1 : d.back(); }

Dims with_last(const Dims& d, long c) {
    Dims out = d;
    if (out.empty()) out.push_back(c);
    else out.back() = c;
    return out;
}

}  // namespace

// ---- Tape ----------------------------------------------------------------------

Var Tape::leaf(const Dims& shape, Array data, bool requires_grad) {
    if (data.size() != numel(shape))
        throw Error("leaf: data size " + std::to_string(data.size()) + " does not match shape " + dims_to_string(shape));
    return emplace(shape, std::move(data), requires_grad && grad_enabled_);
}

Var Tape::scalar(Scalar v) {
    Array a(1);
    a[0] = v;
    return leaf({1}, std::move(a), false);
}

Tape::Node& Tape::node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw Error("invalid tape handle");
    return *nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw Error("invalid tape handle");
    return *nodes_[v.id];
}

const Array& Tape::grad(Var v) const {
    static const Array empty;
    const Node& n = node(v);
    return n.grad.size() ? n.grad : empty;
}

long Tape::rows(Var v) const {
    const Dims& d = node(v).shape;
    long r = 1;
    for (std::size_t i = 0; i + 1 < d.size(); ++i) r *= d[i];
    return r;
}

long Tape::cols(Var v) const { return last_dim(node(v).shape); }

Var Tape::emplace(Dims shape, Array value, bool requires_grad) {
    auto n = std::make_unique<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::set_backward(Var v, std::function<void()> fn) { node(v).backward = std::move(fn); }

Array& Tape::grad_buffer(Var v) {
    Node& n = node(v);
    if (!n.grad.size()) n.grad = Array::Zero(n.value.size());
    return n.grad;
}

void Tape::backward(Var root) {
    Node& r = node(root);
    if (r.value.size() != 1) throw Error("backward: root must be scalar, got " + dims_to_string(r.shape));
    grad_buffer(root)[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
        Node& n = *nodes_[i];
        if (n.backward && n.grad.size()) n.backward();
    }
}

// ---- helpers for op bodies -------------------------------------------------------

namespace {

struct Binary {
    Tape& t;
    Var a, b, out;
};

bool wants_grad(Tape& t, std::initializer_list<Var> ins) {
    if (!t.grad_enabled()) return false;
    for (Var v : ins)
        if (v.valid() && t.node(v).requires_grad) return true;
    return false;
}

}  // namespace

// ---- elementwise ------------------------------------------------------------------

Var add(Tape& t, Var a, Var b) {
    const auto& na = t.node(a);
    const auto& nb = t.node(b);
    if (na.value.size() != nb.value.size()) shape_error("add", na.shape, nb.shape);
    Var out = t.emplace(na.shape, na.value + nb.value, wants_grad(t, {a, b}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, b, out] {
            const Array& g = t.node(out).grad;
            if (t.node(a).requires_grad) t.grad_buffer(a) += g;
            if (t.node(b).requires_grad) t.grad_buffer(b) += g;
        });
    return out;
}

Var sub(Tape& t, Var a, Var b) {
    const auto& na = t.node(a);
    const auto& nb = t.node(b);
    if (na.value.size() != nb.value.size()) shape_error("sub", na.shape, nb.shape);
    Var out = t.emplace(na.shape, na.value - nb.value, wants_grad(t, {a, b}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, b, out] {
            const Array& g = t.node(out).grad;
            if (t.node(a).requires_grad) t.grad_buffer(a) += g;
            if (t.node(b).requires_grad) t.grad_buffer(b) -= g;
        });
    return out;
}

Var mul(Tape& t, Var a, Var b) {
    const auto& na = t.node(a);
    const auto& nb = t.node(b);
    if (na.value.size() != nb.value.size()) shape_error("mul", na.shape, nb.shape);
    Var out = t.emplace(na.shape, na.value * nb.value, wants_grad(t, {a, b}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, b, out] {
            const Array& g = t.node(out).grad;
            if (t.node(a).requires_grad) t.grad_buffer(a) += g * t.node(b).value;
            if (t.node(b).requires_grad) t.grad_buffer(b) += g * t.node(a).value;
        });
    return out;
}

Var affine(Tape& t, Var a, Scalar k, Scalar c) {
    const auto& na = t.node(a);
    Var out = t.emplace(na.shape, k * na.value + c, wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out, k] { t.grad_buffer(a) += k * t.node(out).grad; });
    return out;
}

Var relu(Tape& t, Var a) {
    const auto& na = t.node(a);
    Var out = t.emplace(na.shape, na.value.max(0.0), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out] {
            t.grad_buffer(a) += t.node(out).grad * (t.node(a).value > 0.0).cast<Scalar>();
        });
    return out;
}

Var gelu(Tape& t, Var a) {
    static const Scalar inv_sqrt2 = 0.7071067811865475244;
    static const Scalar inv_sqrt2pi = 0.3989422804014326779;
    const Array& x = t.node(a).value;
    Array y(x.size());
    for (long i = 0; i < x.size(); ++i) y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
    Var out = t.emplace(t.node(a).shape, std::move(y), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out] {
            const Array& x2 = t.node(a).value;
            const Array& g = t.node(out).grad;
            Array d(x2.size());
            for (long i = 0; i < x2.size(); ++i) {
                const Scalar cdf = 0.5 * (1.0 + std::erf(x2[i] * inv_sqrt2));
                d[i] = cdf + x2[i] * inv_sqrt2pi * std::exp(-0.5 * x2[i] * x2[i]);
            }
            t.grad_buffer(a) += g * d;
        });
    return out;
}

Var sigmoid(Tape& t, Var a) {
    const Array& x = t.node(a).value;
    Array y = 1.0 / (1.0 + (-x).exp());
    Var out = t.emplace(t.node(a).shape, std::move(y), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out] {
            const Array& s = t.node(out).value;
            t.grad_buffer(a) += t.node(out).grad * s * (1.0 - s);
        });
    return out;
}

Var mean_all(Tape& t, Var a) {
    const auto& na = t.node(a);
    Array y(1);
    y[0] = na.value.mean();
    Var out = t.emplace({1}, std::move(y), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out] {
            const Scalar g = t.node(out).grad[0] / static_cast<Scalar>(t.node(a).value.size());
            t.grad_buffer(a) += g;
        });
    return out;
}

Var sum_all(Tape& t, Var a) {
    const auto& na = t.node(a);
    Array y(1);
    y[0] = na.value.sum();
    Var out = t.emplace({1}, std::move(y), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out] { t.grad_buffer(a) += t.node(out).grad[0]; });
    return out;
}

Var pick(Tape& t, Var a, long index) {
    const auto& na = t.node(a);
    if (index < 0 || index >= na.value.size())
        throw Error("pick: index " + std::to_string(index) + " out of range for " + dims_to_string(na.shape));
    Array y(1);
    y[0] = na.value[index];
    Var out = t.emplace({1}, std::move(y), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out, index] { t.grad_buffer(a)[index] += t.node(out).grad[0]; });
    return out;
}

Var reshape(Tape& t, Var a, const Dims& shape) {
    Tape::Node& n = t.node(a);
    if (numel(shape) != n.value.size()) shape_error("reshape", n.shape, shape);
    n.shape = shape;
    return a;
}

Var softmax(Tape& t, Var a, int axis) {
    const auto& na = t.node(a);
    const int nd = static_cast<int>(na.shape.size());
    int ax = axis < 0 ? nd + axis : axis;
    if (ax < 0 || ax >= nd) throw Error("softmax: axis " + std::to_string(axis) + " invalid for " + dims_to_string(na.shape));
    long outer = 1, inner = 1;
    const long len = na.shape[ax];
    for (int i = 0; i < ax; ++i) outer *= na.shape[i];
    for (int i = ax + 1; i < nd; ++i) inner *= na.shape[i];

    Array y(na.value.size());
    for (long o = 0; o < outer; ++o) {
        for (long i = 0; i < inner; ++i) {
            const long base = o * len * inner + i;
            Scalar mx = -std::numeric_limits<Scalar>::infinity();
            for (long j = 0; j < len; ++j) mx = std::max(mx, na.value[base + j * inner]);
            Scalar z = 0;
            for (long j = 0; j < len; ++j) {
                const Scalar e = std::exp(na.value[base + j * inner] - mx);
                y[base + j * inner] = e;
                z += e;
            }
            for (long j = 0; j < len; ++j) y[base + j * inner] /= z;
        }
    }
    Var out = t.emplace(na.shape, std::move(y), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out, outer, inner, len] {
            const Array& p = t.node(out).value;
            const Array& g = t.node(out).grad;
            Array& da = t.grad_buffer(a);
            for (long o = 0; o < outer; ++o) {
                for (long i = 0; i < inner; ++i) {
                    const long base = o * len * inner + i;
                    Scalar dot = 0;
                    for (long j = 0; j < len; ++j) dot += g[base + j * inner] * p[base + j * inner];
                    for (long j = 0; j < len; ++j) {
                        const long k = base + j * inner;
                        da[k] += p[k] * (g[k] - dot);
                    }
                }
            }
        });
    return out;
}

Var cumprod(Tape& t, Var a) {
    const auto& na = t.node(a);
    const long c = last_dim(na.shape);
    const long r = na.value.size() / c;
    Array y(na.value.size());
    for (long i = 0; i < r; ++i) {
        Scalar acc = 1.0;
        for (long j = 0; j < c; ++j) {
            acc *= na.value[i * c + j];
            y[i * c + j] = acc;
        }
    }
    Var out = t.emplace(na.shape, std::move(y), wants_grad(t, {a}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, out, r, c] {
            const Array& v = t.node(a).value;
            const Array& cum = t.node(out).value;
            const Array& g = t.node(out).grad;
            Array& da = t.grad_buffer(a);
            // c_j = c_{j-1} * v_j; sweep each row right-to-left carrying dL/dc_j.
            for (long i = 0; i < r; ++i) {
                Scalar carry = 0.0;
                for (long j = c - 1; j >= 0; --j) {
                    const Scalar total = g[i * c + j] + carry;
                    const Scalar prev = j > 0 ? cum[i * c + j - 1] : 1.0;
                    da[i * c + j] += total * prev;
                    carry = total * v[i * c + j];
                }
            }
        });
    return out;
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, Scalar eps) {
    const auto& nx = t.node(x);
    const long c = last_dim(nx.shape);
    const long r = nx.value.size() / c;
    if (t.node(gain).value.size() != c) shape_error("layer_norm(gain)", nx.shape, t.node(gain).shape);
    if (t.node(bias).value.size() != c) shape_error("layer_norm(bias)", nx.shape, t.node(bias).shape);

    Array xhat(nx.value.size()), inv_sd(r);
    for (long i = 0; i < r; ++i) {
        Scalar mu = 0;
        for (long j = 0; j < c; ++j) mu += nx.value[i * c + j];
        mu /= c;
        Scalar var = 0;
        for (long j = 0; j < c; ++j) {
            const Scalar d = nx.value[i * c + j] - mu;
            var += d * d;
        }
        var /= c;
        const Scalar is = 1.0 / std::sqrt(var + eps);
        inv_sd[i] = is;
        for (long j = 0; j < c; ++j) xhat[i * c + j] = (nx.value[i * c + j] - mu) * is;
    }
    Array y(nx.value.size());
    const Array& gv = t.node(gain).value;
    const Array& bv = t.node(bias).value;
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) y[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];

    Var out = t.emplace(nx.shape, std::move(y), wants_grad(t, {x, gain, bias}));
    if (t.node(out).requires_grad) {
        auto xh = std::make_shared<Array>(std::move(xhat));
        auto isd = std::make_shared<Array>(std::move(inv_sd));
        t.set_backward(out, [&t, x, gain, bias, out, xh, isd, r, c] {
            const Array& g = t.node(out).grad;
            const Array& gv2 = t.node(gain).value;
            if (t.node(gain).requires_grad) {
                Array& dg = t.grad_buffer(gain);
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) dg[j] += g[i * c + j] * (*xh)[i * c + j];
            }
            if (t.node(bias).requires_grad) {
                Array& db = t.grad_buffer(bias);
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) db[j] += g[i * c + j];
            }
            if (t.node(x).requires_grad) {
                Array& dx = t.grad_buffer(x);
                for (long i = 0; i < r; ++i) {
                    Scalar m1 = 0, m2 = 0;
                    for (long j = 0; j < c; ++j) {
                        const Scalar dxh = g[i * c + j] * gv2[j];
                        m1 += dxh;
                        m2 += dxh * (*xh)[i * c + j];
                    }
                    m1 /= c;
                    m2 /= c;
                    for (long j = 0; j < c; ++j) {
                        const Scalar dxh = g[i * c + j] * gv2[j];
                        dx[i * c + j] += (dxh - m1 - (*xh)[i * c + j] * m2) * (*isd)[i];
                    }
                }
            }
        });
    }
    return out;
}

// ---- linear algebra -----------------------------------------------------------

Var linear(Tape& t, Var x, Var w, Var b) {
    const auto& nx = t.node(x);
    const auto& nw = t.node(w);
    const long in = last_dim(nx.shape);
    const long r = nx.value.size() / in;
    if (nw.shape.size() != 2 || nw.shape[0] != in) shape_error("linear", nx.shape, nw.shape);
    const long out_dim = nw.shape[1];
    if (b.valid() && t.node(b).value.size() != out_dim) shape_error("linear(bias)", nw.shape, t.node(b).shape);

    Array y(r * out_dim);
    {
        ConstMatrixMap X(nx.value.data(), r, in);
        ConstMatrixMap W(nw.value.data(), in, out_dim);
        MatrixMap Y(y.data(), r, out_dim);
        Y.noalias() = X * W;
        if (b.valid()) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(t.node(b).value.data(), out_dim);
    }
    Var out = t.emplace(with_last(nx.shape, out_dim), std::move(y), wants_grad(t, {x, w, b}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, x, w, b, out, r, in, out_dim] {
            ConstMatrixMap G(t.node(out).grad.data(), r, out_dim);
            if (t.node(x).requires_grad) {
                ConstMatrixMap W(t.node(w).value.data(), in, out_dim);
                MatrixMap DX(t.grad_buffer(x).data(), r, in);
                DX.noalias() += G * W.transpose();
            }
            if (t.node(w).requires_grad) {
                ConstMatrixMap X(t.node(x).value.data(), r, in);
                MatrixMap DW(t.grad_buffer(w).data(), in, out_dim);
                DW.noalias() += X.transpose() * G;
            }
            if (b.valid() && t.node(b).requires_grad) {
                Eigen::Map<Eigen::RowVectorXd> DB(t.grad_buffer(b).data(), out_dim);
                DB += G.colwise().sum();
            }
        });
    return out;
}

Var matmul(Tape& t, Var a, Var b) {
    const auto& na = t.node(a);
    const auto& nb = t.node(b);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0])
        shape_error("matmul", na.shape, nb.shape);
    const long m = na.shape[0], k = na.shape[1], n = nb.shape[1];
    Array y(m * n);
    {
        ConstMatrixMap A(na.value.data(), m, k);
        ConstMatrixMap B(nb.value.data(), k, n);
        MatrixMap Y(y.data(), m, n);
        Y.noalias() = A * B;
    }
    Var out = t.emplace({m, n}, std::move(y), wants_grad(t, {a, b}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, a, b, out, m, k, n] {
            ConstMatrixMap G(t.node(out).grad.data(), m, n);
            if (t.node(a).requires_grad) {
                ConstMatrixMap B(t.node(b).value.data(), k, n);
                MatrixMap DA(t.grad_buffer(a).data(), m, k);
                DA.noalias() += G * B.transpose();
            }
            if (t.node(b).requires_grad) {
                ConstMatrixMap A(t.node(a).value.data(), m, k);
                MatrixMap DB(t.grad_buffer(b).data(), k, n);
                DB.noalias() += A.transpose() * G;
            }
        });
    return out;
}

Var conv1d(Tape& t, Var x, Var kernels, Var bias, long n_samples, long seq_len, long kernel_size) {
    const auto& nx = t.node(x);
    const auto& nk = t.node(kernels);
    const long cin = last_dim(nx.shape);
    if (nx.value.size() != n_samples * seq_len * cin)
        throw Error("conv1d: input " + dims_to_string(nx.shape) + " does not cover " + std::to_string(n_samples) + "x" +
                    std::to_string(seq_len) + " positions");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw Error("conv1d: kernel size must be odd, got " + std::to_string(kernel_size));
    if (nk.shape.size() != 2 || nk.shape[0] != kernel_size * cin) shape_error("conv1d", nx.shape, nk.shape);
    const long cout = nk.shape[1];
    if (bias.valid() && t.node(bias).value.size() != cout) shape_error("conv1d(bias)", nk.shape, t.node(bias).shape);
    const long pad = (kernel_size - 1) / 2;

    Array y = Array::Zero(n_samples * seq_len * cout);
    {
        ConstMatrixMap X(nx.value.data(), n_samples * seq_len, cin);
        ConstMatrixMap K(nk.value.data(), kernel_size * cin, cout);
        MatrixMap Y(y.data(), n_samples * seq_len, cout);
        for (long u = 0; u < kernel_size; ++u) {
            const long rel = u - pad;
            const long start = std::max<long>(0, -rel);
            const long count = seq_len - std::abs(rel);
            if (count <= 0) continue;
            auto Ku = K.middleRows(u * cin, cin);
            for (long n = 0; n < n_samples; ++n) {
                Y.middleRows(n * seq_len + start, count).noalias() +=
                    X.middleRows(n * seq_len + start + rel, count) * Ku;
            }
        }
        if (bias.valid()) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(t.node(bias).value.data(), cout);
    }
    Var out = t.emplace({n_samples * seq_len, cout}, std::move(y), wants_grad(t, {x, kernels, bias}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, x, kernels, bias, out, n_samples, seq_len, kernel_size, cin, cout, pad] {
            ConstMatrixMap G(t.node(out).grad.data(), n_samples * seq_len, cout);
            for (long u = 0; u < kernel_size; ++u) {
                const long rel = u - pad;
                const long start = std::max<long>(0, -rel);
                const long count = seq_len - std::abs(rel);
                if (count <= 0) continue;
                if (t.node(x).requires_grad) {
                    ConstMatrixMap K(t.node(kernels).value.data(), kernel_size * cin, cout);
                    MatrixMap DX(t.grad_buffer(x).data(), n_samples * seq_len, cin);
                    auto Ku = K.middleRows(u * cin, cin);
                    for (long n = 0; n < n_samples; ++n)
                        DX.middleRows(n * seq_len + start + rel, count).noalias() +=
                            G.middleRows(n * seq_len + start, count) * Ku.transpose();
                }
                if (t.node(kernels).requires_grad) {
                    ConstMatrixMap X(t.node(x).value.data(), n_samples * seq_len, cin);
                    MatrixMap DK(t.grad_buffer(kernels).data(), kernel_size * cin, cout);
                    auto DKu = DK.middleRows(u * cin, cin);
                    for (long n = 0; n < n_samples; ++n)
                        DKu.noalias() += X.middleRows(n * seq_len + start + rel, count).transpose() *
                                         G.middleRows(n * seq_len + start, count);
                }
            }
            if (bias.valid() && t.node(bias).requires_grad) {
                Eigen::Map<Eigen::RowVectorXd> DB(t.grad_buffer(bias).data(), cout);
                DB += G.colwise().sum();
            }
        });
    return out;
}

Var embedding_lookup(Tape& t, const std::vector<int>& codes, Var table) {
    const auto& nt = t.node(table);
    if (nt.shape.size() != 2) throw Error("embedding_lookup: table must be 2-D, got " + dims_to_string(nt.shape));
    const long v = nt.shape[0], d = nt.shape[1];
    for (int c : codes)
        if (c < 0 || c >= v)
            throw Error("embedding_lookup: code " + std::to_string(c) + " out of range for table " + dims_to_string(nt.shape));
    const long r = static_cast<long>(codes.size());
    Array y(r * d);
    {
        ConstMatrixMap T(nt.value.data(), v, d);
        MatrixMap Y(y.data(), r, d);
        for (long i = 0; i < r; ++i) Y.row(i) = T.row(codes[i]);
    }
    Var out = t.emplace({r, d}, std::move(y), wants_grad(t, {table}));
    if (t.node(out).requires_grad) {
        auto idx = std::make_shared<std::vector<int>>(codes);
        t.set_backward(out, [&t, table, out, idx, r, d] {
            ConstMatrixMap G(t.node(out).grad.data(), r, d);
            MatrixMap DT(t.grad_buffer(table).data(), t.node(table).shape[0], d);
            for (long i = 0; i < r; ++i) DT.row((*idx)[i]) += G.row(i);
        });
    }
    return out;
}

// ---- gather / scatter ------------------------------------------------------------

Var rows_gather(Tape& t, Var x, const std::vector<long>& idx) {
    const auto& nx = t.node(x);
    const long c = last_dim(nx.shape);
    const long r = nx.value.size() / c;
    for (long i : idx)
        if (i < 0 || i >= r) throw Error("rows_gather: row " + std::to_string(i) + " out of range");
    const long m = static_cast<long>(idx.size());
    Array y(m * c);
    {
        ConstMatrixMap X(nx.value.data(), r, c);
        MatrixMap Y(y.data(), m, c);
        for (long i = 0; i < m; ++i) Y.row(i) = X.row(idx[i]);
    }
    Var out = t.emplace({m, c}, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad) {
        auto ids = std::make_shared<std::vector<long>>(idx);
        t.set_backward(out, [&t, x, out, ids, m, c, r] {
            ConstMatrixMap G(t.node(out).grad.data(), m, c);
            MatrixMap DX(t.grad_buffer(x).data(), r, c);
            for (long i = 0; i < m; ++i) DX.row((*ids)[i]) += G.row(i);
        });
    }
    return out;
}

Var rows_scatter(Tape& t, Var src, const std::vector<long>& idx, long n_rows) {
    const auto& ns = t.node(src);
    const long c = last_dim(ns.shape);
    const long m = ns.value.size() / c;
    if (m != static_cast<long>(idx.size())) throw Error("rows_scatter: index count mismatch");
    Array y = Array::Zero(n_rows * c);
    {
        ConstMatrixMap S(ns.value.data(), m, c);
        MatrixMap Y(y.data(), n_rows, c);
        for (long i = 0; i < m; ++i) Y.row(idx[i]) += S.row(i);
    }
    Var out = t.emplace({n_rows, c}, std::move(y), wants_grad(t, {src}));
    if (t.node(out).requires_grad) {
        auto ids = std::make_shared<std::vector<long>>(idx);
        t.set_backward(out, [&t, src, out, ids, m, c, n_rows] {
            ConstMatrixMap G(t.node(out).grad.data(), n_rows, c);
            MatrixMap DS(t.grad_buffer(src).data(), m, c);
            for (long i = 0; i < m; ++i) DS.row(i) += G.row((*ids)[i]);
        });
    }
    return out;
}

Var rows_scatter_weighted(Tape& t, Var src, Var w, const std::vector<long>& idx, long n_rows) {
    const auto& ns = t.node(src);
    const long c = last_dim(ns.shape);
    const long m = ns.value.size() / c;
    if (m != static_cast<long>(idx.size())) throw Error("rows_scatter_weighted: index count mismatch");
    if (t.node(w).value.size() != m) shape_error("rows_scatter_weighted", ns.shape, t.node(w).shape);
    Array y = Array::Zero(n_rows * c);
    {
        ConstMatrixMap S(ns.value.data(), m, c);
        const Array& wv = t.node(w).value;
        MatrixMap Y(y.data(), n_rows, c);
        for (long i = 0; i < m; ++i) Y.row(idx[i]) += wv[i] * S.row(i);
    }
    Var out = t.emplace({n_rows, c}, std::move(y), wants_grad(t, {src, w}));
    if (t.node(out).requires_grad) {
        auto ids = std::make_shared<std::vector<long>>(idx);
        t.set_backward(out, [&t, src, w, out, ids, m, c, n_rows] {
            ConstMatrixMap G(t.node(out).grad.data(), n_rows, c);
            const Array& wv = t.node(w).value;
            ConstMatrixMap S(t.node(src).value.data(), m, c);
            if (t.node(src).requires_grad) {
                MatrixMap DS(t.grad_buffer(src).data(), m, c);
                for (long i = 0; i < m; ++i) DS.row(i) += wv[i] * G.row((*ids)[i]);
            }
            if (t.node(w).requires_grad) {
                Array& dw = t.grad_buffer(w);
                for (long i = 0; i < m; ++i) dw[i] += S.row(i).dot(G.row((*ids)[i]));
            }
        });
    }
    return out;
}

Var gather_elems(Tape& t, Var x, const std::vector<long>& flat_idx) {
    const auto& nx = t.node(x);
    for (long i : flat_idx)
        if (i < 0 || i >= nx.value.size()) throw Error("gather_elems: index out of range");
    const long m = static_cast<long>(flat_idx.size());
    Array y(m);
    for (long i = 0; i < m; ++i) y[i] = nx.value[flat_idx[i]];
    Var out = t.emplace({m}, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad) {
        auto ids = std::make_shared<std::vector<long>>(flat_idx);
        t.set_backward(out, [&t, x, out, ids, m] {
            const Array& g = t.node(out).grad;
            Array& dx = t.grad_buffer(x);
            for (long i = 0; i < m; ++i) dx[(*ids)[i]] += g[i];
        });
    }
    return out;
}

Var rows_sum(Tape& t, Var x) {
    const auto& nx = t.node(x);
    const long c = last_dim(nx.shape);
    const long r = nx.value.size() / c;
    Array y(r);
    ConstMatrixMap X(nx.value.data(), r, c);
    for (long i = 0; i < r; ++i) y[i] = X.row(i).sum();
    Var out = t.emplace({r}, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, x, out, r, c] {
            const Array& g = t.node(out).grad;
            MatrixMap DX(t.grad_buffer(x).data(), r, c);
            for (long i = 0; i < r; ++i) DX.row(i).array() += g[i];
        });
    return out;
}

Var col_mean(Tape& t, Var x) {
    const auto& nx = t.node(x);
    const long c = last_dim(nx.shape);
    const long r = nx.value.size() / c;
    if (r == 0) throw Error("col_mean: empty input");
    Array y(c);
    ConstMatrixMap X(nx.value.data(), r, c);
    Eigen::Map<Eigen::RowVectorXd>(y.data(), c) = X.colwise().mean();
    Var out = t.emplace({c}, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, x, out, r, c] {
            const Array& g = t.node(out).grad;
            MatrixMap DX(t.grad_buffer(x).data(), r, c);
            for (long i = 0; i < r; ++i)
                DX.row(i) += Eigen::Map<const Eigen::RowVectorXd>(g.data(), c) / static_cast<Scalar>(r);
        });
    return out;
}

Var div_rows(Tape& t, Var x, Var d) {
    const auto& nx = t.node(x);
    const long c = last_dim(nx.shape);
    const long r = nx.value.size() / c;
    if (t.node(d).value.size() != r) shape_error("div_rows", nx.shape, t.node(d).shape);
    Array y(nx.value.size());
    const Array& dv = t.node(d).value;
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) y[i * c + j] = nx.value[i * c + j] / dv[i];
    Var out = t.emplace(nx.shape, std::move(y), wants_grad(t, {x, d}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, x, d, out, r, c] {
            const Array& g = t.node(out).grad;
            const Array& dv2 = t.node(d).value;
            const Array& yv = t.node(out).value;
            if (t.node(x).requires_grad) {
                Array& dx = t.grad_buffer(x);
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) dx[i * c + j] += g[i * c + j] / dv2[i];
            }
            if (t.node(d).requires_grad) {
                Array& dd = t.grad_buffer(d);
                for (long i = 0; i < r; ++i) {
                    Scalar acc = 0;
                    for (long j = 0; j < c; ++j) acc += g[i * c + j] * yv[i * c + j];
                    dd[i] -= acc / dv2[i];
                }
            }
        });
    return out;
}

Var dot_const(Tape& t, Var x, const Array& c) {
    const auto& nx = t.node(x);
    if (nx.value.size() != c.size()) throw Error("dot_const: size mismatch");
    Array y(1);
    y[0] = (nx.value * c).sum();
    Var out = t.emplace({1}, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad) {
        auto cc = std::make_shared<Array>(c);
        t.set_backward(out, [&t, x, out, cc] { t.grad_buffer(x) += t.node(out).grad[0] * (*cc); });
    }
    return out;
}

Var rows_scale_const(Tape& t, Var x, const Array& per_row) {
    const auto& nx = t.node(x);
    const long c = last_dim(nx.shape);
    const long r = nx.value.size() / c;
    if (per_row.size() != r) throw Error("rows_scale_const: size mismatch");
    Array y(nx.value.size());
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) y[i * c + j] = nx.value[i * c + j] * per_row[i];
    Var out = t.emplace(nx.shape, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad) {
        auto m = std::make_shared<Array>(per_row);
        t.set_backward(out, [&t, x, out, m, r, c] {
            const Array& g = t.node(out).grad;
            Array& dx = t.grad_buffer(x);
            for (long i = 0; i < r; ++i)
                for (long j = 0; j < c; ++j) dx[i * c + j] += g[i * c + j] * (*m)[i];
        });
    }
    return out;
}

Var mul_const(Tape& t, Var x, const Array& elementwise) {
    const auto& nx = t.node(x);
    if (nx.value.size() != elementwise.size()) throw Error("mul_const: size mismatch");
    Var out = t.emplace(nx.shape, nx.value * elementwise, wants_grad(t, {x}));
    if (t.node(out).requires_grad) {
        auto m = std::make_shared<Array>(elementwise);
        t.set_backward(out, [&t, x, out, m] { t.grad_buffer(x) += t.node(out).grad * (*m); });
    }
    return out;
}

Var add_const(Tape& t, Var x, const Array& elementwise) {
    const auto& nx = t.node(x);
    if (nx.value.size() != elementwise.size()) throw Error("add_const: size mismatch");
    Var out = t.emplace(nx.shape, nx.value + elementwise, wants_grad(t, {x}));
    if (t.node(out).requires_grad)
        t.set_backward(out, [&t, x, out] { t.grad_buffer(x) += t.node(out).grad; });
    return out;
}

// ---- top-k ------------------------------------------------------------------------

TopK top_k(Tape& t, Var x, long k) {
    const auto& nx = t.node(x);
    const long c = last_dim(nx.shape);
    const long r = nx.value.size() / c;
    if (k < 1 || k > c) throw Error("top_k: k=" + std::to_string(k) + " invalid for " + dims_to_string(nx.shape));

    std::vector<long> indices(r * k);
    Array y(r * k);
    std::vector<long> order(c);
    for (long i = 0; i < r; ++i) {
        std::iota(order.begin(), order.end(), 0l);
        const Scalar* row = nx.value.data() + i * c;
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [row](long a, long b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;  // ties -> lowest index
        });
        for (long j = 0; j < k; ++j) {
            indices[i * k + j] = order[j];
            y[i * k + j] = row[order[j]];
        }
    }
    Var out = t.emplace({r, k}, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad) {
        auto ids = std::make_shared<std::vector<long>>(indices);
        t.set_backward(out, [&t, x, out, ids, r, c, k] {
            const Array& g = t.node(out).grad;
            Array& dx = t.grad_buffer(x);
            for (long i = 0; i < r; ++i)
                for (long j = 0; j < k; ++j) dx[i * c + (*ids)[i * k + j]] += g[i * k + j];
        });
    }
    return TopK{out, std::move(indices)};
}

// ---- fused sequence ops --------------------------------------------------------------

Var masked_attention(Tape& t, Var q, Var k, Var v, const std::vector<long>& lengths, long n_heads) {
    const auto& nq = t.node(q);
    const long d = last_dim(nq.shape);
    if (d % n_heads != 0) throw Error("masked_attention: dim " + std::to_string(d) + " not divisible by heads");
    const long n = static_cast<long>(lengths.size());
    const long total = nq.value.size() / d;
    if (total % n != 0) throw Error("masked_attention: rows not divisible by sample count");
    const long L = total / n;
    if (t.node(k).value.size() != nq.value.size() || t.node(v).value.size() != nq.value.size())
        shape_error("masked_attention", nq.shape, t.node(k).shape);
    const long dh = d / n_heads;
    const Scalar sc = 1.0 / std::sqrt(static_cast<Scalar>(dh));

    auto probs = std::make_shared<std::vector<Matrix>>();
    probs->reserve(n * n_heads);

    Array y = Array::Zero(total * d);
    {
        ConstMatrixMap Q(nq.value.data(), total, d);
        ConstMatrixMap K(t.node(k).value.data(), total, d);
        ConstMatrixMap V(t.node(v).value.data(), total, d);
        MatrixMap Y(y.data(), total, d);
        for (long s = 0; s < n; ++s) {
            const long len = lengths[s];
            for (long h = 0; h < n_heads; ++h) {
                if (len <= 0) {
                    probs->emplace_back();
                    continue;
                }
                auto Qh = Q.block(s * L, h * dh, len, dh);
                auto Kh = K.block(s * L, h * dh, len, dh);
                auto Vh = V.block(s * L, h * dh, len, dh);
                Matrix S = (Qh * Kh.transpose()) * sc;
                // causal softmax over j <= i
                Matrix P = Matrix::Zero(len, len);
                for (long i = 0; i < len; ++i) {
                    Scalar mx = -std::numeric_limits<Scalar>::infinity();
                    for (long j = 0; j <= i; ++j) mx = std::max(mx, S(i, j));
                    Scalar z = 0;
                    for (long j = 0; j <= i; ++j) {
                        P(i, j) = std::exp(S(i, j) - mx);
                        z += P(i, j);
                    }
                    for (long j = 0; j <= i; ++j) P(i, j) /= z;
                }
                Y.block(s * L, h * dh, len, dh).noalias() = P * Vh;
                probs->push_back(std::move(P));
            }
        }
    }
    Var out = t.emplace(nq.shape, std::move(y), wants_grad(t, {q, k, v}));
    if (t.node(out).requires_grad) {
        auto lens = std::make_shared<std::vector<long>>(lengths);
        t.set_backward(out, [&t, q, k, v, out, probs, lens, n, L, n_heads, dh, d, sc] {
            ConstMatrixMap G(t.node(out).grad.data(), n * L, d);
            ConstMatrixMap Q(t.node(q).value.data(), n * L, d);
            ConstMatrixMap K(t.node(k).value.data(), n * L, d);
            ConstMatrixMap V(t.node(v).value.data(), n * L, d);
            MatrixMap DQ(t.grad_buffer(q).data(), n * L, d);
            MatrixMap DK(t.grad_buffer(k).data(), n * L, d);
            MatrixMap DV(t.grad_buffer(v).data(), n * L, d);
            for (long s = 0; s < n; ++s) {
                const long len = (*lens)[s];
                if (len <= 0) continue;
                for (long h = 0; h < n_heads; ++h) {
                    const Matrix& P = (*probs)[s * n_heads + h];
                    auto Gh = G.block(s * L, h * dh, len, dh);
                    auto Qh = Q.block(s * L, h * dh, len, dh);
                    auto Kh = K.block(s * L, h * dh, len, dh);
                    auto Vh = V.block(s * L, h * dh, len, dh);
                    DV.block(s * L, h * dh, len, dh).noalias() += P.transpose() * Gh;
                    Matrix DP = Gh * Vh.transpose();
                    Matrix DS(len, len);
                    for (long i = 0; i < len; ++i) {
                        Scalar dot = 0;
                        for (long j = 0; j <= i; ++j) dot += DP(i, j) * P(i, j);
                        for (long j = 0; j < len; ++j) DS(i, j) = j <= i ? P(i, j) * (DP(i, j) - dot) : 0.0;
                    }
                    DQ.block(s * L, h * dh, len, dh).noalias() += (DS * Kh) * sc;
                    DK.block(s * L, h * dh, len, dh).noalias() += (DS.transpose() * Qh) * sc;
                }
            }
        });
    }
    return out;
}

Var mean_rows_groups(Tape& t, Var x, const std::vector<long>& flat_rows, const std::vector<long>& counts) {
    const auto& nx = t.node(x);
    const long d = last_dim(nx.shape);
    const long total = nx.value.size() / d;
    const long n = static_cast<long>(counts.size());
    long expected = 0;
    for (long c : counts) {
        if (c < 1) throw Error("mean_rows_groups: empty group");
        expected += c;
    }
    if (expected != static_cast<long>(flat_rows.size())) throw Error("mean_rows_groups: counts/rows mismatch");
    for (long r : flat_rows)
        if (r < 0 || r >= total) throw Error("mean_rows_groups: row out of range");

    Array y = Array::Zero(n * d);
    {
        ConstMatrixMap E(nx.value.data(), total, d);
        MatrixMap Y(y.data(), n, d);
        long pos = 0;
        for (long s = 0; s < n; ++s) {
            for (long j = 0; j < counts[s]; ++j) Y.row(s) += E.row(flat_rows[pos++]);
            Y.row(s) /= static_cast<Scalar>(counts[s]);
        }
    }
    Var out = t.emplace({n, d}, std::move(y), wants_grad(t, {x}));
    if (t.node(out).requires_grad) {
        auto sel = std::make_shared<std::vector<long>>(flat_rows);
        auto cnt = std::make_shared<std::vector<long>>(counts);
        t.set_backward(out, [&t, x, out, sel, cnt, n, d, total] {
            ConstMatrixMap G(t.node(out).grad.data(), n, d);
            MatrixMap DE(t.grad_buffer(x).data(), total, d);
            long pos = 0;
            for (long s = 0; s < n; ++s)
                for (long j = 0; j < (*cnt)[s]; ++j)
                    DE.row((*sel)[pos++]) += G.row(s) / static_cast<Scalar>((*cnt)[s]);
        });
    }
    return out;
}

Var topk_mean_pool(Tape& t, Var emb, Var scores, const std::vector<long>& lengths, long k,
                   std::vector<long>* selected_out, std::vector<long>* counts_out) {
    const auto& ne = t.node(emb);
    const long d = last_dim(ne.shape);
    const long n = static_cast<long>(lengths.size());
    const long total = ne.value.size() / d;
    if (total % n != 0) throw Error("topk_mean_pool: rows not divisible by sample count");
    const long L = total / n;
    if (t.node(scores).value.size() != total) shape_error("topk_mean_pool", ne.shape, t.node(scores).shape);
    if (k < 1) throw Error("topk_mean_pool: k must be >= 1");

    std::vector<long> selected;  // flat row ids, grouped per sample
    std::vector<long> counts(n);
    const Array& sv = t.node(scores).value;
    for (long s = 0; s < n; ++s) {
        const long len = lengths[s];
        if (len <= 0) throw Error("topk_mean_pool: sample " + std::to_string(s) + " has no valid steps");
        const long m = std::min<long>(k, len);
        std::vector<long> order(len);
        std::iota(order.begin(), order.end(), 0l);
        const Scalar* row = sv.data() + s * L;
        std::partial_sort(order.begin(), order.begin() + m, order.end(), [row](long a, long b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;
        });
        counts[s] = m;
        for (long j = 0; j < m; ++j) selected.push_back(s * L + order[j]);
    }
    if (selected_out) *selected_out = selected;
    if (counts_out) *counts_out = counts;
    return mean_rows_groups(t, emb, selected, counts);
}

// ---- losses -----------------------------------------------------------------------

BceResult weighted_bce(Tape& t, Var prob, const Array& label, const Array& weight, const Array& mask, Scalar eps,
                       long normalizer) {
    const auto& np = t.node(prob);
    const long n = np.value.size();
    if (label.size() != n || weight.size() != n || mask.size() != n)
        throw Error("weighted_bce: label/weight/mask must match prob size " + std::to_string(n));

    long count = 0;
    for (long i = 0; i < n; ++i)
        if (mask[i] > 0.0) ++count;
    if (count == 0) {
        Array zero(1);
        zero[0] = 0.0;
        return BceResult{t.emplace({1}, std::move(zero), false), true};
    }
    if (normalizer > 0) count = normalizer;

    Scalar acc = 0;
    for (long i = 0; i < n; ++i) {
        if (mask[i] <= 0.0) continue;
        const Scalar p = std::clamp(np.value[i], eps, 1.0 - eps);
        acc -= weight[i] * (label[i] * std::log(p) + (1.0 - label[i]) * std::log(1.0 - p));
    }
    Array y(1);
    y[0] = acc / static_cast<Scalar>(count);
    Var out = t.emplace({1}, std::move(y), wants_grad(t, {prob}));
    if (t.node(out).requires_grad) {
        auto lab = std::make_shared<Array>(label);
        auto wgt = std::make_shared<Array>(weight);
        auto msk = std::make_shared<Array>(mask);
        t.set_backward(out, [&t, prob, out, lab, wgt, msk, n, count, eps] {
            const Scalar g = t.node(out).grad[0] / static_cast<Scalar>(count);
            const Array& pv = t.node(prob).value;
            Array& dp = t.grad_buffer(prob);
            for (long i = 0; i < n; ++i) {
                if ((*msk)[i] <= 0.0) continue;
                if (pv[i] <= eps || pv[i] >= 1.0 - eps) continue;  // clamp plateau
                dp[i] += g * (*wgt)[i] * (-(*lab)[i] / pv[i] + (1.0 - (*lab)[i]) / (1.0 - pv[i]));
            }
        });
    }
    return BceResult{out, false};
}

Array sinusoidal_positional_encoding(long seq_len, long dim) {
    Array pe = Array::Zero(seq_len * dim);
    for (long pos = 0; pos < seq_len; ++pos) {
        for (long i = 0; i < dim / 2; ++i) {
            const Scalar freq = std::pow(10000.0, -2.0 * static_cast<Scalar>(i) / static_cast<Scalar>(dim));
            pe[pos * dim + 2 * i] = std::sin(pos * freq);
            if (2 * i + 1 < dim) pe[pos * dim + 2 * i + 1] = std::cos(pos * freq);
        }
    }
    return pe;
}

}  // namespace mandarin::core
