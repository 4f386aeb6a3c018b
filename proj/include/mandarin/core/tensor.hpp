#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mandarin/common.hpp"

namespace mandarin::core {

using Scalar = double;
using Array = Eigen::ArrayXd;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

using Dims = std::vector<long>;

long numel(const Dims& dims);
std::string dims_to_string(const Dims& dims);

// Handle into a Tape node. Cheap to copy; valid only for the tape that made it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so running the
// recorded backward closures in reverse creation order is a topological sweep.
// A tape is confined to one thread; fresh tapes are built per forward pass.
class Tape {
public:
    struct Node {
        Dims shape;
        Array value;
        Array grad;  // sized on demand during backward
        bool requires_grad = false;
        std::function<void()> backward;  // empty for leaves / no-grad nodes
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // With grads disabled no backward closures are recorded (inference mode).
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(const Dims& shape, Array data, bool requires_grad = false);
    Var constant(const Dims& shape, Array data) { return leaf(shape, std::move(data), false); }
    Var scalar(Scalar v);

    const Dims& shape(Var v) const { return node(v).shape; }
    const Array& value(Var v) const { return node(v).value; }
    const Array& grad(Var v) const;
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    long rows(Var v) const;  // product of all but last dim
    long cols(Var v) const;  // last dim

    // Seeds d(root)/d(root) = 1 and sweeps the tape. root must be scalar.
    void backward(Var root);

    std::size_t size() const { return nodes_.size(); }

    // Internal plumbing for op implementations.
    Node& node(Var v);
    const Node& node(Var v) const;
    Var emplace(Dims shape, Array value, bool requires_grad);
    void set_backward(Var v, std::function<void()> fn);
    Array& grad_buffer(Var v);

private:
    std::vector<std::unique_ptr<Node>> nodes_;
    bool grad_enabled_ = true;
};

// ---- elementwise / reductions ------------------------------------------------

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var affine(Tape& t, Var a, Scalar k, Scalar c);  // k*a + c
inline Var scale(Tape& t, Var a, Scalar k) { return affine(t, a, k, 0.0); }
Var relu(Tape& t, Var a);
Var gelu(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var mean_all(Tape& t, Var a);
Var sum_all(Tape& t, Var a);
Var pick(Tape& t, Var a, long index);  // single element as scalar node

// In-place metadata view: same storage, new shape (element count must match).
Var reshape(Tape& t, Var a, const Dims& shape);

// Softmax along `axis` (negative counts from the end).
Var softmax(Tape& t, Var a, int axis = -1);

// Cumulative product along the last axis.
Var cumprod(Tape& t, Var a);

// LayerNorm over the last axis with learnable gain/bias of size cols(x).
Var layer_norm(Tape& t, Var x, Var gain, Var bias, Scalar eps = 1e-5);

// ---- linear algebra ----------------------------------------------------------

// x: [R x In], w: [In x Out], b: [Out] or invalid Var for no bias.
Var linear(Tape& t, Var x, Var w, Var b);
Var matmul(Tape& t, Var a, Var b);

// 1D convolution with same (zero) padding over per-sample sequences.
// x: [N*L x Cin] row-major by (sample, position), kernels: [k*Cin x Cout]
// (offset-major), bias: [Cout] or invalid.
Var conv1d(Tape& t, Var x, Var kernels, Var bias, long n_samples, long seq_len, long kernel_size);

// codes index rows of table [V x D]; out-of-range codes raise.
Var embedding_lookup(Tape& t, const std::vector<int>& codes, Var table);

// ---- gather / scatter ---------------------------------------------------------

Var rows_gather(Tape& t, Var x, const std::vector<long>& idx);
Var rows_scatter(Tape& t, Var src, const std::vector<long>& idx, long n_rows);
// out.row(idx[i]) += w[i] * src.row(i); w is differentiable.
Var rows_scatter_weighted(Tape& t, Var src, Var w, const std::vector<long>& idx, long n_rows);
Var gather_elems(Tape& t, Var x, const std::vector<long>& flat_idx);
Var rows_sum(Tape& t, Var x);                     // [R x C] -> [R]
Var col_mean(Tape& t, Var x);                     // [R x C] -> [C]
Var div_rows(Tape& t, Var x, Var d);              // x.row(r) / d[r]
Var dot_const(Tape& t, Var x, const Array& c);    // scalar
Var rows_scale_const(Tape& t, Var x, const Array& per_row);
Var mul_const(Tape& t, Var x, const Array& elementwise);
Var add_const(Tape& t, Var x, const Array& elementwise);

// ---- top-k ---------------------------------------------------------------------

struct TopK {
    Var values;                      // [R x k]
    std::vector<long> indices;       // row-major [R x k], ties -> lowest index
};
TopK top_k(Tape& t, Var x, long k);

// ---- fused sequence ops --------------------------------------------------------

// Multi-head causal self-attention over per-sample prefixes.
// q,k,v: [N*L x D]; position i of sample n attends to j <= i, j < lengths[n].
// Rows at positions >= lengths[n] produce zero output.
Var masked_attention(Tape& t, Var q, Var k, Var v, const std::vector<long>& lengths, long n_heads);

// Mean of the embeddings of the k highest-scored valid steps per sample
// (ties -> lowest index; fewer than k valid steps -> all of them).
// Selection is discrete: scores receive no gradient. When `selected_out` is
// given the chosen flat row ids (grouped per sample) are exported.
Var topk_mean_pool(Tape& t, Var emb, Var scores, const std::vector<long>& lengths, long k,
                   std::vector<long>* selected_out = nullptr, std::vector<long>* counts_out = nullptr);

// Per-group mean of the given rows: groups[i] holds counts[i] consecutive
// entries of flat_rows. Used to replay a frozen pooling selection.
Var mean_rows_groups(Tape& t, Var x, const std::vector<long>& flat_rows, const std::vector<long>& counts);

// ---- losses --------------------------------------------------------------------

struct BceResult {
    Var loss;             // scalar; 0 when everything is masked
    bool all_masked = false;
};
// Mean over unmasked entries of -[w*y*log(p) + w*(1-y)*log(1-p)] with p clamped
// to [eps, 1-eps]. `weight` carries the per-entry class weight. A positive
// `normalizer` replaces the unmasked count as the divisor, so a batch split
// across workers still sums to the batch-level mean.
BceResult weighted_bce(Tape& t, Var prob, const Array& label, const Array& weight,
                       const Array& mask, Scalar eps = 1e-7, long normalizer = 0);

// Sinusoidal positional encoding table, flattened [L x D].
Array sinusoidal_positional_encoding(long seq_len, long dim);

}  // namespace mandarin::core
