#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mandarin/core/store.hpp"
#include "mandarin/core/tensor.hpp"
#include "mandarin/rng.hpp"
#include "testutil.hpp"

using namespace mandarin;
using namespace mandarin::core;
using testutil::fd_check;
using testutil::run_scalar;

namespace {

Array arange(long n, double start = 0.0, double step = 1.0) {
    Array a(n);
    for (long i = 0; i < n; ++i) a[i] = start + step * i;
    return a;
}

Array random_array(Rng& rng, long n, double lo = -1.0, double hi = 1.0) {
    Array a(n);
    for (long i = 0; i < n; ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("linear with identity weights is the identity") {
    Tape t;
    Array w = Array::Zero(9);
    for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    Var x = t.leaf({2, 3}, arange(6, 0.5, 0.25));
    Var W = t.leaf({3, 3}, w);
    Var b = t.leaf({3}, Array::Zero(3));
    Var y = linear(t, x, W, b);
    for (long i = 0; i < 6; ++i) CHECK(t.value(y)[i] == doctest::Approx(t.value(x)[i]));
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
    Tape t;
    Var x = t.leaf({4, 5}, Array::Constant(20, 3.7));
    Var p = softmax(t, x, -1);
    for (long i = 0; i < 20; ++i) CHECK(t.value(p)[i] == doctest::Approx(0.2));

    Rng rng(11);
    Var z = t.leaf({8, 7}, random_array(rng, 56, -5, 5));
    Var q = softmax(t, z, -1);
    for (long r = 0; r < 8; ++r) {
        double s = 0;
        for (long c = 0; c < 7; ++c) s += t.value(q)[r * 7 + c];
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax along a non-terminal axis normalizes that axis") {
    Tape t;
    Rng rng(3);
    Var x = t.leaf({3, 4, 2}, random_array(rng, 24, -2, 2));
    Var p = softmax(t, x, 1);
    for (long o = 0; o < 3; ++o)
        for (long i = 0; i < 2; ++i) {
            double s = 0;
            for (long j = 0; j < 4; ++j) s += t.value(p)[(o * 4 + j) * 2 + i];
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
}

TEST_CASE("conv1d on zero input broadcasts the bias") {
    Tape t;
    Var x = t.leaf({2 * 5, 3}, Array::Zero(30));
    Rng rng(5);
    Var k = t.leaf({3 * 3, 4}, random_array(rng, 36));
    Var b = t.leaf({4}, arange(4, 1.0, 0.5));
    Var y = conv1d(t, x, k, b, 2, 5, 3);
    for (long r = 0; r < 10; ++r)
        for (long c = 0; c < 4; ++c) CHECK(t.value(y)[r * 4 + c] == doctest::Approx(1.0 + 0.5 * c));
}

TEST_CASE("conv1d rejects even kernels and mismatched shapes with both shapes named") {
    Tape t;
    Var x = t.leaf({4, 3}, Array::Zero(12));
    Var k = t.leaf({6, 2}, Array::Zero(12));
    CHECK_THROWS_AS(conv1d(t, x, k, Var{}, 1, 4, 2), Error);
    Var k3 = t.leaf({5, 2}, Array::Zero(10));
    CHECK_THROWS_WITH_AS(conv1d(t, x, k3, Var{}, 1, 4, 3), doctest::Contains("[5x2]"), Error);
}

TEST_CASE("shape mismatch reports both shapes") {
    Tape t;
    Var a = t.leaf({2, 3}, Array::Zero(6));
    Var c = t.leaf({2, 2}, Array::Zero(4));
    CHECK_THROWS_WITH_AS(add(t, a, c), doctest::Contains("[2x3]"), Error);
    CHECK_THROWS_WITH_AS(add(t, a, c), doctest::Contains("[2x2]"), Error);
}

TEST_CASE("cumprod of values in [0,1] is nonincreasing") {
    Rng rng(17);
    Tape t;
    Var x = t.leaf({6, 9}, random_array(rng, 54, 0.0, 1.0));
    Var c = cumprod(t, x);
    for (long r = 0; r < 6; ++r)
        for (long j = 1; j < 9; ++j)
            CHECK(t.value(c)[r * 9 + j] <= t.value(c)[r * 9 + j - 1] + 1e-15);
}

TEST_CASE("top_k picks largest values with ties resolved to the lowest index") {
    Tape t;
    Array x(8);
    x << 1.0, 5.0, 5.0, 2.0, 7.0, 7.0, 0.0, 3.0;
    Var v = t.leaf({1, 8}, x);
    TopK tk = top_k(t, v, 3);
    CHECK(tk.indices == std::vector<long>{4, 5, 1});
    CHECK(t.value(tk.values)[0] == doctest::Approx(7.0));
    CHECK(t.value(tk.values)[2] == doctest::Approx(5.0));
}

TEST_CASE("weighted_bce closed forms") {
    SUBCASE("p equals y gives ~0 loss") {
        Tape t;
        Array label(4);
        label << 1, 0, 1, 0;
        Var p = t.leaf({4}, label);
        auto r = weighted_bce(t, p, label, Array::Ones(4), Array::Ones(4));
        CHECK(t.value(r.loss)[0] == doctest::Approx(0.0).epsilon(1e-5));
        CHECK_FALSE(r.all_masked);
    }
    SUBCASE("p = 0.5 with unit weights gives ln 2") {
        Tape t;
        Array label(6);
        label << 1, 0, 1, 0, 1, 1;
        Var p = t.leaf({6}, Array::Constant(6, 0.5));
        auto r = weighted_bce(t, p, label, Array::Ones(6), Array::Ones(6));
        CHECK(t.value(r.loss)[0] == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("doubling the positive weight doubles the positive contribution") {
        Array label(2), mask = Array::Ones(2);
        label << 1, 0;
        Array w1(2), w2(2);
        w1 << 1.0, 1.0;
        w2 << 2.0, 1.0;
        Tape t;
        Var p = t.leaf({2}, Array::Constant(2, 0.3));
        auto a = weighted_bce(t, p, label, w1, mask);
        auto b = weighted_bce(t, p, label, w2, mask);
        const double pos1 = -std::log(0.3), neg = -std::log(0.7);
        CHECK(t.value(a.loss)[0] == doctest::Approx((pos1 + neg) / 2));
        CHECK(t.value(b.loss)[0] == doctest::Approx((2 * pos1 + neg) / 2));
    }
    SUBCASE("fully masked input returns zero with flag") {
        Tape t;
        Var p = t.leaf({3}, Array::Constant(3, 0.4));
        auto r = weighted_bce(t, p, Array::Ones(3), Array::Ones(3), Array::Zero(3));
        CHECK(r.all_masked);
        CHECK(t.value(r.loss)[0] == 0.0);
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParameterStore store(1);
    store.add("w", {3, 3}, Init::XavierUniform);
    const Array before = store.at("w").value;
    adam_step(store, {});
    for (long i = 0; i < 9; ++i) CHECK(store.at("w").value[i] == before[i]);
    CHECK(store.step() == 1);
}

TEST_CASE("adam: first step on unit gradient moves by ~lr (bias corrected)") {
    ParameterStore store(1);
    store.add("w", {1}, Init::Zeros);
    store.at("w").grad[0] = 1.0;
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.clip_norm = 0.0;
    adam_step(store, cfg);
    CHECK(store.at("w").value[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam: non-finite gradient aborts naming the parameter") {
    ParameterStore store(1);
    store.add("alpha", {2}, Init::Zeros);
    store.add("beta", {2}, Init::Zeros);
    store.at("beta").grad[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(adam_step(store, {}), doctest::Contains("beta"), Error);
}

TEST_CASE("same seed and data give bit-identical parameters") {
    auto run = [] {
        ParameterStore store(42);
        store.add("w", {4, 4}, Init::XavierUniform);
        store.add("b", {4}, Init::Zeros);
        store.add("e", {5, 4}, Init::Embedding);
        Rng data_rng(7);
        for (int step = 0; step < 5; ++step) {
            for (const auto& name : store.names()) {
                auto& p = store.at(name);
                for (long i = 0; i < p.grad.size(); ++i) p.grad[i] = data_rng.uniform(-1, 1);
            }
            adam_step(store, {});
        }
        return store;
    };
    ParameterStore a = run();
    ParameterStore b = run();
    for (const auto& name : a.names()) {
        const auto& pa = a.at(name).value;
        const auto& pb = b.at(name).value;
        for (long i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
    }
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mandarin_core_test";
    fs::create_directories(dir);
    ParameterStore store(99);
    store.add("w", {6, 3}, Init::XavierUniform);
    store.add("emb", {10, 3}, Init::Embedding);
    store.rng().normal();  // leave the RNG mid-stream
    for (int i = 0; i < 3; ++i) {
        store.at("w").grad.setConstant(0.25);
        adam_step(store, {});
    }
    const std::string p1 = (dir / "a.ckpt").string();
    const std::string p2 = (dir / "b.ckpt").string();
    store.save(p1);
    ParameterStore loaded = ParameterStore::load(p1);
    loaded.save(p2);
    CHECK(read_file_bytes(p1) == read_file_bytes(p2));
    CHECK(loaded.step() == store.step());
    fs::remove_all(dir);
}

TEST_CASE("checkpoint rejects wrong magic") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mandarin_core_test2";
    fs::create_directories(dir);
    const std::string p = (dir / "bogus.ckpt").string();
    {
        std::ofstream os(p, std::ios::binary);
        os << "NOTACKPTxxxxxxxxxxxxxxxx";
    }
    CHECK_THROWS_AS(ParameterStore::load(p), Error);
    fs::remove_all(dir);
}

// ---- gradient checks ---------------------------------------------------------------

TEST_CASE("micro-network linear+sigmoid+bce gradients match finite differences tightly") {
    ParameterStore store(123);
    store.add("W", {4, 3}, Init::XavierUniform);
    store.add("b", {3}, Init::Zeros);
    Rng rng(9);
    const Array x = random_array(rng, 8 * 4);
    Array label(8 * 3);
    for (long i = 0; i < label.size(); ++i) label[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;

    auto build = [&](Tape& t, TapeParams& P) {
        Var in = t.leaf({8, 4}, x);
        Var p = sigmoid(t, linear(t, in, P["W"], P["b"]));
        return weighted_bce(t, p, label, Array::Ones(24), Array::Ones(24)).loss;
    };
    auto rep = fd_check(store, build, {}, 1e-6);
    CHECK(rep.checked == 15);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("every catalog op passes finite differences") {
    Rng rng(2024);
    double worst = 0;

    auto check = [&](const char* name, long n_params, const std::function<Var(Tape&, TapeParams&)>& build,
                     ParameterStore& store) {
        auto rep = fd_check(store, build, {}, 1e-6);
        INFO(name);
        CHECK(rep.checked == n_params);
        CHECK(rep.max_rel_err < 1e-4);
        worst = std::max(worst, rep.max_rel_err);
    };

    {
        ParameterStore s(1);
        s.add("x", {3, 4}, Init::XavierUniform);
        Array r = random_array(rng, 12);
        check("relu", 12, [&](Tape& t, TapeParams& P) { return dot_const(t, relu(t, P["x"]), r); }, s);
    }
    {
        ParameterStore s(2);
        s.add("x", {3, 4}, Init::XavierUniform);
        Array r = random_array(rng, 12);
        check("gelu", 12, [&](Tape& t, TapeParams& P) { return dot_const(t, gelu(t, P["x"]), r); }, s);
    }
    {
        ParameterStore s(3);
        s.add("x", {3, 4}, Init::XavierUniform);
        Array r = random_array(rng, 12);
        check("sigmoid", 12, [&](Tape& t, TapeParams& P) { return dot_const(t, sigmoid(t, P["x"]), r); }, s);
    }
    {
        ParameterStore s(4);
        s.add("x", {3, 4}, Init::XavierUniform);
        Array r = random_array(rng, 12);
        check("softmax", 12, [&](Tape& t, TapeParams& P) { return dot_const(t, softmax(t, P["x"], -1), r); }, s);
    }
    {
        ParameterStore s(41);
        s.add("x", {2, 3, 2}, Init::XavierUniform);
        Array r = random_array(rng, 12);
        check("softmax axis1", 12, [&](Tape& t, TapeParams& P) { return dot_const(t, softmax(t, P["x"], 1), r); }, s);
    }
    {
        ParameterStore s(5);
        s.add("x", {3, 5}, Init::XavierUniform);
        Array r = random_array(rng, 15);
        check("cumprod", 15,
              [&](Tape& t, TapeParams& P) { return dot_const(t, cumprod(t, sigmoid(t, P["x"])), r); }, s);
    }
    {
        ParameterStore s(6);
        s.add("x", {4, 6}, Init::XavierUniform);
        s.add("g", {6}, Init::XavierUniform);
        s.add("b", {6}, Init::Zeros);
        Array r = random_array(rng, 24);
        check("layer_norm", 36,
              [&](Tape& t, TapeParams& P) { return dot_const(t, layer_norm(t, P["x"], P["g"], P["b"]), r); }, s);
    }
    {
        ParameterStore s(7);
        s.add("x", {5, 3}, Init::XavierUniform);
        s.add("W", {3, 4}, Init::XavierUniform);
        s.add("b", {4}, Init::Zeros);
        Array r = random_array(rng, 20);
        check("linear", 31,
              [&](Tape& t, TapeParams& P) { return dot_const(t, linear(t, P["x"], P["W"], P["b"]), r); }, s);
    }
    {
        ParameterStore s(8);
        s.add("a", {4, 3}, Init::XavierUniform);
        s.add("b", {3, 5}, Init::XavierUniform);
        Array r = random_array(rng, 20);
        check("matmul", 27,
              [&](Tape& t, TapeParams& P) { return dot_const(t, matmul(t, P["a"], P["b"]), r); }, s);
    }
    {
        ParameterStore s(9);
        s.add("x", {2 * 6, 3}, Init::XavierUniform);
        s.add("k", {3 * 3, 4}, Init::XavierUniform);
        s.add("b", {4}, Init::Zeros);
        Array r = random_array(rng, 48);
        check("conv1d k=3", 36 + 36 + 4,
              [&](Tape& t, TapeParams& P) { return dot_const(t, conv1d(t, P["x"], P["k"], P["b"], 2, 6, 3), r); }, s);
    }
    {
        ParameterStore s(10);
        s.add("table", {7, 4}, Init::Embedding);
        std::vector<int> codes{0, 3, 3, 6, 2};
        Array r = random_array(rng, 20);
        check("embedding_lookup", 28,
              [&](Tape& t, TapeParams& P) { return dot_const(t, embedding_lookup(t, codes, P["table"]), r); }, s);
    }
    {
        ParameterStore s(11);
        s.add("x", {6, 4}, Init::XavierUniform);
        Array r = random_array(rng, 12);
        std::vector<long> idx{5, 0, 2};
        check("rows_gather", 24,
              [&](Tape& t, TapeParams& P) { return dot_const(t, rows_gather(t, P["x"], idx), r); }, s);
    }
    {
        ParameterStore s(12);
        s.add("x", {3, 4}, Init::XavierUniform);
        s.add("w", {3}, Init::XavierUniform);
        Array r = random_array(rng, 24);
        std::vector<long> idx{4, 1, 1};
        check("rows_scatter_weighted", 15,
              [&](Tape& t, TapeParams& P) {
                  return dot_const(t, rows_scatter_weighted(t, P["x"], P["w"], idx, 6), r);
              },
              s);
    }
    {
        ParameterStore s(13);
        s.add("x", {4, 5}, Init::XavierUniform);
        Array r = random_array(rng, 4);
        check("rows_sum/div_rows", 20,
              [&](Tape& t, TapeParams& P) {
                  Var p = sigmoid(t, P["x"]);
                  Var d = affine(t, rows_sum(t, p), 1.0, 0.5);
                  return dot_const(t, rows_sum(t, div_rows(t, p, d)), r);
              },
              s);
    }
    {
        ParameterStore s(14);
        s.add("x", {5, 3}, Init::XavierUniform);
        Array r = random_array(rng, 3);
        check("col_mean", 15, [&](Tape& t, TapeParams& P) { return dot_const(t, col_mean(t, P["x"]), r); }, s);
    }
    {
        ParameterStore s(15);
        s.add("x", {2, 6}, Init::XavierUniform);
        Array r = random_array(rng, 4);
        check("top_k values", 12,
              [&](Tape& t, TapeParams& P) { return dot_const(t, top_k(t, P["x"], 2).values, r); }, s);
    }
    {
        ParameterStore s(16);
        s.add("q", {2 * 5, 6}, Init::XavierUniform);
        s.add("k", {2 * 5, 6}, Init::XavierUniform);
        s.add("v", {2 * 5, 6}, Init::XavierUniform);
        Array r = random_array(rng, 60);
        std::vector<long> lens{5, 3};
        check("masked_attention", 180,
              [&](Tape& t, TapeParams& P) {
                  return dot_const(t, masked_attention(t, P["q"], P["k"], P["v"], lens, 2), r);
              },
              s);
    }
    {
        ParameterStore s(17);
        s.add("emb", {2 * 4, 3}, Init::XavierUniform);
        Rng srng(55);
        Array scores = random_array(srng, 8);
        Array r = random_array(rng, 6);
        std::vector<long> lens{4, 2};
        check("topk_mean_pool", 24,
              [&](Tape& t, TapeParams& P) {
                  Var sc = t.leaf({8}, scores);
                  return dot_const(t, topk_mean_pool(t, P["emb"], sc, lens, 3), r);
              },
              s);
    }
    {
        ParameterStore s(18);
        s.add("x", {8}, Init::XavierUniform);
        Array label(8), w(8), mask = Array::Ones(8);
        for (long i = 0; i < 8; ++i) {
            label[i] = i % 2;
            w[i] = 1.0 + 0.25 * i;
        }
        mask[3] = 0;
        check("weighted_bce", 8,
              [&](Tape& t, TapeParams& P) { return weighted_bce(t, sigmoid(t, P["x"]), label, w, mask).loss; }, s);
    }
    {
        ParameterStore s(19);
        s.add("x", {3, 3}, Init::XavierUniform);
        check("pick/mean/affine", 9,
              [&](Tape& t, TapeParams& P) {
                  Var m = mean_all(t, affine(t, P["x"], 2.0, 1.0));
                  return add(t, m, pick(t, P["x"], 4));
              },
              s);
    }
    MESSAGE("worst per-op fd relative error: " << worst);
}

TEST_CASE("random compositions of catalog ops pass finite differences over 100 seeds") {
    double worst = 0;
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(1000 + seed);
        ParameterStore store(2000 + seed);
        store.add("x", {4, 6}, Init::XavierUniform);
        store.add("W", {6, 6}, Init::XavierUniform);
        store.add("b", {6}, Init::Zeros);
        store.add("g", {6}, Init::XavierUniform);
        store.add("x2", {4, 6}, Init::XavierUniform);
        const int depth = 1 + static_cast<int>(rng.uniform_index(4));
        std::vector<int> plan(depth);
        for (int d = 0; d < depth; ++d) plan[d] = static_cast<int>(rng.uniform_index(9));
        Array r = random_array(rng, 24);

        auto build = [&](Tape& t, TapeParams& P) {
            Var h = P["x"];
            for (int op : plan) {
                switch (op) {
                    case 0: h = relu(t, h); break;
                    case 1: h = gelu(t, h); break;
                    case 2: h = sigmoid(t, h); break;
                    case 3: h = softmax(t, h, -1); break;
                    case 4: h = cumprod(t, sigmoid(t, h)); break;
                    case 5: h = layer_norm(t, h, P["g"], P["b"]); break;
                    case 6: h = linear(t, h, P["W"], P["b"]); break;
                    case 7: h = add(t, h, P["x2"]); break;
                    case 8: h = mul(t, h, sigmoid(t, P["x2"])); break;
                }
            }
            return dot_const(t, h, r);
        };
        auto rep = fd_check(store, build, {}, 1e-6);
        worst = std::max(worst, rep.max_rel_err);
        INFO("seed " << seed);
        CHECK(rep.max_rel_err < 1e-4);
    }
    MESSAGE("worst composition fd relative error: " << worst);
}

TEST_CASE("finite_difference_check on a store with no parameters reports nothing checked") {
    ParameterStore store(5);
    auto rep = finite_difference_check(
        store, [] { return 1.5; }, [] {});
    CHECK(rep.checked == 0);
    CHECK(rep.max_rel_err == 0.0);
}

TEST_CASE("gradient accumulates when a parameter is used twice") {
    ParameterStore store(31);
    store.add("x", {2, 2}, Init::XavierUniform);
    auto build = [&](Tape& t, TapeParams& P) {
        Var a = P["x"];
        return sum_all(t, mul(t, a, a));
    };
    auto rep = fd_check(store, build, {}, 1e-6);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("inference mode records no gradients") {
    ParameterStore store(8);
    store.add("W", {3, 3}, Init::XavierUniform);
    Tape t;
    t.set_grad_enabled(false);
    TapeParams P(t, store);
    Var x = t.leaf({2, 3}, arange(6));
    Var y = linear(t, x, P["W"], Var{});
    CHECK_FALSE(t.requires_grad(y));
}
