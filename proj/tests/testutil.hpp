#pragma once

#include <functional>

#include "mandarin/core/store.hpp"
#include "mandarin/core/tensor.hpp"

namespace testutil {

using mandarin::core::FdCoord;
using mandarin::core::FdReport;
using mandarin::core::ParameterStore;
using mandarin::core::Tape;
using mandarin::core::TapeParams;
using mandarin::core::Var;

// Builds the graph, reduces to the scalar returned by `build`, optionally
// backpropagates into the store.
inline double run_scalar(ParameterStore& store,
                         const std::function<Var(Tape&, TapeParams&)>& build,
                         bool with_grad) {
    Tape t;
    t.set_grad_enabled(with_grad);
    TapeParams params(t, store);
    Var out = build(t, params);
    const double v = t.value(out)[0];
    if (with_grad) {
        t.backward(out);
        params.flush_grads();
    }
    return v;
}

inline FdReport fd_check(ParameterStore& store,
                         const std::function<Var(Tape&, TapeParams&)>& build,
                         const std::vector<FdCoord>& coords = {},
                         double eps = 1e-6) {
    auto loss = [&store, &build] { return run_scalar(store, build, false); };
    auto grad = [&store, &build] { run_scalar(store, build, true); };
    return mandarin::core::finite_difference_check(store, loss, grad, coords, eps);
}

}  // namespace testutil
