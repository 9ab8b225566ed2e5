#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gfnem/tape.hpp"

namespace gfnem {

// Gradient oracle: compares analytic gradients of a scalar expression with
// central finite differences over the given blocks (all blocks when empty).
// Returns the max over entries of |analytic - central| / (|central| + 1e-12).
// `build` must construct the same deterministic expression on every call.
inline double finite_difference_check(ParamStore& store,
                                      const std::function<Var(Tape&)>& build,
                                      double h = 1e-5,
                                      std::vector<std::string> blocks = {}) {
    if (blocks.empty())
        for (size_t i = 0; i < store.num_blocks(); ++i)
            blocks.push_back(store.block(static_cast<int>(i)).name);

    auto eval = [&]() {
        Tape t;
        Var root = build(t);
        return root.value();
    };

    Tape t;
    Var root = build(t);
    t.backward(root);

    double worst = 0.0;
    for (const auto& name : blocks) {
        std::vector<double> analytic = t.param_adjoint(name);
        Tensor& p = store.block(name).value;
        for (size_t i = 0; i < p.values.size(); ++i) {
            double keep = p.values[i];
            p.values[i] = keep + h;
            double up = eval();
            p.values[i] = keep - h;
            double dn = eval();
            p.values[i] = keep;
            double central = (up - dn) / (2.0 * h);
            double rel = std::abs(analytic[i] - central) / (std::abs(central) + 1e-12);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace gfnem
