#pragma once

#include <string>

#include "gfnem/rng.hpp"
#include "gfnem/tape.hpp"

namespace gfnem {

// Two-layer perceptron (one tanh hidden layer). Blocks are registered under
// `prefix` as .w1 [in,hidden], .b1 [hidden], .w2 [hidden,out], .b2 [out].
inline void add_mlp(ParamStore& store, const std::string& prefix, int64_t in, int64_t hidden,
                    int64_t out, Rng& rng) {
    store.add_gaussian(prefix + ".w1", {in, hidden}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    store.add(prefix + ".b1", Tensor({hidden}));
    store.add_gaussian(prefix + ".w2", {hidden, out},
                       1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    store.add(prefix + ".b2", Tensor({out}));
}

// input: [in] vector or [m,in] matrix of rows; returns [out] or [m,out]
inline Var mlp_apply(Tape& t, ParamStore& store, const std::string& prefix, Var input) {
    bool vec = input.shape().size() == 1;
    Var x = vec ? t.reshape(input, {1, input.size()}) : input;
    Var h = t.tanh(t.add(t.matmul(x, t.param(store, prefix + ".w1")),
                         t.param(store, prefix + ".b1")));
    Var y = t.add(t.matmul(h, t.param(store, prefix + ".w2")), t.param(store, prefix + ".b2"));
    if (vec) y = t.reshape(y, {y.shape()[1]});
    return y;
}

}  // namespace gfnem
