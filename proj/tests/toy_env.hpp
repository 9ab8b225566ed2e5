#pragma once

// Hand-built DAG environments and a tabular policy for engine tests.

#include <map>
#include <string>
#include <vector>

#include "gfnem/gflownet.hpp"
#include "gfnem/params.hpp"
#include "gfnem/tape.hpp"

namespace gfnem::testing {

// Explicit graded DAG; node 0 is initial, nodes without children are
// terminal. Edges are added in action order.
struct ToyDag {
    std::vector<std::vector<int>> children;
    std::vector<std::vector<std::pair<int, int>>> parents;  // (parent node, action in parent)
    std::vector<double> log_reward;
    std::vector<double> partial;  // optional per-node partial log-reward
    bool has_partial = false;

    explicit ToyDag(int n)
        : children(static_cast<size_t>(n)),
          parents(static_cast<size_t>(n)),
          log_reward(static_cast<size_t>(n), 0.0) {}

    void edge(int from, int to) {
        int action = static_cast<int>(children[static_cast<size_t>(from)].size());
        children[static_cast<size_t>(from)].push_back(to);
        parents[static_cast<size_t>(to)].emplace_back(from, action);
    }
};

struct ToyEnv {
    using State = int;
    const ToyDag* dag;

    State initial() const { return 0; }
    bool is_terminal(const State& s) const {
        return dag->children[static_cast<size_t>(s)].empty();
    }
    int num_forward_actions(const State& s) const {
        return static_cast<int>(dag->children[static_cast<size_t>(s)].size());
    }
    State apply(const State& s, int a) const {
        return dag->children[static_cast<size_t>(s)][static_cast<size_t>(a)];
    }
    int num_backward_actions(const State& s) const {
        return static_cast<int>(dag->parents[static_cast<size_t>(s)].size());
    }
    State unapply(const State& s, int b) const {
        return dag->parents[static_cast<size_t>(s)][static_cast<size_t>(b)].first;
    }
    int backward_action_of(const State& from, int /*action*/, const State& to) const {
        const auto& ps = dag->parents[static_cast<size_t>(to)];
        for (size_t i = 0; i < ps.size(); ++i)
            if (ps[i].first == from) return static_cast<int>(i);
        throw std::runtime_error("toy env: no backward action");
    }
    int forward_action_of(const State& /*parent*/, int b, const State& child) const {
        return dag->parents[static_cast<size_t>(child)][static_cast<size_t>(b)].second;
    }
    double log_reward(const State& s) const { return dag->log_reward[static_cast<size_t>(s)]; }
    bool has_partial_reward() const { return dag->has_partial; }
    double partial_log_reward(const State& s) const {
        return dag->has_partial ? dag->partial[static_cast<size_t>(s)] : 0.0;
    }
    std::string key(const State& s) const { return std::to_string(s); }
};

// One logit block per state and direction, a flow scalar per state, and a
// free log-partition scalar.
struct TabularPolicy {
    ParamStore store;

    explicit TabularPolicy(const ToyDag& dag, Rng& rng, double init_std = 0.0) {
        for (size_t s = 0; s < dag.children.size(); ++s) {
            if (!dag.children[s].empty())
                store.add_gaussian("pf." + std::to_string(s),
                                   {static_cast<int64_t>(dag.children[s].size())}, init_std, rng);
            if (!dag.parents[s].empty())
                store.add_gaussian("pb." + std::to_string(s),
                                   {static_cast<int64_t>(dag.parents[s].size())}, init_std, rng);
            store.add_gaussian("g." + std::to_string(s), {1}, init_std, rng);
        }
        store.add("z", Tensor({1}));
    }

    Var forward_logits(Tape& t, const ToyEnv&, const int& s) {
        return t.param(store, "pf." + std::to_string(s));
    }
    Var backward_logits(Tape& t, const ToyEnv&, const int& s) {
        return t.param(store, "pb." + std::to_string(s));
    }
    Var log_flow_head(Tape& t, const ToyEnv&, const int& s) {
        return t.reshape(t.param(store, "g." + std::to_string(s)), {});
    }
    Var log_z(Tape& t, const ToyEnv&) { return t.reshape(t.param(store, "z"), {}); }
    ParamStore& params() { return store; }
};

// s0 -> {a, b} -> t ; one terminal reachable along two paths
inline ToyDag diamond_dag() {
    ToyDag d(4);
    d.edge(0, 1);
    d.edge(0, 2);
    d.edge(1, 3);
    d.edge(2, 3);
    d.log_reward[3] = 0.0;
    return d;
}

// s0 -> {a, b}; a -> {t1, t2}, b -> {t2', t3} with t2 shapes distinct states
// (graded, 4 terminals, some with two parents)
inline ToyDag two_level_dag() {
    ToyDag d(7);
    d.edge(0, 1);
    d.edge(0, 2);
    d.edge(1, 3);
    d.edge(1, 4);
    d.edge(2, 4);
    d.edge(2, 5);
    d.edge(2, 6);
    return d;
}

inline ToyDag chain_dag(int len) {
    ToyDag d(len + 1);
    for (int i = 0; i < len; ++i) d.edge(i, i + 1);
    return d;
}

}  // namespace gfnem::testing
