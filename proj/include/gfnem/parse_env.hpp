#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "gfnem/ebm.hpp"
#include "gfnem/gflownet.hpp"
#include "gfnem/grammar.hpp"

namespace gfnem::grammar {

// GFlowNet state for parsing: an ordered forest of partial trees whose
// concatenated leaves spell the sentence. Depth-0 fragments are bare tokens.
struct ForestState {
    std::vector<ParseTree> frags;
};

// Bottom-up joining environment. Forward actions join an adjacent pair of
// fragments under an NT parent (pair-major encoding a = pair * |NT| + X);
// backward actions split one internal root back into its children. Terminal
// states hold a single tree; the log-reward is the PT-marginalized joint
// probability, plus a tempered shape-prior term when an EBM is attached.
//
// Partial log-rewards credit a node's PT-marginalized term when the node is
// created (CFG) or when its parent appears (non-CFG, whose rule terms need
// the parent); the ROOT factor (and the non-CFG top-node term) lands on the
// terminal step, so the increments telescope to the terminal log-reward.
class ParseEnv {
public:
    using State = ForestState;

    ParseEnv(const Grammar& g, std::vector<int> sentence, const EbmPrior* prior = nullptr,
             double prior_temperature = 1.0)
        : grammar_(&g), sentence_(std::move(sentence)), prior_(prior),
          prior_temp_(prior_temperature) {
        if (sentence_.size() < 2)
            throw std::runtime_error("parse env: sentence must have length >= 2");
    }

    State initial() const {
        State s;
        for (int tok : sentence_) s.frags.push_back(ParseTree::leaf(tok));
        return s;
    }
    bool is_terminal(const State& s) const { return s.frags.size() == 1; }
    int num_forward_actions(const State& s) const {
        return s.frags.size() < 2
                   ? 0
                   : static_cast<int>(s.frags.size() - 1) * grammar_->sizes().num_nt;
    }
    State apply(const State& s, int action) const;
    int num_backward_actions(const State& s) const;
    State unapply(const State& s, int back_action) const;
    int backward_action_of(const State& from, int action, const State& to) const;
    int forward_action_of(const State& parent, int back_action, const State& child) const;
    double log_reward(const State& s) const;
    bool has_partial_reward() const { return true; }
    double partial_log_reward(const State& s) const;
    std::string key(const State& s) const;

    const std::vector<int>& sentence() const { return sentence_; }
    const Grammar& grammar() const { return *grammar_; }
    const EbmPrior* prior() const { return prior_; }
    double prior_temperature() const { return prior_temp_; }

private:
    int internal_root_position(const State& s, int back_action) const;
    const Grammar* grammar_;
    std::vector<int> sentence_;
    const EbmPrior* prior_;
    double prior_temp_;
};

// importance-weighted upper bound on -log p(x): -log mean_k exp(joint +
// log P_B - log P_F) over forward samples
template <class Policy>
double iw_nll_bound(const ParseEnv& env, Policy& policy, int k, Rng& rng) {
    if (k < 1) throw std::runtime_error("iw_nll_bound: k must be >= 1");
    std::vector<double> lw(static_cast<size_t>(k));
    for (int m = 0; m < k; ++m) {
        auto traj = sample_forward_trajectory(env, policy, ExplorationConfig{}, rng);
        lw[static_cast<size_t>(m)] =
            traj.log_reward + traj.total_log_pb() - traj.total_log_pf();
    }
    double best = *std::max_element(lw.begin(), lw.end());
    double acc = 0.0;
    for (double v : lw) acc += std::exp(v - best);
    return -(best + std::log(acc / k));
}

// flow bound: -log F(s0 | x) with the forward-looking flow at the initial
// state (partial reward is 0 there, so F(s0) is the flow head alone)
template <class Policy>
double flow_nll_bound(const ParseEnv& env, Policy& policy) {
    Tape t;
    ForestState s0 = env.initial();
    Var g = policy.log_flow_head(t, env, s0);
    return -g.value();
}

}  // namespace gfnem::grammar
