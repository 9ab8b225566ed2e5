#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gfnem/rng.hpp"
#include "gfnem/tape.hpp"

namespace gfnem {

// Conditional-GFlowNet engine over a DAG environment. An environment Env
// bundles its conditioning input and provides:
//
//   using State;
//   State initial() const;
//   bool is_terminal(const State&) const;
//   int num_forward_actions(const State&) const;
//   State apply(const State&, int action) const;
//   int num_backward_actions(const State&) const;
//   State unapply(const State&, int back_action) const;
//   int backward_action_of(const State& from, int action, const State& to) const;
//   int forward_action_of(const State& parent, int back_action, const State& child) const;
//   double log_reward(const State& terminal) const;
//   bool has_partial_reward() const;
//   double partial_log_reward(const State&) const;
//   std::string key(const State&) const;
//
// A policy provides logits over the legal actions of a state, a state
// log-flow head, a log-partition head, and its ParamStore:
//
//   Var forward_logits(Tape&, const Env&, const State&);
//   Var backward_logits(Tape&, const Env&, const State&);
//   Var log_flow_head(Tape&, const Env&, const State&);   // g(s)
//   Var log_z(Tape&, const Env&);
//   ParamStore& params();
//
// The DAG must be graded: every trajectory from the initial state to a given
// state has the same length. Both bundled environments satisfy this.

// Off-policy exploration knobs. beta = 1 and epsilon = 0 reduce to
// on-policy sampling; exploration changes which actions are taken but the
// stored log-probabilities always belong to the untempered policy.
struct ExplorationConfig {
    double beta = 1.0;     // temperature exponent in (0, 1]
    double epsilon = 0.0;  // uniform mixing weight in [0, 1)
};

template <class State>
struct Trajectory {
    std::vector<State> states;     // s_0 .. s_n
    std::vector<int> actions;      // forward action taken at states[i]
    std::vector<int> back_actions; // matching backward action at states[i+1]
    std::vector<double> log_pf;    // log P_F(s_{i+1} | s_i)
    std::vector<double> log_pb;    // log P_B(s_i | s_{i+1})
    double log_reward = 0.0;

    size_t length() const { return actions.size(); }
    const State& terminal() const { return states.back(); }
    double total_log_pf() const {
        double s = 0.0;
        for (double v : log_pf) s += v;
        return s;
    }
    double total_log_pb() const {
        double s = 0.0;
        for (double v : log_pb) s += v;
        return s;
    }
};

namespace gfn_detail {

inline std::vector<double> log_softmax_values(std::span<const double> logits) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : logits) m = std::max(m, v);
    double s = 0.0;
    for (double v : logits) s += std::exp(v - m);
    double z = m + std::log(s);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - z;
    return out;
}

template <class Env, class Policy>
std::vector<double> forward_log_probs(const Env& env, Policy& policy,
                                      const typename Env::State& s) {
    Tape t;
    Var logits = policy.forward_logits(t, env, s);
    return log_softmax_values(logits.values());
}

template <class Env, class Policy>
std::vector<double> backward_log_probs(const Env& env, Policy& policy,
                                       const typename Env::State& s) {
    Tape t;
    Var logits = policy.backward_logits(t, env, s);
    return log_softmax_values(logits.values());
}

}  // namespace gfn_detail

// Samples s_0 -> ... -> z following the exploration distribution
// P^#(a|s) = (1-eps) * softmax(beta * log P_F)(a) + eps / #actions.
// Stored log-probs are those of the untempered policy.
template <class Env, class Policy>
Trajectory<typename Env::State> sample_forward_trajectory(const Env& env, Policy& policy,
                                                          const ExplorationConfig& explore,
                                                          Rng& rng) {
    Trajectory<typename Env::State> traj;
    typename Env::State s = env.initial();
    traj.states.push_back(s);
    while (!env.is_terminal(s)) {
        int k = env.num_forward_actions(s);
        if (k <= 0)
            throw std::runtime_error("sample_forward_trajectory: dead-end nonterminal state " +
                                     env.key(s));
        std::vector<double> logp = gfn_detail::forward_log_probs(env, policy, s);
        int a;
        if (explore.beta == 1.0 && explore.epsilon == 0.0) {
            std::vector<double> w(logp.size());
            for (size_t i = 0; i < logp.size(); ++i) w[i] = std::exp(logp[i]);
            a = rng.categorical(w);
        } else {
            std::vector<double> tempered(logp.size());
            for (size_t i = 0; i < logp.size(); ++i) tempered[i] = explore.beta * logp[i];
            std::vector<double> sm =
                gfn_detail::log_softmax_values({tempered.data(), tempered.size()});
            std::vector<double> w(logp.size());
            for (size_t i = 0; i < logp.size(); ++i)
                w[i] = (1.0 - explore.epsilon) * std::exp(sm[i]) +
                       explore.epsilon / static_cast<double>(k);
            a = rng.categorical(w);
        }
        typename Env::State next = env.apply(s, a);
        int b = env.backward_action_of(s, a, next);
        std::vector<double> logpb = gfn_detail::backward_log_probs(env, policy, next);
        traj.actions.push_back(a);
        traj.back_actions.push_back(b);
        traj.log_pf.push_back(logp[static_cast<size_t>(a)]);
        traj.log_pb.push_back(logpb[static_cast<size_t>(b)]);
        traj.states.push_back(next);
        s = std::move(next);
    }
    traj.log_reward = env.log_reward(s);
    return traj;
}

// Greedy rollout: argmax action at every step, lowest index on ties.
template <class Env, class Policy>
Trajectory<typename Env::State> sample_greedy_trajectory(const Env& env, Policy& policy) {
    Trajectory<typename Env::State> traj;
    typename Env::State s = env.initial();
    traj.states.push_back(s);
    while (!env.is_terminal(s)) {
        if (env.num_forward_actions(s) <= 0)
            throw std::runtime_error("sample_greedy_trajectory: dead-end nonterminal state");
        std::vector<double> logp = gfn_detail::forward_log_probs(env, policy, s);
        int a = 0;
        for (size_t i = 1; i < logp.size(); ++i)
            if (logp[i] > logp[static_cast<size_t>(a)]) a = static_cast<int>(i);
        typename Env::State next = env.apply(s, a);
        int b = env.backward_action_of(s, a, next);
        std::vector<double> logpb = gfn_detail::backward_log_probs(env, policy, next);
        traj.actions.push_back(a);
        traj.back_actions.push_back(b);
        traj.log_pf.push_back(logp[static_cast<size_t>(a)]);
        traj.log_pb.push_back(logpb[static_cast<size_t>(b)]);
        traj.states.push_back(next);
        s = std::move(next);
    }
    traj.log_reward = env.log_reward(s);
    return traj;
}

// Samples parents from P_B starting at the terminal z until the initial
// state, then reverses. Records both directions' log-probabilities.
template <class Env, class Policy>
Trajectory<typename Env::State> sample_backward_trajectory(const Env& env, Policy& policy,
                                                           const typename Env::State& z,
                                                           Rng& rng) {
    if (!env.is_terminal(z))
        throw std::runtime_error("sample_backward_trajectory: state is not terminal");
    std::vector<typename Env::State> rev_states{z};
    std::vector<int> rev_back, rev_fwd;
    std::vector<double> rev_lpb, rev_lpf;
    typename Env::State s = z;
    while (env.num_backward_actions(s) > 0) {
        std::vector<double> logpb = gfn_detail::backward_log_probs(env, policy, s);
        std::vector<double> w(logpb.size());
        for (size_t i = 0; i < logpb.size(); ++i) w[i] = std::exp(logpb[i]);
        int b = rng.categorical(w);
        typename Env::State parent = env.unapply(s, b);
        int a = env.forward_action_of(parent, b, s);
        std::vector<double> logpf = gfn_detail::forward_log_probs(env, policy, parent);
        rev_back.push_back(b);
        rev_fwd.push_back(a);
        rev_lpb.push_back(logpb[static_cast<size_t>(b)]);
        rev_lpf.push_back(logpf[static_cast<size_t>(a)]);
        rev_states.push_back(parent);
        s = std::move(parent);
    }
    if (env.key(s) != env.key(env.initial()))
        throw std::runtime_error("sample_backward_trajectory: walk did not reach s0");
    Trajectory<typename Env::State> traj;
    traj.states.assign(rev_states.rbegin(), rev_states.rend());
    traj.actions.assign(rev_fwd.rbegin(), rev_fwd.rend());
    traj.back_actions.assign(rev_back.rbegin(), rev_back.rend());
    traj.log_pf.assign(rev_lpf.rbegin(), rev_lpf.rend());
    traj.log_pb.assign(rev_lpb.rbegin(), rev_lpb.rend());
    traj.log_reward = env.log_reward(z);
    return traj;
}

// Trajectory balance residual squared:
// (log Z + sum log P_F - log R(z) - sum log P_B)^2, differentiable w.r.t.
// the policy parameters and log Z.
template <class Env, class Policy>
Var tb_loss(Tape& t, const Env& env, Policy& policy,
            const Trajectory<typename Env::State>& traj) {
    if (!std::isfinite(traj.log_reward))
        throw std::runtime_error("tb_loss: zero reward at terminal state");
    Var acc = policy.log_z(t, env);
    for (size_t i = 0; i < traj.length(); ++i) {
        Var lpf = t.log_softmax(policy.forward_logits(t, env, traj.states[i]));
        acc = t.add(acc, t.pick(lpf, traj.actions[i]));
        Var lpb = t.log_softmax(policy.backward_logits(t, env, traj.states[i + 1]));
        acc = t.sub(acc, t.pick(lpb, traj.back_actions[i]));
    }
    acc = t.add_const(acc, -traj.log_reward);
    return t.square(acc);
}

struct SubTbOptions {
    bool forward_looking = false;
    // identify F(s_0) with the log-partition head instead of the flow head
    bool bind_initial_to_z = false;
};

// Mean squared sub-trajectory residual over all (n+1 choose 2) spans.
// Flows at terminals are pinned to the reward. With forward_looking, the
// flow is parametrized as log F(s) = log Rt(s) + g(s) where Rt is the
// environment's accumulated partial reward.
template <class Env, class Policy>
Var subtb_loss(Tape& t, const Env& env, Policy& policy,
               const Trajectory<typename Env::State>& traj, const SubTbOptions& opt = {}) {
    const size_t n = traj.length();
    if (opt.forward_looking && !env.has_partial_reward())
        throw std::runtime_error("subtb_loss: forward-looking needs partial rewards");

    std::vector<Var> log_flow(n + 1);
    for (size_t i = 0; i <= n; ++i) {
        if (i == n) {
            if (!std::isfinite(traj.log_reward))
                throw std::runtime_error("subtb_loss: zero reward at terminal state");
            log_flow[i] = t.scalar(traj.log_reward);
        } else if (i == 0 && opt.bind_initial_to_z) {
            log_flow[i] = policy.log_z(t, env);
        } else {
            Var g = policy.log_flow_head(t, env, traj.states[i]);
            log_flow[i] =
                opt.forward_looking ? t.add_const(g, env.partial_log_reward(traj.states[i])) : g;
        }
    }

    // prefix sums of step log-probs
    std::vector<Var> pf(n + 1), pb(n + 1);
    pf[0] = t.scalar(0.0);
    pb[0] = t.scalar(0.0);
    for (size_t i = 0; i < n; ++i) {
        Var lpf = t.log_softmax(policy.forward_logits(t, env, traj.states[i]));
        pf[i + 1] = t.add(pf[i], t.pick(lpf, traj.actions[i]));
        Var lpb = t.log_softmax(policy.backward_logits(t, env, traj.states[i + 1]));
        pb[i + 1] = t.add(pb[i], t.pick(lpb, traj.back_actions[i]));
    }

    std::vector<Var> residuals;
    residuals.reserve((n + 1) * n / 2);
    for (size_t i = 0; i <= n; ++i)
        for (size_t j = i + 1; j <= n; ++j) {
            Var r = t.add(log_flow[i], t.sub(pf[j], pf[i]));
            r = t.sub(r, t.add(log_flow[j], t.sub(pb[j], pb[i])));
            residuals.push_back(t.square(r));
        }
    return t.mean(t.concat(residuals));
}

// Sleep-phase objective: hallucinate (z, x) from the generative model,
// sample a trajectory to z from P_B, and return -log P_F(tau | x). Only
// P_F terms appear on the tape, so the gradient leaves P_B fixed.
// gen_sample must produce a (z, x) pair; env_builder binds x.
template <class Env, class Policy, class GenSample, class EnvBuilder>
Var sleep_loss(Tape& t, Policy& policy, GenSample&& gen_sample, EnvBuilder&& env_builder,
               Rng& rng) {
    auto [z, x] = gen_sample(rng);
    Env env = env_builder(x);
    if (!env.is_terminal(z))
        throw std::runtime_error("sleep_loss: generative sample is not terminal in the env");
    Trajectory<typename Env::State> traj = sample_backward_trajectory(env, policy, z, rng);
    std::vector<Var> terms;
    terms.reserve(traj.length());
    for (size_t i = 0; i < traj.length(); ++i) {
        Var lpf = t.log_softmax(policy.forward_logits(t, env, traj.states[i]));
        terms.push_back(t.pick(lpf, traj.actions[i]));
    }
    return t.scale(t.sum(t.concat(terms)), -1.0);
}

// Metropolis-corrected back-and-forth refinement: each proposal retreats up
// to `depth` steps along P_B and advances the same number along P_F. The
// acceptance ratio compares R and the two path likelihoods both ways, so the
// chain leaves the reward-proportional distribution invariant. Rejected
// proposals keep the current state.
template <class Env, class Policy>
typename Env::State mcmc_refine(const Env& env, Policy& policy, typename Env::State z, int steps,
                                int depth, Rng& rng) {
    if (depth < 1 && steps > 0) throw std::runtime_error("mcmc_refine: depth must be >= 1");
    for (int k = 0; k < steps; ++k) {
        // retreat
        typename Env::State cur = z;
        double log_q_back = 0.0;  // P_B along the sampled retreat
        double log_r_fwd = 0.0;   // P_F along the same edges, reversed
        int walked = 0;
        while (walked < depth && env.num_backward_actions(cur) > 0) {
            std::vector<double> lpb = gfn_detail::backward_log_probs(env, policy, cur);
            std::vector<double> w(lpb.size());
            for (size_t i = 0; i < lpb.size(); ++i) w[i] = std::exp(lpb[i]);
            int b = rng.categorical(w);
            typename Env::State parent = env.unapply(cur, b);
            int a = env.forward_action_of(parent, b, cur);
            std::vector<double> lpf = gfn_detail::forward_log_probs(env, policy, parent);
            log_q_back += lpb[static_cast<size_t>(b)];
            log_r_fwd += lpf[static_cast<size_t>(a)];
            cur = std::move(parent);
            ++walked;
        }
        // advance the same number of steps
        double log_q_fwd = 0.0;  // P_F along the sampled advance
        double log_r_back = 0.0; // P_B along the same edges, reversed
        for (int m = 0; m < walked; ++m) {
            std::vector<double> lpf = gfn_detail::forward_log_probs(env, policy, cur);
            std::vector<double> w(lpf.size());
            for (size_t i = 0; i < lpf.size(); ++i) w[i] = std::exp(lpf[i]);
            int a = rng.categorical(w);
            typename Env::State next = env.apply(cur, a);
            int b = env.backward_action_of(cur, a, next);
            std::vector<double> lpb = gfn_detail::backward_log_probs(env, policy, next);
            log_q_fwd += lpf[static_cast<size_t>(a)];
            log_r_back += lpb[static_cast<size_t>(b)];
            cur = std::move(next);
        }
        double log_alpha = (env.log_reward(cur) + log_r_back + log_r_fwd) -
                           (env.log_reward(z) + log_q_back + log_q_fwd);
        if (std::log(std::max(rng.uniform(), 1e-300)) < log_alpha) z = std::move(cur);
    }
    return z;
}

// Exact terminating distribution P_F^T(z|x) by level-wise dynamic
// programming over the (graded) DAG. Test oracle; errors out above `cap`
// visited states.
template <class Env, class Policy>
std::map<std::string, std::pair<typename Env::State, double>> enumerate_terminating_distribution(
    const Env& env, Policy& policy, size_t cap = 2'000'000) {
    using State = typename Env::State;
    std::map<std::string, std::pair<State, double>> result;
    std::map<std::string, std::pair<State, double>> level;
    State s0 = env.initial();
    level.emplace(env.key(s0), std::make_pair(s0, 1.0));
    size_t visited = 0;
    while (!level.empty()) {
        std::map<std::string, std::pair<State, double>> next;
        for (auto& [key, entry] : level) {
            ++visited;
            if (visited > cap)
                throw std::runtime_error("enumerate_terminating_distribution: state cap exceeded");
            auto& [state, mass] = entry;
            if (env.is_terminal(state)) {
                auto [it, fresh] = result.emplace(key, std::make_pair(state, 0.0));
                (void)fresh;
                it->second.second += mass;
                continue;
            }
            std::vector<double> logp = gfn_detail::forward_log_probs(env, policy, state);
            for (int a = 0; a < env.num_forward_actions(state); ++a) {
                State child = env.apply(state, a);
                std::string ck = env.key(child);
                auto [it, fresh] = next.emplace(ck, std::make_pair(child, 0.0));
                (void)fresh;
                it->second.second += mass * std::exp(logp[static_cast<size_t>(a)]);
            }
        }
        level = std::move(next);
    }
    return result;
}

// Reward-proportional target distribution by exhaustive traversal
// (enumeration oracle for tests).
template <class Env>
std::map<std::string, std::pair<typename Env::State, double>> enumerate_reward_distribution(
    const Env& env, size_t cap = 2'000'000) {
    using State = typename Env::State;
    std::map<std::string, std::pair<State, double>> terminals;
    std::map<std::string, State> level;
    State s0 = env.initial();
    level.emplace(env.key(s0), s0);
    size_t visited = 0;
    while (!level.empty()) {
        std::map<std::string, State> next;
        for (auto& [key, state] : level) {
            ++visited;
            if (visited > cap)
                throw std::runtime_error("enumerate_reward_distribution: state cap exceeded");
            if (env.is_terminal(state)) {
                terminals.emplace(key, std::make_pair(state, env.log_reward(state)));
                continue;
            }
            for (int a = 0; a < env.num_forward_actions(state); ++a) {
                State child = env.apply(state, a);
                next.emplace(env.key(child), child);
            }
        }
        level.clear();
        for (auto& [k, s] : next) level.emplace(k, s);
    }
    // normalize rewards
    double m = -std::numeric_limits<double>::infinity();
    for (auto& [k, e] : terminals) m = std::max(m, e.second);
    double total = 0.0;
    for (auto& [k, e] : terminals) total += std::exp(e.second - m);
    std::map<std::string, std::pair<typename Env::State, double>> out;
    for (auto& [k, e] : terminals)
        out.emplace(k, std::make_pair(e.first, std::exp(e.second - m) / total));
    return out;
}

// Score-function estimate of the reverse KL D(q || p(z|x)) over complete
// trajectories, with a batch-mean baseline. Only P_F terms are placed on the
// tape, so stepping the returned surrogate updates the forward policy alone.
// mean_objective receives the Monte-Carlo estimate of
// E[log P_F - log P_B - log R] (the KL up to +log Z).
template <class Env, class Policy>
Var reverse_kl_vi_surrogate(Tape& t, const Env& env, Policy& policy, int batch, Rng& rng,
                            double* mean_objective = nullptr) {
    if (batch < 1) throw std::runtime_error("reverse_kl_vi_surrogate: batch must be >= 1");
    std::vector<Trajectory<typename Env::State>> trajs;
    std::vector<double> w(static_cast<size_t>(batch));
    for (int m = 0; m < batch; ++m) {
        trajs.push_back(sample_forward_trajectory(env, policy, ExplorationConfig{}, rng));
        const auto& traj = trajs.back();
        w[static_cast<size_t>(m)] =
            traj.total_log_pf() - traj.total_log_pb() - traj.log_reward;
    }
    double baseline = 0.0;
    for (double v : w) baseline += v;
    baseline /= static_cast<double>(batch);
    if (mean_objective) *mean_objective = baseline;

    std::vector<Var> terms;
    for (int m = 0; m < batch; ++m) {
        const auto& traj = trajs[static_cast<size_t>(m)];
        std::vector<Var> lps;
        for (size_t i = 0; i < traj.length(); ++i) {
            Var lpf = t.log_softmax(policy.forward_logits(t, env, traj.states[i]));
            lps.push_back(t.pick(lpf, traj.actions[i]));
        }
        Var log_pf_total = t.sum(t.concat(lps));
        terms.push_back(t.scale(log_pf_total, w[static_cast<size_t>(m)] - baseline));
    }
    return t.mean(t.concat(terms));
}

}  // namespace gfnem
