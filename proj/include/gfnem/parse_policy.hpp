#pragma once

#include "gfnem/parse_env.hpp"

namespace gfnem::grammar {

// Policy network over forest states. Fragment roots get embeddings by
// recursive aggregation (token embeddings at leaves, a tanh MLP combining
// symbol and child embeddings at internal nodes); a small self-attention
// stack contextualizes the ordered roots so every output position sees the
// whole forest. Heads: per adjacent pair -> |NT| join scores (pair-major),
// per internal root -> split score, per root -> flow contribution
// (sum-pooled), and a separate linear partition head on the initial state.
class ParsePolicy {
public:
    struct Config {
        int embed = 48;
        int hidden = 64;
        int layers = 2;
        int max_positions = 48;
    };

    ParsePolicy(const Sizes& sizes, const Config& cfg, Rng& rng);

    Var forward_logits(Tape& t, const ParseEnv& env, const ForestState& s);
    Var backward_logits(Tape& t, const ParseEnv& env, const ForestState& s);
    Var log_flow_head(Tape& t, const ParseEnv& env, const ForestState& s);
    Var log_z(Tape& t, const ParseEnv& env);
    ParamStore& params() { return store_; }
    const Config& config() const { return cfg_; }

private:
    Var embed_fragment(Tape& t, const ParseTree& frag);
    Var encode_roots(Tape& t, const ForestState& s);  // [m, embed]

    Sizes sizes_;
    Config cfg_;
    ParamStore store_;
};

}  // namespace gfnem::grammar
