#include "gfnem/parse_policy.hpp"

#include <cmath>

#include "gfnem/mlp.hpp"

namespace gfnem::grammar {

ParsePolicy::ParsePolicy(const Sizes& sizes, const Config& cfg, Rng& rng)
    : sizes_(sizes), cfg_(cfg) {
    const int64_t d = cfg.embed;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    store_.add_gaussian("parse.tok", {sizes.vocab, d}, sd, rng);
    store_.add_gaussian("parse.sym", {sizes.num_nt, d}, sd, rng);
    store_.add_gaussian("parse.pos", {cfg.max_positions, d}, 0.5 * sd, rng);
    add_mlp(store_, "parse.agg", 3 * d, cfg.hidden, d, rng);
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = "parse.ctx" + std::to_string(l);
        store_.add_gaussian(p + ".wq", {d, d}, sd, rng);
        store_.add_gaussian(p + ".wk", {d, d}, sd, rng);
        store_.add_gaussian(p + ".wv", {d, d}, sd, rng);
        store_.add_gaussian(p + ".wo", {d, d}, 0.3 * sd, rng);
        add_mlp(store_, p + ".ffn", d, cfg.hidden, d, rng);
    }
    add_mlp(store_, "parse.fwd", 2 * d, cfg.hidden, sizes.num_nt, rng);
    add_mlp(store_, "parse.bwd", d, cfg.hidden, 1, rng);
    add_mlp(store_, "parse.flow", d, cfg.hidden, 1, rng);
    store_.add_gaussian("parse.z.w", {d, 1}, sd, rng);
    store_.add("parse.z.b", Tensor({1}));
}

Var ParsePolicy::embed_fragment(Tape& t, const ParseTree& frag) {
    if (frag.is_leaf()) return t.row(t.param(store_, "parse.tok"), frag.token);
    Var l = embed_fragment(t, frag.kids[0]);
    Var r = embed_fragment(t, frag.kids[1]);
    Var sym = t.row(t.param(store_, "parse.sym"), frag.label);
    return mlp_apply(t, store_, "parse.agg", t.concat({sym, l, r}));
}

Var ParsePolicy::encode_roots(Tape& t, const ForestState& s) {
    const int m = static_cast<int>(s.frags.size());
    if (m > cfg_.max_positions)
        throw std::runtime_error("parse policy: sentence exceeds max_positions");
    std::vector<Var> rows;
    rows.reserve(static_cast<size_t>(m));
    for (const auto& frag : s.frags) rows.push_back(embed_fragment(t, frag));
    Var h = t.stack_rows(rows);  // [m, d]
    // positional rows 0..m-1
    std::vector<int64_t> pos_idx(static_cast<size_t>(m) * cfg_.embed);
    for (int i = 0; i < m; ++i)
        for (int c = 0; c < cfg_.embed; ++c)
            pos_idx[static_cast<size_t>(i) * cfg_.embed + static_cast<size_t>(c)] =
                static_cast<int64_t>(i) * cfg_.embed + c;
    Var pos = t.reshape(t.gather(t.param(store_, "parse.pos"), pos_idx), {m, cfg_.embed});
    h = t.add(h, pos);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.embed));
    for (int l = 0; l < cfg_.layers; ++l) {
        std::string p = "parse.ctx" + std::to_string(l);
        Var q = t.matmul(h, t.param(store_, p + ".wq"));
        Var k = t.matmul(h, t.param(store_, p + ".wk"));
        Var v = t.matmul(h, t.param(store_, p + ".wv"));
        Var scores = t.scale(t.matmul_nt(q, k), inv_sqrt_d);  // [m, m]
        Var attn = t.exp(t.log_softmax(scores));
        Var mixed = t.matmul(attn, v);
        h = t.add(h, t.matmul(mixed, t.param(store_, p + ".wo")));
        h = t.add(h, mlp_apply(t, store_, p + ".ffn", h));
    }
    return h;
}

Var ParsePolicy::forward_logits(Tape& t, const ParseEnv& env, const ForestState& s) {
    (void)env;
    const int m = static_cast<int>(s.frags.size());
    if (m < 2) throw std::runtime_error("parse policy: no forward actions on a terminal state");
    Var h = encode_roots(t, s);
    std::vector<Var> pair_rows;
    pair_rows.reserve(static_cast<size_t>(m - 1));
    for (int i = 0; i + 1 < m; ++i)
        pair_rows.push_back(t.concat({t.row(h, i), t.row(h, i + 1)}));
    Var pairs = t.stack_rows(pair_rows);                     // [m-1, 2d]
    Var scores = mlp_apply(t, store_, "parse.fwd", pairs);   // [m-1, NT]
    return t.reshape(scores, {static_cast<int64_t>(m - 1) * sizes_.num_nt});
}

Var ParsePolicy::backward_logits(Tape& t, const ParseEnv& env, const ForestState& s) {
    (void)env;
    Var h = encode_roots(t, s);
    std::vector<Var> rows;
    for (size_t i = 0; i < s.frags.size(); ++i)
        if (!s.frags[i].is_leaf()) rows.push_back(t.row(h, static_cast<int>(i)));
    if (rows.empty())
        throw std::runtime_error("parse policy: no backward actions at the initial state");
    Var scores = mlp_apply(t, store_, "parse.bwd", t.stack_rows(rows));  // [k, 1]
    return t.reshape(scores, {static_cast<int64_t>(rows.size())});
}

Var ParsePolicy::log_flow_head(Tape& t, const ParseEnv& env, const ForestState& s) {
    (void)env;
    Var h = encode_roots(t, s);
    Var per_root = mlp_apply(t, store_, "parse.flow", h);  // [m, 1]
    return t.sum(per_root);
}

Var ParsePolicy::log_z(Tape& t, const ParseEnv& env) {
    Var h = encode_roots(t, env.initial());
    Var pooled = t.sum(t.matmul(h, t.param(store_, "parse.z.w")));
    return t.add(pooled, t.reshape(t.param(store_, "parse.z.b"), {}));
}

}  // namespace gfnem::grammar
