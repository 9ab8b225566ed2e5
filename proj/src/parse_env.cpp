#include "gfnem/parse_env.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "gfnem/gflownet.hpp"

namespace gfnem::grammar {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse(const std::vector<double>& x) {
    double m = kNegInf;
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

// PT-marginalized contribution of one internal node (values path)
double node_term(const Tables& tb, int x, int parent, const ParseTree& left,
                 const ParseTree& right) {
    const int nt = tb.sizes.num_nt;
    const bool ncfg = tb.kind == Kind::NonCfg;
    auto rule = [&](int l, int r) {
        return ncfg ? tb.rule_parent(x, parent, l, r) : tb.rule(x, l, r);
    };
    if (!left.is_leaf() && !right.is_leaf()) return rule(left.label, right.label);
    std::vector<double> cand;
    if (left.is_leaf() && !right.is_leaf()) {
        for (int p = 0; p < tb.sizes.num_pt; ++p)
            cand.push_back(rule(nt + p, right.label) + tb.emit(p, left.token));
    } else if (!left.is_leaf() && right.is_leaf()) {
        for (int q = 0; q < tb.sizes.num_pt; ++q)
            cand.push_back(rule(left.label, nt + q) + tb.emit(q, right.token));
    } else {
        for (int p = 0; p < tb.sizes.num_pt; ++p)
            for (int q = 0; q < tb.sizes.num_pt; ++q)
                cand.push_back(rule(nt + p, nt + q) + tb.emit(p, left.token) +
                               tb.emit(q, right.token));
    }
    return lse(cand);
}

// sum of node terms inside a fragment, CFG crediting (every internal node)
double fragment_terms_cfg(const Tables& tb, const ParseTree& node) {
    if (node.is_leaf()) return 0.0;
    double total = node_term(tb, node.label, /*parent unused*/ 0, node.kids[0], node.kids[1]);
    for (const ParseTree& kid : node.kids) total += fragment_terms_cfg(tb, kid);
    return total;
}

// non-CFG crediting: a node's term is counted once its parent exists, so
// fragment roots contribute their descendants' terms but not their own
double fragment_terms_ncfg_below(const Tables& tb, const ParseTree& node) {
    if (node.is_leaf()) return 0.0;
    double total = 0.0;
    for (const ParseTree& kid : node.kids) {
        if (kid.is_leaf()) continue;
        total += node_term(tb, kid.label, node.label, kid.kids[0], kid.kids[1]);
        total += fragment_terms_ncfg_below(tb, kid);
    }
    return total;
}

}  // namespace

ParseEnv::State ParseEnv::apply(const State& s, int action) const {
    const int nt = grammar_->sizes().num_nt;
    int pair = action / nt;
    int label = action % nt;
    if (pair < 0 || pair + 1 >= static_cast<int>(s.frags.size()))
        throw std::runtime_error("parse env: forward action out of range");
    State out = s;
    ParseTree joined = ParseTree::node(label, std::move(out.frags[static_cast<size_t>(pair)]),
                                       std::move(out.frags[static_cast<size_t>(pair + 1)]));
    out.frags[static_cast<size_t>(pair)] = std::move(joined);
    out.frags.erase(out.frags.begin() + pair + 1);
    return out;
}

int ParseEnv::num_backward_actions(const State& s) const {
    int count = 0;
    for (const auto& f : s.frags)
        if (!f.is_leaf()) ++count;
    return count;
}

int ParseEnv::internal_root_position(const State& s, int back_action) const {
    int seen = 0;
    for (size_t p = 0; p < s.frags.size(); ++p) {
        if (s.frags[p].is_leaf()) continue;
        if (seen == back_action) return static_cast<int>(p);
        ++seen;
    }
    throw std::runtime_error("parse env: backward action out of range");
}

ParseEnv::State ParseEnv::unapply(const State& s, int back_action) const {
    int p = internal_root_position(s, back_action);
    State out = s;
    ParseTree node = std::move(out.frags[static_cast<size_t>(p)]);
    out.frags[static_cast<size_t>(p)] = std::move(node.kids[0]);
    out.frags.insert(out.frags.begin() + p + 1, std::move(node.kids[1]));
    return out;
}

int ParseEnv::backward_action_of(const State& /*from*/, int action, const State& to) const {
    const int nt = grammar_->sizes().num_nt;
    int pair = action / nt;
    // index of position `pair` among the internal roots of `to`
    int idx = 0;
    for (int p = 0; p < pair; ++p)
        if (!to.frags[static_cast<size_t>(p)].is_leaf()) ++idx;
    return idx;
}

int ParseEnv::forward_action_of(const State& /*parent*/, int back_action,
                                const State& child) const {
    int p = internal_root_position(child, back_action);
    int label = child.frags[static_cast<size_t>(p)].label;
    return p * grammar_->sizes().num_nt + label;
}

double ParseEnv::log_reward(const State& s) const {
    if (!is_terminal(s)) throw std::runtime_error("parse env: log_reward on nonterminal state");
    double joint = tree_joint_logprob(grammar_->tables(), s.frags[0], sentence_);
    if (prior_) joint += prior_->tempered_logweight(shape_of(s.frags[0]), prior_temp_);
    return joint;
}

double ParseEnv::partial_log_reward(const State& s) const {
    const Tables& tb = grammar_->tables();
    double total = 0.0;
    if (tb.kind == Kind::Cfg) {
        for (const auto& f : s.frags) total += fragment_terms_cfg(tb, f);
        if (is_terminal(s)) total += tb.root_lp[static_cast<size_t>(s.frags[0].label)];
    } else {
        for (const auto& f : s.frags) total += fragment_terms_ncfg_below(tb, f);
        if (is_terminal(s)) {
            const ParseTree& top = s.frags[0];
            total += node_term(tb, top.label, grammar_->root_parent_index(), top.kids[0],
                               top.kids[1]);
            total += tb.root_lp[static_cast<size_t>(top.label)];
        }
    }
    if (prior_ && is_terminal(s))
        total += prior_->tempered_logweight(shape_of(s.frags[0]), prior_temp_);
    return total;
}

std::string ParseEnv::key(const State& s) const {
    std::ostringstream out;
    std::function<void(const ParseTree&)> emit = [&](const ParseTree& t) {
        if (t.is_leaf()) {
            out << 'l' << t.token;
            return;
        }
        out << '(' << t.label;
        emit(t.kids[0]);
        out << ',';
        emit(t.kids[1]);
        out << ')';
    };
    for (size_t i = 0; i < s.frags.size(); ++i) {
        if (i) out << '|';
        emit(s.frags[i]);
    }
    return out.str();
}

}  // namespace gfnem::grammar
