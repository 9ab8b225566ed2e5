#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gfnem/params.hpp"
#include "gfnem/rng.hpp"
#include "gfnem/tape.hpp"

namespace gfnem::grammar {

// Binary-branching grammar over NT (branching) and PT (emitting) symbols
// with a distinguished ROOT that expands into a single NT. Parse trees keep
// only NT labels; PT symbols are marginalized everywhere.
//
// Child symbols share one index space of size S = |NT| + |PT|: indices
// below |NT| are NTs, the rest PTs. A binary rule X -> L R is indexed
// lr = L * S + R.
//
// CFG mode: p(L,R|X) from one logits table. Non-CFG mode: probabilities
// depend on the parent P of X through a normalized product
// p(L,R|X,P) ~ f1(L,R,X) * f2(L,R,P), with P ranging over NT u {ROOT}.

enum class Kind { Cfg, NonCfg };
enum class Parametrization { Table, Neural };

struct Sizes {
    int num_nt = 6;
    int num_pt = 8;
    int vocab = 50;
    int symbols() const { return num_nt + num_pt; }
};

struct ParseTree {
    int label = -1;  // NT id for internal nodes
    int token = -1;  // token id for leaves
    std::vector<ParseTree> kids;

    bool is_leaf() const { return kids.empty(); }
    int leaf_count() const;
    void leaves(std::vector<int>& out) const;
    std::vector<int> leaves() const {
        std::vector<int> out;
        leaves(out);
        return out;
    }
    bool operator==(const ParseTree& o) const;

    static ParseTree leaf(int token) {
        ParseTree t;
        t.token = token;
        return t;
    }
    static ParseTree node(int label, ParseTree left, ParseTree right) {
        ParseTree t;
        t.label = label;
        t.kids.push_back(std::move(left));
        t.kids.push_back(std::move(right));
        return t;
    }
};

// normalized log-probability snapshot of the grammar parameters
struct Tables {
    Sizes sizes;
    Kind kind = Kind::Cfg;
    std::vector<double> root_lp;   // [NT]
    std::vector<double> rule_lp;   // CFG: [NT][S^2]
    std::vector<double> rule_pc;   // non-CFG: [NT][NT+1][S^2], parent-major inner
    std::vector<double> emit_lp;   // [PT][V]
    uint64_t version = 0;

    double rule(int x, int l, int r) const {
        int s = sizes.symbols();
        return rule_lp[static_cast<size_t>(x) * s * s + static_cast<size_t>(l * s + r)];
    }
    double rule_parent(int x, int parent, int l, int r) const {
        int s = sizes.symbols();
        return rule_pc[(static_cast<size_t>(x) * (sizes.num_nt + 1) +
                        static_cast<size_t>(parent)) * s * s +
                       static_cast<size_t>(l * s + r)];
    }
    double emit(int pt, int token) const {
        return emit_lp[static_cast<size_t>(pt) * sizes.vocab + static_cast<size_t>(token)];
    }
};

class Grammar {
public:
    Grammar(Sizes sizes, Kind kind, Parametrization param, Rng& rng, double init_std = 0.3,
            int neural_embed = 32, int neural_hidden = 64);

    const Sizes& sizes() const { return sizes_; }
    Kind kind() const { return kind_; }
    Parametrization parametrization() const { return param_; }
    int root_parent_index() const { return sizes_.num_nt; }  // f2 parent axis

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // normalized log-prob snapshot, rebuilt lazily after optimizer steps
    const Tables& tables() const;

    // differentiable rows
    Var root_ls(Tape& t) const;                       // [NT]
    Var rule_ls_row(Tape& t, int x) const;            // CFG [S^2]
    Var rule_pc_ls_row(Tape& t, int x, int p) const;  // non-CFG [S^2]
    Var emit_ls(Tape& t) const;                       // [PT, V]

private:
    Var rule_logits_row(Tape& t, int x) const;
    Sizes sizes_;
    Kind kind_;
    Parametrization param_;
    ParamStore store_;
    mutable Tables cache_;
    mutable bool cache_valid_ = false;
};

// ---- corpus ----------------------------------------------------------------

struct Corpus {
    std::vector<std::vector<int>> sentences;
    std::vector<ParseTree> gold_trees;  // NT labels, PT layer dropped
};

// ancestral samples; sentences longer than max_len are rejected and retried
// up to `retries` times each
Corpus sample_corpus(const Grammar& g, int n_sentences, int max_len, Rng& rng,
                     int retries = 1000);

void save_corpus(const std::string& dir, const Corpus& corpus, const Sizes& sizes);
Corpus load_corpus(const std::string& dir);
std::string tree_to_sexpr(const ParseTree& t);
ParseTree tree_from_sexpr(const std::string& s);

// ---- inference --------------------------------------------------------------

// inside chart in log domain; entry (i, j, sym) with sym over NT u PT
struct InsideChart {
    int n = 0;
    int s = 0;
    std::vector<double> v;
    double& at(int i, int j, int sym) {
        return v[(static_cast<size_t>(i) * n + static_cast<size_t>(j)) * s +
                 static_cast<size_t>(sym)];
    }
    double at(int i, int j, int sym) const {
        return v[(static_cast<size_t>(i) * n + static_cast<size_t>(j)) * s +
                 static_cast<size_t>(sym)];
    }
};

InsideChart inside_chart(const Grammar& g, const std::vector<int>& sentence);

// log p(x) by the inside algorithm; CFG only
double inside_log_marginal(const Grammar& g, const std::vector<int>& sentence);

// batched inside marginals; OpenMP kernel plus serial reference
std::vector<double> corpus_inside_marginals(const Grammar& g,
                                            const std::vector<std::vector<int>>& sentences);
std::vector<double> corpus_inside_marginals_serial(const Grammar& g,
                                                   const std::vector<std::vector<int>>& sentences);

// differentiable -log p(x); CFG only (used by the marginalization baseline)
Var inside_log_marginal_var(Tape& t, const Grammar& g, const std::vector<int>& sentence);

// exact posterior sample over PT-marginalized trees (CFG only)
ParseTree sample_posterior_tree(const Grammar& g, const std::vector<int>& sentence, Rng& rng);

// Viterbi-style argmax tree under the grammar (CFG only; PT choices
// maximized out at the leaves)
ParseTree map_tree(const Grammar& g, const std::vector<int>& sentence);

// log p(z, x) with PT symbols marginalized node by node
double tree_joint_logprob(const Tables& tables, const ParseTree& tree,
                          const std::vector<int>& sentence);
double tree_joint_logprob(const Grammar& g, const ParseTree& tree,
                          const std::vector<int>& sentence);
Var tree_joint_logprob_var(Tape& t, const Grammar& g, const ParseTree& tree,
                           const std::vector<int>& sentence);

// all labeled PT-marginalized trees over the sentence (enumeration oracle)
std::vector<ParseTree> enumerate_trees(const Sizes& sizes, int n_leaves,
                                       const std::vector<int>& sentence);
// brute-force log p(x) via tree enumeration; works for both grammar kinds
double enumerated_log_marginal(const Grammar& g, const std::vector<int>& sentence,
                               int max_len = 7);

// ---- metrics & MCMC ----------------------------------------------------------

struct F1Score {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// sentence-level span F1; whole-sentence and width-1 spans excluded;
// both sets empty -> 1, exactly one empty -> 0
F1Score span_f1(const ParseTree& predicted, const ParseTree& gold);

// Metropolis chain over trees targeting p(z|x): proposals mix uniform random
// rotations and single-node relabelings (50/50)
ParseTree mcem_step(ParseTree tree, const Grammar& g, const std::vector<int>& sentence,
                    int steps, Rng& rng);

// random binary tree over the sentence with random labels (MC-EM init)
ParseTree random_tree(const Sizes& sizes, const std::vector<int>& sentence, Rng& rng);

// in-place rotation helpers (exposed for tests)
// rotate_a: (A, (B, C)) -> ((A, B), C); rotate_b is the inverse
bool rotate_at(ParseTree& tree, int node_index, bool dir_a);
int count_internal(const ParseTree& tree);

// ---- ground-truth generators --------------------------------------------------

// random CFG whose sampled sentences stay short: NT children are chosen
// with probability ~nt_mass per slot
Grammar make_random_cfg(Sizes sizes, double nt_mass, Rng& rng);
// CFG whose samples are strongly right-branching chains
Grammar make_right_branching_cfg(Sizes sizes, Rng& rng);
// non-CFG with strong parent dependence (f2 dominates)
Grammar make_parent_dependent_grammar(Sizes sizes, Rng& rng);

}  // namespace gfnem::grammar
