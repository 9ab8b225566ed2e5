#include "gfnem/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "gfnem/mlp.hpp"
#include "gfnem/parallel.hpp"

namespace gfnem::grammar {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse(const double* x, size_t n) {
    double m = kNegInf;
    for (size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
    return m + std::log(s);
}

double lse(const std::vector<double>& x) { return lse(x.data(), x.size()); }

// sample an index from log-weights
int sample_log(const std::vector<double>& lw, Rng& rng) {
    double m = kNegInf;
    for (double v : lw) m = std::max(m, v);
    std::vector<double> w(lw.size());
    for (size_t i = 0; i < lw.size(); ++i) w[i] = std::exp(lw[i] - m);
    return rng.categorical(w);
}

}  // namespace

// ---- ParseTree ---------------------------------------------------------------

int ParseTree::leaf_count() const {
    if (is_leaf()) return 1;
    return kids[0].leaf_count() + kids[1].leaf_count();
}

void ParseTree::leaves(std::vector<int>& out) const {
    if (is_leaf()) {
        out.push_back(token);
        return;
    }
    kids[0].leaves(out);
    kids[1].leaves(out);
}

bool ParseTree::operator==(const ParseTree& o) const {
    if (label != o.label || token != o.token || kids.size() != o.kids.size()) return false;
    for (size_t i = 0; i < kids.size(); ++i)
        if (!(kids[i] == o.kids[i])) return false;
    return true;
}

// ---- Grammar ------------------------------------------------------------------

Grammar::Grammar(Sizes sizes, Kind kind, Parametrization param, Rng& rng, double init_std,
                 int neural_embed, int neural_hidden)
    : sizes_(sizes), kind_(kind), param_(param) {
    const int64_t s2 = static_cast<int64_t>(sizes.symbols()) * sizes.symbols();
    if (param_ == Parametrization::Table) {
        store_.add_gaussian("grammar.root", {sizes.num_nt}, init_std, rng);
        if (kind_ == Kind::Cfg) {
            store_.add_gaussian("grammar.rules", {sizes.num_nt, s2}, init_std, rng);
        } else {
            store_.add_gaussian("grammar.f1", {sizes.num_nt, s2}, init_std, rng);
            store_.add_gaussian("grammar.f2", {sizes.num_nt + 1, s2}, init_std, rng);
        }
        store_.add_gaussian("grammar.emit", {sizes.num_pt, sizes.vocab}, init_std, rng);
    } else {
        if (kind_ != Kind::Cfg)
            throw std::runtime_error("grammar: neural parametrization supports CFG mode only");
        // one embedding per NT, PT, and ROOT
        store_.add_gaussian("grammar.sym", {sizes.num_nt + sizes.num_pt + 1, neural_embed},
                            1.0 / std::sqrt(static_cast<double>(neural_embed)), rng);
        add_mlp(store_, "grammar.rule_mlp", neural_embed, neural_hidden, s2, rng);
        add_mlp(store_, "grammar.root_mlp", neural_embed, neural_hidden, sizes.num_nt, rng);
        add_mlp(store_, "grammar.emit_mlp", neural_embed, neural_hidden, sizes.vocab, rng);
    }
}

Var Grammar::root_ls(Tape& t) const {
    ParamStore& store = const_cast<ParamStore&>(store_);
    if (param_ == Parametrization::Table)
        return t.log_softmax(t.param(store, "grammar.root"));
    Var emb = t.row(t.param(store, "grammar.sym"), sizes_.num_nt + sizes_.num_pt);
    return t.log_softmax(mlp_apply(t, store, "grammar.root_mlp", emb));
}

Var Grammar::rule_logits_row(Tape& t, int x) const {
    ParamStore& store = const_cast<ParamStore&>(store_);
    if (param_ == Parametrization::Table) return t.row(t.param(store, "grammar.rules"), x);
    Var emb = t.row(t.param(store, "grammar.sym"), x);
    return mlp_apply(t, store, "grammar.rule_mlp", emb);
}

Var Grammar::rule_ls_row(Tape& t, int x) const {
    if (kind_ != Kind::Cfg) throw std::runtime_error("grammar: rule_ls_row needs CFG mode");
    return t.log_softmax(rule_logits_row(t, x));
}

Var Grammar::rule_pc_ls_row(Tape& t, int x, int p) const {
    if (kind_ != Kind::NonCfg)
        throw std::runtime_error("grammar: rule_pc_ls_row needs non-CFG mode");
    ParamStore& store = const_cast<ParamStore&>(store_);
    Var v = t.add(t.row(t.param(store, "grammar.f1"), x), t.row(t.param(store, "grammar.f2"), p));
    return t.log_softmax(v);
}

Var Grammar::emit_ls(Tape& t) const {
    ParamStore& store = const_cast<ParamStore&>(store_);
    if (param_ == Parametrization::Table)
        return t.log_softmax(t.param(store, "grammar.emit"));
    std::vector<Var> rows;
    for (int p = 0; p < sizes_.num_pt; ++p) {
        Var emb = t.row(t.param(store, "grammar.sym"), sizes_.num_nt + p);
        rows.push_back(mlp_apply(t, store, "grammar.emit_mlp", emb));
    }
    return t.log_softmax(t.stack_rows(rows));
}

const Tables& Grammar::tables() const {
    if (cache_valid_ && cache_.version == store_.version()) return cache_;
    Tables tb;
    tb.sizes = sizes_;
    tb.kind = kind_;
    tb.version = store_.version();
    const int s = sizes_.symbols();
    const size_t s2 = static_cast<size_t>(s) * s;
    Tape t;
    {
        auto v = root_ls(t).values();
        tb.root_lp.assign(v.begin(), v.end());
    }
    {
        auto v = emit_ls(t).values();
        tb.emit_lp.assign(v.begin(), v.end());
    }
    if (kind_ == Kind::Cfg) {
        tb.rule_lp.resize(static_cast<size_t>(sizes_.num_nt) * s2);
        for (int x = 0; x < sizes_.num_nt; ++x) {
            auto v = rule_ls_row(t, x).values();
            std::copy(v.begin(), v.end(), tb.rule_lp.begin() + static_cast<int64_t>(x) * s2);
        }
    } else {
        tb.rule_pc.resize(static_cast<size_t>(sizes_.num_nt) * (sizes_.num_nt + 1) * s2);
        for (int x = 0; x < sizes_.num_nt; ++x)
            for (int p = 0; p <= sizes_.num_nt; ++p) {
                auto v = rule_pc_ls_row(t, x, p).values();
                std::copy(v.begin(), v.end(),
                          tb.rule_pc.begin() +
                              (static_cast<int64_t>(x) * (sizes_.num_nt + 1) + p) * s2);
            }
    }
    cache_ = std::move(tb);
    cache_valid_ = true;
    return cache_;
}

// ---- corpus sampling -----------------------------------------------------------

namespace {

// expands symbol X (NT) under `parent`; returns false when the leaf or
// node budget is exhausted (the node budget also bounds recursion depth)
bool expand(const Tables& tb, int x, int parent, int max_leaves, int* leaves, int* nodes,
            ParseTree* out, Rng& rng) {
    if (++*nodes > 8 * max_leaves) return false;
    const int s = tb.sizes.symbols();
    const int nt = tb.sizes.num_nt;
    std::vector<double> lw(static_cast<size_t>(s) * s);
    for (int l = 0; l < s; ++l)
        for (int r = 0; r < s; ++r)
            lw[static_cast<size_t>(l * s + r)] = tb.kind == Kind::Cfg
                                                     ? tb.rule(x, l, r)
                                                     : tb.rule_parent(x, parent, l, r);
    int lr = sample_log(lw, rng);
    int l = lr / s, r = lr % s;
    out->label = x;
    out->kids.resize(2);
    for (int c = 0; c < 2; ++c) {
        int sym = c == 0 ? l : r;
        ParseTree& kid = out->kids[static_cast<size_t>(c)];
        if (sym < nt) {
            if (!expand(tb, sym, x, max_leaves, leaves, nodes, &kid, rng)) return false;
        } else {
            int pt = sym - nt;
            std::vector<double> ew(static_cast<size_t>(tb.sizes.vocab));
            for (int v = 0; v < tb.sizes.vocab; ++v) ew[static_cast<size_t>(v)] = tb.emit(pt, v);
            kid.token = sample_log(ew, rng);
            if (++*leaves > max_leaves) return false;
        }
    }
    return true;
}

}  // namespace

Corpus sample_corpus(const Grammar& g, int n_sentences, int max_len, Rng& rng, int retries) {
    const Tables& tb = g.tables();
    Corpus corpus;
    for (int i = 0; i < n_sentences; ++i) {
        bool ok = false;
        for (int attempt = 0; attempt < retries; ++attempt) {
            std::vector<double> rw = tb.root_lp;
            int a = sample_log(rw, rng);
            ParseTree tree;
            int leaves = 0;
            int nodes = 0;
            if (!expand(tb, a, g.root_parent_index(), max_len, &leaves, &nodes, &tree, rng))
                continue;
            if (leaves < 2) continue;  // cannot happen with binary rules; guard anyway
            corpus.gold_trees.push_back(tree);
            corpus.sentences.push_back(tree.leaves());
            ok = true;
            break;
        }
        if (!ok)
            throw std::runtime_error(
                "sample_corpus: retry cap exceeded; the grammar is too expansive for max_len " +
                std::to_string(max_len));
    }
    return corpus;
}

// ---- corpus io ------------------------------------------------------------------

std::string tree_to_sexpr(const ParseTree& t) {
    if (t.is_leaf()) return "t" + std::to_string(t.token);
    return "(X" + std::to_string(t.label) + " " + tree_to_sexpr(t.kids[0]) + " " +
           tree_to_sexpr(t.kids[1]) + ")";
}

namespace {

ParseTree parse_sexpr(const std::string& s, size_t& pos) {
    while (pos < s.size() && s[pos] == ' ') ++pos;
    if (pos >= s.size()) throw std::runtime_error("sexpr: truncated input");
    if (s[pos] == '(') {
        ++pos;
        while (pos < s.size() && s[pos] == ' ') ++pos;
        if (s[pos] != 'X') throw std::runtime_error("sexpr: expected symbol label");
        size_t end = pos + 1;
        while (end < s.size() && isdigit(s[end])) ++end;
        int label = std::stoi(s.substr(pos + 1, end - pos - 1));
        pos = end;
        ParseTree left = parse_sexpr(s, pos);
        ParseTree right = parse_sexpr(s, pos);
        while (pos < s.size() && s[pos] == ' ') ++pos;
        if (pos >= s.size() || s[pos] != ')') throw std::runtime_error("sexpr: missing )");
        ++pos;
        return ParseTree::node(label, std::move(left), std::move(right));
    }
    if (s[pos] != 't') throw std::runtime_error("sexpr: expected token");
    size_t end = pos + 1;
    while (end < s.size() && isdigit(s[end])) ++end;
    int token = std::stoi(s.substr(pos + 1, end - pos - 1));
    pos = end;
    return ParseTree::leaf(token);
}

}  // namespace

ParseTree tree_from_sexpr(const std::string& s) {
    size_t pos = 0;
    ParseTree t = parse_sexpr(s, pos);
    return t;
}

void save_corpus(const std::string& dir, const Corpus& corpus, const Sizes& sizes) {
    std::filesystem::create_directories(dir);
    std::ofstream cf(dir + "/corpus.txt", std::ios::trunc);
    for (const auto& sent : corpus.sentences) {
        for (size_t i = 0; i < sent.size(); ++i)
            cf << (i ? " " : "") << "t" << sent[i];
        cf << "\n";
    }
    std::ofstream vf(dir + "/vocab.txt", std::ios::trunc);
    for (int v = 0; v < sizes.vocab; ++v) vf << "t" << v << " " << v << "\n";
    std::ofstream gf(dir + "/gold.txt", std::ios::trunc);
    for (const auto& tree : corpus.gold_trees) gf << tree_to_sexpr(tree) << "\n";
}

Corpus load_corpus(const std::string& dir) {
    std::ifstream vf(dir + "/vocab.txt");
    if (!vf) throw std::runtime_error("load_corpus: missing vocab file in " + dir);
    std::unordered_map<std::string, int> vocab;
    std::string tok;
    int idx;
    while (vf >> tok >> idx) vocab[tok] = idx;

    Corpus corpus;
    std::ifstream cf(dir + "/corpus.txt");
    if (!cf) throw std::runtime_error("load_corpus: missing corpus file in " + dir);
    std::string line;
    while (std::getline(cf, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<int> sent;
        while (ls >> tok) {
            auto it = vocab.find(tok);
            if (it == vocab.end())
                throw std::runtime_error("load_corpus: token not in vocabulary: " + tok);
            sent.push_back(it->second);
        }
        corpus.sentences.push_back(std::move(sent));
    }
    std::ifstream gf(dir + "/gold.txt");
    if (gf) {
        while (std::getline(gf, line))
            if (!line.empty()) corpus.gold_trees.push_back(tree_from_sexpr(line));
    }
    return corpus;
}

// ---- inside algorithm -------------------------------------------------------------

InsideChart inside_chart(const Grammar& g, const std::vector<int>& sentence) {
    if (g.kind() != Kind::Cfg)
        throw std::runtime_error("inside: marginalization is intractable in non-CFG mode");
    if (sentence.size() < 2) throw std::runtime_error("inside: sentence must have length >= 2");
    const Tables& tb = g.tables();
    const int n = static_cast<int>(sentence.size());
    const int nt = g.sizes().num_nt;
    const int s = g.sizes().symbols();
    for (int tok : sentence)
        if (tok < 0 || tok >= g.sizes().vocab)
            throw std::runtime_error("inside: token out of vocabulary: " + std::to_string(tok));

    InsideChart chart;
    chart.n = n;
    chart.s = s;
    chart.v.assign(static_cast<size_t>(n) * n * s, kNegInf);
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < g.sizes().num_pt; ++p)
            chart.at(i, i, nt + p) = tb.emit(p, sentence[static_cast<size_t>(i)]);

    std::vector<double> cand;
    for (int width = 2; width <= n; ++width)
        for (int i = 0; i + width - 1 < n; ++i) {
            int j = i + width - 1;
            for (int x = 0; x < nt; ++x) {
                cand.clear();
                for (int k = i; k < j; ++k)
                    for (int l = 0; l < s; ++l) {
                        double wl = chart.at(i, k, l);
                        if (wl == kNegInf) continue;
                        for (int r = 0; r < s; ++r) {
                            double wr = chart.at(k + 1, j, r);
                            if (wr == kNegInf) continue;
                            cand.push_back(tb.rule(x, l, r) + wl + wr);
                        }
                    }
                chart.at(i, j, x) = lse(cand);
            }
        }
    return chart;
}

double inside_log_marginal(const Grammar& g, const std::vector<int>& sentence) {
    InsideChart chart = inside_chart(g, sentence);
    const Tables& tb = g.tables();
    std::vector<double> cand(static_cast<size_t>(g.sizes().num_nt));
    for (int a = 0; a < g.sizes().num_nt; ++a)
        cand[static_cast<size_t>(a)] =
            tb.root_lp[static_cast<size_t>(a)] + chart.at(0, chart.n - 1, a);
    return lse(cand);
}

namespace {

template <class Loop>
std::vector<double> corpus_inside_impl(const Grammar& g,
                                       const std::vector<std::vector<int>>& sentences,
                                       Loop&& loop) {
    g.tables();  // build the cache once before fanning out
    std::vector<double> out(sentences.size());
    loop(sentences.size(), [&](size_t i) { out[i] = inside_log_marginal(g, sentences[i]); });
    return out;
}

}  // namespace

std::vector<double> corpus_inside_marginals(const Grammar& g,
                                            const std::vector<std::vector<int>>& sentences) {
    return corpus_inside_impl(g, sentences, [](size_t n, auto&& fn) { parallel_for(n, fn); });
}

std::vector<double> corpus_inside_marginals_serial(
    const Grammar& g, const std::vector<std::vector<int>>& sentences) {
    return corpus_inside_impl(g, sentences,
                              [](size_t n, auto&& fn) { parallel_for_serial(n, fn); });
}

Var inside_log_marginal_var(Tape& t, const Grammar& g, const std::vector<int>& sentence) {
    if (g.kind() != Kind::Cfg)
        throw std::runtime_error("inside: marginalization is intractable in non-CFG mode");
    if (sentence.size() < 2) throw std::runtime_error("inside: sentence must have length >= 2");
    const int n = static_cast<int>(sentence.size());
    const int nt = g.sizes().num_nt;
    const int pt = g.sizes().num_pt;
    const int s = g.sizes().symbols();
    const int v = g.sizes().vocab;

    Var emit = g.emit_ls(t);
    std::vector<Var> rule_rows(static_cast<size_t>(nt));
    for (int x = 0; x < nt; ++x) rule_rows[static_cast<size_t>(x)] = g.rule_ls_row(t, x);

    // chart[i][j]: Var vector over the symbol space; invalid entries -inf
    std::vector<std::vector<Var>> chart(static_cast<size_t>(n), std::vector<Var>(static_cast<size_t>(n)));
    Tensor neg_inf_nt({nt});
    for (auto& q : neg_inf_nt.values) q = kNegInf;
    for (int i = 0; i < n; ++i) {
        std::vector<int64_t> idx(static_cast<size_t>(pt));
        for (int p = 0; p < pt; ++p)
            idx[static_cast<size_t>(p)] = static_cast<int64_t>(p) * v + sentence[static_cast<size_t>(i)];
        chart[static_cast<size_t>(i)][static_cast<size_t>(i)] =
            t.concat({t.constant(neg_inf_nt), t.gather(emit, idx)});
    }

    Tensor neg_inf_pt({pt});
    for (auto& q : neg_inf_pt.values) q = kNegInf;
    for (int width = 2; width <= n; ++width)
        for (int i = 0; i + width - 1 < n; ++i) {
            int j = i + width - 1;
            // candidate matrix rows per split: left (+) right outer sums
            std::vector<Var> splits;
            for (int k = i; k < j; ++k) {
                Var outer = t.outer_add(chart[static_cast<size_t>(i)][static_cast<size_t>(k)],
                                        chart[static_cast<size_t>(k + 1)][static_cast<size_t>(j)]);
                splits.push_back(t.reshape(outer, {static_cast<int64_t>(s) * s}));
            }
            Var all = t.concat(splits);  // [(j-i) * s^2]
            std::vector<Var> nts;
            for (int x = 0; x < nt; ++x) {
                // tile the rule row across splits
                std::vector<Var> tiled(static_cast<size_t>(j - i), rule_rows[static_cast<size_t>(x)]);
                Var scores = t.add(all, t.concat(tiled));
                nts.push_back(t.logsumexp(scores));
            }
            nts.push_back(t.constant(neg_inf_pt));
            chart[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.concat(nts);
        }

    std::vector<int64_t> nt_idx(static_cast<size_t>(nt));
    for (int a = 0; a < nt; ++a) nt_idx[static_cast<size_t>(a)] = a;
    Var root_scores = t.add(g.root_ls(t),
                            t.gather(chart[0][static_cast<size_t>(n - 1)], nt_idx));
    return t.logsumexp(root_scores);
}

// ---- posterior sampling -------------------------------------------------------------

namespace {

struct SplitChoice {
    int k, l, r;
};

// draws (k, L, R) for symbol x over span (i, j) from the inside posteriors
SplitChoice sample_split(const Tables& tb, const InsideChart& chart, int x, int i, int j,
                         Rng& rng) {
    const int s = chart.s;
    std::vector<double> lw;
    std::vector<SplitChoice> choices;
    for (int k = i; k < j; ++k)
        for (int l = 0; l < s; ++l) {
            double wl = chart.at(i, k, l);
            if (wl == kNegInf) continue;
            for (int r = 0; r < s; ++r) {
                double wr = chart.at(k + 1, j, r);
                if (wr == kNegInf) continue;
                lw.push_back(tb.rule(x, l, r) + wl + wr);
                choices.push_back({k, l, r});
            }
        }
    return choices[static_cast<size_t>(sample_log(lw, rng))];
}

ParseTree build_sampled(const Tables& tb, const InsideChart& chart,
                        const std::vector<int>& sentence, int x, int i, int j, Rng& rng) {
    const int nt = tb.sizes.num_nt;
    if (i == j) throw std::runtime_error("sample_posterior_tree: NT over a width-1 span");
    SplitChoice c = sample_split(tb, chart, x, i, j, rng);
    ParseTree out;
    out.label = x;
    out.kids.resize(2);
    if (c.l < nt)
        out.kids[0] = build_sampled(tb, chart, sentence, c.l, i, c.k, rng);
    else
        out.kids[0] = ParseTree::leaf(sentence[static_cast<size_t>(i)]);  // width-1 PT
    if (c.r < nt)
        out.kids[1] = build_sampled(tb, chart, sentence, c.r, c.k + 1, j, rng);
    else
        out.kids[1] = ParseTree::leaf(sentence[static_cast<size_t>(c.k + 1)]);
    return out;
}

}  // namespace

ParseTree sample_posterior_tree(const Grammar& g, const std::vector<int>& sentence, Rng& rng) {
    InsideChart chart = inside_chart(g, sentence);
    const Tables& tb = g.tables();
    const int n = chart.n;
    std::vector<double> lw(static_cast<size_t>(g.sizes().num_nt));
    for (int a = 0; a < g.sizes().num_nt; ++a)
        lw[static_cast<size_t>(a)] = tb.root_lp[static_cast<size_t>(a)] + chart.at(0, n - 1, a);
    int a = sample_log(lw, rng);
    return build_sampled(tb, chart, sentence, a, 0, n - 1, rng);
}

namespace {

// max-product chart and backpointers for the MAP tree
struct ViterbiCell {
    double score = kNegInf;
    int k = -1, l = -1, r = -1;
};

}  // namespace

ParseTree map_tree(const Grammar& g, const std::vector<int>& sentence) {
    if (g.kind() != Kind::Cfg) throw std::runtime_error("map_tree: CFG mode only");
    const Tables& tb = g.tables();
    const int n = static_cast<int>(sentence.size());
    const int nt = g.sizes().num_nt;
    const int s = g.sizes().symbols();

    std::vector<ViterbiCell> best(static_cast<size_t>(n) * n * s);
    auto cell = [&](int i, int j, int sym) -> ViterbiCell& {
        return best[(static_cast<size_t>(i) * n + static_cast<size_t>(j)) * s +
                    static_cast<size_t>(sym)];
    };
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < g.sizes().num_pt; ++p)
            cell(i, i, nt + p).score = tb.emit(p, sentence[static_cast<size_t>(i)]);
    for (int width = 2; width <= n; ++width)
        for (int i = 0; i + width - 1 < n; ++i) {
            int j = i + width - 1;
            for (int x = 0; x < nt; ++x) {
                ViterbiCell& c = cell(i, j, x);
                for (int k = i; k < j; ++k)
                    for (int l = 0; l < s; ++l) {
                        double wl = cell(i, k, l).score;
                        if (wl == kNegInf) continue;
                        for (int r = 0; r < s; ++r) {
                            double wr = cell(k + 1, j, r).score;
                            if (wr == kNegInf) continue;
                            double sc = tb.rule(x, l, r) + wl + wr;
                            if (sc > c.score) c = ViterbiCell{sc, k, l, r};
                        }
                    }
            }
        }
    int besta = 0;
    double bests = kNegInf;
    for (int a = 0; a < nt; ++a) {
        double sc = tb.root_lp[static_cast<size_t>(a)] + cell(0, n - 1, a).score;
        if (sc > bests) {
            bests = sc;
            besta = a;
        }
    }
    std::function<ParseTree(int, int, int)> build = [&](int x, int i, int j) {
        const ViterbiCell& c = cell(i, j, x);
        ParseTree out;
        out.label = x;
        out.kids.resize(2);
        out.kids[0] = c.l < nt ? build(c.l, i, c.k)
                               : ParseTree::leaf(sentence[static_cast<size_t>(i)]);
        out.kids[1] = c.r < nt ? build(c.r, c.k + 1, j)
                               : ParseTree::leaf(sentence[static_cast<size_t>(c.k + 1)]);
        return out;
    };
    return build(besta, 0, n - 1);
}

// ---- joint probability ---------------------------------------------------------------

namespace {

// node contribution: logsumexp over PT assignments of the two children
double node_term(const Tables& tb, int x, int parent, const ParseTree& left,
                 const ParseTree& right) {
    const int nt = tb.sizes.num_nt;
    const bool ncfg = tb.kind == Kind::NonCfg;
    auto rule = [&](int l, int r) {
        return ncfg ? tb.rule_parent(x, parent, l, r) : tb.rule(x, l, r);
    };
    std::vector<double> cand;
    if (!left.is_leaf() && !right.is_leaf()) {
        return rule(left.label, right.label);
    } else if (left.is_leaf() && !right.is_leaf()) {
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

double joint_rec(const Tables& tb, const ParseTree& node, int parent) {
    double total = node_term(tb, node.label, parent, node.kids[0], node.kids[1]);
    for (const ParseTree& kid : node.kids)
        if (!kid.is_leaf()) total += joint_rec(tb, kid, node.label);
    return total;
}

}  // namespace

double tree_joint_logprob(const Tables& tb, const ParseTree& tree,
                          const std::vector<int>& sentence) {
    if (tree.is_leaf()) throw std::runtime_error("tree_joint_logprob: tree has no internal node");
    if (tree.leaves() != sentence)
        throw std::runtime_error("tree_joint_logprob: tree leaves do not match the sentence");
    const int root_parent = tb.sizes.num_nt;
    return tb.root_lp[static_cast<size_t>(tree.label)] + joint_rec(tb, tree, root_parent);
}

double tree_joint_logprob(const Grammar& g, const ParseTree& tree,
                          const std::vector<int>& sentence) {
    return tree_joint_logprob(g.tables(), tree, sentence);
}

namespace {

Var node_term_var(Tape& t, const Grammar& g, Var emit, int x, int parent, const ParseTree& left,
                  const ParseTree& right) {
    const int nt = g.sizes().num_nt;
    const int pt = g.sizes().num_pt;
    const int s = g.sizes().symbols();
    const int v = g.sizes().vocab;
    const bool ncfg = g.kind() == Kind::NonCfg;
    Var row = ncfg ? g.rule_pc_ls_row(t, x, parent) : g.rule_ls_row(t, x);

    auto emit_gather = [&](int token) {
        std::vector<int64_t> idx(static_cast<size_t>(pt));
        for (int p = 0; p < pt; ++p) idx[static_cast<size_t>(p)] = static_cast<int64_t>(p) * v + token;
        return t.gather(emit, idx);
    };

    if (!left.is_leaf() && !right.is_leaf())
        return t.pick(row, static_cast<int64_t>(left.label) * s + right.label);
    if (left.is_leaf() && !right.is_leaf()) {
        std::vector<int64_t> idx(static_cast<size_t>(pt));
        for (int p = 0; p < pt; ++p)
            idx[static_cast<size_t>(p)] = static_cast<int64_t>(nt + p) * s + right.label;
        return t.logsumexp(t.add(t.gather(row, idx), emit_gather(left.token)));
    }
    if (!left.is_leaf() && right.is_leaf()) {
        std::vector<int64_t> idx(static_cast<size_t>(pt));
        for (int q = 0; q < pt; ++q)
            idx[static_cast<size_t>(q)] = static_cast<int64_t>(left.label) * s + (nt + q);
        return t.logsumexp(t.add(t.gather(row, idx), emit_gather(right.token)));
    }
    std::vector<int64_t> idx(static_cast<size_t>(pt) * pt);
    for (int p = 0; p < pt; ++p)
        for (int q = 0; q < pt; ++q)
            idx[static_cast<size_t>(p * pt + q)] =
                static_cast<int64_t>(nt + p) * s + (nt + q);
    Var pair_w = t.reshape(t.outer_add(emit_gather(left.token), emit_gather(right.token)),
                           {static_cast<int64_t>(pt) * pt});
    return t.logsumexp(t.add(t.gather(row, idx), pair_w));
}

void joint_rec_var(Tape& t, const Grammar& g, Var emit, const ParseTree& node, int parent,
                   std::vector<Var>& terms) {
    terms.push_back(node_term_var(t, g, emit, node.label, parent, node.kids[0], node.kids[1]));
    for (const ParseTree& kid : node.kids)
        if (!kid.is_leaf()) joint_rec_var(t, g, emit, kid, node.label, terms);
}

}  // namespace

Var tree_joint_logprob_var(Tape& t, const Grammar& g, const ParseTree& tree,
                           const std::vector<int>& sentence) {
    if (tree.is_leaf()) throw std::runtime_error("tree_joint_logprob: tree has no internal node");
    if (tree.leaves() != sentence)
        throw std::runtime_error("tree_joint_logprob: tree leaves do not match the sentence");
    Var emit = g.emit_ls(t);
    std::vector<Var> terms;
    terms.push_back(t.pick(g.root_ls(t), tree.label));
    joint_rec_var(t, g, emit, tree, g.root_parent_index(), terms);
    return t.sum(t.concat(terms));
}

// ---- enumeration oracle ------------------------------------------------------------

namespace {

void enumerate_span(const Sizes& sizes, const std::vector<int>& sentence, int i, int j,
                    std::vector<ParseTree>& out) {
    out.clear();
    if (i == j) {
        out.push_back(ParseTree::leaf(sentence[static_cast<size_t>(i)]));
        return;
    }
    for (int k = i; k < j; ++k) {
        std::vector<ParseTree> lefts, rights;
        enumerate_span(sizes, sentence, i, k, lefts);
        enumerate_span(sizes, sentence, k + 1, j, rights);
        for (const auto& l : lefts)
            for (const auto& r : rights)
                for (int x = 0; x < sizes.num_nt; ++x) out.push_back(ParseTree::node(x, l, r));
    }
}

}  // namespace

std::vector<ParseTree> enumerate_trees(const Sizes& sizes, int n_leaves,
                                       const std::vector<int>& sentence) {
    if (static_cast<int>(sentence.size()) != n_leaves)
        throw std::runtime_error("enumerate_trees: sentence length mismatch");
    std::vector<ParseTree> out;
    enumerate_span(sizes, sentence, 0, n_leaves - 1, out);
    return out;
}

double enumerated_log_marginal(const Grammar& g, const std::vector<int>& sentence, int max_len) {
    if (static_cast<int>(sentence.size()) > max_len)
        throw std::runtime_error("enumerated_log_marginal: sentence too long for enumeration");
    auto trees = enumerate_trees(g.sizes(), static_cast<int>(sentence.size()), sentence);
    const Tables& tb = g.tables();
    std::vector<double> lw(trees.size());
    for (size_t i = 0; i < trees.size(); ++i)
        lw[i] = tree_joint_logprob(tb, trees[i], sentence);
    return lse(lw);
}

// ---- span F1 ------------------------------------------------------------------------

namespace {

void collect_spans(const ParseTree& t, int start, int whole, std::vector<std::pair<int, int>>& out) {
    if (t.is_leaf()) return;
    int left_width = t.kids[0].leaf_count();
    int width = left_width + t.kids[1].leaf_count();
    if (width > 1 && width < whole) out.emplace_back(start, start + width);
    collect_spans(t.kids[0], start, whole, out);
    collect_spans(t.kids[1], start + left_width, whole, out);
}

}  // namespace

F1Score span_f1(const ParseTree& predicted, const ParseTree& gold) {
    int n = predicted.leaf_count();
    if (n != gold.leaf_count()) throw std::runtime_error("span_f1: leaf count mismatch");
    std::vector<std::pair<int, int>> ps, gs;
    collect_spans(predicted, 0, n, ps);
    collect_spans(gold, 0, n, gs);
    std::sort(ps.begin(), ps.end());
    ps.erase(std::unique(ps.begin(), ps.end()), ps.end());
    std::sort(gs.begin(), gs.end());
    gs.erase(std::unique(gs.begin(), gs.end()), gs.end());
    if (ps.empty() && gs.empty()) return {1.0, 1.0, 1.0};
    if (ps.empty() || gs.empty()) return {0.0, 0.0, 0.0};
    std::vector<std::pair<int, int>> inter;
    std::set_intersection(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(inter));
    double p = static_cast<double>(inter.size()) / ps.size();
    double r = static_cast<double>(inter.size()) / gs.size();
    double f1 = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
    return {p, r, f1};
}

// ---- tree MCMC ------------------------------------------------------------------------

int count_internal(const ParseTree& tree) {
    if (tree.is_leaf()) return 0;
    return 1 + count_internal(tree.kids[0]) + count_internal(tree.kids[1]);
}

namespace {

ParseTree* find_internal(ParseTree& tree, int& index) {
    if (tree.is_leaf()) return nullptr;
    if (index == 0) return &tree;
    --index;
    if (ParseTree* hit = find_internal(tree.kids[0], index)) return hit;
    return find_internal(tree.kids[1], index);
}

}  // namespace

bool rotate_at(ParseTree& tree, int node_index, bool dir_a) {
    int idx = node_index;
    ParseTree* u = find_internal(tree, idx);
    if (!u) throw std::runtime_error("rotate_at: node index out of range");
    if (dir_a) {
        // (A, (B, C)) -> ((A, B), C)
        if (u->kids[1].is_leaf()) return false;
        ParseTree inner = std::move(u->kids[1]);
        ParseTree a = std::move(u->kids[0]);
        u->kids[0] = ParseTree::node(inner.label, std::move(a), std::move(inner.kids[0]));
        u->kids[1] = std::move(inner.kids[1]);
    } else {
        // ((A, B), C) -> (A, (B, C))
        if (u->kids[0].is_leaf()) return false;
        ParseTree inner = std::move(u->kids[0]);
        ParseTree c = std::move(u->kids[1]);
        u->kids[0] = std::move(inner.kids[0]);
        u->kids[1] = ParseTree::node(inner.label, std::move(inner.kids[1]), std::move(c));
    }
    return true;
}

ParseTree random_tree(const Sizes& sizes, const std::vector<int>& sentence, Rng& rng) {
    std::vector<ParseTree> frags;
    for (int tok : sentence) frags.push_back(ParseTree::leaf(tok));
    while (frags.size() > 1) {
        int p = rng.uniform_int(static_cast<int>(frags.size()) - 1);
        int x = rng.uniform_int(sizes.num_nt);
        ParseTree joined = ParseTree::node(x, std::move(frags[static_cast<size_t>(p)]),
                                           std::move(frags[static_cast<size_t>(p + 1)]));
        frags[static_cast<size_t>(p)] = std::move(joined);
        frags.erase(frags.begin() + p + 1);
    }
    return std::move(frags[0]);
}

ParseTree mcem_step(ParseTree tree, const Grammar& g, const std::vector<int>& sentence,
                    int steps, Rng& rng) {
    const Tables& tb = g.tables();
    double cur = tree_joint_logprob(tb, tree, sentence);
    const int internal = count_internal(tree);  // invariant under rotations
    for (int step = 0; step < steps; ++step) {
        ParseTree prop = tree;
        if (rng.uniform() < 0.5) {
            int node = rng.uniform_int(internal);
            bool dir_a = rng.uniform() < 0.5;
            if (!rotate_at(prop, node, dir_a)) continue;  // invalid; stay
        } else {
            int node = rng.uniform_int(internal);
            int idx = node;
            ParseTree* u = find_internal(prop, idx);
            u->label = rng.uniform_int(g.sizes().num_nt);
        }
        double prop_lp = tree_joint_logprob(tb, prop, sentence);
        if (std::log(std::max(rng.uniform(), 1e-300)) < prop_lp - cur) {
            tree = std::move(prop);
            cur = prop_lp;
        }
    }
    return tree;
}

// ---- ground-truth generators -------------------------------------------------------------

Grammar make_random_cfg(Sizes sizes, double nt_mass, Rng& rng) {
    Grammar g(sizes, Kind::Cfg, Parametrization::Table, rng, 0.0);
    ParamStore& store = g.params();
    const int s = sizes.symbols();
    const double a =
        std::log(nt_mass / (1.0 - nt_mass) * static_cast<double>(sizes.num_pt) / sizes.num_nt);
    auto& rules = store.block("grammar.rules").value.values;
    for (int x = 0; x < sizes.num_nt; ++x)
        for (int l = 0; l < s; ++l)
            for (int r = 0; r < s; ++r) {
                double bonus = (l < sizes.num_nt ? a : 0.0) + (r < sizes.num_nt ? a : 0.0);
                rules[static_cast<size_t>(x) * s * s + static_cast<size_t>(l * s + r)] =
                    bonus + 0.8 * rng.normal();
            }
    for (auto& v : store.block("grammar.root").value.values) v = 0.5 * rng.normal();
    for (auto& v : store.block("grammar.emit").value.values) v = 1.0 * rng.normal();
    store.bump_version();
    return g;
}

Grammar make_right_branching_cfg(Sizes sizes, Rng& rng) {
    Grammar g(sizes, Kind::Cfg, Parametrization::Table, rng, 0.0);
    ParamStore& store = g.params();
    const int s = sizes.symbols();
    auto& rules = store.block("grammar.rules").value.values;
    // (PT, NT) chains dominate; (PT, PT) terminates; left-NT rules are rare
    for (int x = 0; x < sizes.num_nt; ++x)
        for (int l = 0; l < s; ++l)
            for (int r = 0; r < s; ++r) {
                double bonus;
                bool lnt = l < sizes.num_nt, rnt = r < sizes.num_nt;
                if (!lnt && rnt)
                    bonus = std::log(0.62 / (sizes.num_pt * static_cast<double>(sizes.num_nt)));
                else if (!lnt && !rnt)
                    bonus = std::log(0.36 / (sizes.num_pt * static_cast<double>(sizes.num_pt)));
                else
                    bonus = std::log(0.02 / (sizes.num_nt * static_cast<double>(s)));
                rules[static_cast<size_t>(x) * s * s + static_cast<size_t>(l * s + r)] =
                    bonus + 0.3 * rng.normal();
            }
    for (auto& v : store.block("grammar.root").value.values) v = 0.3 * rng.normal();
    for (auto& v : store.block("grammar.emit").value.values) v = 1.0 * rng.normal();
    store.bump_version();
    return g;
}

Grammar make_parent_dependent_grammar(Sizes sizes, Rng& rng) {
    if (sizes.num_nt < 2 || sizes.num_pt < 4)
        throw std::runtime_error("parent-dependent generator needs >= 2 NTs and >= 4 PTs");
    Grammar g(sizes, Kind::NonCfg, Parametrization::Table, rng, 0.0);
    ParamStore& store = g.params();
    const int s = sizes.symbols();
    const int nt = sizes.num_nt;
    // PT p belongs to group (x_bit, p_bit) = (p % 2, (p / 2) % 2): f1 rewards
    // PT children whose x_bit matches X; f2 rewards p_bit matching the parent.
    // The same NT therefore expands to disjoint PT groups under different
    // parents, which no equal-size CFG can represent.
    auto x_bit = [&](int sym) { return (sym - nt) % 2; };
    auto p_bit = [&](int sym) { return ((sym - nt) / 2) % 2; };
    const double w = 3.0;
    const double nt_child = std::log(0.12);  // keeps sentences short
    auto& f1 = store.block("grammar.f1").value.values;
    for (int x = 0; x < nt; ++x)
        for (int l = 0; l < s; ++l)
            for (int r = 0; r < s; ++r) {
                double v = 0.15 * rng.normal();
                if (l >= nt && x_bit(l) == (x % 2)) v += w;
                if (r >= nt && x_bit(r) == (x % 2)) v += w;
                if (l < nt) v += nt_child;
                if (r < nt) v += nt_child;
                f1[static_cast<size_t>(x) * s * s + static_cast<size_t>(l * s + r)] = v;
            }
    auto& f2 = store.block("grammar.f2").value.values;
    for (int p = 0; p <= nt; ++p)
        for (int l = 0; l < s; ++l)
            for (int r = 0; r < s; ++r) {
                double v = 0.0;
                if (p < nt) {  // ROOT row stays neutral
                    if (l >= nt && p_bit(l) == (p % 2)) v += w;
                    if (r >= nt && p_bit(r) == (p % 2)) v += w;
                }
                f2[static_cast<size_t>(p) * s * s + static_cast<size_t>(l * s + r)] = v;
            }
    // block-diagonal emissions: PT p emits its own vocabulary slice
    auto& emit = store.block("grammar.emit").value.values;
    int block = sizes.vocab / sizes.num_pt;
    for (int p = 0; p < sizes.num_pt; ++p)
        for (int v = 0; v < sizes.vocab; ++v)
            emit[static_cast<size_t>(p) * sizes.vocab + static_cast<size_t>(v)] =
                (v / std::max(block, 1) == p ? 4.0 : 0.0) + 0.2 * rng.normal();
    for (auto& v : store.block("grammar.root").value.values) v = 0.2 * rng.normal();
    store.bump_version();
    return g;
}

}  // namespace gfnem::grammar
