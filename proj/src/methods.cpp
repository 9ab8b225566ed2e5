#include "gfnem/methods.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>

#include "gfnem/checkpoint.hpp"
#include "gfnem/parallel.hpp"
#include "gfnem/parse_env.hpp"
#include "gfnem/parse_policy.hpp"

namespace gfnem {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct StopWatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

int64_t default_steps(const RunConfig& cfg) {
    if (cfg.steps > 0) return cfg.steps;
    if (cfg.domain == "mixture") {
        if (cfg.method == "exact_em" || cfg.method == "factorized_em")
            return cfg.mixture_iterations;
        if (cfg.em_mode == "fixed")
            return cfg.mixture_iterations * (cfg.fixed_e + cfg.fixed_m);
        return 20000;
    }
    if (cfg.method == "marginalization") return 3000;
    if (cfg.method == "exact_sampling_em") return 4000;
    if (cfg.method == "mcem") return 1500;
    return 12000;  // gfnem / hvi
}

// ---- mixture domain -------------------------------------------------------------

struct MixtureRun {
    mixture::Geometry geo;
    mixture::Dataset data;
    std::vector<double> init_means;
};

MixtureRun prepare_mixture_data(const RunConfig& cfg, const std::string& out_dir) {
    MixtureRun r;
    r.geo = cfg.geometry;
    if (!cfg.data_dir.empty()) {
        auto [data, geo] = mixture::load_dataset(cfg.data_dir + "/mixture.bin");
        r.data = std::move(data);
        r.geo = geo;
    } else {
        Rng rng = Rng(cfg.seed).fork(0xda7a);
        r.data = mixture::generate_dataset(mixture::ground_truth_means(r.geo),
                                           mixture::petal_offsets(r.geo), cfg.mixture_points,
                                           rng);
    }
    fs::create_directories(out_dir + "/data");
    mixture::save_dataset(out_dir + "/data/mixture.bin", r.data, r.geo);
    // initialization: supercluster means start at random data points
    Rng init_rng = Rng(cfg.seed).fork(0x1217);
    for (int i = 0; i < r.geo.num_super; ++i) {
        int k = init_rng.uniform_int(r.data.n());
        r.init_means.push_back(r.data.point(k)[0]);
        r.init_means.push_back(r.data.point(k)[1]);
    }
    return r;
}

json run_mixture_em(const RunConfig& cfg, const std::string& out_dir, bool factorized) {
    MixtureRun r = prepare_mixture_data(cfg, out_dir);
    mixture::Model model(r.geo, r.init_means);
    MetricsWriter metrics(out_dir + "/metrics.ndjson");
    int64_t iterations = default_steps(cfg);
    for (int64_t it = 0; it < iterations; ++it) {
        if (factorized)
            mixture::factorized_em_update(model, r.data, cfg.mixture_mf_sweeps);
        else
            mixture::exact_em_update(model, r.data);
        double nll = -mixture::dataset_loglik(model, r.data);
        metrics.record(it, "m", nll, std::nullopt, true, nll);
    }
    metrics.flush();
    save_checkpoint(model.params(), out_dir + "/checkpoint_mixture.bin");
    json summary;
    summary["final_nll"] = -mixture::dataset_loglik(model, r.data);
    summary["m_steps"] = iterations;
    return summary;
}

json run_mixture_gfnem(const RunConfig& cfg, const std::string& out_dir) {
    MixtureRun r = prepare_mixture_data(cfg, out_dir);
    mixture::Model model(r.geo, r.init_means);
    Rng policy_rng = Rng(cfg.seed).fork(0x90c1);
    mixture::Policy policy(r.geo, cfg.mixture_policy_hidden, policy_rng);

    AdamOptimizer model_opt(AdamConfig{cfg.mixture_mu_lr, 0.9, 0.99, 1e-8});
    AdamOptimizer policy_opt(AdamConfig{cfg.mixture_policy_lr, 0.9, 0.99, 1e-8});
    policy_opt.set_group("policy.z", AdamConfig{cfg.z_lr, 0.9, 0.99, 1e-8});

    mixture::Domain dom{&model, &policy, &model_opt, &policy_opt};
    std::vector<std::array<double, 2>> xs;
    for (int k = 0; k < r.data.n(); ++k)
        xs.push_back({r.data.point(k)[0], r.data.point(k)[1]});

    EmConfig em = cfg.em_config();
    if (cfg.method == "hvi") em.loss = GfnLoss::Hvi;
    MetricsWriter metrics(out_dir + "/metrics.ndjson");
    Rng rng = Rng(cfg.seed).fork(0x7a41);
    TrainStats stats = run_gfnem(dom, xs, em, default_steps(cfg), rng, &metrics);
    metrics.flush();
    save_checkpoint(model.params(), out_dir + "/checkpoint_mixture.bin");
    save_checkpoint(policy.params(), out_dir + "/checkpoint_policy.bin");
    json summary;
    summary["final_nll"] = -mixture::dataset_loglik(model, r.data);
    summary["m_steps"] = stats.m_steps;
    return summary;
}

// ---- grammar domain ---------------------------------------------------------------

grammar::Grammar make_gt_grammar(const RunConfig& cfg, Rng rng) {
    if (cfg.gen_style == "right_branching")
        return grammar::make_right_branching_cfg(cfg.sizes, rng);
    if (cfg.gen_style == "parent_dependent")
        return grammar::make_parent_dependent_grammar(cfg.sizes, rng);
    return grammar::make_random_cfg(cfg.sizes, cfg.gen_nt_mass, rng);
}

struct GrammarData {
    grammar::Corpus train, heldout;
};

GrammarData prepare_grammar_data(const RunConfig& cfg, const std::string& out_dir) {
    grammar::Corpus all;
    if (!cfg.data_dir.empty()) {
        all = grammar::load_corpus(cfg.data_dir);
    } else {
        Rng rng = Rng(cfg.seed).fork(0xc0de);
        grammar::Grammar gt = make_gt_grammar(cfg, rng);
        all = grammar::sample_corpus(gt, cfg.corpus_sentences, cfg.max_len, rng);
    }
    grammar::save_corpus(out_dir + "/data", all, cfg.sizes);
    size_t heldout = static_cast<size_t>(cfg.heldout_fraction * all.sentences.size());
    size_t train_n = all.sentences.size() - heldout;
    GrammarData d;
    for (size_t i = 0; i < all.sentences.size(); ++i) {
        auto& dst = i < train_n ? d.train : d.heldout;
        dst.sentences.push_back(all.sentences[i]);
        if (i < all.gold_trees.size()) dst.gold_trees.push_back(all.gold_trees[i]);
    }
    if (d.heldout.sentences.empty()) d.heldout = d.train;
    return d;
}

grammar::Grammar make_learned_grammar(const RunConfig& cfg) {
    Rng rng = Rng(cfg.seed).fork(0x6a6a);
    return grammar::Grammar(
        cfg.sizes, cfg.grammar_mode == "noncfg" ? grammar::Kind::NonCfg : grammar::Kind::Cfg,
        cfg.grammar_param == "neural" ? grammar::Parametrization::Neural
                                      : grammar::Parametrization::Table,
        rng, 0.3);
}

AdamOptimizer make_grammar_opt(const RunConfig& cfg) {
    return AdamOptimizer(AdamConfig{cfg.grammar_lr, cfg.grammar_beta1, cfg.grammar_beta2, 1e-8});
}

// one gradient step on the grammar; per-sentence losses are built on
// thread-confined tapes and reduced in batch order
template <class LossBuilder>
double grammar_batch_step(grammar::Grammar& g, AdamOptimizer& opt, size_t batch,
                          LossBuilder&& build) {
    struct Slot {
        Tape tape;
        double loss = 0.0;
    };
    g.tables();  // build the value cache before fanning out
    std::vector<Slot> slots(batch);
    parallel_for(batch, [&](size_t b) {
        Var loss = build(slots[b].tape, b);
        slots[b].loss = slots[b].tape.backward(loss);
    });
    g.params().zero_grad();
    double mean = 0.0;
    for (auto& s : slots) {
        s.tape.accumulate_param_grads(1.0 / static_cast<double>(batch));
        mean += s.loss / static_cast<double>(batch);
    }
    opt.step(g.params());
    return mean;
}

json run_marginalization(const RunConfig& cfg, const std::string& out_dir, GrammarData& data,
                         grammar::Grammar& g) {
    AdamOptimizer opt = make_grammar_opt(cfg);
    MetricsWriter metrics(out_dir + "/metrics.ndjson");
    Rng rng = Rng(cfg.seed).fork(0x3a1e);
    const int64_t steps = default_steps(cfg);
    const auto& sents = data.train.sentences;
    for (int64_t step = 0; step < steps; ++step) {
        std::vector<int> batch(static_cast<size_t>(cfg.grammar_batch));
        for (auto& b : batch) b = rng.uniform_int(static_cast<int>(sents.size()));
        double loss = grammar_batch_step(
            g, opt, batch.size(), [&](Tape& t, size_t b) {
                return t.scale(
                    grammar::inside_log_marginal_var(t, g, sents[static_cast<size_t>(batch[b])]),
                    -1.0);
            });
        metrics.record(step, "m", loss, std::nullopt, true, loss);
    }
    metrics.flush();
    json summary;
    summary["m_steps"] = steps;
    return summary;
}

json run_exact_sampling_em(const RunConfig& cfg, const std::string& out_dir, GrammarData& data,
                           grammar::Grammar& g) {
    AdamOptimizer opt = make_grammar_opt(cfg);
    MetricsWriter metrics(out_dir + "/metrics.ndjson");
    Rng rng = Rng(cfg.seed).fork(0xe5e5);
    const int64_t steps = default_steps(cfg);
    const auto& sents = data.train.sentences;
    for (int64_t step = 0; step < steps; ++step) {
        std::vector<int> batch(static_cast<size_t>(cfg.grammar_batch));
        std::vector<uint64_t> salts(batch.size());
        for (auto& b : batch) b = rng.uniform_int(static_cast<int>(sents.size()));
        for (auto& s : salts) s = rng.next_u64();
        // E-step: exact posterior samples
        std::vector<grammar::ParseTree> trees(batch.size());
        g.tables();
        parallel_for(batch.size(), [&](size_t b) {
            Rng local = rng.fork(salts[b]);
            trees[b] =
                grammar::sample_posterior_tree(g, sents[static_cast<size_t>(batch[b])], local);
        });
        // M-step on the sampled trees
        double loss = grammar_batch_step(g, opt, batch.size(), [&](Tape& t, size_t b) {
            return t.scale(grammar::tree_joint_logprob_var(
                               t, g, trees[b], sents[static_cast<size_t>(batch[b])]),
                           -1.0);
        });
        metrics.record(step, "m", loss, std::nullopt, true, loss);
    }
    metrics.flush();
    json summary;
    summary["m_steps"] = steps;
    return summary;
}

json run_mcem(const RunConfig& cfg, const std::string& out_dir, GrammarData& data,
              grammar::Grammar& g) {
    AdamOptimizer opt = make_grammar_opt(cfg);
    MetricsWriter metrics(out_dir + "/metrics.ndjson");
    Rng rng = Rng(cfg.seed).fork(0x3c33);
    const int64_t steps = default_steps(cfg);
    const auto& sents = data.train.sentences;
    // persistent chains, one tree per training sentence
    std::vector<grammar::ParseTree> chains(sents.size());
    for (size_t i = 0; i < sents.size(); ++i)
        chains[i] = grammar::random_tree(cfg.sizes, sents[i], rng);

    const int batch = std::min<int>(cfg.grammar_batch, static_cast<int>(sents.size()));
    std::vector<int> order(sents.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();
    for (int64_t step = 0; step < steps; ++step) {
        // cycle through a shuffled order so batch indices stay distinct
        std::vector<int> idx;
        std::vector<uint64_t> salts;
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                for (size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(
                                                static_cast<int>(i)))]);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
            salts.push_back(rng.next_u64());
        }
        g.tables();
        parallel_for(idx.size(), [&](size_t b) {
            Rng local = rng.fork(salts[b]);
            auto& tree = chains[static_cast<size_t>(idx[b])];
            tree = grammar::mcem_step(std::move(tree), g, sents[static_cast<size_t>(idx[b])],
                                      cfg.mcem_chain_steps, local);
        });
        double loss = grammar_batch_step(g, opt, idx.size(), [&](Tape& t, size_t b) {
            return t.scale(
                grammar::tree_joint_logprob_var(t, g, chains[static_cast<size_t>(idx[b])],
                                                sents[static_cast<size_t>(idx[b])]),
                -1.0);
        });
        metrics.record(step, "m", loss, std::nullopt, true, loss);
    }
    metrics.flush();
    json summary;
    summary["m_steps"] = steps;
    return summary;
}

// emdriver adapter for the parsing domain
struct GrammarDomain {
    using X = std::vector<int>;
    using Env = grammar::ParseEnv;

    grammar::Grammar* g = nullptr;
    grammar::ParsePolicy* pol = nullptr;
    AdamOptimizer* gopt = nullptr;
    AdamOptimizer* popt = nullptr;
    const grammar::EbmPrior* prior = nullptr;
    double temp_start = 1.0, temp_end = 1000.0;
    int64_t temp_horizon = 10000;
    double cur_temp = 1.0;
    int max_len = 8;
    int sample_retries = 1000;

    Env make_env(const X& x) const { return Env(*g, x, prior, cur_temp); }
    Var m_step_loss(Tape& t, const grammar::ForestState& z, const X& x) {
        // the EBM prior shapes the sampler's reward only; theta sees the joint
        return t.scale(grammar::tree_joint_logprob_var(t, *g, z.frags[0], x), -1.0);
    }
    std::pair<grammar::ForestState, X> ancestral_sample(Rng& rng) {
        grammar::Corpus c = grammar::sample_corpus(*g, 1, max_len, rng, sample_retries);
        grammar::ForestState z;
        z.frags.push_back(std::move(c.gold_trees[0]));
        return {std::move(z), std::move(c.sentences[0])};
    }
    ParamStore& gen_params() { return g->params(); }
    AdamOptimizer& gen_opt() { return *gopt; }
    grammar::ParsePolicy& policy() { return *pol; }
    AdamOptimizer& policy_opt() { return *popt; }
    void on_step(int64_t step) {
        if (prior)
            cur_temp = grammar::EbmPrior::temperature(step, temp_start, temp_end, temp_horizon);
    }
};

json run_grammar_gfnem(const RunConfig& cfg, const std::string& out_dir, GrammarData& data,
                       grammar::Grammar& g) {
    Rng policy_rng = Rng(cfg.seed).fork(0x90c1);
    grammar::ParsePolicy policy(
        cfg.sizes,
        grammar::ParsePolicy::Config{cfg.policy_embed, cfg.policy_hidden, cfg.policy_layers,
                                     cfg.policy_max_positions},
        policy_rng);

    AdamOptimizer gopt = make_grammar_opt(cfg);
    AdamOptimizer popt(AdamConfig{cfg.policy_lr, 0.9, 0.99, 1e-8});
    popt.set_group("parse.z", AdamConfig{cfg.z_lr, 0.9, 0.99, 1e-8});

    GrammarDomain dom;
    dom.g = &g;
    dom.pol = &policy;
    dom.gopt = &gopt;
    dom.popt = &popt;
    dom.max_len = cfg.max_len;
    dom.temp_start = cfg.ebm_temp_start;
    dom.temp_end = cfg.ebm_temp_end;
    dom.temp_horizon = cfg.ebm_temp_horizon;

    std::unique_ptr<grammar::EbmPrior> prior;
    json summary;
    if (cfg.ebm_enabled) {
        Rng ebm_rng = Rng(cfg.seed).fork(0xeb31);
        prior = std::make_unique<grammar::EbmPrior>(cfg.ebm_embed, cfg.ebm_hidden, ebm_rng);
        std::vector<grammar::TreeShape> gold;
        for (const auto& tree : data.train.gold_trees) gold.push_back(grammar::shape_of(tree));
        if (gold.empty()) throw std::runtime_error("ebm: training requires gold trees");
        AdamOptimizer ebm_opt(AdamConfig{cfg.ebm_lr, 0.9, 0.99, 1e-8});
        grammar::EbmPrior::PcdConfig pcd;
        pcd.batch = cfg.ebm_batch;
        pcd.buffer = cfg.ebm_buffer;
        pcd.mh_steps = cfg.ebm_mh_steps;
        pcd.l2 = cfg.ebm_l2;
        prior->init_buffer(gold, pcd.buffer, ebm_rng);
        double gap = 0.0;
        for (int u = 0; u < cfg.ebm_pretrain; ++u) gap = prior->pcd_update(gold, ebm_opt, ebm_rng, pcd);
        summary["ebm_final_gap"] = gap;
        dom.prior = prior.get();
        dom.cur_temp = cfg.ebm_temp_start;
    }

    EmConfig em = cfg.em_config();
    if (cfg.method == "hvi") em.loss = GfnLoss::Hvi;
    MetricsWriter metrics(out_dir + "/metrics.ndjson");
    Rng rng = Rng(cfg.seed).fork(0x7a41);
    TrainStats stats = run_gfnem(dom, data.train.sentences, em, default_steps(cfg), rng,
                                 &metrics);
    metrics.flush();
    save_checkpoint(policy.params(), out_dir + "/checkpoint_policy.bin");
    if (prior) save_checkpoint(prior->params(), out_dir + "/checkpoint_ebm.bin");
    summary["m_steps"] = stats.m_steps;
    summary["final_loss_avg"] = stats.loss_moving_avg;
    return summary;
}

// ---- evaluation -----------------------------------------------------------------------

std::vector<std::string> parse_metric_set(const RunConfig& cfg, const std::string& metric_set) {
    if (metric_set != "auto") {
        std::vector<std::string> out;
        std::string cur;
        for (char c : metric_set + ",") {
            if (c == ',') {
                if (!cur.empty()) out.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        for (const auto& m : out)
            if (m != "nll_exact" && m != "nll_iw_bound" && m != "nll_flow_bound" &&
                m != "sentence_f1" && m != "per_sample_ll")
                throw std::runtime_error("evaluate: unknown metric " + m);
        return out;
    }
    if (cfg.domain == "mixture") return {"per_sample_ll"};
    std::vector<std::string> out;
    bool gfn = cfg.method == "gfnem" || cfg.method == "hvi";
    if (cfg.grammar_mode == "cfg") out.push_back("nll_exact");
    if (gfn) {
        out.push_back("nll_iw_bound");
        if (cfg.gfn_loss == "subtb") out.push_back("nll_flow_bound");
    }
    out.push_back("sentence_f1");
    return out;
}

json evaluate_grammar(const RunConfig& cfg, const std::string& run_dir,
                      const std::vector<std::string>& metric_set) {
    grammar::Corpus all = grammar::load_corpus(run_dir + "/data");
    size_t heldout_n = static_cast<size_t>(cfg.heldout_fraction * all.sentences.size());
    size_t train_n = all.sentences.size() - heldout_n;
    grammar::Corpus heldout;
    for (size_t i = train_n; i < all.sentences.size(); ++i) {
        heldout.sentences.push_back(all.sentences[i]);
        if (i < all.gold_trees.size()) heldout.gold_trees.push_back(all.gold_trees[i]);
    }
    if (heldout.sentences.empty()) heldout = all;
    if (static_cast<int>(heldout.sentences.size()) > cfg.eval_max_sentences) {
        heldout.sentences.resize(static_cast<size_t>(cfg.eval_max_sentences));
        if (heldout.gold_trees.size() > heldout.sentences.size())
            heldout.gold_trees.resize(heldout.sentences.size());
    }

    grammar::Grammar g = make_learned_grammar(cfg);
    load_checkpoint(g.params(), run_dir + "/checkpoint_grammar.bin");

    bool gfn = cfg.method == "gfnem" || cfg.method == "hvi";
    std::unique_ptr<grammar::ParsePolicy> policy;
    if (gfn) {
        Rng policy_rng = Rng(cfg.seed).fork(0x90c1);
        policy = std::make_unique<grammar::ParsePolicy>(
            cfg.sizes,
            grammar::ParsePolicy::Config{cfg.policy_embed, cfg.policy_hidden, cfg.policy_layers,
                                         cfg.policy_max_positions},
            policy_rng);
        load_checkpoint(policy->params(), run_dir + "/checkpoint_policy.bin");
    }

    json out;
    int64_t total_words = 0;
    for (const auto& s : heldout.sentences) total_words += static_cast<int64_t>(s.size());

    for (const auto& metric : metric_set) {
        if (metric == "nll_exact") {
            if (g.kind() != grammar::Kind::Cfg)
                throw std::runtime_error(
                    "evaluate: nll_exact requires a CFG checkpoint (marginalization is "
                    "intractable in non-CFG mode)");
            auto lps = grammar::corpus_inside_marginals(g, heldout.sentences);
            double total = 0.0;
            for (double lp : lps) total -= lp;
            out["nll_exact"] = total / static_cast<double>(total_words);
        } else if (metric == "nll_iw_bound") {
            if (!policy)
                throw std::runtime_error("evaluate: nll_iw_bound requires a policy checkpoint");
            Rng rng = Rng(cfg.seed).fork(0xe7a1);
            std::vector<double> bounds(heldout.sentences.size());
            std::vector<uint64_t> salts(bounds.size());
            for (auto& s : salts) s = rng.next_u64();
            parallel_for(heldout.sentences.size(), [&](size_t i) {
                Rng local = rng.fork(salts[i]);
                grammar::ParseEnv env(g, heldout.sentences[i]);
                bounds[i] = grammar::iw_nll_bound(env, *policy, cfg.iw_k, local);
            });
            double total = 0.0;
            for (double b : bounds) total += b;
            out["nll_iw_bound"] = total / static_cast<double>(total_words);
        } else if (metric == "nll_flow_bound") {
            if (!policy)
                throw std::runtime_error("evaluate: nll_flow_bound requires a policy checkpoint");
            std::vector<double> bounds(heldout.sentences.size());
            parallel_for(heldout.sentences.size(), [&](size_t i) {
                grammar::ParseEnv env(g, heldout.sentences[i]);
                bounds[i] = grammar::flow_nll_bound(env, *policy);
            });
            double total = 0.0;
            for (double b : bounds) total += b;
            out["nll_flow_bound"] = total / static_cast<double>(total_words);
        } else if (metric == "sentence_f1") {
            if (heldout.gold_trees.size() != heldout.sentences.size())
                throw std::runtime_error("evaluate: sentence_f1 requires gold trees");
            double total = 0.0;
            std::vector<double> per(heldout.sentences.size());
            parallel_for(heldout.sentences.size(), [&](size_t i) {
                grammar::ParseTree pred;
                if (gfn) {
                    grammar::ParseEnv env(g, heldout.sentences[i]);
                    auto traj = sample_greedy_trajectory(env, *policy);
                    pred = traj.terminal().frags[0];
                } else {
                    pred = grammar::map_tree(g, heldout.sentences[i]);
                }
                per[i] = grammar::span_f1(pred, heldout.gold_trees[i]).f1;
            });
            for (double f : per) total += f;
            out["sentence_f1"] = total / static_cast<double>(heldout.sentences.size());
        } else {
            throw std::runtime_error("evaluate: metric " + metric +
                                     " is not defined for the grammar domain");
        }
    }
    return out;
}

json evaluate_mixture(const RunConfig& cfg, const std::string& run_dir,
                      const std::vector<std::string>& metric_set) {
    auto [data, geo] = mixture::load_dataset(run_dir + "/data/mixture.bin");
    mixture::Model model(geo, std::vector<double>(static_cast<size_t>(2 * geo.num_super), 0.0));
    load_checkpoint(model.params(), run_dir + "/checkpoint_mixture.bin");
    json out;
    for (const auto& metric : metric_set) {
        if (metric == "per_sample_ll")
            out["per_sample_ll"] = mixture::dataset_loglik(model, data);
        else
            throw std::runtime_error("evaluate: metric " + metric +
                                     " is not defined for the mixture domain");
    }
    return out;
}

}  // namespace

json run_experiment(const RunConfig& cfg) {
    cfg.validate();
    StopWatch watch;
    const std::string out_dir = cfg.out_dir;
    fs::create_directories(out_dir);
    save_config(cfg, out_dir + "/config.cfg");

    json summary;
    if (cfg.domain == "mixture") {
        if (cfg.method == "exact_em")
            summary = run_mixture_em(cfg, out_dir, false);
        else if (cfg.method == "factorized_em")
            summary = run_mixture_em(cfg, out_dir, true);
        else if (cfg.method == "gfnem" || cfg.method == "hvi")
            summary = run_mixture_gfnem(cfg, out_dir);
        else
            throw std::runtime_error("run: method " + cfg.method +
                                     " is not defined for the mixture domain");
    } else {
        GrammarData data = prepare_grammar_data(cfg, out_dir);
        grammar::Grammar g = make_learned_grammar(cfg);
        if (cfg.method == "marginalization")
            summary = run_marginalization(cfg, out_dir, data, g);
        else if (cfg.method == "exact_sampling_em")
            summary = run_exact_sampling_em(cfg, out_dir, data, g);
        else if (cfg.method == "mcem")
            summary = run_mcem(cfg, out_dir, data, g);
        else if (cfg.method == "gfnem" || cfg.method == "hvi")
            summary = run_grammar_gfnem(cfg, out_dir, data, g);
        else
            throw std::runtime_error("run: method " + cfg.method +
                                     " is not defined for the grammar domain");
        save_checkpoint(g.params(), out_dir + "/checkpoint_grammar.bin");
    }

    summary["domain"] = cfg.domain;
    summary["method"] = cfg.method;
    summary["seed"] = cfg.seed;
    summary["steps"] = default_steps(cfg);

    // metric fields recomputable by `evaluate_run`
    json metrics = cfg.domain == "mixture"
                       ? evaluate_mixture(cfg, out_dir, parse_metric_set(cfg, "auto"))
                       : evaluate_grammar(cfg, out_dir, parse_metric_set(cfg, "auto"));
    for (auto& [k, v] : metrics.items()) summary[k] = v;

    summary["wall_clock_sec"] = watch.seconds();
    std::ofstream sf(out_dir + "/summary.json", std::ios::trunc);
    sf << summary.dump(2) << "\n";
    return summary;
}

void generate_data(const RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    if (cfg.domain == "mixture") {
        Rng rng = Rng(cfg.seed).fork(0xda7a);
        mixture::Dataset data =
            mixture::generate_dataset(mixture::ground_truth_means(cfg.geometry),
                                      mixture::petal_offsets(cfg.geometry), cfg.mixture_points,
                                      rng);
        mixture::save_dataset(out_dir + "/mixture.bin", data, cfg.geometry);
        mixture::Model gt(cfg.geometry, mixture::ground_truth_means(cfg.geometry));
        save_checkpoint(gt.params(), out_dir + "/gt_mixture.bin");
    } else {
        Rng rng = Rng(cfg.seed).fork(0xc0de);
        grammar::Grammar gt = make_gt_grammar(cfg, rng);
        grammar::Corpus corpus = grammar::sample_corpus(gt, cfg.corpus_sentences, cfg.max_len,
                                                        rng);
        grammar::save_corpus(out_dir, corpus, cfg.sizes);
        save_checkpoint(gt.params(), out_dir + "/gt_grammar.bin");
    }
    save_config(cfg, out_dir + "/gen_config.cfg");
}

json evaluate_run(const std::string& run_dir, const std::string& metric_set) {
    RunConfig cfg = load_config(run_dir + "/config.cfg");
    auto metrics = parse_metric_set(cfg, metric_set);
    json out = cfg.domain == "mixture" ? evaluate_mixture(cfg, run_dir, metrics)
                                       : evaluate_grammar(cfg, run_dir, metrics);
    return out;
}

}  // namespace gfnem
