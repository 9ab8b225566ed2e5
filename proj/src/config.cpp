#include "gfnem/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace gfnem {

namespace {

struct KeyBinding {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        int64_t out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key " + key + " expects an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        uint64_t out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key " + key + " expects an unsigned integer, got '" +
                                 v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key " + key + " expects a real number, got '" + v +
                                 "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::runtime_error("config: key " + key + " expects true/false, got '" + v + "'");
}

std::string fmt_real(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

#define BIND_STR(key, field)                                                   \
    {key, {[](RunConfig& c, const std::string& v) { c.field = v; },            \
           [](const RunConfig& c) { return c.field; }}}
#define BIND_INT(key, field)                                                   \
    {key, {[](RunConfig& c, const std::string& v) {                            \
               c.field = static_cast<decltype(c.field)>(parse_int(key, v));    \
           },                                                                  \
           [](const RunConfig& c) { return std::to_string(c.field); }}}
#define BIND_U64(key, field)                                                   \
    {key, {[](RunConfig& c, const std::string& v) { c.field = parse_u64(key, v); }, \
           [](const RunConfig& c) { return std::to_string(c.field); }}}
#define BIND_REAL(key, field)                                                  \
    {key, {[](RunConfig& c, const std::string& v) { c.field = parse_real(key, v); }, \
           [](const RunConfig& c) { return fmt_real(c.field); }}}
#define BIND_BOOL(key, field)                                                  \
    {key, {[](RunConfig& c, const std::string& v) { c.field = parse_bool(key, v); }, \
           [](const RunConfig& c) { return c.field ? "true" : "false"; }}}

const std::map<std::string, KeyBinding>& bindings() {
    static const std::map<std::string, KeyBinding> table = {
        BIND_STR("domain", domain),
        BIND_STR("method", method),
        BIND_U64("seed", seed),
        BIND_INT("steps", steps),
        BIND_STR("out", out_dir),
        BIND_STR("data.dir", data_dir),
        BIND_REAL("eval.heldout_fraction", heldout_fraction),

        BIND_INT("mixture.num_super", geometry.num_super),
        BIND_INT("mixture.num_petals", geometry.num_petals),
        BIND_REAL("mixture.grid_spacing", geometry.grid_spacing),
        BIND_REAL("mixture.petal_offset", geometry.petal_offset),
        BIND_INT("mixture.n_points", mixture_points),
        BIND_INT("mixture.em_iterations", mixture_iterations),
        BIND_INT("mixture.gfn_steps_per_e", mixture_gfn_steps_per_e),
        BIND_INT("mixture.mean_field_sweeps", mixture_mf_sweeps),
        BIND_INT("mixture.policy_hidden", mixture_policy_hidden),
        BIND_REAL("mixture.policy_lr", mixture_policy_lr),
        BIND_REAL("mixture.mu_lr", mixture_mu_lr),

        BIND_INT("grammar.num_nt", sizes.num_nt),
        BIND_INT("grammar.num_pt", sizes.num_pt),
        BIND_INT("grammar.vocab", sizes.vocab),
        BIND_STR("grammar.mode", grammar_mode),
        BIND_STR("grammar.parametrization", grammar_param),
        BIND_INT("grammar.max_len", max_len),
        BIND_INT("grammar.corpus_sentences", corpus_sentences),
        BIND_STR("gen.style", gen_style),
        BIND_REAL("gen.nt_mass", gen_nt_mass),
        BIND_REAL("grammar.lr", grammar_lr),
        BIND_REAL("grammar.adam_beta1", grammar_beta1),
        BIND_REAL("grammar.adam_beta2", grammar_beta2),
        BIND_INT("grammar.batch", grammar_batch),
        BIND_INT("mcem.chain_steps", mcem_chain_steps),

        BIND_INT("policy.embed", policy_embed),
        BIND_INT("policy.hidden", policy_hidden),
        BIND_INT("policy.layers", policy_layers),
        BIND_INT("policy.max_positions", policy_max_positions),
        BIND_REAL("policy.lr", policy_lr),
        BIND_REAL("policy.z_lr", z_lr),

        BIND_STR("gfn.loss", gfn_loss),
        BIND_BOOL("gfn.forward_looking", forward_looking),
        BIND_REAL("gfn.epsilon", epsilon),
        BIND_REAL("gfn.beta", beta),
        BIND_REAL("gfn.sleep_weight", sleep_weight),
        BIND_INT("gfn.mcmc_steps", mcmc_steps),
        BIND_INT("gfn.mcmc_depth", mcmc_depth),
        BIND_INT("gfn.e_batch", e_batch),
        BIND_INT("gfn.m_batch", m_batch),

        BIND_STR("em.mode", em_mode),
        BIND_REAL("em.threshold_max", threshold_max),
        BIND_REAL("em.threshold_min", threshold_min),
        BIND_INT("em.threshold_horizon", threshold_horizon),
        BIND_REAL("em.moving_avg_decay", moving_avg_decay),
        BIND_INT("em.fixed_e", fixed_e),
        BIND_INT("em.fixed_m", fixed_m),
        BIND_BOOL("em.greedy_m", greedy_m),

        BIND_BOOL("ebm.enabled", ebm_enabled),
        BIND_INT("ebm.embed", ebm_embed),
        BIND_INT("ebm.hidden", ebm_hidden),
        BIND_REAL("ebm.lr", ebm_lr),
        BIND_REAL("ebm.l2", ebm_l2),
        BIND_INT("ebm.batch", ebm_batch),
        BIND_INT("ebm.buffer", ebm_buffer),
        BIND_INT("ebm.mh_steps", ebm_mh_steps),
        BIND_INT("ebm.pretrain_updates", ebm_pretrain),
        BIND_REAL("ebm.temp_start", ebm_temp_start),
        BIND_REAL("ebm.temp_end", ebm_temp_end),
        BIND_INT("ebm.temp_horizon", ebm_temp_horizon),

        BIND_INT("eval.iw_k", iw_k),
        BIND_INT("eval.iw_k_train", iw_k_train),
        BIND_INT("eval.max_sentences", eval_max_sentences),
    };
    return table;
}

#undef BIND_STR
#undef BIND_INT
#undef BIND_U64
#undef BIND_REAL
#undef BIND_BOOL

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos) continue;
        size_t end = line.find_last_not_of(" \t\r");
        line = line.substr(begin, end - begin + 1);
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) +
                                     " is not 'key = value': " + line);
        auto trim = [](std::string s) {
            size_t b = s.find_first_not_of(" \t");
            size_t e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        auto it = bindings().find(key);
        if (it == bindings().end())
            throw std::runtime_error("config: unknown key '" + key + "' (line " +
                                     std::to_string(lineno) + ")");
        it->second.set(cfg, value);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::string text(std::istreambuf_iterator<char>(f), {});
    return parse_config_text(text);
}

std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream out;
    for (const auto& [key, binding] : bindings()) out << key << " = " << binding.get(cfg) << "\n";
    return out.str();
}

void save_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("config: cannot write " + path);
    f << config_to_text(cfg);
}

EmConfig RunConfig::em_config() const {
    EmConfig em;
    em.mode = em_mode == "fixed" ? ScheduleMode::FixedAlternation : ScheduleMode::Adaptive;
    em.schedule = ThresholdSchedule{threshold_max, threshold_min, threshold_horizon,
                                    moving_avg_decay};
    em.fixed_e = fixed_e;
    em.fixed_m = fixed_m;
    if (gfn_loss == "tb")
        em.loss = GfnLoss::Tb;
    else if (gfn_loss == "subtb")
        em.loss = GfnLoss::SubTb;
    else if (gfn_loss == "sleep_only")
        em.loss = GfnLoss::SleepOnly;
    else if (gfn_loss == "hvi")
        em.loss = GfnLoss::Hvi;
    else
        throw std::runtime_error("config: unknown gfn.loss '" + gfn_loss + "'");
    em.forward_looking = forward_looking;
    em.sleep_weight = sleep_weight;
    em.mcmc_steps = mcmc_steps;
    em.mcmc_depth = mcmc_depth;
    em.greedy_m = greedy_m;
    em.e_batch = e_batch;
    em.m_batch = m_batch;
    em.explore = ExplorationConfig{beta, epsilon};
    return em;
}

void RunConfig::validate() const {
    auto one_of = [](const std::string& key, const std::string& v,
                     std::initializer_list<const char*> allowed) {
        for (const char* a : allowed)
            if (v == a) return;
        std::string msg = "config: key " + key + " has invalid value '" + v + "' (allowed:";
        for (const char* a : allowed) msg += std::string(" ") + a;
        throw std::runtime_error(msg + ")");
    };
    one_of("domain", domain, {"mixture", "grammar"});
    one_of("method", method,
           {"exact_em", "factorized_em", "marginalization", "exact_sampling_em", "mcem", "gfnem",
            "hvi"});
    one_of("grammar.mode", grammar_mode, {"cfg", "noncfg"});
    one_of("grammar.parametrization", grammar_param, {"table", "neural"});
    one_of("gen.style", gen_style, {"random", "right_branching", "parent_dependent"});
    one_of("gfn.loss", gfn_loss, {"tb", "subtb", "sleep_only", "hvi"});
    one_of("em.mode", em_mode, {"adaptive", "fixed"});
    if (epsilon < 0.0 || epsilon > 1.0)
        throw std::runtime_error("config: gfn.epsilon must lie in [0, 1]");
    if (beta <= 0.0 || beta > 1.0)
        throw std::runtime_error("config: gfn.beta must lie in (0, 1]");
    if (heldout_fraction < 0.0 || heldout_fraction >= 1.0)
        throw std::runtime_error("config: eval.heldout_fraction must lie in [0, 1)");
    if (domain == "mixture" &&
        (method == "marginalization" || method == "exact_sampling_em" || method == "mcem"))
        throw std::runtime_error("config: method " + method + " applies to the grammar domain");
    if (grammar_mode == "noncfg" && method == "marginalization")
        throw std::runtime_error("config: marginalization is intractable in non-CFG mode");
    if (grammar_mode == "noncfg" && grammar_param == "neural")
        throw std::runtime_error("config: the neural parametrization supports CFG mode only");
}

RunConfig apply_preset(RunConfig cfg, const std::string& preset) {
    if (preset == "-mcmc") {
        cfg.mcmc_steps = 0;
    } else if (preset == "-sleep") {
        cfg.sleep_weight = 0.0;
    } else if (preset == "-subtb") {
        cfg.gfn_loss = "tb";
    } else if (preset == "-exploration") {
        cfg.epsilon = 0.0;
        cfg.beta = 1.0;
    } else if (preset == "sleep-only") {
        cfg.gfn_loss = "sleep_only";
        cfg.sleep_weight = 0.0;
    } else if (preset == "hvi") {
        cfg.gfn_loss = "hvi";
        cfg.method = "hvi";
        cfg.sleep_weight = 0.0;
        cfg.mcmc_steps = 0;
        cfg.epsilon = 0.0;
    } else if (preset == "th-12-6") {
        cfg.threshold_max = 12.0;
        cfg.threshold_min = 6.0;
    } else if (preset == "th-8-4") {
        cfg.threshold_max = 8.0;
        cfg.threshold_min = 4.0;
    } else if (preset == "th-6-3") {
        cfg.threshold_max = 6.0;
        cfg.threshold_min = 3.0;
    } else if (preset == "th-4-2") {
        cfg.threshold_max = 4.0;
        cfg.threshold_min = 2.0;
    } else {
        throw std::runtime_error("unknown ablation preset: " + preset);
    }
    return cfg;
}

std::vector<std::string> known_presets() {
    return {"-mcmc", "-sleep", "-subtb", "-exploration", "sleep-only",
            "hvi",   "th-12-6", "th-8-4", "th-6-3",      "th-4-2"};
}

}  // namespace gfnem
