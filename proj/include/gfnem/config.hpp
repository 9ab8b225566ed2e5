#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gfnem/emdriver.hpp"
#include "gfnem/grammar.hpp"
#include "gfnem/mixture.hpp"

namespace gfnem {

// Flat typed key-value run configuration with dotted section prefixes.
// Unknown keys are hard errors; values are parsed per key type.
struct RunConfig {
    std::string domain = "mixture";  // mixture | grammar
    std::string method = "gfnem";    // exact_em | factorized_em | marginalization |
                                     // exact_sampling_em | mcem | gfnem | hvi
    uint64_t seed = 0;
    int64_t steps = 0;  // 0: use the per-domain default
    std::string out_dir = "run_out";
    std::string data_dir;
    double heldout_fraction = 0.2;

    // mixture domain
    mixture::Geometry geometry;
    int mixture_points = 512;
    int mixture_iterations = 60;
    int mixture_gfn_steps_per_e = 1000;
    int mixture_mf_sweeps = 10;
    int mixture_policy_hidden = 64;
    double mixture_policy_lr = 3e-3;
    double mixture_mu_lr = 0.3;

    // grammar domain
    grammar::Sizes sizes;
    std::string grammar_mode = "cfg";     // cfg | noncfg
    std::string grammar_param = "table";  // table | neural
    int max_len = 8;
    int corpus_sentences = 300;
    std::string gen_style = "random";  // random | right_branching | parent_dependent
    double gen_nt_mass = 0.3;
    double grammar_lr = 1e-3;
    double grammar_beta1 = 0.75;
    double grammar_beta2 = 0.999;
    int grammar_batch = 16;
    int mcem_chain_steps = 1000;

    // parse policy
    int policy_embed = 48;
    int policy_hidden = 64;
    int policy_layers = 2;
    int policy_max_positions = 48;
    double policy_lr = 1e-4;
    double z_lr = 0.03;

    // GFlowNet engine
    std::string gfn_loss = "subtb";  // tb | subtb | sleep_only | hvi
    bool forward_looking = true;
    double epsilon = 0.05;
    double beta = 1.0;
    double sleep_weight = 10.0;
    int mcmc_steps = 10;
    int mcmc_depth = 2;
    int e_batch = 32;
    int m_batch = 32;

    // EM schedule
    std::string em_mode = "adaptive";  // adaptive | fixed
    double threshold_max = 6.0;
    double threshold_min = 3.0;
    int64_t threshold_horizon = 10000;
    double moving_avg_decay = 0.99;
    int64_t fixed_e = 400;
    int64_t fixed_m = 400;
    bool greedy_m = false;

    // EBM shape prior
    bool ebm_enabled = false;
    int ebm_embed = 8;
    int ebm_hidden = 16;
    double ebm_lr = 1e-5;
    double ebm_l2 = 1e-4;
    int ebm_batch = 32;
    int ebm_buffer = 64;
    int ebm_mh_steps = 5;
    int ebm_pretrain = 500;
    double ebm_temp_start = 1.0;
    double ebm_temp_end = 1000.0;
    int64_t ebm_temp_horizon = 10000;

    // evaluation
    int iw_k = 500;
    int iw_k_train = 10;
    int eval_max_sentences = 200;

    EmConfig em_config() const;
    void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);
std::string config_to_text(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::string& path);

// named ablation presets; returns the modified config
RunConfig apply_preset(RunConfig cfg, const std::string& preset);
std::vector<std::string> known_presets();

}  // namespace gfnem
