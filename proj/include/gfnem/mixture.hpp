#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "gfnem/emdriver.hpp"
#include "gfnem/gflownet.hpp"
#include "gfnem/mlp.hpp"
#include "gfnem/params.hpp"
#include "gfnem/rng.hpp"
#include "gfnem/tape.hpp"

namespace gfnem::mixture {

// Hierarchical Gaussian mixture: a point is drawn by choosing a supercluster
// i and a petal j uniformly, then sampling from N(mu_i + delta_j, I_2).
// Only the supercluster means are learnable; offsets, unit variance, and the
// uniform priors are fixed.

// Default geometry keeps the component layout at 6 sigma separations: the
// bulk overlap correction to the per-sample log-likelihood is ~0.02 nats,
// so the ground-truth value stays at the analytic -(1 + log 2pi) - log 16.
// Ambiguous points still arise near decision boundaries and during EM from
// random initializations.
struct Geometry {
    int num_super = 4;
    int num_petals = 4;
    double grid_spacing = 12.0;
    double petal_offset = 3.0;
};

// supercluster means on a grid: (0,0), (s,0), (0,s), (s,s), then further
// grid cells for larger counts
std::vector<double> ground_truth_means(const Geometry& g);
// four diagonal offsets (+-d, +-d); additional petals go on the same circle
std::vector<double> petal_offsets(const Geometry& g);

struct Dataset {
    std::vector<double> points;            // 2N, row-major (x0, x1)
    std::vector<std::pair<int, int>> labels;  // generating (i, j); diagnostics only
    int n() const { return static_cast<int>(points.size() / 2); }
    const double* point(int k) const { return points.data() + 2 * k; }
};

Dataset generate_dataset(const std::vector<double>& gt_means, const std::vector<double>& offsets,
                         int n, Rng& rng);

// dataset file: header (N, K_s, K_p, geometry) then N rows of two 64-bit
// reals; generating labels go to a separate diagnostics file
void save_dataset(const std::string& path, const Dataset& data, const Geometry& g);
std::pair<Dataset, Geometry> load_dataset(const std::string& path);

class Model {
public:
    Model(const Geometry& g, std::vector<double> initial_means);

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const double* means() const { return store_.block("mixture.mu").value.values.data(); }
    double* means_mut() { return store_.block("mixture.mu").value.values.data(); }
    const std::vector<double>& offsets() const { return offsets_; }
    int num_super() const { return geo_.num_super; }
    int num_petals() const { return geo_.num_petals; }
    const Geometry& geometry() const { return geo_; }

private:
    Geometry geo_;
    std::vector<double> offsets_;
    ParamStore store_;
};

// q(i,j|x) as a normalized Ks*Kp grid (row-major over i then j), computed
// with max-shifted exponentials.
std::vector<double> exact_posterior(const Model& model, const double* x);

// per-point posterior grids for a whole dataset; parallel kernel plus the
// serial reference used by tests and the benchmark
std::vector<double> posterior_table(const Model& model, const Dataset& data);
std::vector<double> posterior_table_serial(const Model& model, const Dataset& data);

// mean-field coordinate ascent for q(i|x) q(j|x); returns the two factors
std::pair<std::vector<double>, std::vector<double>> factorized_posterior(const Model& model,
                                                                         const double* x,
                                                                         int sweeps);

// ELBO of a factorized posterior for one point (used by the sweep test)
double factorized_elbo(const Model& model, const double* x, const std::vector<double>& qi,
                       const std::vector<double>& qj);

// closed-form M-step with exact responsibilities; superclusters with total
// responsibility below 1e-12 are left unchanged and reported via `starved`
void exact_em_update(Model& model, const Dataset& data, std::vector<int>* starved = nullptr);

// same closed-form update with mean-field q(i)q(j) responsibilities
void factorized_em_update(Model& model, const Dataset& data, int sweeps,
                          std::vector<int>* starved = nullptr);

// mean per-sample log-likelihood; parallel kernel + serial reference
double dataset_loglik(const Model& model, const Dataset& data);
double dataset_loglik_serial(const Model& model, const Dataset& data);

// ---- GFlowNet environment -------------------------------------------------

struct State {
    int i = -1;
    int j = -1;
};

// two-step environment: choose the supercluster, then the petal;
// log-reward is log N(x; mu_i + delta_j, I)
class Env {
public:
    using State = mixture::State;

    Env(const Model& model, const double* x) : model_(&model), x_{x[0], x[1]} {}

    State initial() const { return State{}; }
    bool is_terminal(const State& s) const { return s.j >= 0; }
    int num_forward_actions(const State& s) const {
        return s.i < 0 ? model_->num_super() : model_->num_petals();
    }
    State apply(const State& s, int a) const {
        return s.i < 0 ? State{a, -1} : State{s.i, a};
    }
    int num_backward_actions(const State& s) const { return s.i < 0 ? 0 : 1; }
    State unapply(const State& s, int) const {
        return s.j >= 0 ? State{s.i, -1} : State{};
    }
    int backward_action_of(const State&, int, const State&) const { return 0; }
    int forward_action_of(const State& parent, int, const State& child) const {
        return parent.i < 0 ? child.i : child.j;
    }
    double log_reward(const State& s) const;
    bool has_partial_reward() const { return false; }
    double partial_log_reward(const State&) const { return 0.0; }
    std::string key(const State& s) const {
        return std::to_string(s.i) + "," + std::to_string(s.j);
    }

    const double* x() const { return x_.data(); }
    const Model& model() const { return *model_; }

private:
    const Model* model_;
    std::array<double, 2> x_;
};

// Two-layer perceptron over (x, one-hot of the chosen supercluster), with
// separate logit heads for the two decisions, a flow head, and a partition
// head in its own parameter group.
class Policy {
public:
    Policy(const Geometry& g, int hidden, Rng& rng);

    Var forward_logits(Tape& t, const Env& env, const State& s);
    Var backward_logits(Tape& t, const Env& env, const State& s);
    Var log_flow_head(Tape& t, const Env& env, const State& s);
    Var log_z(Tape& t, const Env& env);
    ParamStore& params() { return store_; }

private:
    Var trunk(Tape& t, const Env& env, const State& s);
    Geometry geo_;
    int hidden_;
    ParamStore store_;
};

// emdriver adapter
struct Domain {
    using X = std::array<double, 2>;
    using Env = mixture::Env;

    Model* model = nullptr;
    Policy* gfn_policy = nullptr;
    AdamOptimizer* model_opt = nullptr;
    AdamOptimizer* gfn_opt = nullptr;

    Env make_env(const X& x) const { return Env(*model, x.data()); }
    Var m_step_loss(Tape& t, const State& z, const X& x);
    std::pair<State, X> ancestral_sample(Rng& rng);
    ParamStore& gen_params() { return model->params(); }
    AdamOptimizer& gen_opt() { return *model_opt; }
    Policy& policy() { return *gfn_policy; }
    AdamOptimizer& policy_opt() { return *gfn_opt; }
    void on_step(int64_t) {}
};

}  // namespace gfnem::mixture
