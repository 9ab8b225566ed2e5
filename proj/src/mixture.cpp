#include "gfnem/mixture.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "gfnem/parallel.hpp"

namespace gfnem::mixture {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double sq_dist(const double* x, double mx, double my) {
    double dx = x[0] - mx, dy = x[1] - my;
    return dx * dx + dy * dy;
}

// log N(x; m, I_2) up to the exact constant
double log_gauss(const double* x, double mx, double my) {
    return -kLog2Pi - 0.5 * sq_dist(x, mx, my);
}

}  // namespace

std::vector<double> ground_truth_means(const Geometry& g) {
    std::vector<double> mu(static_cast<size_t>(2 * g.num_super));
    int per_row = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(g.num_super))));
    for (int i = 0; i < g.num_super; ++i) {
        mu[static_cast<size_t>(2 * i)] = g.grid_spacing * (i % per_row);
        mu[static_cast<size_t>(2 * i + 1)] = g.grid_spacing * (i / per_row);
    }
    return mu;
}

std::vector<double> petal_offsets(const Geometry& g) {
    std::vector<double> d(static_cast<size_t>(2 * g.num_petals));
    if (g.num_petals == 4) {
        const double o = g.petal_offset;
        double vals[8] = {o, o, -o, o, -o, -o, o, -o};
        std::copy(vals, vals + 8, d.begin());
    } else {
        double r = g.petal_offset * std::sqrt(2.0);
        for (int j = 0; j < g.num_petals; ++j) {
            double a = 2.0 * M_PI * j / g.num_petals + M_PI / 4;
            d[static_cast<size_t>(2 * j)] = r * std::cos(a);
            d[static_cast<size_t>(2 * j + 1)] = r * std::sin(a);
        }
    }
    return d;
}

Dataset generate_dataset(const std::vector<double>& gt_means, const std::vector<double>& offsets,
                         int n, Rng& rng) {
    int ks = static_cast<int>(gt_means.size() / 2);
    int kp = static_cast<int>(offsets.size() / 2);
    Dataset d;
    d.points.resize(static_cast<size_t>(2 * n));
    d.labels.resize(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) {
        int i = rng.uniform_int(ks);
        int j = rng.uniform_int(kp);
        double mx = gt_means[static_cast<size_t>(2 * i)] + offsets[static_cast<size_t>(2 * j)];
        double my = gt_means[static_cast<size_t>(2 * i + 1)] +
                    offsets[static_cast<size_t>(2 * j + 1)];
        d.points[static_cast<size_t>(2 * k)] = rng.normal(mx, 1.0);
        d.points[static_cast<size_t>(2 * k + 1)] = rng.normal(my, 1.0);
        d.labels[static_cast<size_t>(k)] = {i, j};
    }
    return d;
}

void save_dataset(const std::string& path, const Dataset& data, const Geometry& g) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("mixture dataset: cannot open " + path);
    const char magic[8] = {'G', 'F', 'N', 'M', 'I', 'X', '1', '\0'};
    f.write(magic, 8);
    int32_t n = data.n(), ks = g.num_super, kp = g.num_petals;
    f.write(reinterpret_cast<const char*>(&n), 4);
    f.write(reinterpret_cast<const char*>(&ks), 4);
    f.write(reinterpret_cast<const char*>(&kp), 4);
    f.write(reinterpret_cast<const char*>(&g.grid_spacing), 8);
    f.write(reinterpret_cast<const char*>(&g.petal_offset), 8);
    f.write(reinterpret_cast<const char*>(data.points.data()),
            static_cast<std::streamsize>(data.points.size() * 8));
    std::ofstream lf(path + ".labels", std::ios::binary | std::ios::trunc);
    for (auto [i, j] : data.labels) {
        int32_t ij[2] = {i, j};
        lf.write(reinterpret_cast<const char*>(ij), 8);
    }
}

std::pair<Dataset, Geometry> load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("mixture dataset: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "GFNMIX1\0", 8) != 0)
        throw std::runtime_error("mixture dataset: bad magic in " + path);
    int32_t n = 0;
    Geometry g;
    f.read(reinterpret_cast<char*>(&n), 4);
    f.read(reinterpret_cast<char*>(&g.num_super), 4);
    f.read(reinterpret_cast<char*>(&g.num_petals), 4);
    f.read(reinterpret_cast<char*>(&g.grid_spacing), 8);
    f.read(reinterpret_cast<char*>(&g.petal_offset), 8);
    Dataset d;
    d.points.resize(static_cast<size_t>(2 * n));
    f.read(reinterpret_cast<char*>(d.points.data()), static_cast<std::streamsize>(2 * n * 8));
    if (!f) throw std::runtime_error("mixture dataset: truncated file " + path);
    std::ifstream lf(path + ".labels", std::ios::binary);
    if (lf) {
        for (int32_t k = 0; k < n; ++k) {
            int32_t ij[2];
            lf.read(reinterpret_cast<char*>(ij), 8);
            if (!lf) break;
            d.labels.emplace_back(ij[0], ij[1]);
        }
    }
    return {std::move(d), g};
}

Model::Model(const Geometry& g, std::vector<double> initial_means) : geo_(g) {
    offsets_ = petal_offsets(g);
    store_.add("mixture.mu", Tensor({g.num_super, 2}, std::move(initial_means)));
}

std::vector<double> exact_posterior(const Model& model, const double* x) {
    const int ks = model.num_super(), kp = model.num_petals();
    const double* mu = model.means();
    const double* d = model.offsets().data();
    std::vector<double> logits(static_cast<size_t>(ks * kp));
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < ks; ++i)
        for (int j = 0; j < kp; ++j) {
            double v = -0.5 * sq_dist(x, mu[2 * i] + d[2 * j], mu[2 * i + 1] + d[2 * j + 1]);
            logits[static_cast<size_t>(i * kp + j)] = v;
            best = std::max(best, v);
        }
    double total = 0.0;
    for (double& v : logits) {
        v = std::exp(v - best);
        total += v;
    }
    for (double& v : logits) v /= total;
    return logits;
}

namespace {

template <class Loop>
std::vector<double> posterior_table_impl(const Model& model, const Dataset& data, Loop&& loop) {
    const int kk = model.num_super() * model.num_petals();
    std::vector<double> table(static_cast<size_t>(data.n() * kk));
    loop(static_cast<size_t>(data.n()), [&](size_t k) {
        std::vector<double> row = exact_posterior(model, data.point(static_cast<int>(k)));
        std::copy(row.begin(), row.end(), table.begin() + static_cast<int64_t>(k) * kk);
    });
    return table;
}

}  // namespace

std::vector<double> posterior_table(const Model& model, const Dataset& data) {
    return posterior_table_impl(model, data,
                                [](size_t n, auto&& fn) { parallel_for(n, fn); });
}

std::vector<double> posterior_table_serial(const Model& model, const Dataset& data) {
    return posterior_table_impl(model, data,
                                [](size_t n, auto&& fn) { parallel_for_serial(n, fn); });
}

std::pair<std::vector<double>, std::vector<double>> factorized_posterior(const Model& model,
                                                                         const double* x,
                                                                         int sweeps) {
    const int ks = model.num_super(), kp = model.num_petals();
    const double* mu = model.means();
    const double* d = model.offsets().data();
    // pairwise score s_ij = log p(x | i, j) up to a constant
    std::vector<double> s(static_cast<size_t>(ks * kp));
    for (int i = 0; i < ks; ++i)
        for (int j = 0; j < kp; ++j)
            s[static_cast<size_t>(i * kp + j)] =
                -0.5 * sq_dist(x, mu[2 * i] + d[2 * j], mu[2 * i + 1] + d[2 * j + 1]);

    std::vector<double> qi(static_cast<size_t>(ks), 1.0 / ks);
    std::vector<double> qj(static_cast<size_t>(kp), 1.0 / kp);
    auto normalize_exp = [](std::vector<double>& v) {
        double m = -std::numeric_limits<double>::infinity();
        for (double u : v) m = std::max(m, u);
        double total = 0.0;
        for (double& u : v) {
            u = std::exp(u - m);
            total += u;
        }
        for (double& u : v) u /= total;
    };
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        std::vector<double> li(static_cast<size_t>(ks), 0.0);
        for (int i = 0; i < ks; ++i)
            for (int j = 0; j < kp; ++j)
                li[static_cast<size_t>(i)] += qj[static_cast<size_t>(j)] *
                                              s[static_cast<size_t>(i * kp + j)];
        qi = li;
        normalize_exp(qi);
        std::vector<double> lj(static_cast<size_t>(kp), 0.0);
        for (int j = 0; j < kp; ++j)
            for (int i = 0; i < ks; ++i)
                lj[static_cast<size_t>(j)] += qi[static_cast<size_t>(i)] *
                                              s[static_cast<size_t>(i * kp + j)];
        qj = lj;
        normalize_exp(qj);
    }
    return {qi, qj};
}

double factorized_elbo(const Model& model, const double* x, const std::vector<double>& qi,
                       const std::vector<double>& qj) {
    const int ks = model.num_super(), kp = model.num_petals();
    const double* mu = model.means();
    const double* d = model.offsets().data();
    const double log_prior = -std::log(static_cast<double>(ks * kp));
    double elbo = 0.0;
    for (int i = 0; i < ks; ++i)
        for (int j = 0; j < kp; ++j) {
            double q = qi[static_cast<size_t>(i)] * qj[static_cast<size_t>(j)];
            if (q <= 0.0) continue;
            double lp = log_prior +
                        log_gauss(x, mu[2 * i] + d[2 * j], mu[2 * i + 1] + d[2 * j + 1]);
            elbo += q * (lp - std::log(q));
        }
    return elbo;
}

namespace {

// shared closed-form mu update given per-point responsibilities r(i,j|x)
void apply_mean_update(Model& model, const Dataset& data, const std::vector<double>& resp,
                       std::vector<int>* starved) {
    const int ks = model.num_super(), kp = model.num_petals();
    const double* d = model.offsets().data();
    std::vector<double> num(static_cast<size_t>(2 * ks), 0.0);
    std::vector<double> den(static_cast<size_t>(ks), 0.0);
    for (int k = 0; k < data.n(); ++k) {
        const double* x = data.point(k);
        const double* r = resp.data() + static_cast<int64_t>(k) * ks * kp;
        for (int i = 0; i < ks; ++i)
            for (int j = 0; j < kp; ++j) {
                double w = r[i * kp + j];
                num[static_cast<size_t>(2 * i)] += w * (x[0] - d[2 * j]);
                num[static_cast<size_t>(2 * i + 1)] += w * (x[1] - d[2 * j + 1]);
                den[static_cast<size_t>(i)] += w;
            }
    }
    double* mu = model.means_mut();
    for (int i = 0; i < ks; ++i) {
        if (den[static_cast<size_t>(i)] < 1e-12) {
            if (starved) starved->push_back(i);
            continue;
        }
        mu[2 * i] = num[static_cast<size_t>(2 * i)] / den[static_cast<size_t>(i)];
        mu[2 * i + 1] = num[static_cast<size_t>(2 * i + 1)] / den[static_cast<size_t>(i)];
    }
    model.params().bump_version();
}

}  // namespace

void exact_em_update(Model& model, const Dataset& data, std::vector<int>* starved) {
    if (data.n() == 0) throw std::runtime_error("exact_em_update: empty dataset");
    std::vector<double> resp = posterior_table(model, data);
    apply_mean_update(model, data, resp, starved);
}

void factorized_em_update(Model& model, const Dataset& data, int sweeps,
                          std::vector<int>* starved) {
    if (data.n() == 0) throw std::runtime_error("factorized_em_update: empty dataset");
    if (sweeps < 1) throw std::runtime_error("factorized_em_update: sweeps must be >= 1");
    const int ks = model.num_super(), kp = model.num_petals();
    std::vector<double> resp(static_cast<size_t>(data.n()) * ks * kp);
    parallel_for(static_cast<size_t>(data.n()), [&](size_t k) {
        auto [qi, qj] = factorized_posterior(model, data.point(static_cast<int>(k)), sweeps);
        double* r = resp.data() + static_cast<int64_t>(k) * ks * kp;
        for (int i = 0; i < ks; ++i)
            for (int j = 0; j < kp; ++j)
                r[i * kp + j] = qi[static_cast<size_t>(i)] * qj[static_cast<size_t>(j)];
    });
    apply_mean_update(model, data, resp, starved);
}

namespace {

double point_loglik(const Model& model, const double* x) {
    const int ks = model.num_super(), kp = model.num_petals();
    const double* mu = model.means();
    const double* d = model.offsets().data();
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> l(static_cast<size_t>(ks * kp));
    for (int i = 0; i < ks; ++i)
        for (int j = 0; j < kp; ++j) {
            double v = -0.5 * sq_dist(x, mu[2 * i] + d[2 * j], mu[2 * i + 1] + d[2 * j + 1]);
            l[static_cast<size_t>(i * kp + j)] = v;
            best = std::max(best, v);
        }
    double acc = 0.0;
    for (double v : l) acc += std::exp(v - best);
    return best + std::log(acc) - kLog2Pi - std::log(static_cast<double>(ks * kp));
}

template <class Loop>
double dataset_loglik_impl(const Model& model, const Dataset& data, Loop&& loop) {
    std::vector<double> per_point(static_cast<size_t>(data.n()));
    loop(static_cast<size_t>(data.n()), [&](size_t k) {
        per_point[k] = point_loglik(model, data.point(static_cast<int>(k)));
    });
    double total = 0.0;
    for (double v : per_point) total += v;  // fixed-order reduction
    return total / data.n();
}

}  // namespace

double dataset_loglik(const Model& model, const Dataset& data) {
    return dataset_loglik_impl(model, data, [](size_t n, auto&& fn) { parallel_for(n, fn); });
}

double dataset_loglik_serial(const Model& model, const Dataset& data) {
    return dataset_loglik_impl(model, data,
                               [](size_t n, auto&& fn) { parallel_for_serial(n, fn); });
}

double Env::log_reward(const State& s) const {
    const double* mu = model_->means();
    const double* d = model_->offsets().data();
    return log_gauss(x_.data(), mu[2 * s.i] + d[2 * s.j], mu[2 * s.i + 1] + d[2 * s.j + 1]);
}

// ---- policy ----------------------------------------------------------------

Policy::Policy(const Geometry& g, int hidden, Rng& rng) : geo_(g), hidden_(hidden) {
    const int64_t in = 2 + g.num_super;
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    store_.add_gaussian("policy.trunk.w1", {in, hidden}, s1, rng);
    store_.add("policy.trunk.b1", Tensor({hidden}));
    store_.add_gaussian("policy.head_i.w", {hidden, g.num_super}, s2, rng);
    store_.add("policy.head_i.b", Tensor({g.num_super}));
    store_.add_gaussian("policy.head_j.w", {hidden, g.num_petals}, s2, rng);
    store_.add("policy.head_j.b", Tensor({g.num_petals}));
    store_.add_gaussian("policy.flow.w", {hidden, 1}, s2, rng);
    store_.add("policy.flow.b", Tensor({1}));
    store_.add_gaussian("policy.z.w", {hidden, 1}, s2, rng);
    store_.add("policy.z.b", Tensor({1}));
}

Var Policy::trunk(Tape& t, const Env& env, const State& s) {
    // inputs scaled to keep tanh activations in range
    const int64_t width = 2 + geo_.num_super;
    std::vector<double> in(static_cast<size_t>(width), 0.0);
    in[0] = 0.1 * env.x()[0];
    in[1] = 0.1 * env.x()[1];
    if (s.i >= 0) in[static_cast<size_t>(2 + s.i)] = 1.0;
    Var x = t.constant(Tensor({1, width}, std::move(in)));
    return t.tanh(t.add(t.matmul(x, t.param(store_, "policy.trunk.w1")),
                        t.param(store_, "policy.trunk.b1")));
}

Var Policy::forward_logits(Tape& t, const Env& env, const State& s) {
    Var h = trunk(t, env, s);
    const char* head = s.i < 0 ? "policy.head_i" : "policy.head_j";
    Var y = t.add(t.matmul(h, t.param(store_, std::string(head) + ".w")),
                  t.param(store_, std::string(head) + ".b"));
    return t.reshape(y, {y.shape()[1]});
}

Var Policy::backward_logits(Tape& t, const Env&, const State&) {
    return t.constant(Tensor({1}));  // single parent everywhere
}

Var Policy::log_flow_head(Tape& t, const Env& env, const State& s) {
    Var h = trunk(t, env, s);
    Var y = t.add(t.matmul(h, t.param(store_, "policy.flow.w")),
                  t.param(store_, "policy.flow.b"));
    return t.reshape(y, {});
}

Var Policy::log_z(Tape& t, const Env& env) {
    Var h = trunk(t, env, State{});
    Var y = t.add(t.matmul(h, t.param(store_, "policy.z.w")), t.param(store_, "policy.z.b"));
    return t.reshape(y, {});
}

// ---- emdriver adapter -------------------------------------------------------

Var Domain::m_step_loss(Tape& t, const State& z, const X& x) {
    // -log p(z) - log p(x|z) with uniform prior over (i, j)
    const double log_prior =
        -std::log(static_cast<double>(model->num_super() * model->num_petals()));
    Var mu = t.param(model->params(), "mixture.mu");
    Var mu_i = t.gather(mu, {2 * z.i, 2 * z.i + 1});
    const auto& d = model->offsets();
    Tensor target({2}, {x[0] - d[static_cast<size_t>(2 * z.j)],
                        x[1] - d[static_cast<size_t>(2 * z.j + 1)]});
    Var diff = t.sub(t.constant(target), mu_i);
    Var sq = t.sum(t.square(diff));
    return t.add_const(t.scale(sq, 0.5), 1.8378770664093454835606594728112 - log_prior);
}

std::pair<State, Domain::X> Domain::ancestral_sample(Rng& rng) {
    State z{rng.uniform_int(model->num_super()), rng.uniform_int(model->num_petals())};
    const double* mu = model->means();
    const auto& d = model->offsets();
    X x{rng.normal(mu[2 * z.i] + d[static_cast<size_t>(2 * z.j)], 1.0),
        rng.normal(mu[2 * z.i + 1] + d[static_cast<size_t>(2 * z.j + 1)], 1.0)};
    return {z, x};
}

}  // namespace gfnem::mixture
