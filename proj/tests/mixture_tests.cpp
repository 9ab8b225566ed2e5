#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "gfnem/fdcheck.hpp"
#include "gfnem/mixture.hpp"

using namespace gfnem;
using namespace gfnem::mixture;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Model ground_truth_model(const Geometry& g) {
    return Model(g, ground_truth_means(g));
}

}  // namespace

TEST_CASE("dataset: sample mean near the average of component means") {
    Geometry g;
    Rng rng(101);
    auto mu = ground_truth_means(g);
    auto d = petal_offsets(g);
    auto data = generate_dataset(mu, d, 20000, rng);
    double cx = 0.0, cy = 0.0;
    for (int k = 0; k < data.n(); ++k) {
        cx += data.point(k)[0];
        cy += data.point(k)[1];
    }
    cx /= data.n();
    cy /= data.n();
    // average of all 16 component means = average of mu (offsets cancel)
    double ex = 0.0, ey = 0.0;
    for (int i = 0; i < 4; ++i) {
        ex += mu[static_cast<size_t>(2 * i)] / 4;
        ey += mu[static_cast<size_t>(2 * i + 1)] / 4;
    }
    // component std is ~4.7 here; 3 sigma of the mean over 20000 draws
    CHECK(std::abs(cx - ex) < 0.15);
    CHECK(std::abs(cy - ey) < 0.15);
}

TEST_CASE("dataset: per-component empirical covariance is near identity") {
    Geometry g;
    Rng rng(102);
    auto mu = ground_truth_means(g);
    auto d = petal_offsets(g);
    auto data = generate_dataset(mu, d, 40000, rng);
    // use generating labels (diagnostics) to isolate one component
    double sxx = 0, syy = 0, sxy = 0, cx = 0, cy = 0;
    int n = 0;
    for (int k = 0; k < data.n(); ++k) {
        if (data.labels[static_cast<size_t>(k)] != std::make_pair(0, 0)) continue;
        cx += data.point(k)[0];
        cy += data.point(k)[1];
        ++n;
    }
    REQUIRE(n > 1000);
    cx /= n;
    cy /= n;
    for (int k = 0; k < data.n(); ++k) {
        if (data.labels[static_cast<size_t>(k)] != std::make_pair(0, 0)) continue;
        double dx = data.point(k)[0] - cx, dy = data.point(k)[1] - cy;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    CHECK(sxx / n == doctest::Approx(1.0).epsilon(0.1));
    CHECK(syy / n == doctest::Approx(1.0).epsilon(0.1));
    CHECK(std::abs(sxy / n) < 0.05);
}

TEST_CASE("ground-truth log-likelihood matches the analytic value") {
    Geometry g;
    Rng rng(103);
    Model model = ground_truth_model(g);
    auto data = generate_dataset(ground_truth_means(g), petal_offsets(g), 8000, rng);
    double ll = dataset_loglik(model, data);
    double analytic = -(1.0 + kLog2Pi) - std::log(16.0);  // ~ -5.61
    CHECK(ll == doctest::Approx(analytic).epsilon(0.01));
}

TEST_CASE("exact posterior: concentrated at the true component far from others") {
    Geometry g;
    Model model = ground_truth_model(g);
    const auto& d = model.offsets();
    double x[2] = {model.means()[2] + d[0], model.means()[3] + d[1]};  // component (1, 0)
    auto q = exact_posterior(model, x);
    CHECK(q[static_cast<size_t>(1 * 4 + 0)] > 0.99);
}

TEST_CASE("exact posterior: two-way split at an ambiguous midpoint") {
    Geometry g;
    Model model = ground_truth_model(g);
    // midpoint between component (0, petal (+o,+o)) and component
    // (1, petal (-o,+o)); both sit at height +o
    double x[2] = {g.grid_spacing / 2, g.petal_offset};
    auto q = exact_posterior(model, x);
    double a = q[static_cast<size_t>(0 * 4 + 0)];  // petal 0 is (+o, +o)
    double b = q[static_cast<size_t>(1 * 4 + 1)];  // petal 1 is (-o, +o)
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
    CHECK(a + b > 0.95);
}

TEST_CASE("exact posterior equals brute-force normalization to 1e-12") {
    Geometry g;
    Rng rng(104);
    Model model = ground_truth_model(g);
    for (int rep = 0; rep < 50; ++rep) {
        double x[2] = {20.0 * rng.uniform() - 6.0, 20.0 * rng.uniform() - 6.0};
        auto q = exact_posterior(model, x);
        // direct normalization of the 16 Gaussian densities
        std::vector<double> dens(16);
        double total = 0.0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double mx = model.means()[2 * i] + model.offsets()[static_cast<size_t>(2 * j)];
                double my = model.means()[2 * i + 1] +
                            model.offsets()[static_cast<size_t>(2 * j + 1)];
                double d2 = (x[0] - mx) * (x[0] - mx) + (x[1] - my) * (x[1] - my);
                dens[static_cast<size_t>(i * 4 + j)] = std::exp(-0.5 * d2) / (2 * M_PI);
                total += dens[static_cast<size_t>(i * 4 + j)];
            }
        double sum_q = 0.0;
        for (int k = 0; k < 16; ++k) {
            CHECK(std::abs(q[static_cast<size_t>(k)] - dens[static_cast<size_t>(k)] / total) <
                  1e-12);
            sum_q += q[static_cast<size_t>(k)];
        }
        CHECK(std::abs(sum_q - 1.0) < 1e-10);
    }
}

TEST_CASE("parallel posterior table matches the serial reference bitwise") {
    Geometry g;
    Rng rng(105);
    Model model = ground_truth_model(g);
    auto data = generate_dataset(ground_truth_means(g), petal_offsets(g), 512, rng);
    auto par = posterior_table(model, data);
    auto ser = posterior_table_serial(model, data);
    REQUIRE(par.size() == ser.size());
    for (size_t i = 0; i < par.size(); ++i) CHECK(par[i] == ser[i]);
    CHECK(dataset_loglik(model, data) == dataset_loglik_serial(model, data));
}

TEST_CASE("exact EM: one point with uniform responsibilities sends every mean to x - mean(delta)") {
    Geometry g;
    g.petal_offset = 0.0;  // coincident petals + equal means -> uniform posterior
    Model model(g, std::vector<double>(8, 0.0));
    Dataset data;
    data.points = {3.0, -1.0};
    exact_em_update(model, data);
    // mean(delta) = 0, so every supercluster mean moves to x
    for (int i = 0; i < 4; ++i) {
        CHECK(model.means()[2 * i] == doctest::Approx(3.0).epsilon(1e-9));
        CHECK(model.means()[2 * i + 1] == doctest::Approx(-1.0).epsilon(1e-9));
    }
}

TEST_CASE("exact EM: one-hot responsibilities average x - delta_j over the points") {
    Geometry g;
    g.grid_spacing = 100.0;  // separations large enough for exactly one-hot posteriors
    g.petal_offset = 12.0;
    Model model = ground_truth_model(g);
    Rng rng(106);
    // points tightly around component (2, 3): responsibilities ~ one-hot
    Dataset data;
    const auto& d = model.offsets();
    double mx = model.means()[4] + d[6], my = model.means()[5] + d[7];
    for (int k = 0; k < 200; ++k) {
        data.points.push_back(mx + 0.05 * rng.normal());
        data.points.push_back(my + 0.05 * rng.normal());
    }
    double ex = 0, ey = 0;
    for (int k = 0; k < data.n(); ++k) {
        ex += (data.point(k)[0] - d[6]) / data.n();
        ey += (data.point(k)[1] - d[7]) / data.n();
    }
    exact_em_update(model, data);
    CHECK(model.means()[4] == doctest::Approx(ex).epsilon(1e-6));
    CHECK(model.means()[5] == doctest::Approx(ey).epsilon(1e-6));
}

TEST_CASE("exact EM never decreases the dataset log-likelihood") {
    Geometry g;
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        Rng rng(seed);
        auto data = generate_dataset(ground_truth_means(g), petal_offsets(g), 256, rng);
        // init means from random data points
        std::vector<double> init;
        for (int i = 0; i < 4; ++i) {
            int k = rng.uniform_int(data.n());
            init.push_back(data.point(k)[0]);
            init.push_back(data.point(k)[1]);
        }
        Model model(g, init);
        double prev = dataset_loglik(model, data);
        for (int it = 0; it < 20; ++it) {
            exact_em_update(model, data);
            double cur = dataset_loglik(model, data);
            CHECK(cur >= prev - 1e-10);
            prev = cur;
        }
    }
}

TEST_CASE("factorized EM equals exact EM when only one supercluster is active") {
    Geometry g;
    // push superclusters far apart and use data from one of them only
    g.grid_spacing = 200.0;
    Model exact_model = ground_truth_model(g);
    Model mf_model = ground_truth_model(g);
    Rng rng(107);
    Dataset data;
    const auto& d = exact_model.offsets();
    for (int k = 0; k < 128; ++k) {
        int j = rng.uniform_int(4);
        data.points.push_back(d[static_cast<size_t>(2 * j)] + rng.normal());
        data.points.push_back(d[static_cast<size_t>(2 * j + 1)] + rng.normal());
    }
    exact_em_update(exact_model, data);
    factorized_em_update(mf_model, data, 10);
    // supercluster 0 hosts all the data; the factorization is exact there
    CHECK(mf_model.means()[0] == doctest::Approx(exact_model.means()[0]).epsilon(1e-9));
    CHECK(mf_model.means()[1] == doctest::Approx(exact_model.means()[1]).epsilon(1e-9));
}

TEST_CASE("factorized posterior misses the correlated two-mode structure") {
    Geometry g;
    Model model = ground_truth_model(g);
    double x[2] = {g.grid_spacing / 2, g.petal_offset};  // ambiguous midpoint
    auto exact = exact_posterior(model, x);
    auto [qi, qj] = factorized_posterior(model, x, 10);
    double tv = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            tv += std::abs(exact[static_cast<size_t>(i * 4 + j)] -
                           qi[static_cast<size_t>(i)] * qj[static_cast<size_t>(j)]);
    CHECK(tv / 2 > 0.1);
}

TEST_CASE("mean-field sweeps never decrease the ELBO") {
    Geometry g;
    Model model = ground_truth_model(g);
    Rng rng(108);
    for (int rep = 0; rep < 20; ++rep) {
        double x[2] = {16.0 * rng.uniform() - 4.0, 16.0 * rng.uniform() - 4.0};
        double prev = -std::numeric_limits<double>::infinity();
        for (int sweeps = 1; sweeps <= 6; ++sweeps) {
            auto [qi, qj] = factorized_posterior(model, x, sweeps);
            double elbo = factorized_elbo(model, x, qi, qj);
            CHECK(elbo >= prev - 1e-9);
            prev = elbo;
        }
    }
}

TEST_CASE("mixture env: 16 terminals, each with a unique trajectory") {
    Geometry g;
    Model model = ground_truth_model(g);
    double x[2] = {1.0, 2.0};
    Env env(model, x);
    Rng rng(109);

    auto dist = enumerate_reward_distribution(env);
    CHECK(dist.size() == 16);

    // unique trajectory: the backward walk from any terminal is forced
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            State z{i, j};
            CHECK(env.num_backward_actions(z) == 1);
            State mid = env.unapply(z, 0);
            CHECK(env.num_backward_actions(mid) == 1);
            CHECK(env.key(env.unapply(mid, 0)) == env.key(env.initial()));
        }
}

TEST_CASE("mixture env reward distribution equals the exact posterior") {
    Geometry g;
    Model model = ground_truth_model(g);
    Rng rng(110);
    for (int rep = 0; rep < 10; ++rep) {
        double x[2] = {16.0 * rng.uniform() - 4.0, 16.0 * rng.uniform() - 4.0};
        Env env(model, x);
        auto dist = enumerate_reward_distribution(env);
        auto q = exact_posterior(model, x);
        for (const auto& [key, entry] : dist) {
            const State& z = entry.first;
            CHECK(std::abs(entry.second - q[static_cast<size_t>(z.i * 4 + z.j)]) < 1e-10);
        }
    }
}

TEST_CASE("a policy with exact conditionals terminates with the exact posterior") {
    // stand-in for a perfectly trained sampler: logits are the posterior
    // conditionals; the enumerated terminating distribution must match the
    // exact posterior table
    Geometry g;
    Model model = ground_truth_model(g);
    double x[2] = {3.7, 1.1};
    Env env(model, x);
    auto q = exact_posterior(model, x);

    struct ExactPolicy {
        std::vector<double> q;
        ParamStore store;
        Var forward_logits(Tape& t, const Env&, const State& s) {
            if (s.i < 0) {
                std::vector<double> marg(4, 0.0);
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j)
                        marg[static_cast<size_t>(i)] += q[static_cast<size_t>(i * 4 + j)];
                for (auto& v : marg) v = std::log(v);
                return t.constant(Tensor::vector1d(marg));
            }
            std::vector<double> cond(4, 0.0);
            double total = 0.0;
            for (int j = 0; j < 4; ++j) total += q[static_cast<size_t>(s.i * 4 + j)];
            for (int j = 0; j < 4; ++j)
                cond[static_cast<size_t>(j)] =
                    std::log(q[static_cast<size_t>(s.i * 4 + j)] / total);
            return t.constant(Tensor::vector1d(cond));
        }
        Var backward_logits(Tape& t, const Env&, const State&) {
            return t.constant(Tensor({1}));
        }
        Var log_flow_head(Tape& t, const Env&, const State&) { return t.scalar(0.0); }
        Var log_z(Tape& t, const Env&) { return t.scalar(0.0); }
        ParamStore& params() { return store; }
    } policy{q, {}};

    auto dist = enumerate_terminating_distribution(env, policy);
    double tv = 0.0;
    for (const auto& [key, entry] : dist)
        tv += std::abs(entry.second -
                       q[static_cast<size_t>(entry.first.i * 4 + entry.first.j)]);
    CHECK(tv / 2 < 1e-3);
}

TEST_CASE("dataset loglik: single component at its mean gives -log(2 pi)") {
    Geometry g;
    g.num_super = 1;
    g.num_petals = 1;
    g.petal_offset = 0.0;
    Model model(g, {0.0, 0.0});
    Dataset data;
    data.points = {0.0, 0.0};
    CHECK(dataset_loglik(model, data) == doctest::Approx(-kLog2Pi).epsilon(1e-12));
}

TEST_CASE("dataset loglik is invariant to supercluster permutation") {
    Geometry g;
    Rng rng(111);
    auto data = generate_dataset(ground_truth_means(g), petal_offsets(g), 256, rng);
    auto mu = ground_truth_means(g);
    Model model(g, mu);
    double base = dataset_loglik(model, data);
    std::vector<double> permuted{mu[6], mu[7], mu[0], mu[1], mu[4], mu[5], mu[2], mu[3]};
    Model permuted_model(g, permuted);
    CHECK(dataset_loglik(permuted_model, data) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("mixture policy: finite logits and a valid softmax untrained") {
    Geometry g;
    Rng rng(112);
    Model model = ground_truth_model(g);
    Policy policy(g, 32, rng);
    double x[2] = {2.5, -1.0};
    Env env(model, x);
    Tape t;
    Var l0 = policy.forward_logits(t, env, State{});
    Var l1 = policy.forward_logits(t, env, State{2, -1});
    for (double v : l0.values()) CHECK(std::isfinite(v));
    for (double v : l1.values()) CHECK(std::isfinite(v));
    auto sm = t.log_softmax(l0);
    double total = 0.0;
    for (double v : sm.values()) total += std::exp(v);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mixture policy gradient check") {
    Geometry g;
    Rng rng(113);
    Model model = ground_truth_model(g);
    Policy policy(g, 16, rng);
    double x[2] = {1.2, 0.4};
    Env env(model, x);
    double err = finite_difference_check(policy.params(), [&](Tape& t) {
        Var a = t.pick(t.log_softmax(policy.forward_logits(t, env, State{})), 1);
        Var b = t.pick(t.log_softmax(policy.forward_logits(t, env, State{3, -1})), 2);
        Var c = policy.log_flow_head(t, env, State{1, -1});
        Var d = policy.log_z(t, env);
        return t.add(t.add(a, b), t.add(c, d));
    });
    CHECK(err < 1e-4);
}

TEST_CASE("m-step loss gradient of the mean is the negative residual") {
    Geometry g;
    Rng rng(114);
    Model model = ground_truth_model(g);
    Policy policy(g, 8, rng);
    AdamOptimizer mo, po;
    mixture::Domain dom{&model, &policy, &mo, &po};
    mixture::Domain::X x{5.0, 3.0};
    State z{1, 2};
    Tape t;
    Var loss = dom.m_step_loss(t, z, x);
    t.backward(loss);
    model.params().zero_grad();
    t.accumulate_param_grads();
    const auto& grad = model.params().block("mixture.mu").grad.values;
    const auto& d = model.offsets();
    double rx = x[0] - model.means()[2] - d[4];
    double ry = x[1] - model.means()[3] - d[5];
    CHECK(grad[2] == doctest::Approx(-rx).epsilon(1e-12));
    CHECK(grad[3] == doctest::Approx(-ry).epsilon(1e-12));
    // untouched rows have zero gradient
    CHECK(grad[0] == 0.0);
}

TEST_CASE("dataset file round trip") {
    Geometry g;
    Rng rng(115);
    auto data = generate_dataset(ground_truth_means(g), petal_offsets(g), 64, rng);
    auto path = (std::filesystem::temp_directory_path() / "gfnem_mix_data.bin").string();
    save_dataset(path, data, g);
    auto [loaded, geo] = load_dataset(path);
    CHECK(loaded.points == data.points);
    CHECK(loaded.labels == data.labels);
    CHECK(geo.num_super == g.num_super);
    std::filesystem::remove(path);
    std::filesystem::remove(path + ".labels");
}
