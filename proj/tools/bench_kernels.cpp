// Compares the OpenMP batch kernels against their serial reference
// implementations: mixture posterior tables, corpus inside marginals, and
// batched trajectory sampling.

#include <chrono>
#include <cstdio>

#include "gfnem/grammar.hpp"
#include "gfnem/mixture.hpp"
#include "gfnem/parallel.hpp"
#include "gfnem/parse_env.hpp"
#include "gfnem/parse_policy.hpp"

using namespace gfnem;

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

template <class Fn>
double time_ms(Fn&& fn, int reps) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        double t0 = now_ms();
        fn();
        best = std::min(best, now_ms() - t0);
    }
    return best;
}

}  // namespace

int main() {
    std::printf("threads available: %d\n\n", max_threads());
    std::printf("%-34s %10s %10s %8s\n", "kernel", "serial ms", "openmp ms", "speedup");

    {
        mixture::Geometry geo;
        Rng rng(1);
        auto data = mixture::generate_dataset(mixture::ground_truth_means(geo),
                                              mixture::petal_offsets(geo), 20000, rng);
        mixture::Model model(geo, mixture::ground_truth_means(geo));
        double serial = time_ms([&] { mixture::posterior_table_serial(model, data); }, 5);
        double par = time_ms([&] { mixture::posterior_table(model, data); }, 5);
        std::printf("%-34s %10.2f %10.2f %7.2fx\n", "mixture posterior table (20k pts)", serial,
                    par, serial / par);
    }

    {
        Rng rng(2);
        grammar::Sizes sizes{6, 8, 50};
        grammar::Grammar g = grammar::make_random_cfg(sizes, 0.3, rng);
        grammar::Corpus corpus = grammar::sample_corpus(g, 96, 12, rng);
        double serial =
            time_ms([&] { grammar::corpus_inside_marginals_serial(g, corpus.sentences); }, 3);
        double par = time_ms([&] { grammar::corpus_inside_marginals(g, corpus.sentences); }, 3);
        std::printf("%-34s %10.2f %10.2f %7.2fx\n", "inside marginals (96 sentences)", serial,
                    par, serial / par);
    }

    {
        Rng rng(3);
        grammar::Sizes sizes{3, 4, 16};
        grammar::Grammar g = grammar::make_random_cfg(sizes, 0.3, rng);
        grammar::Corpus corpus = grammar::sample_corpus(g, 64, 9, rng);
        grammar::ParsePolicy policy(sizes, grammar::ParsePolicy::Config{32, 48, 2, 16}, rng);
        auto sample_batch = [&](auto&& loop) {
            std::vector<double> sink(corpus.sentences.size());
            loop(corpus.sentences.size(), [&](size_t i) {
                Rng local = rng.fork(i);
                grammar::ParseEnv env(g, corpus.sentences[i]);
                auto traj = sample_forward_trajectory(env, policy, ExplorationConfig{}, local);
                sink[i] = traj.log_reward;
            });
            return sink;
        };
        double serial = time_ms(
            [&] { sample_batch([](size_t n, auto&& fn) { parallel_for_serial(n, fn); }); }, 3);
        double par =
            time_ms([&] { sample_batch([](size_t n, auto&& fn) { parallel_for(n, fn); }); }, 3);
        std::printf("%-34s %10.2f %10.2f %7.2fx\n", "trajectory sampling (64 sents)", serial,
                    par, serial / par);
    }

    return 0;
}
