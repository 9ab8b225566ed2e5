#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gfnem/gflownet.hpp"
#include "gfnem/parallel.hpp"
#include "gfnem/params.hpp"
#include "gfnem/rng.hpp"

namespace gfnem {

// Linearly decaying E-step gate threshold: alpha_max at step 0 down to
// alpha_min at the horizon, clamped afterwards.
struct ThresholdSchedule {
    double alpha_max = 6.0;
    double alpha_min = 3.0;
    int64_t horizon = 10000;
    double moving_avg_decay = 0.99;  // gamma
};

inline double threshold_value(const ThresholdSchedule& s, int64_t step) {
    if (step < 0) throw std::runtime_error("threshold_value: negative step");
    if (step >= s.horizon) return s.alpha_min;
    double frac = static_cast<double>(step) / static_cast<double>(s.horizon);
    return s.alpha_max + (s.alpha_min - s.alpha_max) * frac;
}

// Moving average of the E-step loss, seeded by the first observation.
struct LossAverage {
    double value = 0.0;
    bool seeded = false;

    void observe(double loss, double gamma) {
        value = seeded ? gamma * value + (1.0 - gamma) * loss : loss;
        seeded = true;
    }
};

// M-step fires only when the averaged loss is strictly below the threshold.
inline bool e_step_gate(const LossAverage& avg, const ThresholdSchedule& s, int64_t step) {
    if (!avg.seeded) return false;
    return avg.value < threshold_value(s, step);
}

enum class ScheduleMode { Adaptive, FixedAlternation };
enum class GfnLoss { Tb, SubTb, SleepOnly, Hvi };

struct EmConfig {
    ScheduleMode mode = ScheduleMode::Adaptive;
    ThresholdSchedule schedule;
    int64_t fixed_e = 400;  // E-steps per block in fixed alternation
    int64_t fixed_m = 400;  // M-steps per block
    GfnLoss loss = GfnLoss::SubTb;
    bool forward_looking = true;
    double sleep_weight = 0.0;
    int mcmc_steps = 0;
    int mcmc_depth = 2;
    bool greedy_m = false;
    int e_batch = 32;
    int m_batch = 32;  // 0 means the full dataset
    ExplorationConfig explore;
};

// One metrics record per driver step; the field set is fixed (version 1).
class MetricsWriter {
public:
    MetricsWriter() = default;
    explicit MetricsWriter(const std::string& path) {
        out_.open(path, std::ios::trunc);
        if (!out_) throw std::runtime_error("metrics: cannot open " + path);
    }

    void record(int64_t step, const std::string& phase, double loss,
                std::optional<double> threshold, bool m_step_taken,
                std::optional<double> nll_estimate) {
        if (!out_.is_open()) return;
        nlohmann::json j;
        j["v"] = 1;
        j["step"] = step;
        j["phase"] = phase;
        j["loss"] = loss;
        j["threshold"] = threshold ? nlohmann::json(*threshold) : nlohmann::json(nullptr);
        j["m_step_taken"] = m_step_taken;
        j["nll_estimate"] = nll_estimate ? nlohmann::json(*nll_estimate) : nlohmann::json(nullptr);
        out_ << j.dump() << "\n";
    }

    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
};

struct TrainStats {
    int64_t steps = 0;
    int64_t m_steps = 0;
    double last_e_loss = 0.0;
    double last_m_loss = 0.0;
    double loss_moving_avg = 0.0;
};

// A domain plugs into the driver through this interface. X is the
// conditioning observation (a data point or a sentence), Env the GFlowNet
// environment bound to one x, and the generative model owns theta.
//
//   struct Domain {
//     using X; using Env; using Policy;
//     Env make_env(const X&) const;                       // reward = p(z)p(x|z)
//     Var m_step_loss(Tape&, const State& z, const X&);   // -log p(z, x)
//     std::pair<State, X> ancestral_sample(Rng&);         // for the sleep phase
//     ParamStore& gen_params(); AdamOptimizer& gen_opt();
//     Policy& policy(); AdamOptimizer& policy_opt();
//     void on_step(int64_t step);                         // schedules (EBM temp)
//   };

// One generative-model update from a single (x, z) pair.
template <class Domain>
double m_step_update(Domain& dom, const typename Domain::X& x,
                     const typename Domain::Env::State& z) {
    Tape t;
    Var loss = dom.m_step_loss(t, z, x);
    double v = t.backward(loss);
    if (!std::isfinite(v))
        throw std::runtime_error("m_step_update: sampled z has zero model probability");
    dom.gen_params().zero_grad();
    t.accumulate_param_grads();
    dom.gen_opt().step(dom.gen_params());
    return v;
}

template <class Domain>
double run_m_step(Domain& dom, const std::vector<typename Domain::X>& dataset,
                  const EmConfig& cfg, Rng& rng);

// GFlowNet-EM training loop. Samples data uniformly with replacement.
// Deterministic given (seed via rng, config, dataset order).
template <class Domain>
TrainStats run_gfnem(Domain& dom, const std::vector<typename Domain::X>& dataset,
                     const EmConfig& cfg, int64_t steps, Rng& rng,
                     MetricsWriter* metrics = nullptr) {
    using Env = typename Domain::Env;
    if (dataset.empty()) throw std::runtime_error("run_gfnem: empty dataset");
    TrainStats stats;
    LossAverage avg;

    for (int64_t step = 0; step < steps; ++step) {
        dom.on_step(step);
        bool fixed_m_phase = cfg.mode == ScheduleMode::FixedAlternation &&
                             (step % (cfg.fixed_e + cfg.fixed_m)) >= cfg.fixed_e;

        if (!fixed_m_phase) {
            // ---- E-step: one gradient update on the policy --------------
            double e_loss = 0.0;
            dom.policy().params().zero_grad();

            if (cfg.loss == GfnLoss::Hvi) {
                Tape t;
                std::vector<Var> parts;
                double obj_sum = 0.0;
                for (int b = 0; b < cfg.e_batch; ++b) {
                    const auto& x = dataset[static_cast<size_t>(
                        rng.uniform_int(static_cast<int>(dataset.size())))];
                    Env env = dom.make_env(x);
                    double obj = 0.0;
                    parts.push_back(reverse_kl_vi_surrogate(t, env, dom.policy(), 1, rng, &obj));
                    obj_sum += obj;
                }
                Var surrogate = t.mean(t.concat(parts));
                t.backward(surrogate);
                t.accumulate_param_grads();
                e_loss = obj_sum / cfg.e_batch;
            } else {
                // per-trajectory tapes; gradients reduced in batch order
                struct Slot {
                    Tape tape;
                    double loss = 0.0;
                };
                std::vector<Slot> slots(static_cast<size_t>(cfg.e_batch));
                std::vector<int> xi(static_cast<size_t>(cfg.e_batch));
                std::vector<uint64_t> salts(static_cast<size_t>(cfg.e_batch));
                for (int b = 0; b < cfg.e_batch; ++b) {
                    xi[static_cast<size_t>(b)] =
                        rng.uniform_int(static_cast<int>(dataset.size()));
                    salts[static_cast<size_t>(b)] = rng.next_u64();
                }
                parallel_for(static_cast<size_t>(cfg.e_batch), [&](size_t b) {
                    Rng local = rng.fork(salts[b]);
                    const auto& x = dataset[static_cast<size_t>(xi[b])];
                    Env env = dom.make_env(x);
                    Tape& t = slots[b].tape;
                    Var loss;
                    if (cfg.loss == GfnLoss::SleepOnly) {
                        loss = sleep_loss<Env>(
                            t, dom.policy(), [&](Rng& r) { return dom.ancestral_sample(r); },
                            [&](const typename Domain::X& xx) { return dom.make_env(xx); },
                            local);
                    } else {
                        auto traj =
                            sample_forward_trajectory(env, dom.policy(), cfg.explore, local);
                        loss = cfg.loss == GfnLoss::Tb
                                   ? tb_loss(t, env, dom.policy(), traj)
                                   : subtb_loss(t, env, dom.policy(), traj,
                                                SubTbOptions{cfg.forward_looking, false});
                        if (cfg.sleep_weight > 0.0) {
                            Var sl = sleep_loss<Env>(
                                t, dom.policy(), [&](Rng& r) { return dom.ancestral_sample(r); },
                                [&](const typename Domain::X& xx) { return dom.make_env(xx); },
                                local);
                            loss = t.add(loss, t.scale(sl, cfg.sleep_weight));
                        }
                    }
                    slots[b].loss = t.backward(loss);
                });
                for (auto& slot : slots) {
                    slot.tape.accumulate_param_grads(1.0 / cfg.e_batch);
                    e_loss += slot.loss / cfg.e_batch;
                }
            }
            dom.policy_opt().step(dom.policy().params());
            avg.observe(e_loss, cfg.schedule.moving_avg_decay);
            stats.last_e_loss = e_loss;

            // ---- adaptive gate -> M-step ---------------------------------
            bool gate = cfg.mode == ScheduleMode::Adaptive &&
                        e_step_gate(avg, cfg.schedule, step);
            std::optional<double> m_loss;
            if (gate) m_loss = run_m_step(dom, dataset, cfg, rng);
            if (metrics)
                metrics->record(step, "e", e_loss,
                                cfg.mode == ScheduleMode::Adaptive
                                    ? std::optional<double>(threshold_value(cfg.schedule, step))
                                    : std::nullopt,
                                gate, m_loss);
            if (gate) {
                ++stats.m_steps;
                stats.last_m_loss = *m_loss;
            }
        } else {
            double m_loss = run_m_step(dom, dataset, cfg, rng);
            ++stats.m_steps;
            stats.last_m_loss = m_loss;
            if (metrics) metrics->record(step, "m", m_loss, std::nullopt, true, m_loss);
        }
        ++stats.steps;
    }
    stats.loss_moving_avg = avg.value;
    return stats;
}

// Samples fresh on-policy latents (optionally greedy, optionally refined by
// MCMC) and applies one gradient update to the generative model.
template <class Domain>
double run_m_step(Domain& dom, const std::vector<typename Domain::X>& dataset,
                  const EmConfig& cfg, Rng& rng) {
    using Env = typename Domain::Env;
    int batch = cfg.m_batch > 0 ? cfg.m_batch : static_cast<int>(dataset.size());
    std::vector<int> xi(static_cast<size_t>(batch));
    std::vector<uint64_t> salts(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        xi[static_cast<size_t>(b)] = cfg.m_batch > 0
                                         ? rng.uniform_int(static_cast<int>(dataset.size()))
                                         : b;
        salts[static_cast<size_t>(b)] = rng.next_u64();
    }
    struct Slot {
        Tape tape;
        double loss = 0.0;
    };
    std::vector<Slot> slots(static_cast<size_t>(batch));
    parallel_for(static_cast<size_t>(batch), [&](size_t b) {
        Rng local = rng.fork(salts[b]);
        const auto& x = dataset[static_cast<size_t>(xi[b])];
        Env env = dom.make_env(x);
        auto traj = cfg.greedy_m ? sample_greedy_trajectory(env, dom.policy())
                                 : sample_forward_trajectory(env, dom.policy(),
                                                             ExplorationConfig{}, local);
        auto z = traj.terminal();
        if (cfg.mcmc_steps > 0)
            z = mcmc_refine(env, dom.policy(), z, cfg.mcmc_steps, cfg.mcmc_depth, local);
        Tape& t = slots[b].tape;
        Var loss = dom.m_step_loss(t, z, x);
        slots[b].loss = t.backward(loss);
        if (!std::isfinite(slots[b].loss))
            throw std::runtime_error("m_step: sampled z has zero model probability");
    });
    dom.gen_params().zero_grad();
    double total = 0.0;
    for (auto& slot : slots) {
        slot.tape.accumulate_param_grads(1.0 / batch);
        total += slot.loss / batch;
    }
    dom.gen_opt().step(dom.gen_params());
    return total;
}

}  // namespace gfnem
