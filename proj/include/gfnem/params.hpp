#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gfnem/rng.hpp"
#include "gfnem/tensor.hpp"

namespace gfnem {

// One named learnable array and its gradient accumulator.
struct ParamBlock {
    std::string name;
    Tensor value;
    Tensor grad;
};

// Collection of parameter blocks. During batched sampling a store is shared
// read-only across threads; gradients are written only from the owning
// thread via Tape::accumulate_param_grads, in a fixed order.
class ParamStore {
public:
    int add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::runtime_error("ParamStore: duplicate block " + name);
        int id = static_cast<int>(blocks_.size());
        ParamBlock b;
        b.name = name;
        b.grad = Tensor(init.shape);
        b.value = std::move(init);
        blocks_.push_back(std::move(b));
        index_[name] = id;
        return id;
    }

    int add_gaussian(const std::string& name, std::vector<int64_t> shape, double stddev, Rng& rng) {
        Tensor t(shape);
        for (auto& v : t.values) v = stddev * rng.normal();
        return add(name, std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    int id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("ParamStore: no block named " + name);
        return it->second;
    }

    ParamBlock& block(int id) { return blocks_.at(static_cast<size_t>(id)); }
    const ParamBlock& block(int id) const { return blocks_.at(static_cast<size_t>(id)); }
    ParamBlock& block(const std::string& name) { return block(id_of(name)); }
    const ParamBlock& block(const std::string& name) const { return block(id_of(name)); }

    size_t num_blocks() const { return blocks_.size(); }

    void zero_grad() {
        for (auto& b : blocks_)
            std::fill(b.grad.values.begin(), b.grad.values.end(), 0.0);
    }

    // bumped by the optimizer; lets value caches detect staleness
    uint64_t version() const { return version_; }
    void bump_version() { ++version_; }

private:
    std::vector<ParamBlock> blocks_;
    std::unordered_map<std::string, int> index_;
    uint64_t version_ = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
};

// One Adam step with bias correction on a single block.
// t is the per-block step counter and must already be incremented.
inline void adam_apply(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, int64_t t,
                       const AdamConfig& c) {
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (size_t i = 0; i < p.values.size(); ++i) {
        m.values[i] = c.beta1 * m.values[i] + (1.0 - c.beta1) * g.values[i];
        v.values[i] = c.beta2 * v.values[i] + (1.0 - c.beta2) * g.values[i] * g.values[i];
        double mhat = m.values[i] / bc1;
        double vhat = v.values[i] / bc2;
        p.values[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
}

// Adam over a ParamStore with per-group hyperparameters selected by the
// longest matching block-name prefix.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig default_cfg = {}) : default_(default_cfg) {}

    void set_group(const std::string& prefix, AdamConfig cfg) { groups_[prefix] = cfg; }

    const AdamConfig& config_for(const std::string& name) const {
        const AdamConfig* best = &default_;
        size_t best_len = 0;
        for (const auto& [prefix, cfg] : groups_) {
            if (name.rfind(prefix, 0) == 0 && prefix.size() >= best_len) {
                best = &cfg;
                best_len = prefix.size();
            }
        }
        return *best;
    }

    // Applies one update to every block in the store.
    void step(ParamStore& store) {
        for (size_t id = 0; id < store.num_blocks(); ++id) {
            ParamBlock& b = store.block(static_cast<int>(id));
            for (double g : b.grad.values)
                if (!std::isfinite(g))
                    throw std::runtime_error("adam: non-finite gradient in block " + b.name);
            Slot& s = slot(static_cast<int>(id), b.value.shape);
            ++s.t;
            adam_apply(b.value, b.grad, s.m, s.v, s.t, config_for(b.name));
        }
        store.bump_version();
    }

    int64_t step_count(const ParamStore& store, const std::string& block) const {
        auto it = slots_.find(store.id_of(block));
        return it == slots_.end() ? 0 : it->second.t;
    }

private:
    struct Slot {
        Tensor m, v;
        int64_t t = 0;
    };

    Slot& slot(int id, const std::vector<int64_t>& shape) {
        auto [it, inserted] = slots_.try_emplace(id);
        if (inserted) {
            it->second.m = Tensor(shape);
            it->second.v = Tensor(shape);
        }
        return it->second;
    }

    AdamConfig default_;
    std::unordered_map<std::string, AdamConfig> groups_;
    std::unordered_map<int, Slot> slots_;
};

}  // namespace gfnem
