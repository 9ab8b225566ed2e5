#pragma once

#include <vector>

#include "gfnem/params.hpp"
#include "gfnem/rng.hpp"
#include "gfnem/tape.hpp"

namespace gfnem::grammar {

struct ParseTree;

// Unlabeled binary tree structure.
struct TreeShape {
    std::vector<TreeShape> kids;
    bool is_leaf() const { return kids.empty(); }
    int leaf_count() const {
        if (is_leaf()) return 1;
        return kids[0].leaf_count() + kids[1].leaf_count();
    }
    bool operator==(const TreeShape& o) const {
        if (kids.size() != o.kids.size()) return false;
        for (size_t i = 0; i < kids.size(); ++i)
            if (!(kids[i] == o.kids[i])) return false;
        return true;
    }
    static TreeShape leaf() { return {}; }
    static TreeShape node(TreeShape l, TreeShape r) {
        TreeShape s;
        s.kids.push_back(std::move(l));
        s.kids.push_back(std::move(r));
        return s;
    }
};

TreeShape shape_of(const ParseTree& t);
TreeShape random_shape(int n_leaves, Rng& rng);
// depth of the right spine relative to: right-deep chains maximize this
int right_spine_length(const TreeShape& s);

// Energy over tree shapes: recursive aggregation with zero leaf embeddings
// (the energy cannot see labels), a pooled root embedding mapped to a
// scalar. Trained by persistent contrastive divergence on gold shapes with
// rotation-proposal MCMC for the negative phase.
class EbmPrior {
public:
    struct PcdConfig {
        int batch = 32;
        int buffer = 64;
        double reset_ratio = 0.1;
        int mh_steps = 5;
        double l2 = 1e-4;
    };

    EbmPrior(int embed, int hidden, Rng& rng);

    double energy(const TreeShape& shape) const;
    Var energy_var(Tape& t, const TreeShape& shape) const;

    // buffer holds persistent negative samples; leaf counts are drawn from
    // the provided gold shapes
    void init_buffer(const std::vector<TreeShape>& gold, int buffer_size, Rng& rng);
    // one PCD update; returns the positive-minus-negative energy gap and
    // reports the number of buffer entries reset this round
    double pcd_update(const std::vector<TreeShape>& gold_batch, AdamOptimizer& opt, Rng& rng,
                      const PcdConfig& cfg, int* resets = nullptr);

    // linear temperature ramp; the prior log-weight added to rewards is
    // -E(shape) / T(step)
    static double temperature(int64_t step, double start, double end, int64_t horizon);
    double tempered_logweight(const TreeShape& shape, double temp) const {
        return -energy(shape) / temp;
    }

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const std::vector<TreeShape>& buffer() const { return buffer_; }

private:
    TreeShape mh_shape_step(TreeShape shape, int steps, Rng& rng) const;
    int embed_;
    ParamStore store_;
    std::vector<TreeShape> buffer_;
};

}  // namespace gfnem::grammar
