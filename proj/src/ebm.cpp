#include "gfnem/ebm.hpp"

#include <cmath>

#include "gfnem/grammar.hpp"
#include "gfnem/mlp.hpp"

namespace gfnem::grammar {

TreeShape shape_of(const ParseTree& t) {
    if (t.is_leaf()) return TreeShape::leaf();
    return TreeShape::node(shape_of(t.kids[0]), shape_of(t.kids[1]));
}

TreeShape random_shape(int n_leaves, Rng& rng) {
    std::vector<TreeShape> frags(static_cast<size_t>(n_leaves));
    while (frags.size() > 1) {
        int p = rng.uniform_int(static_cast<int>(frags.size()) - 1);
        TreeShape joined = TreeShape::node(std::move(frags[static_cast<size_t>(p)]),
                                           std::move(frags[static_cast<size_t>(p + 1)]));
        frags[static_cast<size_t>(p)] = std::move(joined);
        frags.erase(frags.begin() + p + 1);
    }
    return std::move(frags[0]);
}

int right_spine_length(const TreeShape& s) {
    if (s.is_leaf()) return 0;
    return 1 + right_spine_length(s.kids[1]);
}

EbmPrior::EbmPrior(int embed, int hidden, Rng& rng) : embed_(embed) {
    add_mlp(store_, "ebm.agg", 2 * embed, hidden, embed, rng);
    store_.add_gaussian("ebm.out.w", {embed, 1}, 1.0 / std::sqrt(static_cast<double>(embed)),
                        rng);
    store_.add("ebm.out.b", Tensor({1}));
}

namespace {

Var embed_shape(Tape& t, ParamStore& store, int embed, const TreeShape& shape) {
    if (shape.is_leaf()) return t.constant(Tensor({embed}));  // fixed zero vector
    Var l = embed_shape(t, store, embed, shape.kids[0]);
    Var r = embed_shape(t, store, embed, shape.kids[1]);
    return mlp_apply(t, store, "ebm.agg", t.concat({l, r}));
}

}  // namespace

Var EbmPrior::energy_var(Tape& t, const TreeShape& shape) const {
    ParamStore& store = const_cast<ParamStore&>(store_);
    Var root = embed_shape(t, store, embed_, shape);
    Var e = t.add(t.matmul(t.reshape(root, {1, embed_}), t.param(store, "ebm.out.w")),
                  t.param(store, "ebm.out.b"));
    return t.reshape(e, {});
}

double EbmPrior::energy(const TreeShape& shape) const {
    Tape t;
    return energy_var(t, shape).value();
}

TreeShape EbmPrior::mh_shape_step(TreeShape shape, int steps, Rng& rng) const {
    // rotation proposals targeting exp(-E); uniform (node, direction) with
    // invalid picks keeping the state
    double cur = energy(shape);
    int internal = shape.leaf_count() - 1;
    for (int s = 0; s < steps; ++s) {
        // reuse the ParseTree rotation machinery via a labeled copy
        ParseTree labeled = [&] {
            std::function<ParseTree(const TreeShape&)> conv = [&](const TreeShape& v) {
                if (v.is_leaf()) return ParseTree::leaf(0);
                return ParseTree::node(0, conv(v.kids[0]), conv(v.kids[1]));
            };
            return conv(shape);
        }();
        int node = rng.uniform_int(internal);
        bool dir_a = rng.uniform() < 0.5;
        if (!rotate_at(labeled, node, dir_a)) continue;
        TreeShape prop = shape_of(labeled);
        double prop_e = energy(prop);
        if (std::log(std::max(rng.uniform(), 1e-300)) < cur - prop_e) {
            shape = std::move(prop);
            cur = prop_e;
        }
    }
    return shape;
}

void EbmPrior::init_buffer(const std::vector<TreeShape>& gold, int buffer_size, Rng& rng) {
    if (gold.empty()) throw std::runtime_error("ebm: cannot initialize buffer without shapes");
    buffer_.clear();
    for (int i = 0; i < buffer_size; ++i) {
        int leaves = gold[static_cast<size_t>(rng.uniform_int(static_cast<int>(gold.size())))]
                         .leaf_count();
        buffer_.push_back(random_shape(leaves, rng));
    }
}

double EbmPrior::pcd_update(const std::vector<TreeShape>& gold_batch, AdamOptimizer& opt,
                            Rng& rng, const PcdConfig& cfg, int* resets) {
    if (buffer_.empty()) init_buffer(gold_batch, cfg.buffer, rng);
    // evolve the persistent negatives, resetting a fraction to fresh shapes
    int reset_count = 0;
    for (auto& shape : buffer_) {
        if (rng.uniform() < cfg.reset_ratio) {
            int leaves =
                gold_batch[static_cast<size_t>(rng.uniform_int(static_cast<int>(gold_batch.size())))]
                    .leaf_count();
            shape = random_shape(leaves, rng);
            ++reset_count;
        }
        shape = mh_shape_step(std::move(shape), cfg.mh_steps, rng);
    }
    if (resets) *resets = reset_count;

    // gradient of mean positive energy - mean negative energy + L2
    Tape t;
    std::vector<Var> pos, neg;
    for (int b = 0; b < cfg.batch; ++b) {
        const TreeShape& g =
            gold_batch[static_cast<size_t>(rng.uniform_int(static_cast<int>(gold_batch.size())))];
        pos.push_back(energy_var(t, g));
        const TreeShape& nshape =
            buffer_[static_cast<size_t>(rng.uniform_int(static_cast<int>(buffer_.size())))];
        neg.push_back(energy_var(t, nshape));
    }
    Var gap = t.sub(t.mean(t.concat(pos)), t.mean(t.concat(neg)));
    std::vector<Var> l2_terms;
    for (size_t i = 0; i < store_.num_blocks(); ++i) {
        Var w = t.param(store_, store_.block(static_cast<int>(i)).name);
        l2_terms.push_back(t.sum(t.square(w)));
    }
    Var loss = t.add(gap, t.scale(t.sum(t.concat(l2_terms)), cfg.l2));
    double gap_value = gap.value();
    t.backward(loss);
    store_.zero_grad();
    t.accumulate_param_grads();
    opt.step(store_);
    return gap_value;
}

double EbmPrior::temperature(int64_t step, double start, double end, int64_t horizon) {
    if (step <= 0) return start;
    if (step >= horizon) return end;
    double frac = static_cast<double>(step) / static_cast<double>(horizon);
    return start + (end - start) * frac;
}

}  // namespace gfnem::grammar
