#include "ect/gradcheck.hpp"

#include "ect/network.hpp"
#include "ect/tensor.hpp"

namespace ect {

namespace {

using T = double;
using Gen = std::function<std::vector<Tensor<T>>(Rng&)>;
using Builder = std::function<int(Tape<T>&, const std::vector<int>&)>;

Tensor<T> randn(Rng& rng, std::array<int, 4> dims, T scale = 1.0) {
    Tensor<T> t(dims);
    t.fill_randn(rng, scale);
    return t;
}

// Contracts a tensor node to a scalar against a fixed random functional so
// every output coordinate influences the loss with a distinct weight.
int contract(Tape<T>& tape, int x, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<T> r(tape.value(x).dims);
    r.fill_randn(rng, 1.0);
    const int rid = tape.leaf(r, false);
    return tape.sum(tape.mul(x, rid));
}

GradCheckCase run_case(const std::string& name, const Builder& builder, const Gen& gen,
                       double step) {
    GradCheckCase c;
    c.name = name;
    c.max_rel_error = grad_check<T>(builder, gen, step, 20, 0xce7 + std::hash<std::string>{}(name));
    return c;
}

}  // namespace

std::vector<GradCheckCase> run_gradient_suite(double step) {
    std::vector<GradCheckCase> cases;

    // conv_transpose2d, strided with output padding: x, w, b all checked.
    cases.push_back(run_case(
        "conv_transpose2d(s2,p1,op1)",
        [](Tape<T>& t, const std::vector<int>& in) {
            return contract(t, t.conv_transpose2d(in[0], in[1], in[2], 2, 2, 1, 1, 1, 1), 11);
        },
        [](Rng& r) {
            return std::vector<Tensor<T>>{randn(r, {2, 3, 4, 5}), randn(r, {3, 2, 3, 3}, 0.5),
                                          randn(r, {1, 2, 1, 1}, 0.5)};
        },
        step));

    // block-1 geometry: 1x1 input expanded by the kernel itself.
    cases.push_back(run_case(
        "conv_transpose2d(k7x13,s1)",
        [](Tape<T>& t, const std::vector<int>& in) {
            return contract(t, t.conv_transpose2d(in[0], in[1], in[2], 1, 1, 0, 0, 0, 0), 13);
        },
        [](Rng& r) {
            return std::vector<Tensor<T>>{randn(r, {1, 6, 1, 1}), randn(r, {6, 3, 7, 13}, 0.3),
                                          randn(r, {1, 3, 1, 1}, 0.3)};
        },
        step));

    cases.push_back(run_case(
        "conv2d_1x1",
        [](Tape<T>& t, const std::vector<int>& in) {
            return contract(t, t.conv2d_1x1(in[0], in[1], in[2]), 17);
        },
        [](Rng& r) {
            return std::vector<Tensor<T>>{randn(r, {2, 3, 4, 5}), randn(r, {2, 3, 1, 1}, 0.5),
                                          randn(r, {1, 2, 1, 1}, 0.5)};
        },
        step));

    cases.push_back(run_case(
        "batch_norm2d(train)",
        [](Tape<T>& t, const std::vector<int>& in) {
            Tensor<T> rm({1, 3, 1, 1}, 0.0), rv({1, 3, 1, 1}, 1.0);
            return contract(t, t.batch_norm2d(in[0], in[1], in[2], &rm, &rv, true), 19);
        },
        [](Rng& r) {
            return std::vector<Tensor<T>>{randn(r, {2, 3, 4, 5}), randn(r, {1, 3, 1, 1}, 0.5),
                                          randn(r, {1, 3, 1, 1}, 0.5)};
        },
        step));

    cases.push_back(run_case(
        "relu",
        [](Tape<T>& t, const std::vector<int>& in) { return contract(t, t.relu(in[0]), 23); },
        [](Rng& r) { return std::vector<Tensor<T>>{randn(r, {2, 3, 4, 5})}; }, step));

    cases.push_back(run_case(
        "sigmoid",
        [](Tape<T>& t, const std::vector<int>& in) { return contract(t, t.sigmoid(in[0]), 29); },
        [](Rng& r) { return std::vector<Tensor<T>>{randn(r, {2, 3, 4, 5})}; }, step));

    cases.push_back(run_case(
        "softplus",
        [](Tape<T>& t, const std::vector<int>& in) { return contract(t, t.softplus(in[0]), 31); },
        [](Rng& r) { return std::vector<Tensor<T>>{randn(r, {1, 4, 1, 1})}; }, step));

    cases.push_back(run_case(
        "nearest_upsample",
        [](Tape<T>& t, const std::vector<int>& in) {
            return contract(t, t.nearest_upsample(in[0], 7, 9), 37);
        },
        [](Rng& r) { return std::vector<Tensor<T>>{randn(r, {1, 2, 3, 5})}; }, step));

    cases.push_back(run_case(
        "add",
        [](Tape<T>& t, const std::vector<int>& in) {
            return contract(t, t.add(in[0], in[1]), 41);
        },
        [](Rng& r) {
            return std::vector<Tensor<T>>{randn(r, {2, 2, 3, 3}), randn(r, {2, 2, 3, 3})};
        },
        step));

    // Losses against fixed soft targets; predictions kept inside (0,1).
    const auto pred_gen = [](Rng& r) {
        Tensor<T> p({2, 1, 4, 5});
        p.fill_uniform(r, 0.05, 0.95);
        return std::vector<Tensor<T>>{p};
    };
    Rng tgt_rng(404);
    Tensor<T> target({2, 1, 4, 5});
    target.fill_uniform(tgt_rng, 0.0, 1.0);

    cases.push_back(run_case(
        "loss_smooth_l1",
        [target](Tape<T>& t, const std::vector<int>& in) {
            return t.loss_smooth_l1(in[0], target, 0.1);
        },
        pred_gen, step));

    cases.push_back(run_case(
        "loss_focal",
        [target](Tape<T>& t, const std::vector<int>& in) {
            return t.loss_focal(in[0], target, 2.0, 0.75);
        },
        pred_gen, step));

    cases.push_back(run_case(
        "loss_dice",
        [target](Tape<T>& t, const std::vector<int>& in) {
            return t.loss_dice(in[0], target, 1.0);
        },
        pred_gen, step));

    // Compound loss: gradients must reach the raw lambda parameters too.
    cases.push_back(run_case(
        "loss_compound(lambda)",
        [target](Tape<T>& t, const std::vector<int>& in) {
            int total = -1;
            auto add_term = [&](int raw_id, int term) {
                const int lam = t.softplus(raw_id);
                const int weighted = t.mul(lam, term);
                total = total < 0 ? weighted : t.add(total, weighted);
            };
            add_term(in[1], t.loss_smooth_l1(in[0], target, 0.1));
            add_term(in[2], t.loss_focal(in[0], target, 2.0, 0.75));
            add_term(in[3], t.loss_dice(in[0], target, 1.0));
            return total;
        },
        [](Rng& r) {
            Tensor<T> p({2, 1, 4, 5});
            p.fill_uniform(r, 0.05, 0.95);
            return std::vector<Tensor<T>>{p, randn(r, {1, 1, 1, 1}, 0.3),
                                          randn(r, {1, 1, 1, 1}, 0.3),
                                          randn(r, {1, 1, 1, 1}, 0.3)};
        },
        step));

    // End-to-end: tiny two-block network, train-mode batch norm, compound
    // loss, gradients for every parameter including the lambdas.
    {
        const NetworkConfig cfg = NetworkConfig::tiny();
        Rng tr(505);
        Tensor<T> net_target({2, 1, cfg.img_h, cfg.img_w});
        net_target.fill_uniform(tr, 0.0, 1.0);

        cases.push_back(run_case(
            "end_to_end_2block",
            [cfg, net_target](Tape<T>& t, const std::vector<int>& in) {
                std::vector<BlockNodes> blocks(2);
                blocks[0] = {in[1], in[2], in[3], in[4], in[5], in[6]};
                blocks[1] = {in[7], in[8], in[9], in[10], -1, -1};
                Tensor<T> rm({1, cfg.blocks[0].out_ch, 1, 1}, 0.0);
                Tensor<T> rv({1, cfg.blocks[0].out_ch, 1, 1}, 1.0);
                std::vector<Tensor<T>*> rms{&rm, nullptr}, rvs{&rv, nullptr};
                const int out = decode_graph(t, cfg, blocks, rms, rvs, in[0], true);
                int total = -1;
                auto add_term = [&](int raw_id, int term) {
                    const int weighted = t.mul(t.softplus(raw_id), term);
                    total = total < 0 ? weighted : t.add(total, weighted);
                };
                add_term(in[11], t.loss_smooth_l1(out, net_target, 0.1));
                add_term(in[12], t.loss_focal(out, net_target, 2.0, 0.75));
                add_term(in[13], t.loss_dice(out, net_target, 1.0));
                return total;
            },
            [cfg](Rng& r) {
                std::vector<Tensor<T>> in;
                in.push_back(randn(r, {2, cfg.input_channels(), 1, 1}));           // x
                in.push_back(randn(r, {cfg.input_channels(), 4, 3, 5}, 0.4));      // b1 convt_w
                in.push_back(randn(r, {1, 4, 1, 1}, 0.4));                         // b1 convt_b
                in.push_back(randn(r, {4, cfg.input_channels(), 1, 1}, 0.4));      // b1 res_w
                in.push_back(randn(r, {1, 4, 1, 1}, 0.4));                         // b1 res_b
                in.push_back(randn(r, {1, 4, 1, 1}, 0.3));                         // b1 gamma
                in.push_back(randn(r, {1, 4, 1, 1}, 0.3));                         // b1 beta
                in.push_back(randn(r, {4, 1, 3, 3}, 0.4));                         // b2 convt_w
                in.push_back(randn(r, {1, 1, 1, 1}, 0.4));                         // b2 convt_b
                in.push_back(randn(r, {1, 4, 1, 1}, 0.4));                         // b2 res_w
                in.push_back(randn(r, {1, 1, 1, 1}, 0.4));                         // b2 res_b
                in.push_back(randn(r, {1, 1, 1, 1}, 0.3));                         // raw lambda 1
                in.push_back(randn(r, {1, 1, 1, 1}, 0.3));                         // raw lambda 2
                in.push_back(randn(r, {1, 1, 1, 1}, 0.3));                         // raw lambda 3
                return in;
            },
            step));
    }

    return cases;
}

}  // namespace ect
