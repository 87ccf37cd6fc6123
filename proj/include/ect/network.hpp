#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ect/dataset.hpp"
#include "ect/forward.hpp"
#include "ect/image.hpp"
#include "ect/tensor.hpp"

namespace ect {

struct BlockConfig {
    int out_ch = 1;
    int kh = 3, kw = 3;
    int sh = 2, sw = 2;
    int ph = 1, pw = 1;
    int oph = 0, opw = 0;
    bool batch_norm = true;  // final block uses sigmoid without normalization
    int out_h = 0, out_w = 0;
};

// Transposed-convolution decoder: the m*n measurement vector enters as a
// (1,1) feature map and five blocks expand it to the 100x200 cross-section.
// Every block carries a residual path (1x1 conv on the block input, nearest-
// upsampled to the block output size, added before the activation).
struct NetworkConfig {
    int m = 5;
    int n = 20;
    int img_h = 100;
    int img_w = 200;
    std::vector<BlockConfig> blocks;

    int input_channels() const { return m * n; }

    // Verifies the transposed-convolution shape arithmetic
    // out = (in-1)*stride + kernel - 2*pad + output_padding reaches each
    // block's target size and ends exactly at (img_h, img_w).
    void validate() const;

    static NetworkConfig standard();
    // Two-block reduced architecture for end-to-end gradient verification.
    static NetworkConfig tiny();
};

// Compound-loss weighting: lambda_i = softplus(raw_i) keeps every weight
// strictly positive; raw values initialize so lambda = 1.
template <typename T>
struct LossWeights {
    Tensor<T> raw[3];

    LossWeights() {
        const T init = static_cast<T>(0.5413248546129181);  // softplus(x) = 1
        for (auto& r : raw) r = Tensor<T>::scalar(init);
    }

    T lambda(int i) const {
        const T v = raw[i].v[0];
        return v > T(30) ? v : static_cast<T>(std::log1p(std::exp(v)));
    }
};

template <typename T>
struct ModelParams {
    struct Block {
        Tensor<T> convt_w, convt_b;
        Tensor<T> res_w, res_b;
        Tensor<T> gamma, beta, run_mean, run_var;  // present when batch_norm
    };
    std::vector<Block> blocks;
    LossWeights<T> loss_weights;
};

template <typename T>
struct TrainedModel {
    NetworkConfig config;
    ModelParams<T> params;
    std::uint64_t seed = 0;
    int epochs = 0;
    float final_val_cc = 0.0f;
    float final_val_iou = 0.0f;
};

struct TrainConfig {
    int epochs = 20;
    int batch = 32;
    double lr = 1e-3;
    double noise_std = 0.03;
    std::uint64_t seed = 0;
    bool use_smooth_l1 = true;
    bool use_focal = true;
    bool use_dice = true;
    double smooth_l1_beta = 0.1;
    double focal_gamma = 2.0;
    double focal_alpha = 0.75;
    double dice_smooth = 1.0;
    int threads = 0;

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_cc = 0.0;
    double val_iou = 0.0;
    double lambda[3] = {0.0, 0.0, 0.0};
};

struct TrainResult {
    TrainedModel<float> model;
    std::vector<EpochStats> history;
};

// ---- parameter construction / registry ----

template <typename T>
ModelParams<T> init_params(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ModelParams<T> p;
    int ci = config.input_channels();
    for (const BlockConfig& b : config.blocks) {
        typename ModelParams<T>::Block blk;
        const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(ci) * b.kh * b.kw));
        blk.convt_w = Tensor<T>({ci, b.out_ch, b.kh, b.kw});
        blk.convt_w.fill_uniform(rng, -bound, bound);
        blk.convt_b = Tensor<T>({1, b.out_ch, 1, 1});
        blk.convt_b.fill_uniform(rng, -bound, bound);
        const T rbound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(ci)));
        blk.res_w = Tensor<T>({b.out_ch, ci, 1, 1});
        blk.res_w.fill_uniform(rng, -rbound, rbound);
        blk.res_b = Tensor<T>({1, b.out_ch, 1, 1});
        blk.res_b.fill_uniform(rng, -rbound, rbound);
        if (b.batch_norm) {
            blk.gamma = Tensor<T>({1, b.out_ch, 1, 1}, T(1));
            blk.beta = Tensor<T>({1, b.out_ch, 1, 1}, T(0));
            blk.run_mean = Tensor<T>({1, b.out_ch, 1, 1}, T(0));
            blk.run_var = Tensor<T>({1, b.out_ch, 1, 1}, T(1));
        }
        p.blocks.push_back(std::move(blk));
        ci = b.out_ch;
    }
    return p;
}

// ---- graph builders ----

// Tape node ids of the registered parameters, for gradient collection after
// backward().
struct BlockNodes {
    int convt_w = -1, convt_b = -1, res_w = -1, res_b = -1, gamma = -1, beta = -1;
};

struct ForwardNodes {
    std::vector<BlockNodes> blocks;
    int raw[3] = {-1, -1, -1};  // loss-weight leaves (when registered)
    int output = -1;
};

// Wires block ops from already-registered parameter leaves. Running
// statistics (one pair per batch-norm block) are mutated when train_mode is
// set.
template <typename T>
int decode_graph(Tape<T>& tape, const NetworkConfig& config, const std::vector<BlockNodes>& ids,
                 const std::vector<Tensor<T>*>& run_means,
                 const std::vector<Tensor<T>*>& run_vars, int input_id, bool train_mode) {
    int h = input_id;
    for (std::size_t k = 0; k < config.blocks.size(); ++k) {
        const BlockConfig& bc = config.blocks[k];
        const BlockNodes& bn = ids[k];
        int t = tape.conv_transpose2d(h, bn.convt_w, bn.convt_b, bc.sh, bc.sw, bc.ph, bc.pw,
                                      bc.oph, bc.opw);
        if (bc.batch_norm)
            t = tape.batch_norm2d(t, bn.gamma, bn.beta, run_means[k], run_vars[k], train_mode);
        int r = tape.conv2d_1x1(h, bn.res_w, bn.res_b);
        r = tape.nearest_upsample(r, bc.out_h, bc.out_w);
        t = tape.add(t, r);
        h = (k + 1 == config.blocks.size()) ? tape.sigmoid(t) : tape.relu(t);
    }
    return h;
}

// Registers parameter tensors as tape leaves and builds the decoder graph.
template <typename T>
ForwardNodes forward_graph(Tape<T>& tape, const NetworkConfig& config, ModelParams<T>& params,
                           int input_id, bool train_mode, bool trainable) {
    ForwardNodes nodes;
    std::vector<Tensor<T>*> run_means, run_vars;
    for (std::size_t k = 0; k < config.blocks.size(); ++k) {
        auto& bp = params.blocks[k];
        BlockNodes bn;
        bn.convt_w = tape.leaf(bp.convt_w, trainable);
        bn.convt_b = tape.leaf(bp.convt_b, trainable);
        bn.res_w = tape.leaf(bp.res_w, trainable);
        bn.res_b = tape.leaf(bp.res_b, trainable);
        if (config.blocks[k].batch_norm) {
            bn.gamma = tape.leaf(bp.gamma, trainable);
            bn.beta = tape.leaf(bp.beta, trainable);
        }
        run_means.push_back(&bp.run_mean);
        run_vars.push_back(&bp.run_var);
        nodes.blocks.push_back(bn);
    }
    nodes.output = decode_graph(tape, config, nodes.blocks, run_means, run_vars, input_id,
                                train_mode);
    return nodes;
}

// Weighted compound loss over the enabled terms; gradients reach both the
// prediction and the raw weight parameters.
template <typename T>
int compound_loss_graph(Tape<T>& tape, int pred, const Tensor<T>& target,
                        LossWeights<T>& weights, const TrainConfig& cfg, ForwardNodes* nodes,
                        bool trainable) {
    int total = -1;
    auto add_term = [&](int which, int term) {
        const int raw = tape.leaf(weights.raw[which], trainable);
        if (nodes) nodes->raw[which] = raw;
        const int lam = tape.softplus(raw);
        const int weighted = tape.mul(lam, term);
        total = total < 0 ? weighted : tape.add(total, weighted);
    };
    if (cfg.use_smooth_l1)
        add_term(0, tape.loss_smooth_l1(pred, target, static_cast<T>(cfg.smooth_l1_beta)));
    if (cfg.use_focal)
        add_term(1, tape.loss_focal(pred, target, static_cast<T>(cfg.focal_gamma),
                                    static_cast<T>(cfg.focal_alpha)));
    if (cfg.use_dice)
        add_term(2, tape.loss_dice(pred, target, static_cast<T>(cfg.dice_smooth)));
    if (total < 0) throw InvalidInputError("compound loss requires at least one enabled term");
    return total;
}

// ---- reshaping and inference ----

// (offset, electrode) entry (d, i) lands at channel d*n + i of a (1,1)
// spatial feature map.
template <typename T>
Tensor<T> reshape_input(const CapacitanceMatrix& c) {
    Tensor<T> t({1, c.m * c.n, 1, 1});
    for (std::size_t i = 0; i < c.values.size(); ++i) t.v[i] = static_cast<T>(c.values[i]);
    return t;
}

Tensor<float> forward_eval(TrainedModel<float>& model, const Tensor<float>& input);
PermittivityImage predict(TrainedModel<float>& model, const CapacitanceMatrix& c);

TrainResult train(const Dataset& train_set, const Dataset& val_set,
                  const NetworkConfig& net_config, const TrainConfig& train_config);

// "ECTM" container: config block + named float32 parameter records including
// batch-norm running statistics and the raw loss weights.
void save_model(const TrainedModel<float>& model, const std::string& path);
TrainedModel<float> load_model(const std::string& path);

std::string history_line(const EpochStats& e);
void write_history(const std::vector<EpochStats>& history, const std::string& path);

}  // namespace ect
