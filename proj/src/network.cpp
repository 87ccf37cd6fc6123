#include "ect/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ect/metrics.hpp"

namespace ect {

void NetworkConfig::validate() const {
    if (m <= 0 || n <= 0 || img_h <= 0 || img_w <= 0)
        throw InvalidSpecError("network dims must be positive");
    if (blocks.empty()) throw InvalidSpecError("network needs at least one block");
    int h = 1, w = 1;
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        const BlockConfig& b = blocks[k];
        const int oh = (h - 1) * b.sh + b.kh - 2 * b.ph + b.oph;
        const int ow = (w - 1) * b.sw + b.kw - 2 * b.pw + b.opw;
        if (oh != b.out_h || ow != b.out_w)
            throw InvalidSpecError("block " + std::to_string(k + 1) +
                                   " shape arithmetic gives " + std::to_string(oh) + "x" +
                                   std::to_string(ow) + ", expected " + std::to_string(b.out_h) +
                                   "x" + std::to_string(b.out_w));
        if (b.oph < 0 || b.oph >= b.sh || b.opw < 0 || b.opw >= b.sw)
            throw InvalidSpecError("block " + std::to_string(k + 1) +
                                   " output_padding must be < stride");
        h = oh;
        w = ow;
    }
    if (h != img_h || w != img_w)
        throw InvalidSpecError("block schedule ends at " + std::to_string(h) + "x" +
                               std::to_string(w) + ", expected " + std::to_string(img_h) + "x" +
                               std::to_string(img_w));
    if (blocks.back().out_ch != 1)
        throw InvalidSpecError("final block must emit one channel");
    if (blocks.back().batch_norm)
        throw InvalidSpecError("final block feeds the sigmoid directly, without batch norm");
}

NetworkConfig NetworkConfig::standard() {
    NetworkConfig c;
    c.blocks = {
        {64, 7, 13, 1, 1, 0, 0, 0, 0, true, 7, 13},
        {32, 3, 3, 2, 2, 1, 1, 0, 0, true, 13, 25},
        {16, 3, 3, 2, 2, 1, 1, 0, 1, true, 25, 50},
        {8, 3, 3, 2, 2, 1, 1, 1, 1, true, 50, 100},
        {1, 3, 3, 2, 2, 1, 1, 1, 1, false, 100, 200},
    };
    c.validate();
    return c;
}

NetworkConfig NetworkConfig::tiny() {
    NetworkConfig c;
    c.m = 2;
    c.n = 3;
    c.img_h = 5;
    c.img_w = 9;
    c.blocks = {
        {4, 3, 5, 1, 1, 0, 0, 0, 0, true, 3, 5},
        {1, 3, 3, 2, 2, 1, 1, 0, 0, false, 5, 9},
    };
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (epochs <= 0 || batch <= 0 || lr <= 0.0)
        throw InvalidSpecError("epochs, batch size and learning rate must be positive");
    if (noise_std < 0.0) throw InvalidSpecError("noise std must be non-negative");
    if (!use_smooth_l1 && !use_focal && !use_dice)
        throw InvalidSpecError("at least one loss term must be enabled");
}

namespace {

struct ParamRegistry {
    std::vector<Tensor<float>*> tensors;
    std::vector<std::string> names;

    void add(const std::string& name, Tensor<float>& t) {
        names.push_back(name);
        tensors.push_back(&t);
    }
};

// Trainable parameters in the fixed optimizer order.
ParamRegistry trainable_registry(ModelParams<float>& p, const NetworkConfig& cfg) {
    ParamRegistry reg;
    for (std::size_t k = 0; k < p.blocks.size(); ++k) {
        const std::string b = "block" + std::to_string(k + 1);
        reg.add(b + ".convt_w", p.blocks[k].convt_w);
        reg.add(b + ".convt_b", p.blocks[k].convt_b);
        reg.add(b + ".res_w", p.blocks[k].res_w);
        reg.add(b + ".res_b", p.blocks[k].res_b);
        if (cfg.blocks[k].batch_norm) {
            reg.add(b + ".gamma", p.blocks[k].gamma);
            reg.add(b + ".beta", p.blocks[k].beta);
        }
    }
    reg.add("loss.raw1", p.loss_weights.raw[0]);
    reg.add("loss.raw2", p.loss_weights.raw[1]);
    reg.add("loss.raw3", p.loss_weights.raw[2]);
    return reg;
}

// Everything persisted in the model file (adds running statistics).
ParamRegistry serial_registry(ModelParams<float>& p, const NetworkConfig& cfg) {
    ParamRegistry reg;
    for (std::size_t k = 0; k < p.blocks.size(); ++k) {
        const std::string b = "block" + std::to_string(k + 1);
        reg.add(b + ".convt_w", p.blocks[k].convt_w);
        reg.add(b + ".convt_b", p.blocks[k].convt_b);
        reg.add(b + ".res_w", p.blocks[k].res_w);
        reg.add(b + ".res_b", p.blocks[k].res_b);
        if (cfg.blocks[k].batch_norm) {
            reg.add(b + ".gamma", p.blocks[k].gamma);
            reg.add(b + ".beta", p.blocks[k].beta);
            reg.add(b + ".run_mean", p.blocks[k].run_mean);
            reg.add(b + ".run_var", p.blocks[k].run_var);
        }
    }
    reg.add("loss.raw1", p.loss_weights.raw[0]);
    reg.add("loss.raw2", p.loss_weights.raw[1]);
    reg.add("loss.raw3", p.loss_weights.raw[2]);
    return reg;
}

// Zero-initialized parameters with the config's shapes (serialization target).
ModelParams<float> shaped_params(const NetworkConfig& cfg) {
    ModelParams<float> p;
    int ci = cfg.input_channels();
    for (const BlockConfig& b : cfg.blocks) {
        ModelParams<float>::Block blk;
        blk.convt_w = Tensor<float>({ci, b.out_ch, b.kh, b.kw});
        blk.convt_b = Tensor<float>({1, b.out_ch, 1, 1});
        blk.res_w = Tensor<float>({b.out_ch, ci, 1, 1});
        blk.res_b = Tensor<float>({1, b.out_ch, 1, 1});
        if (b.batch_norm) {
            blk.gamma = Tensor<float>({1, b.out_ch, 1, 1});
            blk.beta = Tensor<float>({1, b.out_ch, 1, 1});
            blk.run_mean = Tensor<float>({1, b.out_ch, 1, 1});
            blk.run_var = Tensor<float>({1, b.out_ch, 1, 1});
        }
        p.blocks.push_back(std::move(blk));
        ci = b.out_ch;
    }
    return p;
}

std::vector<char> padded_channels(int m, int n) {
    std::vector<char> padded(static_cast<std::size_t>(m) * n, 0);
    for (int d = 0; d < m; ++d)
        for (int i = 0; i < n; ++i)
            if (i + d + 1 > n - 1) padded[static_cast<std::size_t>(d) * n + i] = 1;
    return padded;
}

Tensor<float> eval_batch(const NetworkConfig& cfg, ModelParams<float>& params,
                         const Tensor<float>& input) {
    Tape<float> tape;
    const int x = tape.leaf(input, false);
    const ForwardNodes nodes = forward_graph(tape, cfg, params, x, false, false);
    return tape.value(nodes.output);
}

// Mean val-set Pearson CC and IoU in eval mode.
std::pair<double, double> validate_epoch(const NetworkConfig& cfg, ModelParams<float>& params,
                                         const Dataset& val, int batch) {
    const int C = cfg.input_channels();
    const std::size_t hw = static_cast<std::size_t>(cfg.img_h) * cfg.img_w;
    double cc_sum = 0.0, iou_sum = 0.0;
    const int n = static_cast<int>(val.samples.size());
    for (int lo = 0; lo < n; lo += batch) {
        const int b = std::min(batch, n - lo);
        Tensor<float> input({b, C, 1, 1});
        for (int s = 0; s < b; ++s)
            std::copy(val.samples[lo + s].capacitance.begin(),
                      val.samples[lo + s].capacitance.end(), input.v.begin() + s * C);
        const Tensor<float> out = eval_batch(cfg, params, input);
        for (int s = 0; s < b; ++s) {
            PermittivityImage pred(cfg.img_h, cfg.img_w), truth(cfg.img_h, cfg.img_w);
            for (std::size_t i = 0; i < hw; ++i) {
                pred.values()[i] = out.v[s * hw + i];
                truth.values()[i] = val.samples[lo + s].image[i];
            }
            cc_sum += pearson_cc(pred, truth);
            iou_sum += iou(pred, truth);
        }
    }
    return {cc_sum / n, iou_sum / n};
}

}  // namespace

Tensor<float> forward_eval(TrainedModel<float>& model, const Tensor<float>& input) {
    if (input.dims[1] != model.config.input_channels() || input.dims[2] != 1 ||
        input.dims[3] != 1)
        throw ShapeError("forward input shape " + input.shape_str() + " does not match " +
                         std::to_string(model.config.input_channels()) + " channels at 1x1");
    return eval_batch(model.config, model.params, input);
}

PermittivityImage predict(TrainedModel<float>& model, const CapacitanceMatrix& c) {
    if (c.m * c.n != model.config.input_channels())
        throw ShapeError("capacitance matrix " + std::to_string(c.m) + "x" + std::to_string(c.n) +
                         " does not match the model's " +
                         std::to_string(model.config.input_channels()) + " input channels");
    const Tensor<float> out = forward_eval(model, reshape_input<float>(c));
    PermittivityImage img(model.config.img_h, model.config.img_w);
    for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] = out.v[i];
    return img;
}

TrainResult train(const Dataset& train_set, const Dataset& val_set,
                  const NetworkConfig& net_config, const TrainConfig& tc) {
    net_config.validate();
    tc.validate();
    if (train_set.samples.empty() || val_set.samples.empty())
        throw InvalidInputError("training and validation sets must be nonempty");
    if (train_set.manifest.m * train_set.manifest.n != net_config.input_channels())
        throw ShapeError("dataset measurements do not match network input channels");
    if (train_set.manifest.img_h != net_config.img_h ||
        train_set.manifest.img_w != net_config.img_w)
        throw ShapeError("dataset image size does not match network output");
    if (tc.threads > 0) set_thread_count(tc.threads);

    ModelParams<float> params = init_params<float>(net_config, tc.seed);
    AdamState<float> adam;

    const int N = static_cast<int>(train_set.samples.size());
    const int C = net_config.input_channels();
    const std::size_t hw = static_cast<std::size_t>(net_config.img_h) * net_config.img_w;
    const std::vector<char> padded = padded_channels(train_set.manifest.m, train_set.manifest.n);

    std::vector<EpochStats> history;
    double best_cc = -2.0;
    double best_iou = 0.0;
    ModelParams<float> best_params = params;

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        std::vector<int> order(N);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(tc.seed, 1000u + epoch));
        for (int i = N - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.uniform_int(0, i));
            std::swap(order[i], order[j]);
        }

        double loss_sum = 0.0;
        for (int lo = 0; lo < N; lo += tc.batch) {
            const int B = std::min(tc.batch, N - lo);
            Tensor<float> input({B, C, 1, 1});
            Tensor<float> target({B, 1, net_config.img_h, net_config.img_w});
            for (int s = 0; s < B; ++s) {
                const int idx = order[lo + s];
                const Sample& sample = train_set.samples[idx];
                // fresh measurement noise per sample per epoch
                Rng noise_rng(derive_seed(derive_seed(tc.seed, 2000000u + epoch), idx));
                for (int ch = 0; ch < C; ++ch) {
                    float v = sample.capacitance[ch];
                    if (tc.noise_std > 0.0 && !padded[ch])
                        v += static_cast<float>(noise_rng.normal(0.0, tc.noise_std));
                    input.v[static_cast<std::size_t>(s) * C + ch] = v;
                }
                std::copy(sample.image.begin(), sample.image.end(),
                          target.v.begin() + static_cast<std::size_t>(s) * hw);
            }

            Tape<float> tape;
            const int x = tape.leaf(input, false);
            ForwardNodes nodes = forward_graph(tape, net_config, params, x, true, true);
            const int loss = compound_loss_graph(tape, nodes.output, target,
                                                 params.loss_weights, tc, &nodes, true);
            const double loss_value = tape.value(loss).v[0];
            if (!std::isfinite(loss_value)) {
                std::ostringstream msg;
                msg << "non-finite training loss at epoch " << epoch << ", batch "
                    << (lo / tc.batch) << " (lambda=" << params.loss_weights.lambda(0) << ","
                    << params.loss_weights.lambda(1) << "," << params.loss_weights.lambda(2)
                    << ")";
                throw NumericError(msg.str());
            }
            tape.backward(loss);

            ParamRegistry reg = trainable_registry(params, net_config);
            std::vector<const Tensor<float>*> grads;
            for (std::size_t k = 0; k < net_config.blocks.size(); ++k) {
                const BlockNodes& bn = nodes.blocks[k];
                grads.push_back(&tape.grad(bn.convt_w));
                grads.push_back(&tape.grad(bn.convt_b));
                grads.push_back(&tape.grad(bn.res_w));
                grads.push_back(&tape.grad(bn.res_b));
                if (net_config.blocks[k].batch_norm) {
                    grads.push_back(&tape.grad(bn.gamma));
                    grads.push_back(&tape.grad(bn.beta));
                }
            }
            static Tensor<float> zero_scalar = Tensor<float>::scalar(0.0f);
            for (int t = 0; t < 3; ++t)
                grads.push_back(nodes.raw[t] >= 0 ? &tape.grad(nodes.raw[t]) : &zero_scalar);

            adam_step<float>(reg.tensors, grads, reg.names, adam, static_cast<float>(tc.lr));
            loss_sum += loss_value * B;
        }

        const auto [val_cc, val_iou] = validate_epoch(net_config, params, val_set, tc.batch);
        EpochStats es;
        es.epoch = epoch;
        es.train_loss = loss_sum / N;
        es.val_cc = val_cc;
        es.val_iou = val_iou;
        for (int t = 0; t < 3; ++t) es.lambda[t] = params.loss_weights.lambda(t);
        history.push_back(es);

        if (val_cc > best_cc) {
            best_cc = val_cc;
            best_iou = val_iou;
            best_params = params;
        }
    }

    TrainResult result;
    result.model.config = net_config;
    result.model.params = std::move(best_params);
    result.model.seed = tc.seed;
    result.model.epochs = tc.epochs;
    result.model.final_val_cc = static_cast<float>(best_cc);
    result.model.final_val_iou = static_cast<float>(best_iou);
    result.history = std::move(history);
    return result;
}

// ---- serialization ----

namespace {

constexpr char kModelMagic[4] = {'E', 'C', 'T', 'M'};
constexpr std::uint32_t kModelVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
}
void put_f32(std::ostream& out, float v) { out.write(reinterpret_cast<const char*>(&v), 4); }

struct Reader {
    std::istream& in;
    std::size_t offset = 0;

    void bytes(void* dst, std::size_t n) {
        in.read(reinterpret_cast<char*>(dst), n);
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw FormatError("truncated model file", offset);
        offset += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    float f32() {
        float v;
        bytes(&v, 4);
        return v;
    }
};

}  // namespace

void save_model(const TrainedModel<float>& model, const std::string& path) {
    model.config.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open model file for writing: " + path);
    out.write(kModelMagic, 4);
    put_u32(out, kModelVersion);
    put_u32(out, model.config.m);
    put_u32(out, model.config.n);
    put_u32(out, model.config.img_h);
    put_u32(out, model.config.img_w);
    put_u32(out, static_cast<std::uint32_t>(model.config.blocks.size()));
    for (const BlockConfig& b : model.config.blocks) {
        for (int v : {b.out_ch, b.kh, b.kw, b.sh, b.sw, b.ph, b.pw, b.oph, b.opw,
                      b.batch_norm ? 1 : 0, b.out_h, b.out_w})
            put_u32(out, static_cast<std::uint32_t>(v));
    }
    put_u64(out, model.seed);
    put_u32(out, static_cast<std::uint32_t>(model.epochs));
    put_f32(out, model.final_val_cc);
    put_f32(out, model.final_val_iou);

    ParamRegistry reg =
        serial_registry(const_cast<ModelParams<float>&>(model.params), model.config);
    put_u32(out, static_cast<std::uint32_t>(reg.names.size()));
    for (std::size_t k = 0; k < reg.names.size(); ++k) {
        const std::string& name = reg.names[k];
        const Tensor<float>& t = *reg.tensors[k];
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), name.size());
        put_u32(out, 4);
        for (int d : t.dims) put_u32(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.v.data()), t.v.size() * sizeof(float));
    }
    if (!out) throw FormatError("write failed for model file: " + path);
}

TrainedModel<float> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open model file: " + path);
    Reader r{in};

    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kModelMagic, 4) != 0) throw FormatError("bad model magic", 0);
    const std::uint32_t version = r.u32();
    if (version != kModelVersion)
        throw FormatError("unsupported model version " + std::to_string(version), 4);

    TrainedModel<float> model;
    model.config.m = static_cast<int>(r.u32());
    model.config.n = static_cast<int>(r.u32());
    model.config.img_h = static_cast<int>(r.u32());
    model.config.img_w = static_cast<int>(r.u32());
    const std::uint32_t n_blocks = r.u32();
    if (n_blocks == 0 || n_blocks > 64) throw FormatError("implausible block count", r.offset);
    for (std::uint32_t k = 0; k < n_blocks; ++k) {
        BlockConfig b;
        b.out_ch = static_cast<int>(r.u32());
        b.kh = static_cast<int>(r.u32());
        b.kw = static_cast<int>(r.u32());
        b.sh = static_cast<int>(r.u32());
        b.sw = static_cast<int>(r.u32());
        b.ph = static_cast<int>(r.u32());
        b.pw = static_cast<int>(r.u32());
        b.oph = static_cast<int>(r.u32());
        b.opw = static_cast<int>(r.u32());
        b.batch_norm = r.u32() != 0;
        b.out_h = static_cast<int>(r.u32());
        b.out_w = static_cast<int>(r.u32());
        model.config.blocks.push_back(b);
    }
    try {
        model.config.validate();
    } catch (const InvalidSpecError& e) {
        throw FormatError(std::string("model config invalid: ") + e.what(), r.offset);
    }
    model.seed = r.u64();
    model.epochs = static_cast<int>(r.u32());
    model.final_val_cc = r.f32();
    model.final_val_iou = r.f32();

    model.params = shaped_params(model.config);
    ParamRegistry reg = serial_registry(model.params, model.config);
    const std::uint32_t n_records = r.u32();
    if (n_records != reg.names.size())
        throw FormatError("model record count does not match the architecture", r.offset);
    std::vector<bool> seen(reg.names.size(), false);
    for (std::uint32_t rec = 0; rec < n_records; ++rec) {
        const std::uint32_t name_len = r.u32();
        if (name_len > 4096) throw FormatError("implausible record name length", r.offset);
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        const std::uint32_t ndims = r.u32();
        if (ndims != 4) throw FormatError("record " + name + " must have 4 dims", r.offset);
        std::array<int, 4> dims;
        for (int& d : dims) d = static_cast<int>(r.u32());

        std::size_t idx = reg.names.size();
        for (std::size_t k = 0; k < reg.names.size(); ++k)
            if (reg.names[k] == name) {
                idx = k;
                break;
            }
        if (idx == reg.names.size())
            throw FormatError("unexpected parameter record: " + name, r.offset);
        if (seen[idx]) throw FormatError("duplicate parameter record: " + name, r.offset);
        Tensor<float>& t = *reg.tensors[idx];
        if (dims != t.dims)
            throw FormatError("parameter " + name + " has mismatched shape for this architecture",
                              r.offset);
        r.bytes(t.v.data(), t.v.size() * sizeof(float));
        seen[idx] = true;
    }
    return model;
}

std::string history_line(const EpochStats& e) {
    std::ostringstream s;
    s.precision(8);
    s << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_cc " << e.val_cc
      << " val_iou " << e.val_iou << " lambda1 " << e.lambda[0] << " lambda2 " << e.lambda[1]
      << " lambda3 " << e.lambda[2];
    return s.str();
}

void write_history(const std::vector<EpochStats>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write history file: " + path);
    for (const EpochStats& e : history) out << history_line(e) << "\n";
}

}  // namespace ect
