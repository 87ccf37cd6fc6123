#include <doctest.h>

#include <cmath>
#include <fstream>

#include "ect/gradcheck.hpp"
#include "ect/network.hpp"
#include "test_helpers.hpp"

using namespace ect;

namespace {

// Random dataset matching the tiny two-block architecture; labels carry
// structure so training has something to fit.
Dataset tiny_dataset(int count, std::uint64_t seed) {
    const NetworkConfig cfg = NetworkConfig::tiny();
    Dataset ds;
    ds.manifest.count = count;
    ds.manifest.m = cfg.m;
    ds.manifest.n = cfg.n;
    ds.manifest.img_h = cfg.img_h;
    ds.manifest.img_w = cfg.img_w;
    ds.manifest.noise_std = 0.0;
    ds.manifest.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
        Sample s;
        s.capacitance.resize(cfg.m * cfg.n);
        for (float& v : s.capacitance) v = static_cast<float>(rng.uniform());
        s.image.resize(static_cast<std::size_t>(cfg.img_h) * cfg.img_w);
        for (std::size_t p = 0; p < s.image.size(); ++p)
            s.image[p] = s.capacitance[p % s.capacitance.size()] > 0.5f ? 1.0f : 0.0f;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

double loss_value(const std::function<int(Tape<double>&, int)>& make, const Tensor<double>& pred) {
    Tape<double> tape;
    const int p = tape.leaf(pred, false);
    return tape.value(make(tape, p)).v[0];
}

}  // namespace

TEST_CASE("network config shape chain") {
    CHECK_NOTHROW(NetworkConfig::standard().validate());
    CHECK_NOTHROW(NetworkConfig::tiny().validate());

    NetworkConfig broken = NetworkConfig::standard();
    broken.blocks[2].oph = 1;  // breaks the arithmetic for the stated target
    CHECK_THROWS_AS(broken.validate(), InvalidSpecError);

    NetworkConfig wrong_end = NetworkConfig::standard();
    wrong_end.img_w = 128;
    CHECK_THROWS_AS(wrong_end.validate(), InvalidSpecError);
}

TEST_CASE("reshape_input layout") {
    CapacitanceMatrix c(5, 20);
    c.at(0, 0) = 1.0;
    c.at(2, 7) = 3.5;
    const Tensor<float> t = reshape_input<float>(c);
    CHECK(t.dims == std::array<int, 4>{1, 100, 1, 1});
    CHECK(t.v[0] == 1.0f);
    CHECK(t.v[2 * 20 + 7] == 3.5f);

    CapacitanceMatrix zeros(5, 20);
    const Tensor<float> tz = reshape_input<float>(zeros);
    for (float v : tz.v) CHECK(v == 0.0f);
}

TEST_CASE("forward pass shape and range") {
    const NetworkConfig cfg = NetworkConfig::standard();
    TrainedModel<float> model;
    model.config = cfg;
    model.params = init_params<float>(cfg, 7);

    CapacitanceMatrix c(5, 20);
    Rng rng(8);
    for (int row = 0; row < 5; ++row)
        for (int i = 0; i < 20; ++i)
            if (!c.is_padded(row, i)) c.at(row, i) = rng.uniform();

    const Tensor<float> out = forward_eval(model, reshape_input<float>(c));
    CHECK(out.dims == std::array<int, 4>{1, 1, 100, 200});
    for (float v : out.v) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }

    SUBCASE("prediction satisfies image invariants and is deterministic") {
        const PermittivityImage a = predict(model, c);
        const PermittivityImage b = predict(model, c);
        CHECK(a.height() == 100);
        CHECK(a.width() == 200);
        CHECK(a.in_unit_range());
        CHECK(a.values() == b.values());
    }

    SUBCASE("eval mode is batch invariant") {
        Tensor<float> batch({3, 100, 1, 1});
        const Tensor<float> single = reshape_input<float>(c);
        for (int s = 0; s < 3; ++s)
            std::copy(single.v.begin(), single.v.end(), batch.v.begin() + s * 100);
        Tape<float> tape;
        const int x = tape.leaf(batch, false);
        const ForwardNodes nodes =
            forward_graph(tape, cfg, model.params, x, false, false);
        const Tensor<float>& bo = tape.value(nodes.output);
        for (int s = 0; s < 3; ++s)
            for (int p = 0; p < 100 * 200; ++p) CHECK(bo.v[s * 100 * 200 + p] == out.v[p]);
    }

    SUBCASE("wrong input shape is rejected") {
        CapacitanceMatrix small(5, 6);
        CHECK_THROWS_AS(predict(model, small), ShapeError);
    }
}

TEST_CASE("smooth L1 loss values") {
    Tensor<double> y({1, 1, 2, 2}, 0.25);

    const auto with_beta = [&](const Tensor<double>& pred) {
        Tape<double> tape;
        return tape.value(tape.loss_smooth_l1(tape.leaf(pred, false), y, 0.1)).v[0];
    };

    CHECK(with_beta(y) == 0.0);

    Tensor<double> off({1, 1, 2, 2}, 1.25);  // d = 1 everywhere
    CHECK(with_beta(off) == doctest::Approx(0.95).epsilon(1e-12));

    Tensor<double> neg({1, 1, 2, 2}, -0.75);  // d = -1 everywhere
    CHECK(with_beta(neg) == doctest::Approx(0.95).epsilon(1e-12));

    // quadratic region: d = 0.05 -> 0.5 * d^2 / beta
    Tensor<double> close({1, 1, 2, 2}, 0.30);
    CHECK(with_beta(close) == doctest::Approx(0.5 * 0.05 * 0.05 / 0.1).epsilon(1e-12));
}

TEST_CASE("focal loss values") {
    SUBCASE("gamma=0, alpha=0.5 halves the binary cross-entropy") {
        Rng rng(11);
        Tensor<double> pred({1, 1, 3, 3});
        pred.fill_uniform(rng, 0.1, 0.9);
        Tensor<double> y({1, 1, 3, 3});
        for (std::size_t i = 0; i < y.numel(); ++i) y.v[i] = (i % 2 == 0) ? 1.0 : 0.0;

        Tape<double> tape;
        const double focal =
            tape.value(tape.loss_focal(tape.leaf(pred, false), y, 0.0, 0.5)).v[0];
        double bce = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i)
            bce -= y.v[i] * std::log(pred.v[i]) + (1.0 - y.v[i]) * std::log(1.0 - pred.v[i]);
        bce /= y.numel();
        CHECK(focal == doctest::Approx(0.5 * bce).epsilon(1e-10));
    }

    SUBCASE("confident correct predictions vanish; confident wrong ones dominate") {
        Tensor<double> y({1, 1, 1, 2});
        y.v = {1.0, 0.0};
        Tensor<double> nearly({1, 1, 1, 2});
        nearly.v = {1.0 - 1e-9, 1e-9};
        Tape<double> t1;
        CHECK(t1.value(t1.loss_focal(t1.leaf(nearly, false), y)).v[0] < 1e-12);

        // one confident wrong pixel (y=1, p=clamp)
        Tensor<double> y1({1, 1, 1, 1}, 1.0);
        Tensor<double> wrong({1, 1, 1, 1}, 1e-7);
        Tape<double> t2;
        const double wrong_loss = t2.value(t2.loss_focal(t2.leaf(wrong, false), y1)).v[0];
        CHECK(wrong_loss == doctest::Approx(-0.75 * std::log(1e-7)).epsilon(1e-4));

        Tensor<double> right({1, 1, 1, 1}, 1.0 - 1e-7);
        Tape<double> t3;
        CHECK(t3.value(t3.loss_focal(t3.leaf(right, false), y1)).v[0] < wrong_loss);
    }
}

TEST_CASE("dice loss values") {
    SUBCASE("identical all-ones masks") {
        Tensor<double> ones({1, 1, 2, 2}, 1.0);
        Tape<double> tape;
        CHECK(tape.value(tape.loss_dice(tape.leaf(ones, false), ones)).v[0] == 0.0);
    }

    SUBCASE("identical all-zero masks are rescued by smoothing") {
        Tensor<double> zeros({1, 1, 2, 2}, 0.0);
        Tape<double> tape;
        CHECK(tape.value(tape.loss_dice(tape.leaf(zeros, false), zeros)).v[0] == 0.0);
    }

    SUBCASE("disjoint binary masks") {
        Tensor<double> a({1, 1, 1, 8}, 0.0), b({1, 1, 1, 8}, 0.0);
        for (int i = 0; i < 3; ++i) a.v[i] = 1.0;       // N1 = 3
        for (int i = 3; i < 8; ++i) b.v[i] = 1.0;       // N2 = 5
        Tape<double> tape;
        const double d = tape.value(tape.loss_dice(tape.leaf(a, false), b)).v[0];
        CHECK(d == doctest::Approx(1.0 - 1.0 / (3 + 5 + 1)).epsilon(1e-12));
    }
}

TEST_CASE("compound loss composition") {
    Rng rng(13);
    Tensor<double> pred({2, 1, 3, 3});
    pred.fill_uniform(rng, 0.1, 0.9);
    Tensor<double> binary({2, 1, 3, 3});
    for (std::size_t i = 0; i < binary.numel(); ++i) binary.v[i] = (i % 3 == 0) ? 1.0 : 0.0;

    TrainConfig cfg;

    SUBCASE("binary-target identity is exactly zero") {
        LossWeights<double> w;
        Tape<double> tape;
        const int p = tape.leaf(binary, false);
        const int loss = compound_loss_graph(tape, p, binary, w, cfg, nullptr, false);
        CHECK(tape.value(loss).v[0] == 0.0);
    }

    SUBCASE("smooth-l1-only toggle equals the bare loss") {
        TrainConfig only;
        only.use_focal = only.use_dice = false;
        LossWeights<double> w;  // lambda = 1
        Tape<double> tape;
        const int p = tape.leaf(pred, false);
        const int compound = compound_loss_graph(tape, p, binary, w, only, nullptr, false);
        Tape<double> t2;
        const int bare = t2.loss_smooth_l1(t2.leaf(pred, false), binary, 0.1);
        CHECK(tape.value(compound).v[0] ==
              doctest::Approx(t2.value(bare).v[0]).epsilon(1e-12));
    }

    SUBCASE("doubling every lambda doubles the loss") {
        LossWeights<double> w1;
        LossWeights<double> w2;
        const double raw2 = std::log(std::exp(2.0) - 1.0);  // softplus(raw2) = 2
        for (auto& r : w2.raw) r = Tensor<double>::scalar(raw2);

        Tape<double> t1;
        const int l1 = compound_loss_graph(t1, t1.leaf(pred, false), binary, w1, cfg, nullptr,
                                           false);
        Tape<double> t2;
        const int l2 = compound_loss_graph(t2, t2.leaf(pred, false), binary, w2, cfg, nullptr,
                                           false);
        CHECK(t2.value(l2).v[0] == doctest::Approx(2.0 * t1.value(l1).v[0]).epsilon(1e-9));
    }
}

TEST_CASE("gradient suite: every layer and the 2-block network below 1e-4") {
    const auto cases = run_gradient_suite(1e-5);
    CHECK(cases.size() >= 13);
    for (const auto& c : cases) {
        INFO(c.name);
        CHECK(c.max_rel_error < 1e-4);
    }
}

TEST_CASE("training on the tiny architecture") {
    const Dataset full = tiny_dataset(24, 3);
    const auto parts = split(full, SplitFractions{}, full.manifest.seed);
    const NetworkConfig cfg = NetworkConfig::tiny();
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch = 4;
    tc.seed = 5;
    tc.noise_std = 0.03;

    const TrainResult a = train(parts[0], parts[1], cfg, tc);
    REQUIRE(a.history.size() == 3);
    for (const EpochStats& e : a.history) {
        CHECK(std::isfinite(e.train_loss));
        for (double l : e.lambda) {
            CHECK(l > 0.0);
            CHECK(std::isfinite(l));
        }
    }
    // training reduces the loss on this separable toy problem
    CHECK(a.history.back().train_loss < a.history.front().train_loss);

    SUBCASE("same seed gives identical history and model bytes") {
        const TrainResult b = train(parts[0], parts[1], cfg, tc);
        REQUIRE(b.history.size() == a.history.size());
        for (std::size_t i = 0; i < a.history.size(); ++i) {
            CHECK(a.history[i].train_loss == b.history[i].train_loss);
            CHECK(a.history[i].val_cc == b.history[i].val_cc);
        }
        test::TempDir dir("train_det");
        save_model(a.model, dir.str("a.ectm"));
        save_model(b.model, dir.str("b.ectm"));
        CHECK(test::read_bytes(dir.str("a.ectm")) == test::read_bytes(dir.str("b.ectm")));
    }

    SUBCASE("model round trip preserves predictions bit-exactly") {
        test::TempDir dir("model_rt");
        save_model(a.model, dir.str("m.ectm"));
        TrainedModel<float> loaded = load_model(dir.str("m.ectm"));
        CapacitanceMatrix c(cfg.m, cfg.n);
        Rng rng(1);
        for (int row = 0; row < c.m; ++row)
            for (int i = 0; i < c.n; ++i)
                if (!c.is_padded(row, i)) c.at(row, i) = rng.uniform();
        TrainedModel<float> original = a.model;
        const PermittivityImage pa = predict(original, c);
        const PermittivityImage pb = predict(loaded, c);
        CHECK(pa.values() == pb.values());

        // write -> read -> write is byte-identical
        save_model(loaded, dir.str("m2.ectm"));
        CHECK(test::read_bytes(dir.str("m.ectm")) == test::read_bytes(dir.str("m2.ectm")));
    }

    SUBCASE("history file round trip") {
        test::TempDir dir("hist");
        write_history(a.history, dir.str("h.txt"));
        std::ifstream in(dir.str("h.txt"));
        std::string line;
        int lines = 0;
        while (std::getline(in, line)) {
            CHECK(line.find("epoch") == 0);
            CHECK(line.find("val_cc") != std::string::npos);
            ++lines;
        }
        CHECK(lines == 3);
    }
}

TEST_CASE("model format errors") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    TrainedModel<float> model;
    model.config = cfg;
    model.params = init_params<float>(cfg, 1);
    test::TempDir dir("model_fmt");
    save_model(model, dir.str("m.ectm"));

    SUBCASE("bad magic") {
        auto bytes = test::read_bytes(dir.str("m.ectm"));
        bytes[0] = 'X';
        std::ofstream f(dir.str("bad.ectm"), std::ios::binary);
        f.write(bytes.data(), bytes.size());
        f.close();
        CHECK_THROWS_AS(load_model(dir.str("bad.ectm")), FormatError);
    }

    SUBCASE("truncated file") {
        auto bytes = test::read_bytes(dir.str("m.ectm"));
        std::ofstream f(dir.str("trunc.ectm"), std::ios::binary);
        f.write(bytes.data(), bytes.size() - 11);
        f.close();
        CHECK_THROWS_AS(load_model(dir.str("trunc.ectm")), FormatError);
    }

    SUBCASE("architecture mismatch") {
        auto bytes = test::read_bytes(dir.str("m.ectm"));
        // patch the input-offset count m (u32 at offset 8) so record shapes
        // no longer match the declared architecture
        bytes[8] = 3;
        std::ofstream f(dir.str("warp.ectm"), std::ios::binary);
        f.write(bytes.data(), bytes.size());
        f.close();
        CHECK_THROWS_AS(load_model(dir.str("warp.ectm")), FormatError);
    }
}
