#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ect/metrics.hpp"
#include "ect/rng.hpp"
#include "test_helpers.hpp"

using namespace ect;

namespace {

PermittivityImage random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    PermittivityImage img(h, w);
    for (double& v : img.values()) v = rng.uniform();
    return img;
}

// Direct-formula SSIM oracle: per-position Gaussian-weighted local statistics
// with symmetric reflection, no separable shortcut.
double ssim_oracle(const PermittivityImage& x, const PermittivityImage& y) {
    const int h = x.height(), w = x.width();
    const int half = 5;
    const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    std::vector<double> g(11);
    double gsum = 0.0;
    for (int i = 0; i < 11; ++i) {
        g[i] = std::exp(-0.5 * (i - half) * (i - half) / (sigma * sigma));
        gsum += g[i];
    }
    for (double& v : g) v /= gsum;
    auto ref = [](int p, int n) {
        while (p < 0 || p >= n) {
            if (p < 0) p = -p - 1;
            if (p >= n) p = 2 * n - p - 1;
        }
        return p;
    };

    double acc = 0.0;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int dr = -half; dr <= half; ++dr) {
                for (int dc = -half; dc <= half; ++dc) {
                    const double wgt = g[dr + half] * g[dc + half];
                    const double xv = x.at(ref(r + dr, h), ref(c + dc, w));
                    const double yv = y.at(ref(r + dr, h), ref(c + dc, w));
                    mx += wgt * xv;
                    my += wgt * yv;
                    sxx += wgt * xv * xv;
                    syy += wgt * yv * yv;
                    sxy += wgt * xv * yv;
                }
            }
            const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
            acc += ((2 * mx * my + c1) * (2 * cxy + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    return acc / (h * w);
}

}  // namespace

TEST_CASE("mse basics") {
    const PermittivityImage y = random_image(5, 5, 1);
    CHECK(mse(y, y) == 0.0);

    PermittivityImage shifted = y;
    for (double& v : shifted.values()) v = std::min(1.0, v * 0.5 + 0.1);
    CHECK(mse(y, shifted) == mse(shifted, y));

    PermittivityImage plus(5, 5, 0.0);
    PermittivityImage base(5, 5, 0.0);
    for (double& v : plus.values()) v = 0.1;
    CHECK(mse(plus, base) == doctest::Approx(0.01).epsilon(1e-12));

    PermittivityImage other(4, 5, 0.0);
    CHECK_THROWS_AS(mse(base, other), ShapeError);
}

TEST_CASE("psnr closed forms") {
    PermittivityImage a(5, 5, 0.0), b(5, 5, 0.1);
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));  // mse 0.01
    CHECK(psnr(a, a) == 100.0);                                  // cap
    PermittivityImage ones(5, 5, 1.0);
    CHECK(psnr(a, ones) == doctest::Approx(0.0).epsilon(1e-12));  // mse 1
}

TEST_CASE("ssim values") {
    const PermittivityImage y = random_image(20, 30, 2);
    CHECK(ssim(y, y) == doctest::Approx(1.0).epsilon(1e-12));

    SUBCASE("inverted checkerboard scores low") {
        PermittivityImage cb(16, 16, 0.0);
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c < 16; ++c) cb.at(r, c) = ((r + c) % 2 == 0) ? 1.0 : 0.0;
        PermittivityImage inv = cb;
        for (double& v : inv.values()) v = 1.0 - v;
        CHECK(ssim(cb, inv) < 0.5);
    }

    SUBCASE("equal constants are perfectly similar") {
        PermittivityImage a(7, 9, 0.4), b(7, 9, 0.4);
        CHECK(ssim(a, b) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("pearson correlation") {
    const PermittivityImage y = random_image(10, 10, 3);
    CHECK(pearson_cc(y, y) == doctest::Approx(1.0).epsilon(1e-12));

    PermittivityImage affine = y;
    for (double& v : affine.values()) v = 0.5 * v + 0.2;
    CHECK(pearson_cc(affine, y) == doctest::Approx(1.0).epsilon(1e-12));

    PermittivityImage constant(10, 10, 0.7);
    CHECK(pearson_cc(constant, y) == 0.0);
}

TEST_CASE("iou closed forms") {
    PermittivityImage a(4, 4, 0.0), b(4, 4, 0.0);

    SUBCASE("identical masks") {
        a.at(0, 0) = a.at(1, 1) = 1.0;
        CHECK(iou(a, a) == 1.0);
    }

    SUBCASE("disjoint equal-area masks") {
        a.at(0, 0) = a.at(0, 1) = 1.0;
        b.at(3, 3) = b.at(3, 2) = 1.0;
        CHECK(iou(a, b) == 0.0);
    }

    SUBCASE("nested masks of area N and 2N") {
        for (int c = 0; c < 2; ++c) a.at(0, c) = 1.0;
        for (int c = 0; c < 4; ++c) b.at(0, c) = 1.0;
        CHECK(iou(a, b) == 0.5);
    }

    SUBCASE("both empty") { CHECK(iou(a, b) == 1.0); }
}

TEST_CASE("metric oracles on 5x5 images match to 1e-12") {
    for (std::uint64_t seed : {10u, 11u, 12u}) {
        const PermittivityImage x = random_image(5, 5, seed);
        const PermittivityImage y = random_image(5, 5, seed + 100);

        // mse
        double m = 0.0;
        for (int i = 0; i < 25; ++i) {
            const double d = x.values()[i] - y.values()[i];
            m += d * d;
        }
        m /= 25.0;
        CHECK(std::abs(mse(x, y) - m) < 1e-12);

        // psnr
        CHECK(std::abs(psnr(x, y) - 10.0 * std::log10(1.0 / m)) < 1e-12);

        // ssim against the direct-formula oracle
        CHECK(std::abs(ssim(x, y) - ssim_oracle(x, y)) < 1e-12);

        // pearson
        double mx = 0, my = 0;
        for (int i = 0; i < 25; ++i) {
            mx += x.values()[i];
            my += y.values()[i];
        }
        mx /= 25;
        my /= 25;
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < 25; ++i) {
            vx += (x.values()[i] - mx) * (x.values()[i] - mx);
            vy += (y.values()[i] - my) * (y.values()[i] - my);
            cxy += (x.values()[i] - mx) * (y.values()[i] - my);
        }
        CHECK(std::abs(pearson_cc(x, y) - cxy / std::sqrt(vx * vy)) < 1e-12);

        // iou
        int inter = 0, uni = 0;
        for (int i = 0; i < 25; ++i) {
            const bool pa = x.values()[i] > 0.5, pb = y.values()[i] > 0.5;
            inter += pa && pb;
            uni += pa || pb;
        }
        CHECK(std::abs(iou(x, y) - (uni ? double(inter) / uni : 1.0)) < 1e-12);
    }
}

TEST_CASE("evaluate over a dataset") {
    // dataset whose capacitance channel 0 encodes the sample index
    Dataset ds;
    ds.manifest.count = 6;
    ds.manifest.m = 1;
    ds.manifest.n = 2;
    ds.manifest.img_h = 8;
    ds.manifest.img_w = 10;
    for (int i = 0; i < 6; ++i) {
        Sample s;
        s.capacitance = {static_cast<float>(i), 0.0f};
        const PermittivityImage img = random_image(8, 10, 50 + i);
        s.image.assign(img.values().begin(), img.values().end());
        ds.samples.push_back(s);
    }

    SUBCASE("identity predictor scores perfectly") {
        const Predictor identity = [&ds](const CapacitanceMatrix& c) {
            const int idx = static_cast<int>(c.values[0]);
            PermittivityImage img(8, 10);
            for (int i = 0; i < 80; ++i) img.values()[i] = ds.samples[idx].image[i];
            return img;
        };
        const MetricsReport r = evaluate(identity, ds, "identity");
        CHECK(r.count == 6);
        CHECK(r.means.mse == 0.0);
        CHECK(r.means.ssim == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(r.means.psnr == 100.0);
        CHECK(r.means.cc == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(r.means.iou == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("constant-zero predictor has zero IoU") {
        const Predictor zero = [](const CapacitanceMatrix&) {
            return PermittivityImage(8, 10, 0.0);
        };
        const MetricsReport r = evaluate(zero, ds, "zero");
        CHECK(r.means.iou == 0.0);
    }

    SUBCASE("means recompute from per-sample entries") {
        const Predictor zero = [](const CapacitanceMatrix&) {
            return PermittivityImage(8, 10, 0.0);
        };
        const MetricsReport r = evaluate(zero, ds, "zero");
        double cc = 0.0;
        for (const SampleMetrics& sm : r.per_sample) cc += sm.cc;
        CHECK(r.means.cc == doctest::Approx(cc / r.count).epsilon(1e-12));
    }

    SUBCASE("sample order does not change the means") {
        const Predictor zero = [](const CapacitanceMatrix&) {
            return PermittivityImage(8, 10, 0.0);
        };
        Dataset shuffled = ds;
        std::reverse(shuffled.samples.begin(), shuffled.samples.end());
        const MetricsReport a = evaluate(zero, ds, "zero");
        const MetricsReport b = evaluate(zero, shuffled, "zero");
        CHECK(a.means.mse == doctest::Approx(b.means.mse).epsilon(1e-12));
        CHECK(a.means.ssim == doctest::Approx(b.means.ssim).epsilon(1e-12));
    }

    SUBCASE("predictor failures carry the sample index") {
        const Predictor broken = [](const CapacitanceMatrix& c) -> PermittivityImage {
            if (c.values[0] == 3.0) throw std::runtime_error("boom");
            return PermittivityImage(8, 10, 0.0);
        };
        CHECK_THROWS_WITH_AS(evaluate(broken, ds, "broken"), doctest::Contains("sample 3"),
                             NumericError);
    }
}

TEST_CASE("stitching windows") {
    SUBCASE("ten 100x200 windows make a 100x2000 image, byte-exact") {
        std::vector<PermittivityImage> windows;
        for (int k = 0; k < 10; ++k) windows.push_back(random_image(100, 200, 80 + k));
        const PermittivityImage wide = stitch(windows, 0);
        REQUIRE(wide.height() == 100);
        REQUIRE(wide.width() == 2000);
        for (int k = 0; k < 10; ++k)
            for (int r = 0; r < 100; ++r)
                for (int c = 0; c < 200; ++c)
                    CHECK(wide.at(r, 200 * k + c) == windows[k].at(r, c));
    }

    SUBCASE("single window is the identity") {
        const PermittivityImage img = random_image(10, 20, 5);
        const PermittivityImage out = stitch({img}, 0);
        CHECK(out.values() == img.values());
    }

    SUBCASE("constant windows stay constant under cross-fade") {
        const PermittivityImage a(10, 20, 0.6), b(10, 20, 0.6);
        const PermittivityImage out = stitch({a, b}, 5);
        CHECK(out.width() == 35);
        for (double v : out.values()) CHECK(v == doctest::Approx(0.6).epsilon(1e-12));
    }

    SUBCASE("height mismatch is rejected") {
        CHECK_THROWS_AS(stitch({PermittivityImage(10, 20, 0.0), PermittivityImage(8, 20, 0.0)}),
                        ShapeError);
    }
}

TEST_CASE("report serialization") {
    MetricsReport r;
    r.predictor = "test";
    r.count = 2;
    r.per_sample = {{0.1, 0.9, 10.0, 0.8, 0.7}, {0.2, 0.8, 7.0, 0.6, 0.5}};
    r.means = {0.15, 0.85, 8.5, 0.7, 0.6};
    test::TempDir dir("report");
    write_report(r, dir.str("r.json"));
    const auto bytes = test::read_bytes(dir.str("r.json"));
    const std::string text(bytes.begin(), bytes.end());
    CHECK(text.find("\"predictor\": \"test\"") != std::string::npos);
    CHECK(text.find("\"per_sample\"") != std::string::npos);
}
