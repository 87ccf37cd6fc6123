#include "ect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace ect {

namespace {

void check_dims(const PermittivityImage& a, const PermittivityImage& b) {
    if (a.height() != b.height() || a.width() != b.width())
        throw ShapeError("image shape mismatch: " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()));
}

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;

// Symmetric (edge-inclusive) reflection of an out-of-range index.
int reflect(int p, int n) {
    while (p < 0 || p >= n) {
        if (p < 0) p = -p - 1;
        if (p >= n) p = 2 * n - p - 1;
    }
    return p;
}

std::vector<double> gaussian_window() {
    std::vector<double> w(kSsimWindow);
    const int half = kSsimWindow / 2;
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - half;
        w[i] = std::exp(-0.5 * d * d / (kSsimSigma * kSsimSigma));
        sum += w[i];
    }
    for (double& x : w) x /= sum;
    return w;
}

// Separable Gaussian filter with symmetric-reflection padding.
std::vector<double> gauss_filter(const std::vector<double>& img, int h, int w) {
    const std::vector<double> g = gaussian_window();
    const int half = kSsimWindow / 2;
    std::vector<double> tmp(static_cast<std::size_t>(h) * w), out(tmp.size());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k)
                acc += g[k + half] * img[static_cast<std::size_t>(r) * w + reflect(c + k, w)];
            tmp[static_cast<std::size_t>(r) * w + c] = acc;
        }
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k)
                acc += g[k + half] * tmp[static_cast<std::size_t>(reflect(r + k, h)) * w + c];
            out[static_cast<std::size_t>(r) * w + c] = acc;
        }
    return out;
}

}  // namespace

double mse(const PermittivityImage& a, const PermittivityImage& b) {
    check_dims(a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        acc += d * d;
    }
    return acc / a.size();
}

double psnr(const PermittivityImage& a, const PermittivityImage& b, double data_range,
            double cap_db) {
    const double m = mse(a, b);
    if (m < 1e-10) return cap_db;
    return 10.0 * std::log10(data_range * data_range / m);
}

double ssim(const PermittivityImage& a, const PermittivityImage& b) {
    check_dims(a, b);
    const int h = a.height(), w = a.width();
    const std::size_t n = a.size();
    const double c1 = kSsimK1 * kSsimK1;  // L = 1
    const double c2 = kSsimK2 * kSsimK2;

    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = a.values()[i] * a.values()[i];
        yy[i] = b.values()[i] * b.values()[i];
        xy[i] = a.values()[i] * b.values()[i];
    }
    const std::vector<double> mu_x = gauss_filter(a.values(), h, w);
    const std::vector<double> mu_y = gauss_filter(b.values(), h, w);
    const std::vector<double> s_xx = gauss_filter(xx, h, w);
    const std::vector<double> s_yy = gauss_filter(yy, h, w);
    const std::vector<double> s_xy = gauss_filter(xy, h, w);

    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double mx = mu_x[i], my = mu_y[i];
        const double vx = s_xx[i] - mx * mx;
        const double vy = s_yy[i] - my * my;
        const double cxy = s_xy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    return acc / n;
}

double pearson_cc(const PermittivityImage& a, const PermittivityImage& b) {
    check_dims(a, b);
    const std::size_t n = a.size();
    // zero variance means exactly constant; return the 0 convention before
    // floating-point dust can masquerade as signal
    const bool const_a = std::all_of(a.values().begin(), a.values().end(),
                                     [&](double v) { return v == a.values()[0]; });
    const bool const_b = std::all_of(b.values().begin(), b.values().end(),
                                     [&](double v) { return v == b.values()[0]; });
    if (const_a || const_b) return 0.0;
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a.values()[i];
        mb += b.values()[i];
    }
    ma /= n;
    mb /= n;
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a.values()[i] - ma;
        const double db = b.values()[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    if (va <= 0.0 || vb <= 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

double iou(const PermittivityImage& a, const PermittivityImage& b, double threshold) {
    check_dims(a, b);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool pa = a.values()[i] > threshold;
        const bool pb = b.values()[i] > threshold;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

MetricsReport evaluate(const Predictor& predictor, const Dataset& dataset,
                       const std::string& name) {
    MetricsReport report;
    report.predictor = name;
    report.count = static_cast<int>(dataset.samples.size());
    const int h = dataset.manifest.img_h, w = dataset.manifest.img_w;

    for (std::size_t s = 0; s < dataset.samples.size(); ++s) {
        const Sample& sample = dataset.samples[s];
        CapacitanceMatrix c(dataset.manifest.m, dataset.manifest.n);
        for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] = sample.capacitance[i];
        PermittivityImage truth(h, w);
        for (std::size_t i = 0; i < truth.size(); ++i) truth.values()[i] = sample.image[i];

        PermittivityImage pred;
        try {
            pred = predictor(c);
        } catch (const std::exception& e) {
            throw NumericError("predictor failed on sample " + std::to_string(s) + ": " +
                               e.what());
        }
        SampleMetrics sm;
        sm.mse = mse(pred, truth);
        sm.ssim = ssim(pred, truth);
        sm.psnr = psnr(pred, truth);
        sm.cc = pearson_cc(pred, truth);
        sm.iou = iou(pred, truth);
        report.per_sample.push_back(sm);
    }

    for (const SampleMetrics& sm : report.per_sample) {
        report.means.mse += sm.mse;
        report.means.ssim += sm.ssim;
        report.means.psnr += sm.psnr;
        report.means.cc += sm.cc;
        report.means.iou += sm.iou;
    }
    if (report.count > 0) {
        report.means.mse /= report.count;
        report.means.ssim /= report.count;
        report.means.psnr /= report.count;
        report.means.cc /= report.count;
        report.means.iou /= report.count;
    }
    return report;
}

PermittivityImage stitch(const std::vector<PermittivityImage>& windows, int overlap_px) {
    if (windows.empty()) throw InvalidInputError("stitch requires at least one window");
    if (overlap_px < 0) throw InvalidInputError("overlap must be non-negative");
    const int h = windows[0].height();
    int total_w = 0;
    for (std::size_t k = 0; k < windows.size(); ++k) {
        if (windows[k].height() != h)
            throw ShapeError("stitch: window " + std::to_string(k) + " height " +
                             std::to_string(windows[k].height()) + " != " + std::to_string(h));
        if (k > 0 && (overlap_px >= windows[k].width() || overlap_px >= windows[k - 1].width()))
            throw InvalidInputError("overlap exceeds window width");
        total_w += windows[k].width();
    }
    total_w -= overlap_px * static_cast<int>(windows.size() - 1);

    PermittivityImage out(h, total_w, 0.0);
    int x0 = 0;
    for (std::size_t k = 0; k < windows.size(); ++k) {
        const PermittivityImage& win = windows[k];
        for (int c = 0; c < win.width(); ++c) {
            const int oc = x0 + c;
            // Linear cross-fade over the first overlap_px columns of every
            // window after the first.
            double wgt = 1.0;
            if (k > 0 && c < overlap_px) wgt = static_cast<double>(c + 1) / (overlap_px + 1);
            for (int r = 0; r < h; ++r) {
                if (k > 0 && c < overlap_px)
                    out.at(r, oc) = (1.0 - wgt) * out.at(r, oc) + wgt * win.at(r, c);
                else
                    out.at(r, oc) = win.at(r, c);
            }
        }
        x0 += win.width() - overlap_px;
    }
    return out;
}

void write_report(const MetricsReport& report, const std::string& path) {
    using nlohmann::json;
    auto metrics_json = [](const SampleMetrics& m) {
        return json{{"mse", m.mse}, {"ssim", m.ssim}, {"psnr", m.psnr}, {"cc", m.cc},
                    {"iou", m.iou}};
    };
    json j{{"predictor", report.predictor},
           {"count", report.count},
           {"means", metrics_json(report.means)}};
    json per = json::array();
    for (const SampleMetrics& m : report.per_sample) per.push_back(metrics_json(m));
    j["per_sample"] = per;
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write report: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace ect
