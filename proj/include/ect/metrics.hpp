#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ect/dataset.hpp"
#include "ect/forward.hpp"
#include "ect/image.hpp"

namespace ect {

double mse(const PermittivityImage& a, const PermittivityImage& b);

// 10*log10(data_range^2 / MSE); returns cap_db when MSE < 1e-10.
double psnr(const PermittivityImage& a, const PermittivityImage& b, double data_range = 1.0,
            double cap_db = 100.0);

// Local-statistics SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// L=1, symmetric-reflection padding, mean over all positions.
double ssim(const PermittivityImage& a, const PermittivityImage& b);

// Pearson correlation over pixels; 0 by convention when either image has
// zero variance.
double pearson_cc(const PermittivityImage& a, const PermittivityImage& b);

// Intersection-over-union of masks binarized at the threshold; 1 when both
// masks are empty.
double iou(const PermittivityImage& a, const PermittivityImage& b, double threshold = 0.5);

struct SampleMetrics {
    double mse = 0.0;
    double ssim = 0.0;
    double psnr = 0.0;
    double cc = 0.0;
    double iou = 0.0;
};

struct MetricsReport {
    std::string predictor;
    int count = 0;
    SampleMetrics means;
    std::vector<SampleMetrics> per_sample;
};

using Predictor = std::function<PermittivityImage(const CapacitanceMatrix&)>;

// Runs the predictor over every sample in deterministic order; predictor
// failures are rethrown with the sample index attached.
MetricsReport evaluate(const Predictor& predictor, const Dataset& dataset,
                       const std::string& name);

// Horizontal concatenation of equal-height windows; with overlap_px > 0
// neighboring windows cross-fade linearly over the shared columns.
PermittivityImage stitch(const std::vector<PermittivityImage>& windows, int overlap_px = 0);

void write_report(const MetricsReport& report, const std::string& path);

}  // namespace ect
