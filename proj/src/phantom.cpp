#include "ect/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "ect/rng.hpp"

namespace ect {

void PhantomSpec::validate() const {
    if (img_h <= 0 || img_w <= 0) throw InvalidSpecError("phantom image dims must be positive");
    if (kind == PhantomKind::microsphere) {
        if (count_min < 1 || count_max < count_min)
            throw InvalidSpecError("microsphere count range is empty");
        if (radius_min <= 0.0 || radius_max < radius_min)
            throw InvalidSpecError("microsphere radius range is empty or non-positive");
        if (depth_min < 0.0 || depth_max < depth_min || depth_max > img_h)
            throw InvalidSpecError("microsphere depth range does not fit the window");
        if (2.0 * radius_max > std::min(img_h, img_w))
            throw InvalidSpecError("microsphere radius does not fit the window");
    } else {
        if (base_thickness_min < 0.0 || base_thickness_max < base_thickness_min ||
            base_thickness_max > img_h)
            throw InvalidSpecError("biofilm thickness range does not fit the window");
        if (roughness_amp_min < 0.0 || roughness_amp_max < roughness_amp_min)
            throw InvalidSpecError("biofilm roughness range is empty");
        if (corr_length_min <= 0.0 || corr_length_max < corr_length_min)
            throw InvalidSpecError("biofilm correlation length range is empty");
        if (void_count_max < 0 || (void_count_max > 0 &&
                                   (void_radius_min <= 0.0 || void_radius_max < void_radius_min)))
            throw InvalidSpecError("biofilm void parameters invalid");
    }
}

void paint_disk(PermittivityImage& img, double center_z, double center_y, double radius,
                double value) {
    constexpr int kSub = 16;  // 16x16 coverage supersampling per pixel
    const double r2 = radius * radius;
    const int r_lo = std::max(0, static_cast<int>(std::floor(center_z - radius)));
    const int r_hi = std::min(img.height() - 1, static_cast<int>(std::ceil(center_z + radius)));
    const int c_lo = std::max(0, static_cast<int>(std::floor(center_y - radius)));
    const int c_hi = std::min(img.width() - 1, static_cast<int>(std::ceil(center_y + radius)));
    for (int r = r_lo; r <= r_hi; ++r) {
        for (int c = c_lo; c <= c_hi; ++c) {
            int inside = 0;
            for (int i = 0; i < kSub; ++i) {
                const double z = r + (i + 0.5) / kSub - center_z;
                for (int j = 0; j < kSub; ++j) {
                    const double y = c + (j + 0.5) / kSub - center_y;
                    if (z * z + y * y <= r2) ++inside;
                }
            }
            if (inside == 0) continue;
            const double cov = static_cast<double>(inside) / (kSub * kSub);
            img.at(r, c) = std::clamp(img.at(r, c) + value * cov, 0.0, 1.0);
        }
    }
}

namespace {

PermittivityImage gen_microspheres(const PhantomSpec& spec, Rng& rng) {
    PermittivityImage img(spec.img_h, spec.img_w, 0.0);
    const int count = static_cast<int>(rng.uniform_int(spec.count_min, spec.count_max));
    struct Disk {
        double z, y, r;
    };
    std::vector<Disk> placed;
    for (int d = 0; d < count; ++d) {
        bool ok = false;
        for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
            const double r = rng.uniform(spec.radius_min, spec.radius_max);
            const double z_lo = std::max(spec.depth_min, r);
            const double z_hi = std::min(spec.depth_max, spec.img_h - r);
            const double y_lo = r, y_hi = spec.img_w - r;
            if (z_hi < z_lo || y_hi < y_lo) continue;
            const double z = rng.uniform(z_lo, z_hi);
            const double y = rng.uniform(y_lo, y_hi);
            bool overlaps = false;
            for (const Disk& other : placed) {
                const double dz = z - other.z, dy = y - other.y;
                if (std::sqrt(dz * dz + dy * dy) <= r + other.r) {
                    overlaps = true;
                    break;
                }
            }
            if (!overlaps) {
                placed.push_back({z, y, r});
                ok = true;
            }
        }
        if (!ok)
            throw GenerationError("could not place microsphere " + std::to_string(d + 1) +
                                  " of " + std::to_string(count) +
                                  " after 1000 rejection attempts");
    }
    for (const Disk& d : placed) paint_disk(img, d.z, d.y, d.r, 1.0);
    return img;
}

PermittivityImage gen_biofilm(const PhantomSpec& spec, Rng& rng) {
    const double base = rng.uniform(spec.base_thickness_min, spec.base_thickness_max);
    const double amp = rng.uniform(spec.roughness_amp_min, spec.roughness_amp_max);
    const double corr = rng.uniform(spec.corr_length_min, spec.corr_length_max);

    // Unit-variance smooth field: white noise convolved with a Gaussian kernel
    // of std corr/2, normalized by its l2 norm.
    const double ks = corr / 2.0;
    const int hw = std::max(1, static_cast<int>(std::lround(3.0 * ks)));
    std::vector<double> kernel(2 * hw + 1);
    double norm2 = 0.0;
    for (int j = -hw; j <= hw; ++j) {
        kernel[j + hw] = std::exp(-0.5 * (j / ks) * (j / ks));
        norm2 += kernel[j + hw] * kernel[j + hw];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& k : kernel) k *= inv;

    std::vector<double> white(spec.img_w + 2 * hw);
    for (double& w : white) w = rng.normal();

    std::vector<double> height(spec.img_w);
    for (int y = 0; y < spec.img_w; ++y) {
        double g = 0.0;
        for (int j = 0; j < 2 * hw + 1; ++j) g += kernel[j] * white[y + j];
        height[y] = std::clamp(base + amp * g, 0.0, static_cast<double>(spec.img_h));
    }

    PermittivityImage img(spec.img_h, spec.img_w, 0.0);
    for (int c = 0; c < spec.img_w; ++c)
        for (int r = 0; r < spec.img_h; ++r)
            img.at(r, c) = std::clamp(height[c] - r, 0.0, 1.0);

    if (spec.void_count_max > 0) {
        const int nv = static_cast<int>(rng.uniform_int(0, spec.void_count_max));
        for (int v = 0; v < nv; ++v) {
            const double r = rng.uniform(spec.void_radius_min, spec.void_radius_max);
            const double z = rng.uniform(r, spec.img_h - r);
            const double y = rng.uniform(r, spec.img_w - r);
            paint_disk(img, z, y, r, -1.0);
        }
    }
    return img;
}

}  // namespace

PermittivityImage gen_phantom(const PhantomSpec& spec, std::uint64_t rng_seed) {
    spec.validate();
    Rng rng(rng_seed);
    return spec.kind == PhantomKind::microsphere ? gen_microspheres(spec, rng)
                                                 : gen_biofilm(spec, rng);
}

CapacitanceMatrix add_noise(const CapacitanceMatrix& c, const NoiseModel& noise,
                            std::uint64_t rng_seed) {
    noise.validate();
    if (noise.std == 0.0) return c;
    Rng rng(rng_seed);
    CapacitanceMatrix out = c;
    for (int row = 0; row < c.m; ++row)
        for (int i = 0; i < c.n; ++i)
            if (!c.is_padded(row, i)) out.at(row, i) += rng.normal(0.0, noise.std);
    return out;
}

}  // namespace ect
