#pragma once

#include <cstdint>
#include <optional>

#include "ect/forward.hpp"
#include "ect/image.hpp"

namespace ect {

enum class PhantomKind { microsphere, biofilm };

// Synthetic phantom family parameters. Ranges are inclusive and sampled
// uniformly; all lengths in micrometers.
struct PhantomSpec {
    PhantomKind kind = PhantomKind::microsphere;
    int img_h = 100;
    int img_w = 200;

    // microsphere
    int count_min = 1;
    int count_max = 3;
    double radius_min = 10.0;
    double radius_max = 20.0;
    double depth_min = 5.0;   // center depth
    double depth_max = 80.0;

    // biofilm: film attached to the sensor surface with a rough top profile
    double base_thickness_min = 10.0;
    double base_thickness_max = 60.0;
    double roughness_amp_min = 0.0;
    double roughness_amp_max = 20.0;
    double corr_length_min = 20.0;
    double corr_length_max = 60.0;
    int void_count_max = 0;  // optional internal voids, disabled by default
    double void_radius_min = 3.0;
    double void_radius_max = 8.0;

    void validate() const;
};

// Additive zero-mean Gaussian measurement noise, i.i.d. per non-padded entry.
struct NoiseModel {
    double std = 0.03;

    void validate() const {
        if (std < 0.0) throw InvalidSpecError("noise std must be non-negative");
    }
};

// Deterministic given the seed. Throws GenerationError if a non-overlapping
// placement cannot be found within the rejection budget.
PermittivityImage gen_phantom(const PhantomSpec& spec, std::uint64_t rng_seed);

CapacitanceMatrix add_noise(const CapacitanceMatrix& c, const NoiseModel& noise,
                            std::uint64_t rng_seed);

// Anti-aliased disk painter shared by the phantom families; adds `value`
// scaled by per-pixel coverage of the disk (clamping to [0,1]).
void paint_disk(PermittivityImage& img, double center_z, double center_y, double radius,
                double value);

}  // namespace ect
