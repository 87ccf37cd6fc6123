#pragma once

#include <string>
#include <vector>

#include "ect/common.hpp"

namespace ect {

// Normalized permittivity cross-section. Rows index depth z from the sensor
// surface, columns index the lateral coordinate y; values live in [0, 1]
// (0 = background eps0, 1 = inclusion eps1). The standard imaging window is
// 100 x 200 pixels at 1 um per pixel.
class PermittivityImage {
public:
    PermittivityImage() = default;
    PermittivityImage(int height, int width, double fill = 0.0)
        : h_(height), w_(width), v_(static_cast<std::size_t>(height) * width, fill) {
        if (height <= 0 || width <= 0)
            throw InvalidInputError("image dimensions must be positive");
    }

    static PermittivityImage standard(double fill = 0.0) {
        return PermittivityImage(100, 200, fill);
    }

    int height() const { return h_; }
    int width() const { return w_; }
    std::size_t size() const { return v_.size(); }

    double& at(int row, int col) { return v_[static_cast<std::size_t>(row) * w_ + col]; }
    double at(int row, int col) const { return v_[static_cast<std::size_t>(row) * w_ + col]; }

    const std::vector<double>& values() const { return v_; }
    std::vector<double>& values() { return v_; }

    bool in_unit_range() const {
        for (double x : v_)
            if (!(x >= 0.0 && x <= 1.0)) return false;
        return true;
    }

    // Throws InvalidInputError unless all values are in [0,1].
    void validate() const {
        if (!in_unit_range())
            throw InvalidInputError("permittivity image values must lie in [0,1]");
    }

private:
    int h_ = 0;
    int w_ = 0;
    std::vector<double> v_;
};

// 8-bit binary PGM ("P5", maxval 255); pixel byte = round(255 * value).
void write_pgm(const PermittivityImage& img, const std::string& path);
PermittivityImage read_pgm(const std::string& path);

}  // namespace ect
