#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ect/common.hpp"

namespace ect {

// Planar one-sided sensing geometry. Electrodes sit on the bottom edge of a
// width x depth imaging window; the simulated domain is padded laterally and
// above so fringing fields are not truncated at artificial boundaries. All
// lengths are integer micrometers.
struct DomainSpec {
    int width_um = 200;
    int depth_um = 100;
    int pad_side_um = 50;
    int pad_top_um = 50;
    int n_electrodes = 20;
    int pitch_um = 10;
    int electrode_width_um = 8;
    int elements_per_um = 1;

    // Throws InvalidSpecError if any invariant is violated.
    void validate() const;

    int padded_width_um() const { return width_um + 2 * pad_side_um; }
    int padded_depth_um() const { return depth_um + pad_top_um; }
};

constexpr int kInsulating = -1;
constexpr int kInterior = -2;

// Structured right-triangle mesh over the padded domain. Node coordinates are
// (y, z) in micrometers with y lateral and z the depth above the sensor; the
// sensor surface is z = 0.
struct Mesh {
    int grid_nx = 0;  // cells along y
    int grid_nz = 0;  // cells along z
    double cell_um = 1.0;
    double y0 = 0.0;  // y coordinate of grid column 0

    std::vector<double> node_y;
    std::vector<double> node_z;
    std::vector<std::array<std::int32_t, 3>> triangles;
    std::vector<std::vector<std::int32_t>> electrode_nodes;
    // kInterior for interior nodes, kInsulating for non-electrode boundary
    // nodes, else the electrode index.
    std::vector<std::int32_t> boundary_kind;

    std::size_t n_nodes() const { return node_y.size(); }
    std::size_t n_triangles() const { return triangles.size(); }

    std::int32_t node_id(int ix, int iz) const {
        return static_cast<std::int32_t>(iz) * (grid_nx + 1) + ix;
    }

    double triangle_area(std::size_t t) const;

    // Node index map of the lateral mirror y -> (width - y); exists for any
    // structured mesh since the padded grid is symmetric.
    std::vector<std::int32_t> mirror_node_map() const;
};

// Pixel -> covering elements with exact area fractions (fractions of the
// pixel's area). Pixels are 1 um x 1 um over the imaging window only.
struct PixelElementMap {
    int img_h = 0;
    int img_w = 0;
    // entries[pixel] = list of (triangle index, area fraction)
    std::vector<std::vector<std::pair<std::int32_t, double>>> entries;

    std::size_t n_pixels() const { return entries.size(); }
};

Mesh build_mesh(const DomainSpec& spec);
PixelElementMap pixel_element_map(const Mesh& mesh, const DomainSpec& spec);

// Same mapping for an img_h x img_w window anchored at y = 0, z = 0; the
// window geometry is recoverable from the mesh alone.
PixelElementMap pixel_element_map(const Mesh& mesh, int img_h, int img_w);

}  // namespace ect
