#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ect/forward.hpp"
#include "ect/geometry.hpp"
#include "ect/image.hpp"

namespace ect {

// Linearized sensitivity of the normalized measurements around the empty
// background: J[k][p] = d(normalized C_k) / d(pixel p). Rows follow the
// row-major (offset, electrode) enumeration of non-padded CapacitanceMatrix
// entries.
struct SensitivityMatrix {
    int rows = 0;   // K = non-padded measurement count
    int cols = 0;   // P = img_h * img_w
    int m = 5;      // measurement matrix shape used for the enumeration
    int n = 20;
    int img_h = 100;
    int img_w = 200;
    std::vector<double> j;  // row-major rows x cols

    double at(int k, int p) const { return j[static_cast<std::size_t>(k) * cols + p]; }
    double& at(int k, int p) { return j[static_cast<std::size_t>(k) * cols + p]; }
};

// Non-padded entries of c in row-major (offset, electrode) order.
std::vector<double> flatten_measurements(const CapacitanceMatrix& c);

// Adjoint sensitivity at the all-background operating point: for measurement
// (i,j) and element e, raw s = -(eps1-eps0) * area_e * grad(u_i).grad(u_j)
// with unit-excitation background potentials, aggregated to pixels and scaled
// by the full/empty normalization span of the measurement.
SensitivityMatrix sensitivity_matrix(const DomainSpec& spec, const PhysicalPermittivity& phys,
                                     int max_offset = 5);

// mu < 0 selects the default 1e-2 * mean(diag(J^T J)).
PermittivityImage tikhonov_iterative(const std::vector<double>& c_meas,
                                     const SensitivityMatrix& J, double mu = -1.0,
                                     int iters = 200);

// alpha < 0 selects the default 1.9 / ||J||_2^2 (power iteration, 50 steps).
PermittivityImage landweber(const std::vector<double>& c_meas, const SensitivityMatrix& J,
                            double alpha = -1.0, int iters = 500);

// Min-max normalized J^T c; a constant field maps to all zeros.
PermittivityImage linear_back_projection(const std::vector<double>& c_meas,
                                         const SensitivityMatrix& J);

// "ECTJ" container: u32 version, u32 K, u32 P, float64 row-major data.
void write_sensitivity(const SensitivityMatrix& J, const std::string& path);
SensitivityMatrix read_sensitivity(const std::string& path, int m, int n, int img_h, int img_w);

}  // namespace ect
