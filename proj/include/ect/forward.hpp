#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "ect/geometry.hpp"
#include "ect/image.hpp"
#include "ect/sparse.hpp"

namespace ect {

// Relative permittivities mapped onto the normalized image: a pixel value v
// yields sigma = eps_background + v * (eps_inclusion - eps_background).
struct PhysicalPermittivity {
    double eps_background = 2.0;
    double eps_inclusion = 2.6;

    void validate() const {
        if (eps_background <= 0.0 || eps_inclusion <= 0.0)
            throw InvalidSpecError("permittivities must be positive");
        if (eps_background == eps_inclusion)
            throw InvalidSpecError("inclusion and background permittivity must differ");
    }

    double sigma(double pixel_value) const {
        return eps_background + pixel_value * (eps_inclusion - eps_background);
    }
};

// m x n pairwise mutual capacitances: entry (d-1, i) = C_{i,i+d} for
// electrode pairs at spatial offset d (0-based electrode index i). Pairs past
// the array edge are zero-padded so the shape stays fixed.
struct CapacitanceMatrix {
    int m = 5;
    int n = 20;
    std::vector<double> values;

    CapacitanceMatrix() = default;
    CapacitanceMatrix(int offsets, int electrodes)
        : m(offsets), n(electrodes), values(static_cast<std::size_t>(offsets) * electrodes, 0.0) {}

    double& at(int row, int i) { return values[static_cast<std::size_t>(row) * n + i]; }
    double at(int row, int i) const { return values[static_cast<std::size_t>(row) * n + i]; }

    // Entry (row, i) pairs electrodes (i, i + row + 1).
    bool is_padded(int row, int i) const { return i + row + 1 > n - 1; }

    int non_padded_count() const {
        int k = 0;
        for (int row = 0; row < m; ++row)
            for (int i = 0; i < n; ++i)
                if (!is_padded(row, i)) ++k;
        return k;
    }
};

struct PotentialField {
    std::vector<double> u;  // per mesh node, volts
};

// Assembled P1 stiffness operator plus the bookkeeping needed to apply the
// excitation protocol: the full (unconstrained) matrix for charge extraction,
// the free-node reduction for solving, and per-electrode couplings.
struct SparseSystem {
    CsrMatrix K;    // full symmetric stiffness over all nodes
    CsrMatrix Kff;  // reduction to non-electrode nodes
    std::vector<std::int32_t> free_of_node;  // -1 for electrode nodes
    std::vector<std::int32_t> node_of_free;
    std::vector<std::vector<std::int32_t>> electrode_nodes;
    std::vector<std::int32_t> insulating_boundary_nodes;
    // Per electrode: (free index, full-K slot) couplings, so the Dirichlet
    // right-hand side is -sum(K[f][c]) over the electrode's columns c.
    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> electrode_couplings;

    std::size_t n_nodes() const { return free_of_node.size(); }
    int n_electrodes() const { return static_cast<int>(electrode_nodes.size()); }
};

struct SolveOptions {
    double tol = 1e-10;
    std::int64_t max_iter_factor = 20;  // cap = factor * n_nodes
};

SparseSystem assemble(const Mesh& mesh, const PermittivityImage& image,
                      const PhysicalPermittivity& phys, const PixelElementMap& map);

// Drives electrode i to 1 V with all other electrodes grounded and natural
// (zero-flux) conditions elsewhere; Jacobi-preconditioned CG on the reduced
// system. Throws NumericError (with the final residual) on non-convergence.
PotentialField solve_excitation(const SparseSystem& sys, int electrode,
                                const SolveOptions& opts = {});

// Discrete boundary charge on electrode j: the sum of (K u) over its node
// rows using the unconstrained stiffness matrix, which satisfies the discrete
// divergence theorem exactly.
double electrode_charge(const SparseSystem& sys, const PotentialField& u, int electrode);

// Flux residual summed over insulating (non-electrode) boundary nodes.
double outer_boundary_flux(const SparseSystem& sys, const PotentialField& u);

struct ForwardOptions {
    SolveOptions solve;
    int threads = 1;  // excitations are independent; >1 solves them concurrently
};

CapacitanceMatrix capacitance_matrix(const Mesh& mesh, const PermittivityImage& image,
                                     const PhysicalPermittivity& phys, int max_offset = 5,
                                     const ForwardOptions& opts = {});

// Full/empty calibration: per entry (c - c_empty) / (c_full - c_empty);
// padded entries stay zero. Throws NumericError if the calibration span
// degenerates at any non-padded entry.
CapacitanceMatrix normalize(const CapacitanceMatrix& c, const CapacitanceMatrix& c_empty,
                            const CapacitanceMatrix& c_full);

// Per-element constant gradient (d/dy, d/dz) of a P1 potential field.
std::vector<std::array<double, 2>> element_gradients(const Mesh& mesh, const PotentialField& u);

// Caches the mesh-dependent assembly structures so repeated simulations with
// different images amortize pattern construction. Thread-safe for concurrent
// use once constructed.
class ForwardModel {
public:
    ForwardModel(const DomainSpec& spec, const PhysicalPermittivity& phys);
    ~ForwardModel();
    ForwardModel(const ForwardModel&) = delete;
    ForwardModel& operator=(const ForwardModel&) = delete;

    const Mesh& mesh() const;
    const PixelElementMap& map() const;
    const DomainSpec& spec() const;
    const PhysicalPermittivity& phys() const;

    SparseSystem assemble(const PermittivityImage& image) const;

    // Per-electrode CG solves (the reference path).
    CapacitanceMatrix capacitance_cg(const PermittivityImage& image, int max_offset = 5,
                                     const ForwardOptions& opts = {}) const;

    // One sparse LDLT factorization, one triangular solve per electrode.
    // Matches the CG path to solver tolerance; used for bulk dataset
    // generation where thousands of simulations are needed.
    CapacitanceMatrix capacitance_direct(const PermittivityImage& image,
                                         int max_offset = 5) const;

    // All n excitation fields from one factorization.
    std::vector<PotentialField> solve_all_direct(const PermittivityImage& image) const;

    // Raw capacitances of the all-zeros / all-ones images (direct path).
    const CapacitanceMatrix& empty_reference() const;
    const CapacitanceMatrix& full_reference() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ect
