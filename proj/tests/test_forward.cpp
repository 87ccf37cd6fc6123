#include <doctest.h>

#include <cmath>

#include "ect/forward.hpp"
#include "ect/phantom.hpp"
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

double max_rel_diff(const CapacitanceMatrix& a, const CapacitanceMatrix& b) {
    double worst = 0.0;
    for (int row = 0; row < a.m; ++row)
        for (int i = 0; i < a.n; ++i) {
            if (a.is_padded(row, i)) continue;
            const double rel = std::abs(a.at(row, i) - b.at(row, i)) /
                               std::max(std::abs(a.at(row, i)), 1e-15);
            worst = std::max(worst, rel);
        }
    return worst;
}

}  // namespace

TEST_CASE("assembly scales linearly in sigma") {
    const DomainSpec spec = test::small_domain();
    const Mesh mesh = build_mesh(spec);
    const PixelElementMap map = pixel_element_map(mesh, spec);
    const PermittivityImage zeros(spec.depth_um, spec.width_um, 0.0);

    SUBCASE("uniform background factors out") {
        PhysicalPermittivity unit{1.0, 2.0};
        PhysicalPermittivity doubled{2.0, 3.0};
        const SparseSystem base = assemble(mesh, zeros, unit, map);
        const SparseSystem scaled = assemble(mesh, zeros, doubled, map);
        REQUIRE(base.K.val.size() == scaled.K.val.size());
        for (std::size_t k = 0; k < base.K.val.size(); ++k)
            CHECK(scaled.K.val[k] == doctest::Approx(2.0 * base.K.val[k]).epsilon(1e-12));
    }

    SUBCASE("doubling every sigma doubles every entry") {
        const PermittivityImage img = random_image(spec.depth_um, spec.width_um, 3);
        const SparseSystem a = assemble(mesh, img, PhysicalPermittivity{2.0, 2.6}, map);
        const SparseSystem b = assemble(mesh, img, PhysicalPermittivity{4.0, 5.2}, map);
        for (std::size_t k = 0; k < a.K.val.size(); ++k)
            CHECK(b.K.val[k] == doctest::Approx(2.0 * a.K.val[k]).epsilon(1e-12));
    }

    SUBCASE("row sums vanish before boundary conditions") {
        const PermittivityImage img = random_image(spec.depth_um, spec.width_um, 7);
        const SparseSystem sys = assemble(mesh, img, PhysicalPermittivity{}, map);
        double worst = 0.0;
        for (std::int32_t r = 0; r < sys.K.n; ++r)
            worst = std::max(worst, std::abs(sys.K.row_sum(r)));
        CHECK(worst < 1e-10);
    }

    SUBCASE("out-of-range image values are rejected") {
        PermittivityImage bad(spec.depth_um, spec.width_um, 0.0);
        bad.at(3, 3) = 1.25;
        CHECK_THROWS_AS(assemble(mesh, bad, PhysicalPermittivity{}, map), InvalidInputError);
    }

    SUBCASE("symmetry of the assembled operator") {
        const PermittivityImage img = random_image(spec.depth_um, spec.width_um, 11);
        const SparseSystem sys = assemble(mesh, img, PhysicalPermittivity{}, map);
        for (std::int32_t r = 0; r < sys.K.n; ++r) {
            for (std::int32_t k = sys.K.row_ptr[r]; k < sys.K.row_ptr[r + 1]; ++k) {
                const std::int32_t c = sys.K.col[k];
                if (c < r) continue;
                // find (c, r)
                double v_cr = 0.0;
                for (std::int32_t k2 = sys.K.row_ptr[c]; k2 < sys.K.row_ptr[c + 1]; ++k2)
                    if (sys.K.col[k2] == r) v_cr = sys.K.val[k2];
                CHECK(std::abs(sys.K.val[k] - v_cr) < 1e-12);
            }
        }
    }
}

TEST_CASE("excitation solves satisfy boundary conditions and physics") {
    const DomainSpec spec = test::small_domain();
    const Mesh mesh = build_mesh(spec);
    const PixelElementMap map = pixel_element_map(mesh, spec);
    const PermittivityImage uniform(spec.depth_um, spec.width_um, 0.0);
    const SparseSystem sys = assemble(mesh, uniform, PhysicalPermittivity{}, map);

    SUBCASE("Dirichlet values are exact") {
        const PotentialField u = solve_excitation(sys, 2);
        for (std::int32_t v : sys.electrode_nodes[2]) CHECK(u.u[v] == 1.0);
        for (int e = 0; e < sys.n_electrodes(); ++e) {
            if (e == 2) continue;
            for (std::int32_t v : sys.electrode_nodes[e]) CHECK(u.u[v] == 0.0);
        }
    }

    SUBCASE("maximum principle for uniform sigma") {
        const PotentialField u = solve_excitation(sys, 1);
        for (double v : u.u) {
            CHECK(v >= -1e-9);
            CHECK(v <= 1.0 + 1e-9);
        }
    }

    SUBCASE("mirror-symmetric sigma gives mirror-equal fields") {
        // symmetric phantom: centered disk
        PermittivityImage img(spec.depth_um, spec.width_um, 0.0);
        paint_disk(img, 12.0, 30.0, 6.0, 1.0);
        const SparseSystem s2 = assemble(mesh, img, PhysicalPermittivity{}, map);
        const PotentialField ua = solve_excitation(s2, 1);
        const PotentialField ub = solve_excitation(s2, 4);  // mirror electrode of 1 (n=6)
        const auto mirror = mesh.mirror_node_map();
        double worst = 0.0;
        for (std::size_t v = 0; v < ua.u.size(); ++v)
            worst = std::max(worst, std::abs(ua.u[v] - ub.u[mirror[v]]));
        CHECK(worst < 1e-9);
    }

    SUBCASE("invalid electrode index") {
        CHECK_THROWS_AS(solve_excitation(sys, 17), InvalidInputError);
    }
}

TEST_CASE("charge extraction: conservation, reciprocity, translation symmetry") {
    const DomainSpec spec = test::small_domain();
    const Mesh mesh = build_mesh(spec);
    const PixelElementMap map = pixel_element_map(mesh, spec);
    const PermittivityImage img = random_image(spec.depth_um, spec.width_um, 21);
    const SparseSystem sys = assemble(mesh, img, PhysicalPermittivity{}, map);

    SUBCASE("total charge plus outer-boundary flux vanishes") {
        for (int i = 0; i < sys.n_electrodes(); ++i) {
            const PotentialField u = solve_excitation(sys, i);
            double total = outer_boundary_flux(sys, u);
            double max_q = 0.0;
            for (int j = 0; j < sys.n_electrodes(); ++j) {
                const double q = electrode_charge(sys, u, j);
                total += q;
                max_q = std::max(max_q, std::abs(q));
            }
            CHECK(std::abs(total) < 1e-9 * max_q);
        }
    }

    SUBCASE("reciprocity") {
        const PotentialField u1 = solve_excitation(sys, 1);
        const PotentialField u3 = solve_excitation(sys, 3);
        const double c13 = -electrode_charge(sys, u1, 3);
        const double c31 = -electrode_charge(sys, u3, 1);
        CHECK(std::abs(c13 - c31) / std::max(std::abs(c13), 1e-15) < 1e-8);
    }

    SUBCASE("uniform sigma: adjacent couplings match away from the edges") {
        const PermittivityImage uniform(spec.depth_um, spec.width_um, 0.0);
        const SparseSystem su = assemble(mesh, uniform, PhysicalPermittivity{}, map);
        const CapacitanceMatrix c = capacitance_matrix(mesh, uniform, PhysicalPermittivity{});
        // interior adjacent pairs (1,2) .. (3,4)
        for (int i = 2; i <= 3; ++i)
            CHECK(std::abs(c.at(0, i) - c.at(0, 1)) / std::abs(c.at(0, 1)) < 1e-6);
        (void)su;
    }
}

TEST_CASE("capacitance matrix layout, monotonicity and normalization") {
    const DomainSpec spec = test::small_domain();
    const PhysicalPermittivity phys;
    ForwardModel model(spec, phys);
    const int n = spec.n_electrodes;

    const PermittivityImage zeros(spec.depth_um, spec.width_um, 0.0);
    const PermittivityImage ones(spec.depth_um, spec.width_um, 1.0);
    const CapacitanceMatrix c_empty = model.capacitance_direct(zeros);
    const CapacitanceMatrix c_full = model.capacitance_direct(ones);

    SUBCASE("padded entries are exactly zero") {
        for (int row = 0; row < c_empty.m; ++row)
            for (int i = 0; i < n; ++i)
                if (c_empty.is_padded(row, i)) CHECK(c_empty.at(row, i) == 0.0);
        // with n=6, entry (4, i) only exists for i=0
        CHECK(!c_empty.is_padded(4, 0));
        CHECK(c_empty.is_padded(4, 1));
    }

    SUBCASE("higher sigma raises every coupling") {
        for (int row = 0; row < c_empty.m; ++row)
            for (int i = 0; i < n; ++i)
                if (!c_empty.is_padded(row, i))
                    CHECK(c_full.at(row, i) > c_empty.at(row, i));
    }

    SUBCASE("near pairs couple more strongly than far pairs") {
        CHECK(std::abs(c_empty.at(0, 0)) > std::abs(c_empty.at(4, 0)));
        CHECK(std::abs(c_empty.at(1, 1)) > std::abs(c_empty.at(3, 1)));
    }

    SUBCASE("pointwise monotonicity on nested phantoms") {
        Rng rng(5);
        PermittivityImage lo(spec.depth_um, spec.width_um, 0.0);
        for (double& v : lo.values()) v = 0.8 * rng.uniform();
        PermittivityImage hi = lo;
        for (double& v : hi.values()) v = std::min(1.0, v + 0.15);
        const CapacitanceMatrix c_lo = model.capacitance_direct(lo);
        const CapacitanceMatrix c_hi = model.capacitance_direct(hi);
        for (int row = 0; row < c_lo.m; ++row)
            for (int i = 0; i < n; ++i)
                if (!c_lo.is_padded(row, i)) CHECK(c_hi.at(row, i) >= c_lo.at(row, i));
    }

    SUBCASE("normalization endpoints and interior") {
        const CapacitanceMatrix n_empty = normalize(c_empty, c_empty, c_full);
        const CapacitanceMatrix n_full = normalize(c_full, c_empty, c_full);
        const PermittivityImage half(spec.depth_um, spec.width_um, 0.5);
        const CapacitanceMatrix n_half =
            normalize(model.capacitance_direct(half), c_empty, c_full);
        for (int row = 0; row < c_empty.m; ++row)
            for (int i = 0; i < n; ++i) {
                if (c_empty.is_padded(row, i)) continue;
                CHECK(n_empty.at(row, i) == 0.0);
                CHECK(n_full.at(row, i) == doctest::Approx(1.0).epsilon(1e-12));
                CHECK(n_half.at(row, i) > 0.0);
                CHECK(n_half.at(row, i) < 1.0);
            }
    }

    SUBCASE("degenerate calibration is detected") {
        CHECK_THROWS_AS(normalize(c_empty, c_empty, c_empty), NumericError);
    }

    SUBCASE("direct and CG paths agree") {
        const PermittivityImage img = random_image(spec.depth_um, spec.width_um, 33);
        const CapacitanceMatrix direct = model.capacitance_direct(img);
        const CapacitanceMatrix cg = model.capacitance_cg(img);
        CHECK(max_rel_diff(direct, cg) < 1e-7);
    }

    SUBCASE("determinism") {
        const PermittivityImage img = random_image(spec.depth_um, spec.width_um, 44);
        const CapacitanceMatrix a = model.capacitance_direct(img);
        const CapacitanceMatrix b = model.capacitance_direct(img);
        CHECK(a.values == b.values);
        const CapacitanceMatrix c1 = model.capacitance_cg(img);
        const CapacitanceMatrix c2 = model.capacitance_cg(img);
        CHECK(c1.values == c2.values);
    }
}
