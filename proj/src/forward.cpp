#include "ect/forward.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <mutex>

#include "ect/threading.hpp"

namespace ect {

namespace {

// Geometry-only P1 element data: gradients of the three hat functions are
// constant per triangle, grad(phi_a) = (gb[a], gc[a]).
struct ElementGeom {
    double gb[3];
    double gc[3];
    double area;
};

ElementGeom element_geom(const Mesh& mesh, std::size_t t) {
    const auto& tri = mesh.triangles[t];
    const double y1 = mesh.node_y[tri[0]], z1 = mesh.node_z[tri[0]];
    const double y2 = mesh.node_y[tri[1]], z2 = mesh.node_z[tri[1]];
    const double y3 = mesh.node_y[tri[2]], z3 = mesh.node_z[tri[2]];
    const double two_a = (y2 - y1) * (z3 - z1) - (z2 - z1) * (y3 - y1);
    ElementGeom g;
    g.area = 0.5 * two_a;
    g.gb[0] = (z2 - z3) / two_a;
    g.gb[1] = (z3 - z1) / two_a;
    g.gb[2] = (z1 - z2) / two_a;
    g.gc[0] = (y3 - y2) / two_a;
    g.gc[1] = (y1 - y3) / two_a;
    g.gc[2] = (y2 - y1) / two_a;
    return g;
}

// Mesh-dependent structures shared across assemblies with different images.
struct AssemblyPlan {
    std::int32_t n_nodes = 0;
    std::vector<std::int32_t> row_ptr, cols;       // full-K pattern
    std::vector<std::int32_t> element_slots;       // 9 per element -> K slot
    std::vector<ElementGeom> geom;                 // per element
    std::vector<std::int32_t> element_pixel;       // -1 outside imaging window
    std::vector<std::int32_t> free_of_node, node_of_free;
    std::vector<std::int32_t> kff_row_ptr, kff_cols;
    std::vector<std::int32_t> kff_slot_of_slot;    // -1 if either end constrained
    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> electrode_couplings;
    std::vector<std::vector<std::int32_t>> electrode_nodes;
    std::vector<std::int32_t> insulating_boundary_nodes;
};

AssemblyPlan build_plan(const Mesh& mesh, const PixelElementMap& map) {
    AssemblyPlan plan;
    plan.n_nodes = static_cast<std::int32_t>(mesh.n_nodes());
    plan.electrode_nodes = mesh.electrode_nodes;

    for (std::size_t i = 0; i < mesh.boundary_kind.size(); ++i)
        if (mesh.boundary_kind[i] == kInsulating)
            plan.insulating_boundary_nodes.push_back(static_cast<std::int32_t>(i));

    // Sparsity pattern: node self plus all vertices sharing a triangle.
    std::vector<std::vector<std::int32_t>> adj(plan.n_nodes);
    for (std::int32_t v = 0; v < plan.n_nodes; ++v) adj[v].push_back(v);
    for (const auto& tri : mesh.triangles) {
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                if (a != b) adj[tri[a]].push_back(tri[b]);
    }
    plan.row_ptr.assign(plan.n_nodes + 1, 0);
    for (std::int32_t v = 0; v < plan.n_nodes; ++v) {
        auto& list = adj[v];
        std::sort(list.begin(), list.end());
        list.erase(std::unique(list.begin(), list.end()), list.end());
        plan.row_ptr[v + 1] = plan.row_ptr[v] + static_cast<std::int32_t>(list.size());
    }
    plan.cols.resize(plan.row_ptr.back());
    for (std::int32_t v = 0; v < plan.n_nodes; ++v)
        std::copy(adj[v].begin(), adj[v].end(), plan.cols.begin() + plan.row_ptr[v]);

    auto slot_of = [&](std::int32_t r, std::int32_t c) {
        const auto first = plan.cols.begin() + plan.row_ptr[r];
        const auto last = plan.cols.begin() + plan.row_ptr[r + 1];
        return static_cast<std::int32_t>(std::lower_bound(first, last, c) - plan.cols.begin());
    };

    plan.element_slots.resize(9 * mesh.n_triangles());
    plan.geom.resize(mesh.n_triangles());
    for (std::size_t t = 0; t < mesh.n_triangles(); ++t) {
        plan.geom[t] = element_geom(mesh, t);
        const auto& tri = mesh.triangles[t];
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                plan.element_slots[9 * t + 3 * a + b] = slot_of(tri[a], tri[b]);
    }

    plan.element_pixel.assign(mesh.n_triangles(), -1);
    for (std::size_t p = 0; p < map.entries.size(); ++p)
        for (const auto& [elem, frac] : map.entries[p])
            plan.element_pixel[elem] = static_cast<std::int32_t>(p);

    // Free-node reduction: all electrode nodes are Dirichlet-constrained.
    plan.free_of_node.assign(plan.n_nodes, 0);
    for (const auto& group : plan.electrode_nodes)
        for (std::int32_t v : group) plan.free_of_node[v] = -1;
    for (std::int32_t v = 0; v < plan.n_nodes; ++v) {
        if (plan.free_of_node[v] == 0) {
            plan.free_of_node[v] = static_cast<std::int32_t>(plan.node_of_free.size());
            plan.node_of_free.push_back(v);
        }
    }

    const std::int32_t nfree = static_cast<std::int32_t>(plan.node_of_free.size());
    plan.kff_row_ptr.assign(nfree + 1, 0);
    plan.kff_slot_of_slot.assign(plan.cols.size(), -1);
    std::int32_t nnz = 0;
    for (std::int32_t f = 0; f < nfree; ++f) {
        const std::int32_t v = plan.node_of_free[f];
        for (std::int32_t k = plan.row_ptr[v]; k < plan.row_ptr[v + 1]; ++k)
            if (plan.free_of_node[plan.cols[k]] >= 0) ++nnz;
        plan.kff_row_ptr[f + 1] = nnz;
    }
    plan.kff_cols.resize(nnz);
    nnz = 0;
    for (std::int32_t f = 0; f < nfree; ++f) {
        const std::int32_t v = plan.node_of_free[f];
        for (std::int32_t k = plan.row_ptr[v]; k < plan.row_ptr[v + 1]; ++k) {
            const std::int32_t cf = plan.free_of_node[plan.cols[k]];
            if (cf >= 0) {
                plan.kff_cols[nnz] = cf;
                plan.kff_slot_of_slot[k] = nnz;
                ++nnz;
            }
        }
    }

    plan.electrode_couplings.resize(plan.electrode_nodes.size());
    std::vector<std::int32_t> electrode_of_node(plan.n_nodes, -1);
    for (std::size_t e = 0; e < plan.electrode_nodes.size(); ++e)
        for (std::int32_t v : plan.electrode_nodes[e])
            electrode_of_node[v] = static_cast<std::int32_t>(e);
    for (std::int32_t f = 0; f < nfree; ++f) {
        const std::int32_t v = plan.node_of_free[f];
        for (std::int32_t k = plan.row_ptr[v]; k < plan.row_ptr[v + 1]; ++k) {
            const std::int32_t e = electrode_of_node[plan.cols[k]];
            if (e >= 0) plan.electrode_couplings[e].push_back({f, k});
        }
    }
    return plan;
}

SparseSystem assemble_with_plan(const AssemblyPlan& plan, const PermittivityImage& image,
                                const PhysicalPermittivity& phys) {
    phys.validate();
    image.validate();

    SparseSystem sys;
    sys.K.n = plan.n_nodes;
    sys.K.row_ptr = plan.row_ptr;
    sys.K.col = plan.cols;
    sys.K.val.assign(plan.cols.size(), 0.0);

    const auto& pix = image.values();
    for (std::size_t t = 0; t < plan.geom.size(); ++t) {
        const std::int32_t p = plan.element_pixel[t];
        const double sigma = phys.sigma(p >= 0 ? pix[p] : 0.0);
        const ElementGeom& g = plan.geom[t];
        const double s = sigma * g.area;
        const std::int32_t* slots = &plan.element_slots[9 * t];
        for (int a = 0; a < 3; ++a) {
            const double ba = g.gb[a], ca = g.gc[a];
            for (int b = 0; b < 3; ++b)
                sys.K.val[slots[3 * a + b]] += s * (ba * g.gb[b] + ca * g.gc[b]);
        }
    }

    sys.Kff.n = static_cast<std::int32_t>(plan.node_of_free.size());
    sys.Kff.row_ptr = plan.kff_row_ptr;
    sys.Kff.col = plan.kff_cols;
    sys.Kff.val.resize(plan.kff_cols.size());
    for (std::size_t k = 0; k < plan.kff_slot_of_slot.size(); ++k) {
        const std::int32_t s = plan.kff_slot_of_slot[k];
        if (s >= 0) sys.Kff.val[s] = sys.K.val[k];
    }

    sys.free_of_node = plan.free_of_node;
    sys.node_of_free = plan.node_of_free;
    sys.electrode_nodes = plan.electrode_nodes;
    sys.insulating_boundary_nodes = plan.insulating_boundary_nodes;
    sys.electrode_couplings = plan.electrode_couplings;
    return sys;
}

std::vector<double> excitation_rhs(const SparseSystem& sys, int electrode) {
    std::vector<double> b(sys.Kff.n, 0.0);
    for (const auto& [f, slot] : sys.electrode_couplings[electrode]) b[f] -= sys.K.val[slot];
    return b;
}

PotentialField embed_solution(const SparseSystem& sys, const std::vector<double>& x,
                              int electrode) {
    PotentialField field;
    field.u.assign(sys.n_nodes(), 0.0);
    for (std::size_t v = 0; v < sys.n_nodes(); ++v) {
        const std::int32_t f = sys.free_of_node[v];
        if (f >= 0) field.u[v] = x[f];
    }
    for (std::int32_t v : sys.electrode_nodes[electrode]) field.u[v] = 1.0;
    return field;
}

void check_electrode(const SparseSystem& sys, int electrode) {
    if (electrode < 0 || electrode >= sys.n_electrodes())
        throw InvalidInputError("electrode index out of range: " + std::to_string(electrode));
}

void fill_offsets(const SparseSystem& sys, const PotentialField& u, int i,
                  CapacitanceMatrix& c) {
    for (int d = 1; d <= c.m; ++d) {
        const int j = i + d;
        if (j <= c.n - 1) c.at(d - 1, i) = -electrode_charge(sys, u, j);
    }
}

}  // namespace

SparseSystem assemble(const Mesh& mesh, const PermittivityImage& image,
                      const PhysicalPermittivity& phys, const PixelElementMap& map) {
    if (image.height() != map.img_h || image.width() != map.img_w)
        throw InvalidInputError("image dimensions do not match the pixel-element map");
    return assemble_with_plan(build_plan(mesh, map), image, phys);
}

PotentialField solve_excitation(const SparseSystem& sys, int electrode,
                                const SolveOptions& opts) {
    check_electrode(sys, electrode);
    std::vector<double> b = excitation_rhs(sys, electrode);
    std::vector<double> x(sys.Kff.n, 0.0);
    const std::int64_t cap = opts.max_iter_factor * static_cast<std::int64_t>(sys.n_nodes());
    const CgResult res = cg_solve(sys.Kff, b, x, opts.tol, cap);
    if (!res.converged)
        throw NumericError("conjugate gradients did not converge within " +
                               std::to_string(cap) + " iterations (relative residual " +
                               std::to_string(res.rel_residual) + ")",
                           res.rel_residual);
    return embed_solution(sys, x, electrode);
}

double electrode_charge(const SparseSystem& sys, const PotentialField& u, int electrode) {
    check_electrode(sys, electrode);
    double q = 0.0;
    for (std::int32_t v : sys.electrode_nodes[electrode]) q += sys.K.row_dot(v, u.u.data());
    return q;
}

double outer_boundary_flux(const SparseSystem& sys, const PotentialField& u) {
    double q = 0.0;
    for (std::int32_t v : sys.insulating_boundary_nodes) q += sys.K.row_dot(v, u.u.data());
    return q;
}

CapacitanceMatrix capacitance_matrix(const Mesh& mesh, const PermittivityImage& image,
                                     const PhysicalPermittivity& phys, int max_offset,
                                     const ForwardOptions& opts) {
    const PixelElementMap map = pixel_element_map(mesh, image.height(), image.width());
    const SparseSystem sys = assemble(mesh, image, phys, map);
    const int n = sys.n_electrodes();
    CapacitanceMatrix c(max_offset, n);

    if (opts.threads > 1) {
        std::vector<PotentialField> fields(n);
        const int saved = thread_count();
        set_thread_count(opts.threads);
        parallel_chunks(n, n, [&](int, std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i)
                fields[i] = solve_excitation(sys, static_cast<int>(i), opts.solve);
        });
        set_thread_count(saved);
        for (int i = 0; i < n; ++i) fill_offsets(sys, fields[i], i, c);
    } else {
        for (int i = 0; i < n; ++i) {
            const PotentialField u = solve_excitation(sys, i, opts.solve);
            fill_offsets(sys, u, i, c);
        }
    }
    return c;
}

CapacitanceMatrix normalize(const CapacitanceMatrix& c, const CapacitanceMatrix& c_empty,
                            const CapacitanceMatrix& c_full) {
    if (c.m != c_empty.m || c.n != c_empty.n || c.m != c_full.m || c.n != c_full.n)
        throw InvalidInputError("calibration matrices must share the measurement shape");
    CapacitanceMatrix out(c.m, c.n);
    for (int row = 0; row < c.m; ++row) {
        for (int i = 0; i < c.n; ++i) {
            if (out.is_padded(row, i)) continue;
            const double span = c_full.at(row, i) - c_empty.at(row, i);
            if (std::abs(span) < 1e-15)
                throw NumericError("degenerate full/empty calibration at offset " +
                                   std::to_string(row + 1) + ", electrode " + std::to_string(i));
            out.at(row, i) = (c.at(row, i) - c_empty.at(row, i)) / span;
        }
    }
    return out;
}

struct ForwardModel::Impl {
    DomainSpec spec;
    PhysicalPermittivity phys;
    Mesh mesh;
    PixelElementMap map;
    AssemblyPlan plan;
    mutable std::once_flag refs_once;
    mutable CapacitanceMatrix empty_ref, full_ref;
};

ForwardModel::ForwardModel(const DomainSpec& spec, const PhysicalPermittivity& phys)
    : impl_(std::make_unique<Impl>()) {
    spec.validate();
    phys.validate();
    impl_->spec = spec;
    impl_->phys = phys;
    impl_->mesh = build_mesh(spec);
    impl_->map = pixel_element_map(impl_->mesh, spec);
    impl_->plan = build_plan(impl_->mesh, impl_->map);
}

ForwardModel::~ForwardModel() = default;

const Mesh& ForwardModel::mesh() const { return impl_->mesh; }
const PixelElementMap& ForwardModel::map() const { return impl_->map; }
const DomainSpec& ForwardModel::spec() const { return impl_->spec; }
const PhysicalPermittivity& ForwardModel::phys() const { return impl_->phys; }

SparseSystem ForwardModel::assemble(const PermittivityImage& image) const {
    if (image.height() != impl_->map.img_h || image.width() != impl_->map.img_w)
        throw InvalidInputError("image dimensions do not match the domain window");
    return assemble_with_plan(impl_->plan, image, impl_->phys);
}

CapacitanceMatrix ForwardModel::capacitance_cg(const PermittivityImage& image, int max_offset,
                                               const ForwardOptions& opts) const {
    const SparseSystem sys = assemble(image);
    const int n = sys.n_electrodes();
    CapacitanceMatrix c(max_offset, n);
    for (int i = 0; i < n; ++i) {
        const PotentialField u = solve_excitation(sys, i, opts.solve);
        fill_offsets(sys, u, i, c);
    }
    return c;
}

namespace {

std::vector<PotentialField> solve_all_ldlt(const SparseSystem& sys) {
    const int n = sys.n_electrodes();
    using SpMat = Eigen::SparseMatrix<double, Eigen::ColMajor, std::int32_t>;
    // The CSR buffers of the symmetric Kff double as a column-major view.
    Eigen::Map<const SpMat> kff(sys.Kff.n, sys.Kff.n, sys.Kff.nnz(), sys.Kff.row_ptr.data(),
                                sys.Kff.col.data(), sys.Kff.val.data());
    Eigen::SimplicialLDLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<std::int32_t>> solver;
    solver.compute(kff);
    if (solver.info() != Eigen::Success)
        throw NumericError("sparse factorization of the stiffness matrix failed");

    std::vector<PotentialField> fields;
    fields.reserve(n);
    Eigen::VectorXd b(sys.Kff.n);
    for (int i = 0; i < n; ++i) {
        const std::vector<double> rhs = excitation_rhs(sys, i);
        for (std::int32_t k = 0; k < sys.Kff.n; ++k) b[k] = rhs[k];
        const Eigen::VectorXd x = solver.solve(b);
        if (solver.info() != Eigen::Success)
            throw NumericError("sparse triangular solve failed");
        fields.push_back(
            embed_solution(sys, std::vector<double>(x.data(), x.data() + x.size()), i));
    }
    return fields;
}

}  // namespace

CapacitanceMatrix ForwardModel::capacitance_direct(const PermittivityImage& image,
                                                   int max_offset) const {
    const SparseSystem sys = assemble(image);
    const std::vector<PotentialField> fields = solve_all_ldlt(sys);
    const int n = sys.n_electrodes();
    CapacitanceMatrix c(max_offset, n);
    for (int i = 0; i < n; ++i) fill_offsets(sys, fields[i], i, c);
    return c;
}

std::vector<PotentialField> ForwardModel::solve_all_direct(const PermittivityImage& image) const {
    return solve_all_ldlt(assemble(image));
}

const CapacitanceMatrix& ForwardModel::empty_reference() const {
    std::call_once(impl_->refs_once, [this] {
        const int h = impl_->spec.depth_um, w = impl_->spec.width_um;
        impl_->empty_ref = capacitance_direct(PermittivityImage(h, w, 0.0));
        impl_->full_ref = capacitance_direct(PermittivityImage(h, w, 1.0));
    });
    return impl_->empty_ref;
}

const CapacitanceMatrix& ForwardModel::full_reference() const {
    empty_reference();
    return impl_->full_ref;
}

std::vector<std::array<double, 2>> element_gradients(const Mesh& mesh, const PotentialField& u) {
    std::vector<std::array<double, 2>> grads(mesh.n_triangles());
    for (std::size_t t = 0; t < mesh.n_triangles(); ++t) {
        const ElementGeom g = element_geom(mesh, t);
        const auto& tri = mesh.triangles[t];
        double gy = 0.0, gz = 0.0;
        for (int v = 0; v < 3; ++v) {
            gy += u.u[tri[v]] * g.gb[v];
            gz += u.u[tri[v]] * g.gc[v];
        }
        grads[t] = {gy, gz};
    }
    return grads;
}

}  // namespace ect
