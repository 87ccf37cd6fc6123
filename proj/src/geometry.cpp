#include "ect/geometry.hpp"

#include <cmath>

namespace ect {

void DomainSpec::validate() const {
    if (width_um <= 0 || depth_um <= 0 || pad_side_um <= 0 || pad_top_um <= 0 ||
        pitch_um <= 0 || electrode_width_um <= 0)
        throw InvalidSpecError("all domain lengths must be strictly positive");
    if (n_electrodes <= 0) throw InvalidSpecError("n_electrodes must be positive");
    if (elements_per_um <= 0) throw InvalidSpecError("elements_per_um must be positive");
    if (n_electrodes * pitch_um != width_um)
        throw InvalidSpecError("electrodes must tile the imaging window: n_electrodes * pitch_um != width_um");
    if (electrode_width_um >= pitch_um)
        throw InvalidSpecError("electrode_width_um must be smaller than pitch_um (nonzero gap)");
}

double Mesh::triangle_area(std::size_t t) const {
    const auto& tri = triangles[t];
    const double ay = node_y[tri[0]], az = node_z[tri[0]];
    const double by = node_y[tri[1]], bz = node_z[tri[1]];
    const double cy = node_y[tri[2]], cz = node_z[tri[2]];
    return 0.5 * ((by - ay) * (cz - az) - (bz - az) * (cy - ay));
}

std::vector<std::int32_t> Mesh::mirror_node_map() const {
    std::vector<std::int32_t> map(n_nodes());
    for (int iz = 0; iz <= grid_nz; ++iz)
        for (int ix = 0; ix <= grid_nx; ++ix)
            map[node_id(ix, iz)] = node_id(grid_nx - ix, iz);
    return map;
}

Mesh build_mesh(const DomainSpec& spec) {
    spec.validate();

    Mesh m;
    const int res = spec.elements_per_um;
    m.grid_nx = spec.padded_width_um() * res;
    m.grid_nz = spec.padded_depth_um() * res;
    m.cell_um = 1.0 / res;
    m.y0 = -static_cast<double>(spec.pad_side_um);

    const int npx = m.grid_nx + 1;
    const int npz = m.grid_nz + 1;
    m.node_y.resize(static_cast<std::size_t>(npx) * npz);
    m.node_z.resize(static_cast<std::size_t>(npx) * npz);
    for (int iz = 0; iz < npz; ++iz) {
        for (int ix = 0; ix < npx; ++ix) {
            const std::size_t id = m.node_id(ix, iz);
            m.node_y[id] = m.y0 + ix * m.cell_um;
            m.node_z[id] = iz * m.cell_um;
        }
    }

    // Each grid cell splits into two CCW right triangles, diagonal a-c:
    //   d --- c
    //   |   / |
    //   a --- b
    m.triangles.reserve(2u * m.grid_nx * m.grid_nz);
    for (int iz = 0; iz < m.grid_nz; ++iz) {
        for (int ix = 0; ix < m.grid_nx; ++ix) {
            const std::int32_t a = m.node_id(ix, iz);
            const std::int32_t b = m.node_id(ix + 1, iz);
            const std::int32_t c = m.node_id(ix + 1, iz + 1);
            const std::int32_t d = m.node_id(ix, iz + 1);
            m.triangles.push_back({a, b, c});
            m.triangles.push_back({a, c, d});
        }
    }

    m.boundary_kind.assign(m.n_nodes(), kInterior);
    for (int iz = 0; iz <= m.grid_nz; ++iz) {
        for (int ix = 0; ix <= m.grid_nx; ++ix) {
            if (iz == 0 || iz == m.grid_nz || ix == 0 || ix == m.grid_nx)
                m.boundary_kind[m.node_id(ix, iz)] = kInsulating;
        }
    }

    // Electrode k occupies [k*pitch + gap/2, k*pitch + gap/2 + width] on z=0.
    const double gap = spec.pitch_um - spec.electrode_width_um;
    const double tol = 1e-9;
    m.electrode_nodes.assign(spec.n_electrodes, {});
    for (int k = 0; k < spec.n_electrodes; ++k) {
        const double lo = k * spec.pitch_um + 0.5 * gap;
        const double hi = lo + spec.electrode_width_um;
        for (int ix = 0; ix <= m.grid_nx; ++ix) {
            const double y = m.y0 + ix * m.cell_um;
            if (y >= lo - tol && y <= hi + tol) {
                const std::int32_t id = m.node_id(ix, 0);
                m.electrode_nodes[k].push_back(id);
                m.boundary_kind[id] = k;
            }
        }
    }
    return m;
}

PixelElementMap pixel_element_map(const Mesh& mesh, int img_h, int img_w) {
    const int res = static_cast<int>(std::lround(1.0 / mesh.cell_um));
    const int ix0 = static_cast<int>(std::lround(-mesh.y0 * res));
    if (ix0 < 0 || (ix0 + img_w * res) > mesh.grid_nx || img_h * res > mesh.grid_nz)
        throw InvalidInputError("imaging window does not fit inside the mesh");

    PixelElementMap map;
    map.img_h = img_h;
    map.img_w = img_w;
    map.entries.resize(static_cast<std::size_t>(img_h) * img_w);

    const double frac = 1.0 / (2.0 * res * res);
    for (int r = 0; r < img_h; ++r) {
        for (int c = 0; c < img_w; ++c) {
            auto& list = map.entries[static_cast<std::size_t>(r) * img_w + c];
            list.reserve(2u * res * res);
            for (int dz = 0; dz < res; ++dz) {
                for (int dx = 0; dx < res; ++dx) {
                    const int ix = ix0 + c * res + dx;
                    const int iz = r * res + dz;
                    const std::int32_t cell = 2 * (iz * mesh.grid_nx + ix);
                    list.emplace_back(cell, frac);
                    list.emplace_back(cell + 1, frac);
                }
            }
        }
    }
    return map;
}

PixelElementMap pixel_element_map(const Mesh& mesh, const DomainSpec& spec) {
    spec.validate();
    return pixel_element_map(mesh, spec.depth_um, spec.width_um);
}

}  // namespace ect
