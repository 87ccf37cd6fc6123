#include "ect/inverse.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ect {

std::vector<double> flatten_measurements(const CapacitanceMatrix& c) {
    std::vector<double> out;
    out.reserve(c.non_padded_count());
    for (int row = 0; row < c.m; ++row)
        for (int i = 0; i < c.n; ++i)
            if (!c.is_padded(row, i)) out.push_back(c.at(row, i));
    return out;
}

SensitivityMatrix sensitivity_matrix(const DomainSpec& spec, const PhysicalPermittivity& phys,
                                     int max_offset) {
    ForwardModel model(spec, phys);
    const Mesh& mesh = model.mesh();
    const PixelElementMap& map = model.map();

    const PermittivityImage background(spec.depth_um, spec.width_um, 0.0);
    const std::vector<PotentialField> fields = model.solve_all_direct(background);

    std::vector<std::vector<std::array<double, 2>>> grads;
    grads.reserve(fields.size());
    for (const PotentialField& u : fields) grads.push_back(element_gradients(mesh, u));

    std::vector<double> areas(mesh.n_triangles());
    for (std::size_t t = 0; t < mesh.n_triangles(); ++t) areas[t] = mesh.triangle_area(t);

    const CapacitanceMatrix& c_empty = model.empty_reference();
    const CapacitanceMatrix& c_full = model.full_reference();

    SensitivityMatrix J;
    J.m = max_offset;
    J.n = spec.n_electrodes;
    J.img_h = spec.depth_um;
    J.img_w = spec.width_um;
    J.cols = J.img_h * J.img_w;
    CapacitanceMatrix shape(max_offset, spec.n_electrodes);
    J.rows = shape.non_padded_count();
    J.j.assign(static_cast<std::size_t>(J.rows) * J.cols, 0.0);

    const double contrast = phys.eps_inclusion - phys.eps_background;
    int k = 0;
    for (int row = 0; row < max_offset; ++row) {
        for (int i = 0; i < J.n; ++i) {
            if (shape.is_padded(row, i)) continue;
            const int jj = i + row + 1;
            const double span = c_full.at(row, i) - c_empty.at(row, i);
            const auto& gi = grads[i];
            const auto& gj = grads[jj];
            double* out_row = &J.j[static_cast<std::size_t>(k) * J.cols];
            for (int p = 0; p < J.cols; ++p) {
                double s = 0.0;
                for (const auto& [elem, frac] : map.entries[p]) {
                    (void)frac;
                    s += areas[elem] * (gi[elem][0] * gj[elem][0] + gi[elem][1] * gj[elem][1]);
                }
                out_row[p] = -contrast * s / span;
            }
            ++k;
        }
    }
    return J;
}

namespace {

void check_measurements(const std::vector<double>& c, const SensitivityMatrix& J) {
    if (static_cast<int>(c.size()) != J.rows)
        throw ShapeError("measurement vector length " + std::to_string(c.size()) +
                         " does not match sensitivity rows " + std::to_string(J.rows));
}

// y = J x (rows x cols)
void apply(const SensitivityMatrix& J, const std::vector<double>& x, std::vector<double>& y) {
    for (int k = 0; k < J.rows; ++k) {
        const double* row = &J.j[static_cast<std::size_t>(k) * J.cols];
        double acc = 0.0;
        for (int p = 0; p < J.cols; ++p) acc += row[p] * x[p];
        y[k] = acc;
    }
}

// x += alpha * J^T r
void apply_t_accum(const SensitivityMatrix& J, const std::vector<double>& r, double alpha,
                   std::vector<double>& x) {
    for (int k = 0; k < J.rows; ++k) {
        const double* row = &J.j[static_cast<std::size_t>(k) * J.cols];
        const double a = alpha * r[k];
        for (int p = 0; p < J.cols; ++p) x[p] += a * row[p];
    }
}

PermittivityImage to_image(const SensitivityMatrix& J, const std::vector<double>& x) {
    PermittivityImage img(J.img_h, J.img_w);
    img.values() = x;
    return img;
}

}  // namespace

PermittivityImage tikhonov_iterative(const std::vector<double>& c_meas,
                                     const SensitivityMatrix& J, double mu, int iters) {
    check_measurements(c_meas, J);
    if (mu < 0.0) {
        // mean(diag(J^T J)) = ||J||_F^2 / P
        double fro2 = 0.0;
        for (double v : J.j) fro2 += v * v;
        mu = 1e-2 * fro2 / J.cols;
    }

    // (J^T J + mu I)^-1 J^T == J^T (J J^T + mu I)^-1, so only the K x K
    // system is factorized, once.
    Eigen::MatrixXd M(J.rows, J.rows);
    for (int a = 0; a < J.rows; ++a) {
        const double* ra = &J.j[static_cast<std::size_t>(a) * J.cols];
        for (int b = a; b < J.rows; ++b) {
            const double* rb = &J.j[static_cast<std::size_t>(b) * J.cols];
            double acc = 0.0;
            for (int p = 0; p < J.cols; ++p) acc += ra[p] * rb[p];
            M(a, b) = acc;
            M(b, a) = acc;
        }
        M(a, a) += mu;
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(M);
    if (llt.info() != Eigen::Success)
        throw NumericError("Cholesky factorization of the regularized normal matrix failed");

    std::vector<double> sigma(J.cols, 0.0), r(J.rows), jx(J.rows);
    Eigen::VectorXd w(J.rows);
    for (int it = 0; it < iters; ++it) {
        apply(J, sigma, jx);
        for (int k = 0; k < J.rows; ++k) r[k] = c_meas[k] - jx[k];
        for (int k = 0; k < J.rows; ++k) w[k] = r[k];
        w = llt.solve(w);
        std::vector<double> rw(w.data(), w.data() + J.rows);
        apply_t_accum(J, rw, 1.0, sigma);
        for (double& v : sigma) v = std::clamp(v, 0.0, 1.0);
    }
    return to_image(J, sigma);
}

PermittivityImage landweber(const std::vector<double>& c_meas, const SensitivityMatrix& J,
                            double alpha, int iters) {
    check_measurements(c_meas, J);
    if (alpha < 0.0) {
        // ||J||_2^2 by power iteration on J^T J
        std::vector<double> v(J.cols, 1.0 / std::sqrt(static_cast<double>(J.cols)));
        std::vector<double> jv(J.rows), jtjv(J.cols);
        double lambda = 0.0;
        for (int it = 0; it < 50; ++it) {
            apply(J, v, jv);
            std::fill(jtjv.begin(), jtjv.end(), 0.0);
            apply_t_accum(J, jv, 1.0, jtjv);
            double norm = 0.0;
            for (double x : jtjv) norm += x * x;
            norm = std::sqrt(norm);
            if (norm == 0.0) throw NumericError("power iteration on a zero sensitivity matrix");
            lambda = norm;
            for (int p = 0; p < J.cols; ++p) v[p] = jtjv[p] / norm;
        }
        alpha = 1.9 / lambda;
    }

    std::vector<double> sigma(J.cols, 0.0), r(J.rows), jx(J.rows);
    for (int it = 0; it < iters; ++it) {
        apply(J, sigma, jx);
        for (int k = 0; k < J.rows; ++k) r[k] = c_meas[k] - jx[k];
        apply_t_accum(J, r, alpha, sigma);
        for (double& v : sigma) v = std::clamp(v, 0.0, 1.0);
    }
    return to_image(J, sigma);
}

PermittivityImage linear_back_projection(const std::vector<double>& c_meas,
                                         const SensitivityMatrix& J) {
    check_measurements(c_meas, J);
    std::vector<double> t(J.cols, 0.0);
    apply_t_accum(J, c_meas, 1.0, t);
    const auto [mn_it, mx_it] = std::minmax_element(t.begin(), t.end());
    const double mn = *mn_it, mx = *mx_it;
    const double span = mx - mn;
    if (span < 1e-300) return PermittivityImage(J.img_h, J.img_w, 0.0);
    for (double& v : t) v = (v - mn) / span;
    return to_image(J, t);
}

namespace {
constexpr char kJMagic[4] = {'E', 'C', 'T', 'J'};
constexpr std::uint32_t kJVersion = 1;
}  // namespace

void write_sensitivity(const SensitivityMatrix& J, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write sensitivity file: " + path);
    out.write(kJMagic, 4);
    const std::uint32_t ver = kJVersion, rows = J.rows, cols = J.cols;
    out.write(reinterpret_cast<const char*>(&ver), 4);
    out.write(reinterpret_cast<const char*>(&rows), 4);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    out.write(reinterpret_cast<const char*>(J.j.data()), J.j.size() * sizeof(double));
    if (!out) throw FormatError("write failed for sensitivity file: " + path);
}

SensitivityMatrix read_sensitivity(const std::string& path, int m, int n, int img_h, int img_w) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open sensitivity file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kJMagic, 4) != 0)
        throw FormatError("bad sensitivity magic", 0);
    std::uint32_t ver = 0, rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&ver), 4);
    if (!in || ver != kJVersion) throw FormatError("unsupported sensitivity version", 4);
    in.read(reinterpret_cast<char*>(&rows), 4);
    in.read(reinterpret_cast<char*>(&cols), 4);
    if (!in) throw FormatError("truncated sensitivity header", 8);

    SensitivityMatrix J;
    J.m = m;
    J.n = n;
    J.img_h = img_h;
    J.img_w = img_w;
    J.rows = static_cast<int>(rows);
    J.cols = static_cast<int>(cols);
    CapacitanceMatrix shape(m, n);
    if (J.rows != shape.non_padded_count() || J.cols != img_h * img_w)
        throw FormatError("sensitivity dimensions do not match the dataset", 8);
    J.j.resize(static_cast<std::size_t>(J.rows) * J.cols);
    in.read(reinterpret_cast<char*>(J.j.data()), J.j.size() * sizeof(double));
    if (static_cast<std::size_t>(in.gcount()) != J.j.size() * sizeof(double))
        throw FormatError("truncated sensitivity data", 16);
    in.peek();
    if (!in.eof()) throw FormatError("trailing bytes in sensitivity file",
                                     16 + J.j.size() * sizeof(double));
    return J;
}

}  // namespace ect
