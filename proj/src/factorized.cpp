#include "divctl/factorized.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "divctl/errors.hpp"
#include "divctl/ops.hpp"

namespace divctl {

std::string to_string(ProjectionTag tag) {
    switch (tag) {
        case ProjectionTag::q: return "q";
        case ProjectionTag::k: return "k";
        case ProjectionTag::v: return "v";
        case ProjectionTag::o: return "o";
        case ProjectionTag::in: return "in";
        case ProjectionTag::out: return "out";
    }
    return "?";
}

bool GatedCoefficients::is_active(std::size_t j) const {
    return std::binary_search(active_set.begin(), active_set.end(), j);
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor columns(const Tensor& m, std::size_t begin, std::size_t end) {
    const std::size_t rows = m.rows();
    const std::size_t cols = m.cols();
    std::vector<double> out(rows * (end - begin));
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = begin; c < end; ++c) {
            out[r * (end - begin) + (c - begin)] = m.at(r, c);
        }
    }
    (void)cols;
    return Tensor::from_data({rows, end - begin}, std::move(out), true);
}

Tensor elements(const Tensor& v, std::size_t begin, std::size_t end) {
    auto d = v.data();
    return Tensor::from_data({end - begin}, std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(begin),
                                                                d.begin() + static_cast<std::ptrdiff_t>(end)),
                             true);
}

Tensor hconcat(const Tensor& a, const Tensor& b) {
    const std::size_t rows = a.rows();
    const std::size_t ca = a.cols();
    const std::size_t cb = b.cols();
    std::vector<double> out(rows * (ca + cb));
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < ca; ++c) {
            out[r * (ca + cb) + c] = a.at(r, c);
        }
        for (std::size_t c = 0; c < cb; ++c) {
            out[r * (ca + cb) + ca + c] = b.at(r, c);
        }
    }
    return Tensor::from_data({rows, ca + cb}, std::move(out), true);
}

ComponentBlock empty_block(std::size_t out_dim, std::size_t in_dim) {
    return {Tensor::zeros({out_dim, 0}, true), Tensor::zeros({0}, true), Tensor::zeros({in_dim, 0}, true)};
}

}  // namespace

FactorizedWeight svd_factorize(const Tensor& w, std::optional<std::size_t> truncate_to, ProjectionTag tag,
                               int layer_index) {
    require(w.ndim() == 2, "svd_factorize: expected a matrix");
    const std::size_t out_dim = w.rows();
    const std::size_t in_dim = w.cols();
    const std::size_t full = std::min(out_dim, in_dim);
    const std::size_t r = truncate_to.value_or(full);
    require(r >= 1 && r <= full, "svd_factorize: truncate_to must lie in [1, min(out, in)]");
    for (double x : w.data()) {
        if (!std::isfinite(x)) {
            throw NumericError("svd_factorize: matrix " + shape_str(w.shape()) + " has non-finite entries");
        }
    }

    Eigen::Map<const RowMat> m(w.data().data(), static_cast<Eigen::Index>(out_dim),
                               static_cast<Eigen::Index>(in_dim));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) {
        const auto& sv = svd.singularValues();
        std::ostringstream os;
        os << "svd_factorize: SVD did not converge for " << shape_str(w.shape()) << " (sigma_max="
           << (sv.size() ? sv(0) : 0.0) << ", sigma_min=" << (sv.size() ? sv(sv.size() - 1) : 0.0) << ")";
        throw NumericError(os.str());
    }
    const Eigen::MatrixXd& u = svd.matrixU();
    const Eigen::MatrixXd& v = svd.matrixV();
    const Eigen::VectorXd& s = svd.singularValues();

    std::vector<double> ud(out_dim * r), vd(in_dim * r), sd(r);
    for (std::size_t j = 0; j < r; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        sd[j] = s(jj);
        for (std::size_t i = 0; i < out_dim; ++i) {
            ud[i * r + j] = u(static_cast<Eigen::Index>(i), jj);
        }
        for (std::size_t i = 0; i < in_dim; ++i) {
            vd[i * r + j] = v(static_cast<Eigen::Index>(i), jj);
        }
    }
    FactorizedWeight fw;
    fw.out_dim = out_dim;
    fw.in_dim = in_dim;
    fw.tag = tag;
    fw.layer_index = layer_index;
    fw.learngenes = {Tensor::from_data({out_dim, r}, std::move(ud), true),
                     Tensor::from_data({r}, std::move(sd), true),
                     Tensor::from_data({in_dim, r}, std::move(vd), true)};
    fw.tailors = empty_block(out_dim, in_dim);
    return fw;
}

FactorizedWeight partition(const FactorizedWeight& fw, std::size_t n_learngene, std::size_t n_tailor) {
    const std::size_t r = fw.rank();
    require(n_learngene + n_tailor == r, "partition: N_G + N_T = " + std::to_string(n_learngene + n_tailor) +
                                             " but rank is " + std::to_string(r));
    // Work on the concatenated component list so re-partitioning is allowed.
    Tensor u = fw.n_tailor() ? hconcat(fw.learngenes.u, fw.tailors.u) : fw.learngenes.u;
    Tensor v = fw.n_tailor() ? hconcat(fw.learngenes.v, fw.tailors.v) : fw.learngenes.v;
    std::vector<double> s(fw.learngenes.sigma.data().begin(), fw.learngenes.sigma.data().end());
    if (fw.n_tailor()) {
        s.insert(s.end(), fw.tailors.sigma.data().begin(), fw.tailors.sigma.data().end());
    }
    Tensor sig = Tensor::from_data({r}, std::move(s), true);

    FactorizedWeight out = fw;
    out.learngenes = {columns(u, 0, n_learngene), elements(sig, 0, n_learngene), columns(v, 0, n_learngene)};
    out.tailors = {columns(u, n_learngene, r), elements(sig, n_learngene, r), columns(v, n_learngene, r)};
    return out;
}

Tensor compose_learngenes(const FactorizedWeight& fw) {
    const auto& b = fw.learngenes;
    if (b.size() == 0) {
        return Tensor::zeros({fw.out_dim, fw.in_dim});
    }
    return scaled_outer(b.u, b.sigma, b.v);
}

Tensor compose_tailors(const FactorizedWeight& fw, const GatedCoefficients& coeffs) {
    require(coeffs.size() == fw.n_tailor(), "compose_weight: coefficient length " +
                                                std::to_string(coeffs.size()) + " but N_T = " +
                                                std::to_string(fw.n_tailor()));
    return scaled_outer(fw.tailors.u, fw.tailors.sigma, fw.tailors.v, coeffs.g);
}

Tensor compose_weight(const FactorizedWeight& fw, const GatedCoefficients& coeffs) {
    if (fw.n_tailor() == 0) {
        return compose_learngenes(fw);
    }
    return add(compose_learngenes(fw), compose_tailors(fw, coeffs));
}

Tensor reconstruct(const FactorizedWeight& fw) {
    Tensor w = compose_learngenes(fw);
    if (fw.n_tailor() > 0) {
        w = add(w, scaled_outer(fw.tailors.u, fw.tailors.sigma, fw.tailors.v));
    }
    return w;
}

double masked_gradient_apply(FactorizedWeight& fw, const std::vector<std::size_t>& active) {
    const std::size_t nt = fw.n_tailor();
    std::vector<bool> on(nt, false);
    for (std::size_t j : active) {
        if (j < nt) {
            on[j] = true;
        }
    }
    double residual = 0.0;
    auto scrub = [&](Tensor& t, bool is_matrix) {
        if (!t.has_grad()) {
            return;
        }
        auto g = t.mutable_grad();
        const std::size_t cols = is_matrix ? t.cols() : nt;
        const std::size_t rows = is_matrix ? t.rows() : 1;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                if (!on[c]) {
                    residual = std::max(residual, std::abs(g[r * cols + c]));
                    g[r * cols + c] = 0.0;
                }
            }
        }
    };
    scrub(fw.tailors.u, true);
    scrub(fw.tailors.sigma, false);
    scrub(fw.tailors.v, true);
    return residual;
}

Tensor kaiming_uniform(std::size_t out_dim, std::size_t in_dim, Rng& rng, bool requires_grad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    std::vector<double> w(out_dim * in_dim);
    for (double& x : w) {
        x = rng.uniform(-bound, bound);
    }
    return Tensor::from_data({out_dim, in_dim}, std::move(w), requires_grad);
}

FactorizedWeight init_factorized(std::size_t out_dim, std::size_t in_dim, std::size_t n_learngene,
                                 std::size_t n_tailor, ProjectionTag tag, int layer_index, Rng& rng) {
    const Tensor dense = kaiming_uniform(out_dim, in_dim, rng, false);
    return partition(svd_factorize(dense, std::nullopt, tag, layer_index), n_learngene, n_tailor);
}

ComponentBlock fresh_tailors(const FactorizedWeight& fw, Rng& rng) {
    const FactorizedWeight f =
        init_factorized(fw.out_dim, fw.in_dim, fw.n_learngene(), fw.n_tailor(), fw.tag, fw.layer_index, rng);
    return f.tailors;
}

}  // namespace divctl
