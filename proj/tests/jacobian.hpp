#pragma once

// Numerical Jacobian assembly and dense log|det| evaluation, used to
// cross-check analytic log-determinants.

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "volflow/flow/model.hpp"

namespace oracles {

inline std::vector<double> flatten(const volflow::LatentBundle<double>& z) {
    std::vector<double> out;
    out.reserve(z.element_count());
    for (const auto& t : z.tensors) out.insert(out.end(), t.v.begin(), t.v.end());
    return out;
}

// Central-difference Jacobian of flatten(forward(x)) with respect to
// flatten(x). Column j uses h scaled by the magnitude of x_j.
inline Eigen::MatrixXd numeric_jacobian(const volflow::FlowModel<double>& m,
                                        const volflow::Tensor4<double>& x,
                                        double h0 = 1e-6) {
    const std::size_t n = x.size();
    Eigen::MatrixXd J(n, n);
    volflow::Tensor4<double> xp = x;
    for (std::size_t j = 0; j < n; ++j) {
        const double h = h0 * (std::abs(x.v[j]) + 1.0);
        double ld = 0;
        xp.v[j] = x.v[j] + h;
        const auto zp = flatten(m.forward(xp, ld));
        xp.v[j] = x.v[j] - h;
        const auto zm = flatten(m.forward(xp, ld));
        xp.v[j] = x.v[j];
        for (std::size_t i = 0; i < n; ++i)
            J(Eigen::Index(i), Eigen::Index(j)) = (zp[i] - zm[i]) / (2.0 * h);
    }
    return J;
}

inline double log_abs_det(const Eigen::MatrixXd& J) {
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
    const auto& u = lu.matrixLU();
    double acc = 0;
    for (Eigen::Index i = 0; i < u.rows(); ++i)
        acc += std::log(std::abs(u(i, i)));
    return acc;
}

}  // namespace oracles
