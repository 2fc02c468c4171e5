#include "volflow/linalg.hpp"

#include "volflow/rng.hpp"

namespace volflow {

std::vector<double> random_orthogonal(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> a(std::size_t(n) * n);
    for (auto& x : a) x = rng.normal();

    // Householder QR, accumulating Q explicitly.
    std::vector<double> q(std::size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) q[std::size_t(i) * n + i] = 1.0;
    std::vector<double> vcol(static_cast<std::size_t>(n));

    for (int k = 0; k < n; ++k) {
        double norm = 0.0;
        for (int i = k; i < n; ++i) {
            vcol[i] = a[std::size_t(i) * n + k];
            norm += vcol[i] * vcol[i];
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) throw NumericError("degenerate column in QR");
        const double alpha = (vcol[k] >= 0.0) ? -norm : norm;
        vcol[k] -= alpha;
        double vnorm2 = 0.0;
        for (int i = k; i < n; ++i) vnorm2 += vcol[i] * vcol[i];
        if (vnorm2 == 0.0) continue;

        // Apply H = I - 2 v v^T / (v^T v) to A (left) and accumulate into Q.
        for (int j = k; j < n; ++j) {
            double dot = 0.0;
            for (int i = k; i < n; ++i) dot += vcol[i] * a[std::size_t(i) * n + j];
            const double f = 2.0 * dot / vnorm2;
            for (int i = k; i < n; ++i) a[std::size_t(i) * n + j] -= f * vcol[i];
        }
        for (int j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int i = k; i < n; ++i) dot += vcol[i] * q[std::size_t(i) * n + j];
            const double f = 2.0 * dot / vnorm2;
            for (int i = k; i < n; ++i) q[std::size_t(i) * n + j] -= f * vcol[i];
        }
    }
    // Now a = R (upper), q = product of reflectors = Q^T. Fix signs so
    // diag(R) > 0, then return Q = q^T with matching column signs.
    std::vector<double> out(std::size_t(n) * n);
    for (int i = 0; i < n; ++i) {
        const double s = (a[std::size_t(i) * n + i] >= 0.0) ? 1.0 : -1.0;
        for (int j = 0; j < n; ++j) out[std::size_t(j) * n + i] = s * q[std::size_t(i) * n + j];
    }
    return out;
}

LuFactors lu_decompose(const std::vector<double>& a_in, int n) {
    std::vector<double> a = a_in;
    LuFactors f;
    f.perm.resize(std::size_t(n));
    for (int i = 0; i < n; ++i) f.perm[i] = i;
    f.lower.assign(std::size_t(n) * n, 0.0);
    f.upper.assign(std::size_t(n) * n, 0.0);

    std::vector<int> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) rows[i] = i;

    // Doolittle with partial pivoting on physical rows of a copy.
    for (int k = 0; k < n; ++k) {
        int piv = k;
        double best = std::fabs(a[std::size_t(rows[k]) * n + k]);
        for (int i = k + 1; i < n; ++i) {
            const double cand = std::fabs(a[std::size_t(rows[i]) * n + k]);
            if (cand > best) {
                best = cand;
                piv = i;
            }
        }
        if (best == 0.0) throw NumericError("singular matrix in LU");
        std::swap(rows[k], rows[piv]);
        const double pivot = a[std::size_t(rows[k]) * n + k];
        for (int i = k + 1; i < n; ++i) {
            const double m = a[std::size_t(rows[i]) * n + k] / pivot;
            a[std::size_t(rows[i]) * n + k] = m;
            for (int j = k + 1; j < n; ++j)
                a[std::size_t(rows[i]) * n + j] -= m * a[std::size_t(rows[k]) * n + j];
        }
    }
    for (int i = 0; i < n; ++i) {
        f.perm[i] = rows[i];
        f.lower[std::size_t(i) * n + i] = 1.0;
        for (int j = 0; j < i; ++j)
            f.lower[std::size_t(i) * n + j] = a[std::size_t(rows[i]) * n + j];
        for (int j = i; j < n; ++j)
            f.upper[std::size_t(i) * n + j] = a[std::size_t(rows[i]) * n + j];
    }
    return f;
}

std::vector<double> matmul(const std::vector<double>& a,
                           const std::vector<double>& b, int n) {
    std::vector<double> c(std::size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double aik = a[std::size_t(i) * n + k];
            for (int j = 0; j < n; ++j)
                c[std::size_t(i) * n + j] += aik * b[std::size_t(k) * n + j];
        }
    return c;
}

}  // namespace volflow
