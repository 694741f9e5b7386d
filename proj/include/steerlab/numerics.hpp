#ifndef STEERLAB_NUMERICS_HPP
#define STEERLAB_NUMERICS_HPP

// Dense linear algebra and spectral primitives shared by every other module.
// Everything is double precision; matrices are row-major.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerlab {

using Vector = std::vector<double>;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    Vector row(std::size_t i) const {
        return Vector(data.begin() + static_cast<std::ptrdiff_t>(i * cols),
                      data.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
    }
    Vector col(std::size_t j) const {
        Vector out(rows);
        for (std::size_t i = 0; i < rows; ++i) out[i] = (*this)(i, j);
        return out;
    }
    void set_col(std::size_t j, const Vector& v) {
        for (std::size_t i = 0; i < rows; ++i) (*this)(i, j) = v[i];
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    bool all_finite() const {
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

struct SvdResult {
    Matrix u;      // left singular vectors, orthonormal columns
    Vector sigma;  // nonincreasing, >= 0
    Matrix vt;     // right singular vectors, transposed
};

inline double dot(const Vector& a, const Vector& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vector& v) { return std::sqrt(dot(v, v)); }

inline void axpy(double alpha, const Vector& x, Vector& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector scaled(const Vector& v, double c) {
    Vector out(v);
    for (double& x : out) x *= c;
    return out;
}

inline Vector vsub(const Vector& a, const Vector& b) {
    Vector out(a);
    for (std::size_t i = 0; i < b.size(); ++i) out[i] -= b[i];
    return out;
}

inline Vector vadd(const Vector& a, const Vector& b) {
    Vector out(a);
    for (std::size_t i = 0; i < b.size(); ++i) out[i] += b[i];
    return out;
}

// y = M x, M is rows x cols, x has cols entries.
inline Vector matvec(const Matrix& m, const Vector& x) {
    if (x.size() != m.cols) throw std::invalid_argument("matvec: dimension mismatch");
    Vector y(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        const double* r = &m.data[i * m.cols];
        for (std::size_t j = 0; j < m.cols; ++j) s += r[j] * x[j];
        y[i] = s;
    }
    return y;
}

// y = M^T x, x has rows entries.
inline Vector matvec_t(const Matrix& m, const Vector& x) {
    if (x.size() != m.rows) throw std::invalid_argument("matvec_t: dimension mismatch");
    Vector y(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* r = &m.data[i * m.cols];
        for (std::size_t j = 0; j < m.cols; ++j) y[j] += r[j] * x[i];
    }
    return y;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: dimension mismatch");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
    return t;
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double x : m.data) s += x * x;
    return std::sqrt(s);
}

// Max-subtracted softmax.
inline Vector softmax(const Vector& z) {
    if (z.empty()) throw std::invalid_argument("softmax: empty input");
    double zmax = *std::max_element(z.begin(), z.end());
    Vector p(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - zmax);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

inline Vector log_softmax(const Vector& z) {
    if (z.empty()) throw std::invalid_argument("log_softmax: empty input");
    double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double x : z) sum += std::exp(x - zmax);
    double logz = zmax + std::log(sum);
    Vector out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - logz;
    return out;
}

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow
inline double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

inline double cosine(const Vector& a, const Vector& b) {
    double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine: zero-norm input");
    return dot(a, b) / (na * nb);
}

// Shannon entropy of the squared-singular-value energy distribution.
inline double spectral_entropy(const Vector& sigma) {
    double total = 0.0;
    for (double s : sigma) {
        if (s < 0.0) throw std::invalid_argument("spectral_entropy: negative singular value");
        total += s * s;
    }
    if (total == 0.0) throw std::invalid_argument("spectral_entropy: all-zero spectrum");
    double h = 0.0;
    for (double s : sigma) {
        double p = s * s / total;
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

// |{i : sigma_i >= eps * sigma_1}| for a descending spectrum.
inline std::size_t rank_eps(const Vector& sigma, double eps = 0.1) {
    if (eps <= 0.0 || eps >= 1.0) throw std::invalid_argument("rank_eps: eps must be in (0,1)");
    if (sigma.empty() || sigma[0] == 0.0) return 0;
    double cut = eps * sigma[0];
    std::size_t r = 0;
    for (double s : sigma)
        if (s >= cut) ++r;
    return r;
}

namespace detail {

// Orthonormal completion for zero columns of U, against the already-filled
// columns 0..filled-1.
inline void complete_basis(Matrix& u, std::size_t filled) {
    std::size_t next_axis = 0;
    for (std::size_t j = filled; j < u.cols; ++j) {
        Vector c;
        while (true) {
            if (next_axis >= u.rows)
                throw std::runtime_error("svd: basis completion failed");
            c.assign(u.rows, 0.0);
            c[next_axis++] = 1.0;
            for (std::size_t k = 0; k < j; ++k) {
                Vector uk = u.col(k);
                axpy(-dot(c, uk), uk, c);
            }
            double n = norm(c);
            if (n > 1e-8) {
                for (double& x : c) x /= n;
                break;
            }
        }
        u.set_col(j, c);
    }
}

}  // namespace detail

// One-sided Jacobi SVD. Thin decomposition: for an m x n input with m >= n,
// U is m x n, sigma has n entries, Vt is n x n; the wide case is handled by
// transposing. Sign convention: the largest-magnitude entry of each left
// singular vector is positive.
inline SvdResult svd(const Matrix& m_in) {
    if (m_in.rows == 0 || m_in.cols == 0) throw std::invalid_argument("svd: empty matrix");
    if (!m_in.all_finite()) throw std::invalid_argument("svd: non-finite entries");

    bool transposed = m_in.rows < m_in.cols;
    Matrix a = transposed ? transpose(m_in) : m_in;
    const std::size_t n = a.cols;
    Matrix v = Matrix::identity(n);

    double fro = frobenius_norm(a);
    double tol = 1e-14 * (fro > 0.0 ? fro * fro : 1.0);
    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < a.rows; ++i) {
                    double x = a(i, p), y = a(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (std::abs(apq) <= tol || std::abs(apq) <= 1e-15 * std::sqrt(app * aqq))
                    continue;
                converged = false;
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (std::size_t i = 0; i < a.rows; ++i) {
                    double x = a(i, p), y = a(i, q);
                    a(i, p) = c * x - s * y;
                    a(i, q) = s * x + c * y;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    double x = v(i, p), y = v(i, q);
                    v(i, p) = c * x - s * y;
                    v(i, q) = s * x + c * y;
                }
            }
        }
        if (converged) break;
    }

    // Column norms are the singular values; sort descending.
    std::vector<std::pair<double, std::size_t>> order(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i) s += a(i, j) * a(i, j);
        order[j] = {std::sqrt(s), j};
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& x, const auto& y) { return x.first > y.first; });

    Matrix u(a.rows, n);
    Vector sigma(n);
    Matrix vt(n, n);
    std::size_t nonzero = 0;
    for (std::size_t j = 0; j < n; ++j) {
        double s = order[j].first;
        std::size_t src = order[j].second;
        sigma[j] = s;
        if (s > 0.0) {
            for (std::size_t i = 0; i < a.rows; ++i) u(i, j) = a(i, src) / s;
            nonzero = j + 1;
        }
        for (std::size_t i = 0; i < n; ++i) vt(j, i) = v(i, src);
    }
    detail::complete_basis(u, nonzero);

    // Deterministic sign: flip so the largest-magnitude entry of each u column
    // is positive; the paired v row flips with it.
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t imax = 0;
        for (std::size_t i = 1; i < u.rows; ++i)
            if (std::abs(u(i, j)) > std::abs(u(imax, j))) imax = i;
        if (u(imax, j) < 0.0) {
            for (std::size_t i = 0; i < u.rows; ++i) u(i, j) = -u(i, j);
            for (std::size_t i = 0; i < n; ++i) vt(j, i) = -vt(j, i);
        }
    }

    if (!transposed) return {std::move(u), std::move(sigma), std::move(vt)};

    // m = (a_t)^T = V Sigma U^T: swap roles, then re-apply the sign rule to the
    // new left factor.
    SvdResult r;
    r.u = Matrix(m_in.rows, n);
    for (std::size_t i = 0; i < m_in.rows; ++i)
        for (std::size_t j = 0; j < n; ++j) r.u(i, j) = vt(j, i);
    r.sigma = std::move(sigma);
    r.vt = transpose(u);
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t imax = 0;
        for (std::size_t i = 1; i < r.u.rows; ++i)
            if (std::abs(r.u(i, j)) > std::abs(r.u(imax, j))) imax = i;
        if (r.u(imax, j) < 0.0) {
            for (std::size_t i = 0; i < r.u.rows; ++i) r.u(i, j) = -r.u(i, j);
            for (std::size_t i = 0; i < r.vt.cols; ++i) r.vt(j, i) = -r.vt(j, i);
        }
    }
    return r;
}

struct PcaResult {
    std::vector<Vector> projections;  // one per input point, dim k
    Matrix basis;                     // d x k, orthonormal columns
    double variance_captured = 0.0;   // fraction of total variance in the top k
    bool degenerate = false;          // all points identical
};

// Project centered points onto the top-k principal directions.
inline PcaResult pca_project(const std::vector<Vector>& points, std::size_t k) {
    if (points.size() < 2) throw std::invalid_argument("pca_project: need at least 2 points");
    const std::size_t d = points[0].size();
    if (k > d) throw std::invalid_argument("pca_project: k exceeds dimension");
    for (const auto& p : points)
        if (p.size() != d) throw std::invalid_argument("pca_project: inconsistent dimensions");

    Vector mean(d, 0.0);
    for (const auto& p : points) axpy(1.0, p, mean);
    for (double& x : mean) x /= static_cast<double>(points.size());

    Matrix centered(d, points.size());
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) centered(j, i) = points[i][j] - mean[j];

    PcaResult res;
    double total_var = frobenius_norm(centered);
    total_var *= total_var;
    if (total_var == 0.0) {
        // Identical points: canonical coordinate basis, zero projections.
        res.degenerate = true;
        res.basis = Matrix(d, k);
        for (std::size_t j = 0; j < k; ++j) res.basis(j, j) = 1.0;
        res.projections.assign(points.size(), Vector(k, 0.0));
        res.variance_captured = 0.0;
        return res;
    }

    SvdResult s = svd(centered);
    res.basis = Matrix(d, k);
    double captured = 0.0;
    for (std::size_t j = 0; j < k && j < s.sigma.size(); ++j) {
        for (std::size_t i = 0; i < d; ++i) res.basis(i, j) = s.u(i, j);
        captured += s.sigma[j] * s.sigma[j];
    }
    res.variance_captured = captured / total_var;
    res.projections.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        Vector proj(k, 0.0);
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t l = 0; l < d; ++l) proj[j] += res.basis(l, j) * centered(l, i);
        res.projections.push_back(std::move(proj));
    }
    return res;
}

}  // namespace steerlab

#endif  // STEERLAB_NUMERICS_HPP
