#pragma once

#include <algorithm>
#include <limits>
#include <nlohmann/json.hpp>

#include "subdiff/common.hpp"
#include "subdiff/subspace_data.hpp"

namespace subdiff {

// Squared Frobenius distance of projectors, ||VV^T - AA^T||_F^2.
// Invariant to right-rotation of either basis; lies in [0, 2d].
inline double subspace_error(const MatrixXd& V, const MatrixXd& A) {
    if (V.rows() != A.rows() || V.cols() != A.cols())
        throw std::invalid_argument("subspace_error: dimension mismatch");
    // expand the square: 2d - 2 ||V^T A||_F^2, avoids forming D x D projectors
    MatrixXd VtA = V.transpose() * A;
    return 2.0 * double(V.cols()) - 2.0 * VtA.squaredNorm();
}

struct ProcrustesResult {
    MatrixXd U;  // orthogonal d x d, Frobenius-nearest to V^T A
    bool rank_deficient = false;
};

// U = W1 W2^T from the SVD V^T A = W1 S W2^T; the orthogonal Procrustes
// minimizer of ||U' - V^T A||_F.
inline ProcrustesResult procrustes_align(const MatrixXd& V, const MatrixXd& A) {
    MatrixXd VtA = V.transpose() * A;
    Eigen::JacobiSVD<MatrixXd> svd(VtA, Eigen::ComputeFullU | Eigen::ComputeFullV);
    ProcrustesResult res;
    res.U = svd.matrixU() * svd.matrixV().transpose();
    res.rank_deficient = svd.singularValues().minCoeff() < 1e-12;
    return res;
}

struct OrthoLemmaResult {
    double eps;            // ||(I - VV^T) A||_F^2
    double lhs_a1;         // ||(I - AA^T) V||_F^2        <= eps
    double lhs_a2;         // ||VV^T - AA^T||_F^2         <= 2 eps
    double lhs_a3;         // ||V^T A A^T V - I||_F^2     <= 2 eps
    double lhs_b;          // ||U - V^T A||_F^2           <= 2 eps
    bool holds;
};

inline OrthoLemmaResult ortho_lemma_check(const MatrixXd& A, const MatrixXd& V) {
    int d = int(A.cols());
    MatrixXd AtV = A.transpose() * V;
    MatrixXd VtA = AtV.transpose();
    OrthoLemmaResult r;
    r.eps = double(d) - VtA.squaredNorm();                     // ||(I-VV^T)A||_F^2
    r.lhs_a1 = double(d) - AtV.squaredNorm();                  // equal by trace symmetry
    r.lhs_a2 = subspace_error(V, A);
    r.lhs_a3 = (VtA * AtV - MatrixXd::Identity(d, d)).squaredNorm();
    r.lhs_b = (procrustes_align(V, A).U - VtA).squaredNorm();
    double slack = 1e-9;
    r.holds = r.lhs_a1 <= r.eps + slack && r.lhs_a2 <= 2.0 * r.eps + slack &&
              r.lhs_a3 <= 2.0 * r.eps + slack && r.lhs_b <= 2.0 * r.eps + slack;
    return r;
}

namespace detail {

// Jonker-Volgenant shortest augmenting path assignment on a dense square
// cost matrix. Returns the column matched to each row.
inline std::vector<int> solve_assignment(const MatrixXd& cost) {
    int n = int(cost.rows());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, n), way(n + 1, 0);
    for (int i = 0; i < n; ++i) {
        p[n] = i;
        int j0 = n;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            int i0 = p[j0], j1 = -1;
            double delta = inf;
            for (int j = 0; j < n; ++j) {
                if (used[j]) continue;
                double cur = cost(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != n);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != n);
    }
    std::vector<int> row_to_col(n);
    for (int j = 0; j < n; ++j)
        if (p[j] < n) row_to_col[size_t(p[j])] = j;
    return row_to_col;
}

}  // namespace detail

// Empirical Wasserstein-2 between equal-size samples. d = 1 uses the sorted
// coupling (exact); d = 2 solves the optimal assignment exactly, capped at
// n <= 2048 because the solver is cubic in n.
inline double w2_latent(const MatrixXd& samples_a, const MatrixXd& samples_b) {
    if (samples_a.rows() != samples_b.rows() || samples_a.cols() != samples_b.cols())
        throw std::invalid_argument("w2_latent: shape mismatch");
    long n = samples_a.rows();
    int d = int(samples_a.cols());
    if (d == 1) {
        std::vector<double> a(samples_a.col(0).begin(), samples_a.col(0).end());
        std::vector<double> b(samples_b.col(0).begin(), samples_b.col(0).end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        double acc = 0.0;
        for (long i = 0; i < n; ++i) acc += (a[size_t(i)] - b[size_t(i)]) * (a[size_t(i)] - b[size_t(i)]);
        return std::sqrt(acc / double(n));
    }
    if (d != 2) throw std::invalid_argument("w2_latent: only d <= 2 supported");
    if (n > 2048) throw std::invalid_argument("w2_latent: n > 2048 refused for d = 2");
    MatrixXd cost(n, n);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < n; ++j)
            cost(i, j) = (samples_a.row(i) - samples_b.row(j)).squaredNorm();
    auto match = detail::solve_assignment(cost);
    double acc = 0.0;
    for (long i = 0; i < n; ++i) acc += cost(i, match[size_t(i)]);
    return std::sqrt(acc / double(n));
}

// Plug-in total variation on a shared histogram over the pooled 1st-99th
// percentile range. A biased proxy for the population TV; in [0, 1].
inline double tv_latent_histogram(const MatrixXd& samples_a, const MatrixXd& samples_b,
                                  int bins_per_axis = 64) {
    if (samples_a.cols() != samples_b.cols())
        throw std::invalid_argument("tv_latent_histogram: dim mismatch");
    int d = int(samples_a.cols());
    if (d > 2) throw std::invalid_argument("tv_latent_histogram: only d <= 2 supported");

    std::vector<double> lo(size_t(d), 0.0), hi(size_t(d), 0.0);
    for (int k = 0; k < d; ++k) {
        std::vector<double> pooled;
        pooled.reserve(size_t(samples_a.rows() + samples_b.rows()));
        pooled.insert(pooled.end(), samples_a.col(k).begin(), samples_a.col(k).end());
        pooled.insert(pooled.end(), samples_b.col(k).begin(), samples_b.col(k).end());
        std::sort(pooled.begin(), pooled.end());
        auto quantile = [&](double q) {
            double pos = q * double(pooled.size() - 1);
            size_t i = size_t(pos);
            double frac = pos - double(i);
            return i + 1 < pooled.size() ? pooled[i] * (1.0 - frac) + pooled[i + 1] * frac
                                         : pooled[i];
        };
        lo[size_t(k)] = quantile(0.01);
        hi[size_t(k)] = quantile(0.99);
        if (hi[size_t(k)] <= lo[size_t(k)]) hi[size_t(k)] = lo[size_t(k)] + 1e-12;
    }

    long n_cells = 1;
    for (int k = 0; k < d; ++k) n_cells *= bins_per_axis;
    std::vector<double> pa(size_t(n_cells), 0.0), pb(size_t(n_cells), 0.0);
    auto bin_of = [&](const Eigen::RowVectorXd& row) -> long {
        long idx = 0;
        for (int k = 0; k < d; ++k) {
            double f = (row[k] - lo[size_t(k)]) / (hi[size_t(k)] - lo[size_t(k)]);
            int b = int(std::floor(f * bins_per_axis));
            b = std::clamp(b, 0, bins_per_axis - 1);
            idx = idx * bins_per_axis + b;
        }
        return idx;
    };
    for (long i = 0; i < samples_a.rows(); ++i)
        pa[size_t(bin_of(samples_a.row(i)))] += 1.0 / double(samples_a.rows());
    for (long i = 0; i < samples_b.rows(); ++i)
        pb[size_t(bin_of(samples_b.row(i)))] += 1.0 / double(samples_b.rows());
    double tv = 0.0;
    for (long c = 0; c < n_cells; ++c) tv += std::abs(pa[size_t(c)] - pb[size_t(c)]);
    return 0.5 * tv;
}

struct RateFit {
    double slope;
    double intercept;
    double r_squared;
};

// Least squares on (log x, log y); summarizes error-vs-size trends.
inline RateFit rate_fit(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 3)
        throw std::invalid_argument("rate_fit: need >= 3 matching points");
    size_t n = xs.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        if (xs[i] <= 0.0 || ys[i] <= 0.0)
            throw std::invalid_argument("rate_fit: values must be positive");
        double lx = std::log(xs[i]), ly = std::log(ys[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        syy += ly * ly;
    }
    double nn = double(n);
    double slope = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
    double intercept = (sy - slope * sx) / nn;
    double ss_tot = syy - sy * sy / nn;
    double ss_res = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double pred = intercept + slope * std::log(xs[i]);
        double res = std::log(ys[i]) - pred;
        ss_res += res * res;
    }
    double r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    return {slope, intercept, r2};
}

struct EvalReport {
    double subspace_err = 0.0;
    MatrixXd align_U;
    double tv_latent = 0.0;
    double w2_latent = 0.0;
    double ortho_second_moment = 0.0;
    LatentMoments moments{0.0, 0.0, 0.0, 0.0};
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["subspace_err"] = r.subspace_err;
    std::vector<std::vector<double>> u;
    for (long i = 0; i < r.align_U.rows(); ++i)
        u.emplace_back(r.align_U.row(i).begin(), r.align_U.row(i).end());
    j["align_U"] = u;
    j["tv_latent"] = r.tv_latent;
    j["w2_latent"] = r.w2_latent;
    j["ortho_second_moment"] = r.ortho_second_moment;
    j["moments"] = {{"C_E", r.moments.C_E},
                    {"c0", r.moments.c0},
                    {"C_z", r.moments.C_z},
                    {"C_E_se", r.moments.C_E_se}};
    return j;
}

}  // namespace subdiff
