#pragma once

#include "subdiff/common.hpp"
#include "subdiff/sde_core.hpp"
#include "subdiff/subspace_data.hpp"
#include "subdiff/time_schedule.hpp"

namespace subdiff {

// Score split into the on-support part (in span(A)) and the orthogonal
// part -(I - AA^T)x / h(t).
struct DecomposedScore {
    VectorXd s_par;
    VectorXd s_perp;

    VectorXd total() const { return s_par + s_perp; }
};

// Law of the latent forward process at time t: P_z smoothed by the OU
// kernel, i.e. means scaled by alpha and h(t) added to every variance.
// Closed form for both built-in families.
inline LatentDistribution evolved_latent(const LatentDistribution& latent, double alpha,
                                         double h) {
    if (latent.kind == LatentKind::gaussian_diag) {
        VectorXd v = (alpha * alpha) * latent.variances;
        v.array() += h;
        return LatentDistribution::diag_gaussian(v);
    }
    std::vector<VectorXd> means;
    means.reserve(latent.means.size());
    for (const auto& m : latent.means) means.push_back(alpha * m);
    VectorXd v = (alpha * alpha) * latent.component_variances;
    v.array() += h;
    return LatentDistribution::mixture(latent.weights, means, v);
}

inline VectorXd orthogonal_score(const SubspaceModel& model, double h, const VectorXd& x) {
    VectorXd proj = model.A * (model.A.transpose() * x);
    return -(x - proj) / h;
}

// Closed-form score for the diagonal Gaussian latent:
//   s_par = -A Sigma_t^{-1} A^T x with Sigma_t = diag(alpha^2 lambda_k^2 + h).
inline DecomposedScore gaussian_score(const SubspaceModel& model, const TimeSchedule& sched,
                                      double t, const VectorXd& x) {
    if (model.latent.kind != LatentKind::gaussian_diag)
        throw std::invalid_argument("gaussian_score: latent is not gaussian_diag");
    auto [a, h] = sched.alpha_h(t);
    VectorXd sigma_t = (a * a) * model.latent.variances;
    sigma_t.array() += h;
    VectorXd z = model.A.transpose() * x;
    DecomposedScore s;
    s.s_par = model.A * (-z.cwiseQuotient(sigma_t));
    s.s_perp = orthogonal_score(model, h, x);
    return s;
}

// Mixture latent: the on-support score is the exact score of the evolved
// mixture at A^T x (responsibility-weighted component scores).
inline DecomposedScore mixture_score(const SubspaceModel& model, const TimeSchedule& sched,
                                     double t, const VectorXd& x) {
    if (model.latent.kind != LatentKind::gaussian_mixture)
        throw std::invalid_argument("mixture_score: latent is not gaussian_mixture");
    auto [a, h] = sched.alpha_h(t);
    LatentDistribution evolved = evolved_latent(model.latent, a, h);
    DecomposedScore s;
    s.s_par = model.A * latent_score(evolved, model.A.transpose() * x);
    s.s_perp = orthogonal_score(model, h, x);
    return s;
}

inline DecomposedScore oracle_score(const SubspaceModel& model, const TimeSchedule& sched,
                                    double t, const VectorXd& x) {
    return model.latent.kind == LatentKind::gaussian_diag ? gaussian_score(model, sched, t, x)
                                                          : mixture_score(model, sched, t, x);
}

struct QuadratureSpec {
    int nodes_per_dim = 200;
    double half_width_sigmas = 8.0;
};

struct QuadratureScore {
    DecomposedScore score;
    double log_density_latent;  // log p_t^LD(A^T x)
    bool grid_warning = false;  // grid covered fewer than 8 latent sigmas
};

namespace detail {

// Integration range per latent axis: all component means +- half_width sigmas.
inline void latent_axis_range(const LatentDistribution& latent, int axis, double half_width,
                              double& lo, double& hi) {
    if (latent.kind == LatentKind::gaussian_diag) {
        double sd = std::sqrt(latent.variances[axis]);
        lo = -half_width * sd;
        hi = half_width * sd;
        return;
    }
    double sd = std::sqrt(latent.component_variances[axis]);
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    for (const auto& m : latent.means) {
        lo = std::min(lo, m[axis] - half_width * sd);
        hi = std::max(hi, m[axis] + half_width * sd);
    }
}

}  // namespace detail

// Brute-force oracle for d <= 2: tensor-product quadrature of
//   p_t^LD(z') = int phi_t(z' | z) p_z(z) dz
// and its analytic z'-gradient. Deterministic; used to cross-check the
// closed forms, never as part of the implementation path.
inline QuadratureScore quadrature_score(const SubspaceModel& model, const TimeSchedule& sched,
                                        double t, const VectorXd& x,
                                        const QuadratureSpec& spec = {}) {
    int d = model.d;
    if (d > 2) throw std::invalid_argument("quadrature_score: d > 2 unsupported");
    auto [a, h] = sched.alpha_h(t);
    VectorXd zp = model.A.transpose() * x;

    int n = spec.nodes_per_dim;
    std::vector<std::vector<double>> nodes(d), weights(d);
    bool warning = spec.half_width_sigmas < 8.0;
    for (int axis = 0; axis < d; ++axis) {
        double lo, hi;
        detail::latent_axis_range(model.latent, axis, spec.half_width_sigmas, lo, hi);
        double step = (hi - lo) / double(n - 1);
        nodes[axis].resize(n);
        weights[axis].resize(n);
        for (int i = 0; i < n; ++i) {
            nodes[axis][i] = lo + step * i;
            // composite trapezoid weights
            weights[axis][i] = (i == 0 || i == n - 1) ? 0.5 * step : step;
        }
    }

    constexpr double log2pi = 1.8378770664093453;
    double density = 0.0;
    VectorXd grad_density = VectorXd::Zero(d);
    long total = 1;
    for (int axis = 0; axis < d; ++axis) total *= n;
    VectorXd z(d);
    for (long idx = 0; idx < total; ++idx) {
        long rem = idx;
        double w = 1.0;
        for (int axis = 0; axis < d; ++axis) {
            int i = int(rem % n);
            rem /= n;
            z[axis] = nodes[axis][i];
            w *= weights[axis][i];
        }
        VectorXd r = zp - a * z;
        double log_phi = -0.5 * (r.squaredNorm() / h + d * (std::log(h) + log2pi));
        double f = w * std::exp(log_phi + latent_log_density(model.latent, z));
        density += f;
        grad_density += f * (-r / h);  // analytic d/dz' of phi under the integral
    }

    QuadratureScore out;
    out.grid_warning = warning;
    out.log_density_latent = std::log(density);
    out.score.s_par = model.A * (grad_density / density);
    out.score.s_perp = orthogonal_score(model, h, x);
    return out;
}

struct MomentIdentityResult {
    MatrixXd estimate;  // MC estimate of E[grad log p_t^LD(Z_t) Z_t^T]
    MatrixXd se;        // entrywise standard errors
};

// Checks the identity E[grad log p_t^LD(Z_t) Z_t^T] = -I_d by Monte Carlo
// with the exact evolved score.
inline MomentIdentityResult score_moment_identity(const SubspaceModel& model,
                                                  const TimeSchedule& sched, double t,
                                                  long n_mc, Rng& rng) {
    int d = model.d;
    auto [a, h] = sched.alpha_h(t);
    LatentDistribution evolved = evolved_latent(model.latent, a, h);
    MatrixXd sum = MatrixXd::Zero(d, d);
    MatrixXd sumsq = MatrixXd::Zero(d, d);
    double sqrt_h = std::sqrt(h);
    for (long i = 0; i < n_mc; ++i) {
        VectorXd z0 = sample_latent(model.latent, 1, rng).row(0);
        VectorXd zt = a * z0 + sqrt_h * gaussian_vector(d, rng);
        MatrixXd term = latent_score(evolved, zt) * zt.transpose();
        sum += term;
        sumsq += term.cwiseProduct(term);
    }
    MomentIdentityResult res;
    res.estimate = sum / double(n_mc);
    MatrixXd var = sumsq / double(n_mc) - res.estimate.cwiseProduct(res.estimate);
    res.se = (var / double(n_mc)).cwiseMax(0.0).cwiseSqrt();
    return res;
}

struct SecondMomentResult {
    double estimate;  // MC estimate of E ||grad log p_t^LD||^2
    double se;
    double bound;  // min{ C_E/(1-h), d/h }
};

inline SecondMomentResult score_second_moment(const SubspaceModel& model,
                                              const TimeSchedule& sched, double t, long n_mc,
                                              Rng& rng) {
    int d = model.d;
    auto [a, h] = sched.alpha_h(t);
    LatentDistribution evolved = evolved_latent(model.latent, a, h);
    std::vector<double> vals;
    vals.reserve(size_t(n_mc));
    double sqrt_h = std::sqrt(h);
    for (long i = 0; i < n_mc; ++i) {
        VectorXd z0 = sample_latent(model.latent, 1, rng).row(0);
        VectorXd zt = a * z0 + sqrt_h * gaussian_vector(d, rng);
        vals.push_back(latent_score(evolved, zt).squaredNorm());
    }
    auto ms = mean_stderr(vals);
    double C_E = latent_moments(model.latent).C_E;
    return {ms.mean, ms.se, std::min(C_E / (1.0 - h), double(d) / h)};
}

struct ConditionalCovResult {
    double op_norm;  // || Cov(z | z') ||_op, exact Gaussian posterior
    double bound;    // (h^2/alpha^2) (beta + 1/h)
};

// Gaussian posterior covariance (alpha^2/h I + Sigma^{-1})^{-1} against the
// conditional covariance bound, with beta = max{lambda_min^{-2}, 1}.
inline ConditionalCovResult conditional_cov_check(const SubspaceModel& model,
                                                  const TimeSchedule& sched, double t) {
    if (model.latent.kind != LatentKind::gaussian_diag)
        throw std::invalid_argument("conditional_cov_check: latent is not gaussian_diag");
    auto [a, h] = sched.alpha_h(t);
    VectorXd precision =
        VectorXd::Constant(model.d, a * a / h) + model.latent.variances.cwiseInverse();
    double op_norm = precision.cwiseInverse().maxCoeff();
    double beta = std::max(1.0 / model.latent.variances.minCoeff(), 1.0);
    return {op_norm, (h * h / (a * a)) * (beta + 1.0 / h)};
}

struct GaussianTailResult {
    double lhs1, rhs1;  // tail mass integral vs bound
    double lhs2, rhs2;  // tail second moment integral vs bound
};

// Radial quadrature of the unnormalized Gaussian tail integrals against the
// closed-form bounds (2 d pi^{d/2} / (C Gamma(d/2+1))) R^{d-2+p} e^{-C R^2/2}.
inline GaussianTailResult gaussian_tail_check(int d, double C, double R, int n_nodes = 20000) {
    if (d < 1 || d > 2) throw std::invalid_argument("gaussian_tail_check: d must be 1 or 2");
    if (C <= 0.0 || R <= 0.0) throw std::invalid_argument("gaussian_tail_check: need C, R > 0");
    // surface area of the unit (d-1)-sphere times 1/d cancels into
    // d pi^{d/2} / Gamma(d/2+1): 2 for d=1, 2 pi for d=2.
    double sphere = d == 1 ? 2.0 : 2.0 * M_PI;
    double r_max = R + 40.0 / std::sqrt(C);
    double step = (r_max - R) / double(n_nodes);
    double i0 = 0.0, i2 = 0.0;
    for (int i = 0; i <= n_nodes; ++i) {
        double r = R + step * i;
        double w = (i == 0 || i == n_nodes) ? 0.5 * step : step;
        double f = std::pow(r, d - 1) * std::exp(-0.5 * C * r * r);
        i0 += w * f;
        i2 += w * f * r * r;
    }
    double gamma_half = d == 1 ? std::tgamma(1.5) : std::tgamma(2.0);
    double front = 2.0 * d * std::pow(M_PI, 0.5 * d) / (C * gamma_half);
    GaussianTailResult res;
    res.lhs1 = sphere * i0;
    res.lhs2 = sphere * i2;
    res.rhs1 = front * std::pow(R, d - 2) * std::exp(-0.5 * C * R * R);
    res.rhs2 = front * std::pow(R, d) * std::exp(-0.5 * C * R * R);
    return res;
}

}  // namespace subdiff
