#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "subdiff/common.hpp"

namespace subdiff {

enum class LatentKind { gaussian_diag, gaussian_mixture };

// Latent law P_z on R^d. Two built-in families, both with closed-form
// densities and scores so every downstream check has an exact oracle:
//  - gaussian_diag: N(0, diag(lambda_1^2, ..., lambda_d^2))
//  - gaussian_mixture: sum_k w_k N(mu_k, diag(s^2)) with a shared diagonal
//    covariance across components.
struct LatentDistribution {
    LatentKind kind;
    VectorXd variances;             // gaussian_diag: lambda_k^2
    std::vector<double> weights;    // mixture
    std::vector<VectorXd> means;    // mixture
    VectorXd component_variances;   // mixture, shared across components

    int dim() const {
        return kind == LatentKind::gaussian_diag ? int(variances.size())
                                                 : int(means.front().size());
    }

    static LatentDistribution diag_gaussian(const VectorXd& vars) {
        if (vars.size() < 1 || vars.minCoeff() <= 0.0)
            throw std::invalid_argument("latent: variances must be positive");
        LatentDistribution l;
        l.kind = LatentKind::gaussian_diag;
        l.variances = vars;
        return l;
    }

    static LatentDistribution mixture(std::vector<double> weights, std::vector<VectorXd> means,
                                      const VectorXd& component_vars) {
        if (weights.empty() || weights.size() != means.size())
            throw std::invalid_argument("latent: weights/means size mismatch");
        double wsum = 0.0;
        for (double w : weights) {
            if (w <= 0.0) throw std::invalid_argument("latent: weights must be positive");
            wsum += w;
        }
        if (std::abs(wsum - 1.0) > 1e-12)
            throw std::invalid_argument("latent: weights must sum to 1");
        if (component_vars.minCoeff() <= 0.0)
            throw std::invalid_argument("latent: component variances must be positive");
        for (const auto& m : means)
            if (m.size() != component_vars.size())
                throw std::invalid_argument("latent: mean/covariance dim mismatch");
        LatentDistribution l;
        l.kind = LatentKind::gaussian_mixture;
        l.weights = std::move(weights);
        l.means = std::move(means);
        l.component_variances = component_vars;
        return l;
    }
};

inline MatrixXd sample_latent(const LatentDistribution& latent, long n, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_latent: n must be >= 1");
    int d = latent.dim();
    MatrixXd out(n, d);
    if (latent.kind == LatentKind::gaussian_diag) {
        VectorXd sd = latent.variances.cwiseSqrt();
        for (long i = 0; i < n; ++i)
            out.row(i) = gaussian_vector(d, rng).cwiseProduct(sd).transpose();
    } else {
        std::discrete_distribution<int> pick(latent.weights.begin(), latent.weights.end());
        VectorXd sd = latent.component_variances.cwiseSqrt();
        for (long i = 0; i < n; ++i) {
            int k = pick(rng);
            out.row(i) =
                (latent.means[k] + gaussian_vector(d, rng).cwiseProduct(sd)).transpose();
        }
    }
    return out;
}

// log p_z and its gradient; both exact for the two built-in families.
inline double latent_log_density(const LatentDistribution& latent, const VectorXd& z) {
    int d = latent.dim();
    constexpr double log2pi = 1.8378770664093453;
    if (latent.kind == LatentKind::gaussian_diag) {
        double q = 0.0, logdet = 0.0;
        for (int k = 0; k < d; ++k) {
            q += z[k] * z[k] / latent.variances[k];
            logdet += std::log(latent.variances[k]);
        }
        return -0.5 * (q + logdet + d * log2pi);
    }
    double logdet = 0.0;
    for (int k = 0; k < d; ++k) logdet += std::log(latent.component_variances[k]);
    // log-sum-exp over components
    std::vector<double> terms(latent.weights.size());
    double max_term = -std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < latent.weights.size(); ++c) {
        double q = 0.0;
        for (int k = 0; k < d; ++k) {
            double r = z[k] - latent.means[c][k];
            q += r * r / latent.component_variances[k];
        }
        terms[c] = std::log(latent.weights[c]) - 0.5 * (q + logdet + d * log2pi);
        max_term = std::max(max_term, terms[c]);
    }
    double s = 0.0;
    for (double t : terms) s += std::exp(t - max_term);
    return max_term + std::log(s);
}

inline VectorXd latent_score(const LatentDistribution& latent, const VectorXd& z) {
    int d = latent.dim();
    if (latent.kind == LatentKind::gaussian_diag)
        return -z.cwiseQuotient(latent.variances);
    std::vector<double> logp(latent.weights.size());
    double max_lp = -std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < latent.weights.size(); ++c) {
        double q = 0.0;
        for (int k = 0; k < d; ++k) {
            double r = z[k] - latent.means[c][k];
            q += r * r / latent.component_variances[k];
        }
        logp[c] = std::log(latent.weights[c]) - 0.5 * q;
        max_lp = std::max(max_lp, logp[c]);
    }
    double denom = 0.0;
    for (double lp : logp) denom += std::exp(lp - max_lp);
    VectorXd score = VectorXd::Zero(d);
    for (size_t c = 0; c < latent.weights.size(); ++c) {
        double resp = std::exp(logp[c] - max_lp) / denom;
        score += resp * (-(z - latent.means[c]).cwiseQuotient(latent.component_variances));
    }
    return score;
}

// Second moment E[z z^T], exact for both families.
inline MatrixXd latent_second_moment(const LatentDistribution& latent) {
    int d = latent.dim();
    if (latent.kind == LatentKind::gaussian_diag)
        return latent.variances.asDiagonal();
    MatrixXd m = MatrixXd::Zero(d, d);
    for (size_t c = 0; c < latent.weights.size(); ++c) {
        m += latent.weights[c] * (MatrixXd(latent.component_variances.asDiagonal()) +
                                  latent.means[c] * latent.means[c].transpose());
    }
    return m;
}

struct LatentMoments {
    double C_E;   // E ||grad log p_z||^2
    double c0;    // lambda_min E[z z^T]
    double C_z;   // E ||z||^2
    double C_E_se = 0.0;  // nonzero when C_E was Monte Carlo estimated
};

// Moment constants used throughout the evaluation metrics. Diagonal
// Gaussians have closed forms; for mixtures C_E is estimated by Monte
// Carlo (the score is still exact, only the expectation is sampled).
inline LatentMoments latent_moments(const LatentDistribution& latent, long n_mc = 100000,
                                    std::uint64_t seed = 1234) {
    MatrixXd second = latent_second_moment(latent);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(second);
    double c0 = eig.eigenvalues().minCoeff();
    double C_z = second.trace();
    if (latent.kind == LatentKind::gaussian_diag) {
        double C_E = latent.variances.cwiseInverse().sum();
        return {C_E, c0, C_z, 0.0};
    }
    Rng rng = split_rng(seed, 0);
    MatrixXd zs = sample_latent(latent, n_mc, rng);
    std::vector<double> sq(n_mc);
    for (long i = 0; i < n_mc; ++i) sq[i] = latent_score(latent, zs.row(i)).squaredNorm();
    auto ms = mean_stderr(sq);
    return {ms.mean, c0, C_z, ms.se};
}

// Random D x d matrix with orthonormal columns, rotation invariant in
// distribution (thin QR of a Gaussian matrix with sign fix).
inline MatrixXd random_orthonormal(int D, int d, Rng& rng) {
    if (d < 1 || d >= D) throw std::domain_error("random_orthonormal: need 1 <= d < D");
    MatrixXd G = gaussian_matrix(D, d, rng);
    Eigen::HouseholderQR<MatrixXd> qr(G);
    MatrixXd Q = qr.householderQ() * MatrixXd::Identity(D, d);
    MatrixXd R = qr.matrixQR().topRows(d).triangularView<Eigen::Upper>();
    for (int j = 0; j < d; ++j)
        if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
    return Q;
}

// x = A z data model: ambient dim D, intrinsic dim d < D, orthonormal A.
struct SubspaceModel {
    int D;
    int d;
    MatrixXd A;  // D x d, orthonormal columns
    LatentDistribution latent;

    SubspaceModel(MatrixXd A_, LatentDistribution latent_)
        : D(int(A_.rows())), d(int(A_.cols())), A(std::move(A_)), latent(std::move(latent_)) {
        if (d < 1 || D <= d) throw std::invalid_argument("SubspaceModel: need 1 <= d < D");
        if ((A.transpose() * A - MatrixXd::Identity(d, d)).norm() > 1e-10)
            throw std::invalid_argument("SubspaceModel: A columns not orthonormal");
        if (latent.dim() != d) throw std::invalid_argument("SubspaceModel: latent dim mismatch");
    }

    static SubspaceModel random(int D, int d, LatentDistribution latent, Rng& rng) {
        return SubspaceModel(random_orthonormal(D, d, rng), std::move(latent));
    }
};

inline MatrixXd sample_data(const SubspaceModel& model, long n, Rng& rng) {
    return sample_latent(model.latent, n, rng) * model.A.transpose();
}

inline nlohmann::json latent_to_json(const LatentDistribution& latent) {
    nlohmann::json j;
    if (latent.kind == LatentKind::gaussian_diag) {
        j["kind"] = "gaussian_diag";
        j["variances"] = std::vector<double>(latent.variances.begin(), latent.variances.end());
    } else {
        j["kind"] = "gaussian_mixture";
        j["weights"] = latent.weights;
        std::vector<std::vector<double>> means;
        for (const auto& m : latent.means)
            means.emplace_back(m.begin(), m.end());
        j["means"] = means;
        j["component_variances"] = std::vector<double>(latent.component_variances.begin(),
                                                       latent.component_variances.end());
    }
    return j;
}

inline LatentDistribution latent_from_json(const nlohmann::json& j) {
    std::string kind = j.at("kind");
    if (kind == "gaussian_diag") {
        std::vector<double> v = j.at("variances");
        return LatentDistribution::diag_gaussian(Eigen::Map<VectorXd>(v.data(), long(v.size())));
    }
    if (kind == "gaussian_mixture") {
        std::vector<double> w = j.at("weights");
        std::vector<std::vector<double>> ms = j.at("means");
        std::vector<VectorXd> means;
        for (auto& m : ms) means.push_back(Eigen::Map<VectorXd>(m.data(), long(m.size())));
        std::vector<double> cv = j.at("component_variances");
        return LatentDistribution::mixture(
            w, means, Eigen::Map<VectorXd>(cv.data(), long(cv.size())));
    }
    throw std::invalid_argument("latent_from_json: unknown kind " + kind);
}

inline nlohmann::json model_to_json(const SubspaceModel& model) {
    nlohmann::json j;
    j["D"] = model.D;
    j["d"] = model.d;
    std::vector<double> a;
    a.reserve(size_t(model.D) * size_t(model.d));
    for (int i = 0; i < model.D; ++i)
        for (int k = 0; k < model.d; ++k) a.push_back(model.A(i, k));
    j["A_row_major"] = a;
    j["latent"] = latent_to_json(model.latent);
    return j;
}

inline SubspaceModel model_from_json(const nlohmann::json& j) {
    int D = j.at("D");
    int d = j.at("d");
    std::vector<double> a = j.at("A_row_major");
    if (long(a.size()) != long(D) * long(d))
        throw std::invalid_argument("model_from_json: A size mismatch");
    MatrixXd A(D, d);
    for (int i = 0; i < D; ++i)
        for (int k = 0; k < d; ++k) A(i, k) = a[size_t(i) * size_t(d) + size_t(k)];
    return SubspaceModel(A, latent_from_json(j.at("latent")));
}

}  // namespace subdiff
