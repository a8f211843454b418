#pragma once

#include <optional>
#include <vector>

#include "subdiff/common.hpp"
#include "subdiff/score_network.hpp"
#include "subdiff/time_schedule.hpp"
#include "subdiff/trainer.hpp"

namespace subdiff {

struct BackwardRun {
    MatrixXd samples;  // n x D states at backward time T - t0
    long n_steps = 0;  // K_T = (T - t0)/eta
    double ortho_second_moment = -1.0;  // per-coordinate, when V was provided
};

enum class BackwardInit { standard_normal, provided };

// Discretized backward SDE (piecewise-frozen drift, exact diffusion):
// within [k eta, (k+1) eta) the increment is
//   [X_k / 2 + s(X_k, T - k eta)] dt + dW.
// Trajectories use independent per-index streams derived from `seed`, so
// results are deterministic and order-stable under any parallel split.
inline BackwardRun backward_sample(const ScoreField& score, const TimeSchedule& sched, long n,
                                   int D, std::uint64_t seed,
                                   BackwardInit init = BackwardInit::standard_normal,
                                   const MatrixXd* init_states = nullptr) {
    long K = sched.backward_steps();
    double eta = sched.step();
    double T = sched.horizon();
    BackwardRun run;
    run.n_steps = K;
    run.samples.resize(n, D);
    for (long i = 0; i < n; ++i) {
        Rng rng = split_rng(seed, std::uint64_t(i));
        VectorXd x = init == BackwardInit::standard_normal
                         ? gaussian_vector(D, rng)
                         : VectorXd(init_states->row(i));
        for (long k = 0; k < K; ++k) {
            double t_fwd = T - double(k) * eta;
            VectorXd drift = 0.5 * x + score(x, t_fwd);
            x += eta * drift + std::sqrt(eta) * gaussian_vector(D, rng);
            if (!x.allFinite())
                throw std::runtime_error("backward_sample: non-finite state at step " +
                                         std::to_string(k));
        }
        run.samples.row(i) = x;
    }
    return run;
}

// psi(t) = exp int_0^t [1/h(T-s) - 1/2] ds, closed form for the OU schedule.
inline double ortho_integrating_factor(double T, double t) {
    return (std::exp(T) - 1.0) / (std::exp(T) - std::exp(t)) * std::exp(0.5 * t);
}

// Continuous-time variance of the orthogonal backward coordinate started at
// N(0,1): V_t = (1 + int_0^t psi^2) / psi^2(t).
inline double continuous_orthogonal_variance(double T, double t) {
    double eT = std::exp(T);
    double integral = (eT - 1.0) * (eT - 1.0) * (1.0 / (eT - std::exp(t)) - 1.0 / (eT - 1.0));
    double psi = ortho_integrating_factor(T, t);
    return (1.0 + integral) / (psi * psi);
}

// Exact variance recursion of the discretized orthogonal coordinate:
//   V_0 = 1, V_{k+1} = (1 - a(k eta) eta)^2 V_k + eta
// with a(t) = 1/h(T - t) - 1/2. Returns V_0 .. V_{K_T}.
inline std::vector<double> orthogonal_variance_recursion(const TimeSchedule& sched) {
    long K = sched.backward_steps();
    double eta = sched.step();
    double T = sched.horizon();
    std::vector<double> V(size_t(K) + 1);
    V[0] = 1.0;
    for (long k = 0; k < K; ++k) {
        double a = 1.0 / sched.h(T - double(k) * eta) - 0.5;
        double m = 1.0 - a * eta;
        V[size_t(k) + 1] = m * m * V[size_t(k)] + eta;
    }
    return V;
}

struct OrthogonalCheck {
    double empirical_var;
    double empirical_mean;
    double recursion_var;  // V_{K_T}; exact for the discrete process
};

// Simulates the scalar discretized orthogonal SDE from N(0,1) and compares
// the endpoint variance with the recursion value.
inline OrthogonalCheck orthogonal_empirical_check(const TimeSchedule& sched, long n,
                                                  std::uint64_t seed) {
    long K = sched.backward_steps();
    double eta = sched.step();
    double T = sched.horizon();
    double sum = 0.0, sumsq = 0.0;
    for (long i = 0; i < n; ++i) {
        Rng rng = split_rng(seed, std::uint64_t(i));
        double y = standard_normal(rng);
        for (long k = 0; k < K; ++k) {
            double a = 1.0 / sched.h(T - double(k) * eta) - 0.5;
            y += -eta * a * y + std::sqrt(eta) * standard_normal(rng);
        }
        sum += y;
        sumsq += y * y;
    }
    double mean = sum / double(n);
    double var = sumsq / double(n) - mean * mean;
    return {var, mean, orthogonal_variance_recursion(sched).back()};
}

// Generation with a trained network; records the per-coordinate second
// moment of the (I - VV^T) component of the output.
inline BackwardRun full_pipeline_sample(const ScoreNetwork& net, const TimeSchedule& sched,
                                        long n, std::uint64_t seed) {
    ScoreField field = [&net, &sched](const VectorXd& x, double t) {
        return eval_score(net, sched, x, t);
    };
    BackwardRun run = backward_sample(field, sched, n, net.D, seed);
    MatrixXd ortho = run.samples - (run.samples * net.V) * net.V.transpose();
    run.ortho_second_moment = ortho.squaredNorm() / double(n * (net.D - net.d));
    return run;
}

}  // namespace subdiff
