#pragma once

#include <functional>
#include <vector>

#include "subdiff/common.hpp"
#include "subdiff/oracle_scores.hpp"
#include "subdiff/score_network.hpp"
#include "subdiff/sde_core.hpp"
#include "subdiff/subspace_data.hpp"
#include "subdiff/time_schedule.hpp"

namespace subdiff {

using ScoreField = std::function<VectorXd(const VectorXd&, double)>;

enum class Optimizer { sgd_momentum, adam };

struct TrainConfig {
    long n_steps = 2000;
    long batch_size = 64;
    long times_per_sample = 8;  // (t, X_t) draws per data point per step
    double lr = 1e-3;
    Optimizer optimizer = Optimizer::adam;
    VMode v_mode = VMode::fixed;
    std::uint64_t seed = 0;
    double kappa = 0.0;        // weight clip after each step, 0 = off
    double output_clip = 0.0;  // forwarded to the network

    void validate() const {
        if (n_steps < 1 || batch_size < 1 || times_per_sample < 1)
            throw std::invalid_argument("TrainConfig: counts must be >= 1");
        if (!(lr > 0.0) && lr != 0.0)
            throw std::invalid_argument("TrainConfig: lr must be nonnegative");
    }
};

// Uniform time sampler on [t0, T]; training never sees t < t0.
inline double sample_training_time(const TimeSchedule& sched, Rng& rng) {
    std::uniform_real_distribution<double> u(sched.early_stop(), sched.horizon());
    return std::min(u(rng), sched.horizon());
}

struct LossEstimate {
    double mean;
    double se;
};

// Monte Carlo estimate of the empirical denoising objective
//   (1/n) sum_i (1/(T-t0)) int E || grad log phi_t(X_t|x_i) - s(X_t,t) ||^2 dt
// via t ~ U[t0, T], X_t ~ N(alpha x_i, h I); `mc` draws per data point.
// The score field receives (xt, t, i) so tests can close over x_i.
inline LossEstimate dsm_loss(
    const std::function<VectorXd(const VectorXd&, double, long)>& score, const MatrixXd& data,
    const TimeSchedule& sched, long mc, Rng& rng) {
    long n = data.rows();
    std::vector<double> per_point;
    per_point.reserve(size_t(n));
    for (long i = 0; i < n; ++i) {
        VectorXd x0 = data.row(i);
        double acc = 0.0;
        for (long k = 0; k < mc; ++k) {
            double t = sample_training_time(sched, rng);
            VectorXd xt = forward_kernel_sample(sched, x0, t, rng);
            VectorXd target = noise_score_target(sched, x0, xt, t);
            acc += (score(xt, t, i) - target).squaredNorm();
        }
        per_point.push_back(acc / double(mc));
    }
    auto ms = mean_stderr(per_point);
    return {ms.mean, ms.se};
}

inline LossEstimate dsm_loss(const ScoreField& score, const MatrixXd& data,
                             const TimeSchedule& sched, long mc, Rng& rng) {
    return dsm_loss([&score](const VectorXd& xt, double t, long) { return score(xt, t); }, data,
                    sched, mc, rng);
}

inline LossEstimate dsm_loss(const ScoreNetwork& net, const MatrixXd& data,
                             const TimeSchedule& sched, long mc, Rng& rng) {
    return dsm_loss(
        [&net, &sched](const VectorXd& xt, double t, long) { return eval_score(net, sched, xt, t); },
        data, sched, mc, rng);
}

// The explicit score matching loss (1/(T-t0)) int ||s - grad log p_t||^2 dP_t dt,
// Monte Carlo over fresh model samples; needs the oracle score, so d <= 2 in
// practice. Used for diagnostics only.
inline LossEstimate explicit_score_loss(const ScoreField& score, const SubspaceModel& model,
                                        const TimeSchedule& sched, long n, long mc, Rng& rng) {
    std::vector<double> vals;
    vals.reserve(size_t(n));
    for (long i = 0; i < n; ++i) {
        VectorXd x0 = sample_data(model, 1, rng).row(0);
        double acc = 0.0;
        for (long k = 0; k < mc; ++k) {
            double t = sample_training_time(sched, rng);
            VectorXd xt = forward_kernel_sample(sched, x0, t, rng);
            acc += (score(xt, t) - oracle_score(model, sched, t, xt).total()).squaredNorm();
        }
        vals.push_back(acc / double(mc));
    }
    auto ms = mean_stderr(vals);
    return {ms.mean, ms.se};
}

struct LossGap {
    double gap_dsm;
    double gap_dsm_se;
    double gap_explicit;
    double gap_explicit_se;
};

// The denoising and explicit losses differ by a constant independent of the
// score; the gap between two networks must therefore agree under both.
// Both gaps are estimated on identical sample draws (paired differences).
inline LossGap loss_equivalence_gap(const ScoreNetwork& net_a, const ScoreNetwork& net_b,
                                    const SubspaceModel& model, const TimeSchedule& sched,
                                    long n, long mc, Rng& rng) {
    std::vector<double> diff_dsm, diff_explicit;
    diff_dsm.reserve(size_t(n));
    diff_explicit.reserve(size_t(n));
    for (long i = 0; i < n; ++i) {
        VectorXd x0 = sample_data(model, 1, rng).row(0);
        double dd = 0.0, de = 0.0;
        for (long k = 0; k < mc; ++k) {
            double t = sample_training_time(sched, rng);
            VectorXd xt = forward_kernel_sample(sched, x0, t, rng);
            VectorXd target = noise_score_target(sched, x0, xt, t);
            VectorXd truth = oracle_score(model, sched, t, xt).total();
            VectorXd sa = eval_score(net_a, sched, xt, t);
            VectorXd sb = eval_score(net_b, sched, xt, t);
            dd += (sa - target).squaredNorm() - (sb - target).squaredNorm();
            de += (sa - truth).squaredNorm() - (sb - truth).squaredNorm();
        }
        diff_dsm.push_back(dd / double(mc));
        diff_explicit.push_back(de / double(mc));
    }
    auto md = mean_stderr(diff_dsm);
    auto me = mean_stderr(diff_explicit);
    return {md.mean, md.se, me.mean, me.se};
}

namespace detail {

struct AdamState {
    std::vector<MatrixXd> mW, vW;
    std::vector<VectorXd> mb, vb;
    MatrixXd mV, vV;
    long t = 0;

    static AdamState init(const ScoreNetwork& net) {
        AdamState s;
        for (const auto& w : net.weights) {
            s.mW.push_back(MatrixXd::Zero(w.rows(), w.cols()));
            s.vW.push_back(MatrixXd::Zero(w.rows(), w.cols()));
        }
        for (const auto& b : net.biases) {
            s.mb.push_back(VectorXd::Zero(b.size()));
            s.vb.push_back(VectorXd::Zero(b.size()));
        }
        s.mV = MatrixXd::Zero(net.D, net.d);
        s.vV = MatrixXd::Zero(net.D, net.d);
        return s;
    }
};

template <typename T>
void adam_update(T& param, const T& grad, T& m, T& v, double lr, long t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m = b1 * m + (1.0 - b1) * grad;
    v = (b2 * v.array() + (1.0 - b2) * grad.array().square()).matrix();
    double bc1 = 1.0 - std::pow(b1, double(t));
    double bc2 = 1.0 - std::pow(b2, double(t));
    param.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
}

template <typename T>
void momentum_update(T& param, const T& grad, T& m, double lr) {
    constexpr double mu = 0.9;
    m = mu * m + grad;
    param -= lr * m;
}

// Re-orthonormalize by thin QR with positive diagonal; continuous in V.
inline void qr_retract(MatrixXd& V) {
    Eigen::HouseholderQR<MatrixXd> qr(V);
    MatrixXd Q = qr.householderQ() * MatrixXd::Identity(V.rows(), V.cols());
    MatrixXd R = qr.matrixQR().topRows(V.cols()).triangularView<Eigen::Upper>();
    for (int j = 0; j < V.cols(); ++j)
        if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
    V = Q;
}

}  // namespace detail

struct TrainResult {
    std::vector<double> loss_trace;  // minibatch losses per step
};

using TrainCallback = std::function<void(long step, const ScoreNetwork& net, double loss)>;
using BatchFiller = std::function<void(Rng& rng, MatrixXd& X, VectorXd& ts, MatrixXd& Y)>;

namespace detail {

// Shared optimizer loop; `fill` produces each step's (X_t, t, target) batch.
inline TrainResult train_loop(ScoreNetwork& net, const TrainConfig& config,
                              const TimeSchedule& sched, long rows, const BatchFiller& fill,
                              const TrainCallback& callback, long callback_every) {
    config.validate();
    net.v_mode = config.v_mode;
    net.config.kappa = config.kappa;
    net.config.output_clip = config.output_clip;

    Rng rng = split_rng(config.seed, 0x7261696eULL);
    detail::AdamState state = detail::AdamState::init(net);
    TrainResult result;
    result.loss_trace.reserve(size_t(config.n_steps));

    MatrixXd X(rows, net.D), Y(rows, net.D);
    VectorXd ts(rows);

    for (long step = 0; step < config.n_steps; ++step) {
        fill(rng, X, ts, Y);
        NetworkGrads grads = zero_grads(net);
        double loss = batch_loss_and_grads(net, sched, X, ts, Y, grads);
        if (!std::isfinite(loss))
            throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
        result.loss_trace.push_back(loss);

        state.t += 1;
        for (int l = 0; l < net.n_layers(); ++l) {
            if (config.optimizer == Optimizer::adam) {
                detail::adam_update(net.weights[size_t(l)], grads.dW[size_t(l)],
                                    state.mW[size_t(l)], state.vW[size_t(l)], config.lr, state.t);
                detail::adam_update(net.biases[size_t(l)], grads.db[size_t(l)],
                                    state.mb[size_t(l)], state.vb[size_t(l)], config.lr, state.t);
            } else {
                detail::momentum_update(net.weights[size_t(l)], grads.dW[size_t(l)],
                                        state.mW[size_t(l)], config.lr);
                detail::momentum_update(net.biases[size_t(l)], grads.db[size_t(l)],
                                        state.mb[size_t(l)], config.lr);
            }
            if (config.kappa > 0.0) {
                net.weights[size_t(l)] =
                    net.weights[size_t(l)].cwiseMax(-config.kappa).cwiseMin(config.kappa);
                net.biases[size_t(l)] =
                    net.biases[size_t(l)].cwiseMax(-config.kappa).cwiseMin(config.kappa);
            }
        }
        if (config.v_mode == VMode::learned && config.lr > 0.0) {
            if (config.optimizer == Optimizer::adam)
                detail::adam_update(net.V, grads.dV, state.mV, state.vV, config.lr, state.t);
            else
                detail::momentum_update(net.V, grads.dV, state.mV, config.lr);
            detail::qr_retract(net.V);
        }
        if (callback && (step % callback_every == 0 || step + 1 == config.n_steps))
            callback(step, net, loss);
    }
    return result;
}

}  // namespace detail

// Minibatch denoising score matching with fresh noise: each step draws
// batch_size data rows with replacement and times_per_sample (t, X_t, target)
// triples per row. Learned V takes the Euclidean gradient step followed by
// QR retraction.
inline TrainResult train(ScoreNetwork& net, const MatrixXd& dataset, const TrainConfig& config,
                         const TimeSchedule& sched, const TrainCallback& callback = nullptr,
                         long callback_every = 100) {
    if (dataset.rows() < 1) throw std::invalid_argument("train: empty dataset");
    long rows = config.batch_size * config.times_per_sample;
    std::uniform_int_distribution<long> pick(0, dataset.rows() - 1);
    BatchFiller fill = [&](Rng& rng, MatrixXd& X, VectorXd& ts, MatrixXd& Y) {
        long r = 0;
        for (long b = 0; b < config.batch_size; ++b) {
            VectorXd x0 = dataset.row(pick(rng));
            for (long k = 0; k < config.times_per_sample; ++k, ++r) {
                double t = sample_training_time(sched, rng);
                VectorXd xt = forward_kernel_sample(sched, x0, t, rng);
                X.row(r) = xt;
                ts[r] = t;
                Y.row(r) = noise_score_target(sched, x0, xt, t);
            }
        }
    };
    return detail::train_loop(net, config, sched, rows, fill, callback, callback_every);
}

// Precomputed denoising tuples for a fixed dataset: times_per_sample
// (t, X_t, target) draws per data row, generated once. Training on a fixed
// tuple set is what exposes the sample-size dependence of the estimator.
struct DsmTuples {
    MatrixXd X;   // noised states
    VectorXd ts;  // times
    MatrixXd Y;   // conditional score targets
};

inline DsmTuples make_dsm_tuples(const MatrixXd& dataset, long times_per_sample,
                                 const TimeSchedule& sched, Rng& rng) {
    if (dataset.rows() < 1 || times_per_sample < 1)
        throw std::invalid_argument("make_dsm_tuples: empty dataset or count");
    long rows = dataset.rows() * times_per_sample;
    DsmTuples out;
    out.X.resize(rows, dataset.cols());
    out.Y.resize(rows, dataset.cols());
    out.ts.resize(rows);
    long r = 0;
    for (long i = 0; i < dataset.rows(); ++i) {
        VectorXd x0 = dataset.row(i);
        for (long k = 0; k < times_per_sample; ++k, ++r) {
            double t = sample_training_time(sched, rng);
            VectorXd xt = forward_kernel_sample(sched, x0, t, rng);
            out.X.row(r) = xt;
            out.ts[r] = t;
            out.Y.row(r) = noise_score_target(sched, x0, xt, t);
        }
    }
    return out;
}

// Minibatch training over a fixed tuple set (rows sampled with replacement).
inline TrainResult train_tuples(ScoreNetwork& net, const DsmTuples& tuples,
                                const TrainConfig& config, const TimeSchedule& sched,
                                const TrainCallback& callback = nullptr,
                                long callback_every = 100) {
    if (tuples.X.rows() < 1) throw std::invalid_argument("train_tuples: empty tuple set");
    long rows = config.batch_size * config.times_per_sample;
    std::uniform_int_distribution<long> pick(0, tuples.X.rows() - 1);
    BatchFiller fill = [&](Rng& rng, MatrixXd& X, VectorXd& ts, MatrixXd& Y) {
        for (long r = 0; r < rows; ++r) {
            long idx = pick(rng);
            X.row(r) = tuples.X.row(idx);
            ts[r] = tuples.ts[idx];
            Y.row(r) = tuples.Y.row(idx);
        }
    };
    return detail::train_loop(net, config, sched, rows, fill, callback, callback_every);
}

}  // namespace subdiff
