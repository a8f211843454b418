#pragma once

#include <functional>
#include <vector>

#include "subdiff/common.hpp"
#include "subdiff/score_network.hpp"
#include "subdiff/time_schedule.hpp"

namespace subdiff {

// Unit trapezoid bump: 1 on |a| < 1, linear ramp to 0 on 1 <= |a| <= 2.
inline double trapezoid(double a) {
    double abs_a = std::abs(a);
    if (abs_a < 1.0) return 1.0;
    if (abs_a <= 2.0) return 2.0 - abs_a;
    return 0.0;
}

using LatentField = std::function<VectorXd(const VectorXd&, double)>;

// Grid interpolant on [-R, R]^d x [0, T]: stores the target at the cell
// centers (2R m/N1 - R, T j/N2) and evaluates the partition-of-unity blend
//   f(y', t') = sum_{m,j} g(center_{m,j}) psi(3 N2 (t' - j/N2))
//               prod_i psi(3 N1 (y'_i - m_i/N1))
// in rescaled coordinates y' = (z + R)/(2R), t' = t/T. Evaluates to zero
// whenever ||z||_inf > R.
class GridApproximant {
  public:
    GridApproximant(int d, double R, int N1, int N2, double T, int out_dim)
        : d_(d), R_(R), N1_(N1), N2_(N2), T_(T), out_dim_(out_dim) {
        if (N1 < 1 || N2 < 1 || R <= 0.0)
            throw std::invalid_argument("GridApproximant: need N1, N2 >= 1 and R > 0");
        long cells = N2_;
        for (int i = 0; i < d_; ++i) {
            cells *= N1_;
            if (cells > 10000000L)
                throw std::invalid_argument("GridApproximant: grid exceeds 1e7 cells");
        }
        centers_.assign(size_t(cells), VectorXd::Zero(out_dim_));
    }

    int dim() const { return d_; }
    int out_dim() const { return out_dim_; }
    double radius() const { return R_; }
    int n1() const { return N1_; }
    int n2() const { return N2_; }
    double horizon() const { return T_; }

    VectorXd& center(const std::vector<int>& m, int j) { return centers_[flat(m, j)]; }
    const VectorXd& center(const std::vector<int>& m, int j) const { return centers_[flat(m, j)]; }

    VectorXd center_point(const std::vector<int>& m) const {
        VectorXd z(d_);
        for (int i = 0; i < d_; ++i) z[i] = 2.0 * R_ * double(m[size_t(i)]) / N1_ - R_;
        return z;
    }
    double center_time(int j) const { return T_ * double(j) / N2_; }

    VectorXd evaluate(const VectorXd& z, double t) const {
        VectorXd out;
        double wsum;
        accumulate(z, t, out, wsum);
        return out;
    }

    // Sum of all Psi_{m,j} at a point; equals 1 away from the grid boundary.
    double partition_sum(const VectorXd& z, double t) const {
        VectorXd out;
        double wsum;
        accumulate(z, t, out, wsum);
        return wsum;
    }

  private:
    size_t flat(const std::vector<int>& m, int j) const {
        long idx = j;
        for (int i = 0; i < d_; ++i) idx = idx * N1_ + m[size_t(i)];
        return size_t(idx);
    }

    void accumulate(const VectorXd& z, double t, VectorXd& out, double& wsum) const {
        out = VectorXd::Zero(out_dim_);
        wsum = 0.0;
        if (z.lpNorm<Eigen::Infinity>() > R_) return;  // hard truncation outside the cube
        VectorXd y = (z.array() + R_) / (2.0 * R_);
        double tp = t / T_;

        // per-axis candidate centers: the bump support radius is 2/(3N)
        std::vector<std::vector<std::pair<int, double>>> axis(size_t(d_) + 1);
        for (int i = 0; i < d_; ++i) {
            int base = int(std::floor(y[i] * N1_));
            for (int m = base - 1; m <= base + 1; ++m) {
                if (m < 0 || m >= N1_) continue;
                double w = trapezoid(3.0 * N1_ * (y[i] - double(m) / N1_));
                if (w > 0.0) axis[size_t(i)].push_back({m, w});
            }
        }
        {
            int base = int(std::floor(tp * N2_));
            for (int j = base - 1; j <= base + 1; ++j) {
                if (j < 0 || j >= N2_) continue;
                double w = trapezoid(3.0 * N2_ * (tp - double(j) / N2_));
                if (w > 0.0) axis[size_t(d_)].push_back({j, w});
            }
        }
        for (int i = 0; i <= d_; ++i)
            if (axis[size_t(i)].empty()) return;

        std::vector<int> pick(size_t(d_) + 1, 0);
        std::vector<int> m(size_t(d_), 0);
        while (true) {
            double w = 1.0;
            for (int i = 0; i <= d_; ++i) w *= axis[size_t(i)][size_t(pick[size_t(i)])].second;
            for (int i = 0; i < d_; ++i) m[size_t(i)] = axis[size_t(i)][size_t(pick[size_t(i)])].first;
            int j = axis[size_t(d_)][size_t(pick[size_t(d_)])].first;
            out += w * centers_[flat(m, j)];
            wsum += w;
            int i = 0;
            for (; i <= d_; ++i) {
                if (++pick[size_t(i)] < int(axis[size_t(i)].size())) break;
                pick[size_t(i)] = 0;
            }
            if (i > d_) break;
        }
    }

    int d_;
    double R_;
    int N1_, N2_;
    double T_;
    int out_dim_;
    std::vector<VectorXd> centers_;
};

inline GridApproximant build_approximant(const LatentField& target, int d, int out_dim,
                                         double R, int N1, int N2, const TimeSchedule& sched) {
    GridApproximant approx(d, R, N1, N2, sched.horizon(), out_dim);
    std::vector<int> m(size_t(d), 0);
    while (true) {
        VectorXd z = approx.center_point(m);
        for (int j = 0; j < N2; ++j) {
            double t = std::clamp(approx.center_time(j), sched.early_stop(), sched.horizon());
            approx.center(m, j) = target(z, t);
        }
        int i = 0;
        for (; i < d; ++i) {
            if (++m[size_t(i)] < N1) break;
            m[size_t(i)] = 0;
        }
        if (i == d) break;
    }
    return approx;
}

// Max |sum Psi - 1| over random probe points at least one cell away from
// every boundary of the rescaled domain.
inline double partition_of_unity_check(const GridApproximant& approx, long n_points, Rng& rng) {
    int d = approx.dim();
    double R = approx.radius();
    double cell_z = 2.0 * R / approx.n1();
    double cell_t = approx.horizon() / approx.n2();
    std::uniform_real_distribution<double> uz(-R + cell_z, R - cell_z);
    std::uniform_real_distribution<double> ut(cell_t, approx.horizon() - cell_t);
    double max_dev = 0.0;
    for (long i = 0; i < n_points; ++i) {
        VectorXd z(d);
        for (int k = 0; k < d; ++k) z[k] = uz(rng);
        max_dev = std::max(max_dev, std::abs(approx.partition_sum(z, ut(rng)) - 1.0));
    }
    return max_dev;
}

// Largest finite-difference time derivative of the target over a probe
// grid; the measured stand-in for the time Lipschitz constant.
inline double measure_tau(const LatentField& target, int d, double R,
                          const TimeSchedule& sched, int n_space = 9, int n_time = 17) {
    double tau = 0.0;
    double fd = 1e-4;
    std::vector<int> idx(size_t(d), 0);
    while (true) {
        VectorXd z(d);
        for (int i = 0; i < d; ++i)
            z[i] = -R + 2.0 * R * double(idx[size_t(i)]) / double(n_space - 1);
        for (int q = 0; q < n_time; ++q) {
            double t = sched.early_stop() +
                       (sched.horizon() - sched.early_stop()) * double(q) / double(n_time - 1);
            double lo = std::max(t - fd, sched.early_stop());
            double hi = std::min(t + fd, sched.horizon());
            tau = std::max(tau, (target(z, hi) - target(z, lo)).norm() / (hi - lo));
        }
        int i = 0;
        for (; i < d; ++i) {
            if (++idx[size_t(i)] < n_space) break;
            idx[size_t(i)] = 0;
        }
        if (i == d) break;
    }
    return tau;
}

// The proof's sup-error budget for a (1+beta)-Lipschitz-in-z,
// tau-Lipschitz-in-t target.
inline double approximation_error_budget(double R, double beta, int d, double T, double tau,
                                         int N1, int N2) {
    return 2.0 * R * (1.0 + beta) * std::sqrt(double(d)) / double(N1) + T * tau / double(N2) +
           1e-9;
}

// Compile a fixed-t slice of a 1-D approximant to literal ReLU layers,
// realizing each trapezoid as sigma(a+2) - sigma(a+1) - sigma(a-1) + sigma(a-2).
// The result is a depth-2 ScoreNetwork f with d = 1 whose time input is
// ignored; it matches the slice exactly on [-R, R].
inline ScoreNetwork compile_relu_1d(const GridApproximant& approx, double t_slice) {
    if (approx.dim() != 1)
        throw std::invalid_argument("compile_relu_1d: only d = 1 is ReLU-exact");
    int N1 = approx.n1();
    double R = approx.radius();
    double tp = t_slice / approx.horizon();

    // per-center coefficient: time bumps blended into the slice
    std::vector<double> coeff(size_t(N1), 0.0);
    std::vector<int> m(1);
    for (int mi = 0; mi < N1; ++mi) {
        m[0] = mi;
        for (int j = 0; j < approx.n2(); ++j) {
            double wt = trapezoid(3.0 * approx.n2() * (tp - double(j) / approx.n2()));
            if (wt > 0.0) coeff[size_t(mi)] += wt * approx.center(m, j)[0];
        }
    }

    ScoreNetwork net;
    net.D = 1;
    net.d = 1;
    net.V = MatrixXd::Identity(1, 1);
    net.config.depth = 2;
    net.config.width = 4 * N1;
    net.v_mode = VMode::fixed;

    double w_in = 3.0 * N1 / (2.0 * R);  // slope of a(z) = 3 N1 (y' - m/N1)
    const double offsets[4] = {2.0, 1.0, -1.0, -2.0};
    const double signs[4] = {1.0, -1.0, -1.0, 1.0};
    MatrixXd W0 = MatrixXd::Zero(4 * N1, 2);  // input [z; t], time column zero
    VectorXd b0(4 * N1);
    MatrixXd W1 = MatrixXd::Zero(1, 4 * N1);
    for (int mi = 0; mi < N1; ++mi) {
        double c_m = 1.5 * N1 - 3.0 * mi;  // a(z) = w_in z + c_m
        for (int q = 0; q < 4; ++q) {
            int row = 4 * mi + q;
            W0(row, 0) = w_in;
            b0[row] = c_m + offsets[q];
            W1(0, row) = signs[q] * coeff[size_t(mi)];
        }
    }
    net.weights = {W0, W1};
    net.biases = {b0, VectorXd::Zero(1)};
    return net;
}

}  // namespace subdiff
