#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace subdiff {

using Eigen::MatrixXd;
using Eigen::VectorXd;

using Rng = std::mt19937_64;

inline double standard_normal(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

inline VectorXd gaussian_vector(int n, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
}

inline MatrixXd gaussian_matrix(int rows, int cols, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

// Derive an independent stream for parallel/per-item work from a base seed.
inline Rng split_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{seed, index, std::uint64_t(0x9e3779b97f4a7c15ULL)};
    return Rng(seq);
}

struct MeanStderr {
    double mean = 0.0;
    double se = 0.0;
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean_stderr: empty sample");
    double sum = 0.0;
    for (double x : xs) sum += x;
    double mean = sum / double(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    double var = xs.size() > 1 ? ss / double(xs.size() - 1) : 0.0;
    return {mean, std::sqrt(var / double(xs.size()))};
}

}  // namespace subdiff
