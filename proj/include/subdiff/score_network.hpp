#pragma once

#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <vector>

#include "subdiff/common.hpp"
#include "subdiff/time_schedule.hpp"

namespace subdiff {

// ReLU MLP hyperparameters. kappa / output_clip are optional projections
// (0 disables them); the Lipschitz budget of the theory class is tracked
// as a diagnostic, not enforced.
struct MlpConfig {
    int depth = 3;          // number of weight layers, >= 2
    int width = 64;         // hidden width
    double kappa = 0.0;     // max |entry| of weights/biases, 0 = unclipped
    double output_clip = 0.0;  // max ||f||_2, 0 = unclipped

    void validate() const {
        if (depth < 2) throw std::invalid_argument("MlpConfig: depth must be >= 2");
        if (width < 1) throw std::invalid_argument("MlpConfig: width must be >= 1");
        if (kappa < 0.0 || output_clip < 0.0)
            throw std::invalid_argument("MlpConfig: clips must be >= 0");
    }
};

enum class VMode { fixed, learned };
enum class VInit { identity_pad, random, oracle };

// Encoder-decoder score network
//   s_{V,theta}(x, t) = (1/h(t)) V f_theta(V^T x, t) - (1/h(t)) x
// with f_theta a plain ReLU MLP on [z; t]. The -x/h term is the skip
// connection; everything else lives in span(V).
struct ScoreNetwork {
    int D = 0;
    int d = 0;
    MatrixXd V;  // D x d, orthonormal columns
    std::vector<MatrixXd> weights;
    std::vector<VectorXd> biases;
    MlpConfig config;
    VMode v_mode = VMode::fixed;

    int n_layers() const { return int(weights.size()); }
};

inline ScoreNetwork init_network(int D, int d, const MlpConfig& config, VInit v_init, Rng& rng,
                                 const MatrixXd* oracle_A = nullptr,
                                 VMode v_mode = VMode::fixed) {
    config.validate();
    ScoreNetwork net;
    net.D = D;
    net.d = d;
    net.config = config;
    net.v_mode = v_mode;
    switch (v_init) {
        case VInit::identity_pad:
            net.V = MatrixXd::Identity(D, d);
            break;
        case VInit::random: {
            MatrixXd G = gaussian_matrix(D, d, rng);
            Eigen::HouseholderQR<MatrixXd> qr(G);
            net.V = qr.householderQ() * MatrixXd::Identity(D, d);
            break;
        }
        case VInit::oracle:
            if (!oracle_A) throw std::invalid_argument("init_network: oracle A not provided");
            net.V = *oracle_A;
            break;
    }
    int in_dim = d + 1;  // [z; t]
    for (int l = 0; l < config.depth; ++l) {
        int fan_in = l == 0 ? in_dim : config.width;
        int fan_out = l == config.depth - 1 ? d : config.width;
        double scale = std::sqrt(2.0 / double(fan_in));  // He init
        net.weights.push_back(scale * gaussian_matrix(fan_out, fan_in, rng));
        net.biases.push_back(VectorXd::Zero(fan_out));
    }
    return net;
}

// f_theta forward on a single [z; t] input, with optional output-norm clip.
inline VectorXd mlp_forward(const ScoreNetwork& net, const VectorXd& z, double t) {
    VectorXd u(net.d + 1);
    u.head(net.d) = z;
    u[net.d] = t;
    for (int l = 0; l < net.n_layers(); ++l) {
        u = net.weights[size_t(l)] * u + net.biases[size_t(l)];
        if (l + 1 < net.n_layers()) u = u.cwiseMax(0.0);
    }
    double K = net.config.output_clip;
    if (K > 0.0) {
        double norm = u.norm();
        if (norm > K) u *= K / norm;
    }
    return u;
}

inline VectorXd eval_score(const ScoreNetwork& net, const TimeSchedule& sched,
                           const VectorXd& x, double t) {
    if (!sched.in_training_window(t))
        throw std::domain_error("eval_score: t outside [t0, T]");
    double h = sched.h(t);
    VectorXd f = mlp_forward(net, net.V.transpose() * x, t);
    return (net.V * f - x) / h;
}

struct NetworkGrads {
    std::vector<MatrixXd> dW;
    std::vector<VectorXd> db;
    MatrixXd dV;  // Euclidean gradient; caller projects/retracts for learned V

    void scale(double c) {
        for (auto& m : dW) m *= c;
        for (auto& v : db) v *= c;
        dV *= c;
    }
};

inline NetworkGrads zero_grads(const ScoreNetwork& net) {
    NetworkGrads g;
    for (const auto& w : net.weights) g.dW.push_back(MatrixXd::Zero(w.rows(), w.cols()));
    for (const auto& b : net.biases) g.db.push_back(VectorXd::Zero(b.size()));
    g.dV = MatrixXd::Zero(net.D, net.d);
    return g;
}

// Batched forward + exact backward of the mean squared residual
//   (1/n) sum_i || s_{V,theta}(x_i, t_i) - y_i ||^2.
// Rows of X are inputs, ts the per-row times, rows of Y the targets.
// Returns the loss; accumulates gradients for theta and (Euclidean) V.
inline double batch_loss_and_grads(const ScoreNetwork& net, const TimeSchedule& sched,
                                   const MatrixXd& X, const VectorXd& ts, const MatrixXd& Y,
                                   NetworkGrads& grads) {
    long n = X.rows();
    if (n < 1) throw std::invalid_argument("batch_loss_and_grads: empty batch");
    int L = net.n_layers();

    // forward, storing pre-clip outputs and hidden activations
    MatrixXd Z = X * net.V;  // n x d
    std::vector<MatrixXd> acts;  // acts[l] = input to layer l, n x dim
    MatrixXd U(n, net.d + 1);
    U.leftCols(net.d) = Z;
    U.col(net.d) = ts;
    acts.push_back(U);
    for (int l = 0; l < L; ++l) {
        MatrixXd out = (acts.back() * net.weights[size_t(l)].transpose()).rowwise() +
                       net.biases[size_t(l)].transpose();
        if (l + 1 < L) out = out.cwiseMax(0.0);
        acts.push_back(out);
    }
    MatrixXd F_raw = acts.back();  // n x d, pre-clip
    MatrixXd F = F_raw;
    double K = net.config.output_clip;
    std::vector<double> clip_scale(size_t(n), 1.0);
    if (K > 0.0) {
        for (long i = 0; i < n; ++i) {
            double norm = F_raw.row(i).norm();
            if (norm > K) {
                clip_scale[size_t(i)] = K / norm;
                F.row(i) *= clip_scale[size_t(i)];
            }
        }
    }

    // residuals and loss
    VectorXd inv_h(n);
    for (long i = 0; i < n; ++i) inv_h[i] = 1.0 / sched.h(ts[i]);
    MatrixXd S = (((F * net.V.transpose()) - X).array().colwise() * inv_h.array()).matrix();
    MatrixXd Resid = S - Y;
    double loss = Resid.squaredNorm() / double(n);

    // cotangent on clipped f: gF = (2/n) (1/h_i) r_i^T V
    MatrixXd gF = (Resid.array().colwise() * inv_h.array()).matrix() * net.V * (2.0 / double(n));

    // gradient of V: (2/n)(1/h_i) r_i f_i^T summed, plus the encoder path below
    grads.dV += (Resid.array().colwise() * inv_h.array()).matrix().transpose() * F *
                (2.0 / double(n));

    // through the norm clip: J = c (I - fhat fhat^T) where active
    if (K > 0.0) {
        for (long i = 0; i < n; ++i) {
            double c = clip_scale[size_t(i)];
            if (c < 1.0) {
                VectorXd fr = F_raw.row(i);
                double norm2 = fr.squaredNorm();
                VectorXd g = gF.row(i);
                gF.row(i) = (c * (g - fr * (fr.dot(g) / norm2))).transpose();
            }
        }
    }

    // MLP backward
    MatrixXd delta = gF;  // n x fan_out of last layer
    for (int l = L - 1; l >= 0; --l) {
        const MatrixXd& input = acts[size_t(l)];
        grads.dW[size_t(l)] += delta.transpose() * input;
        grads.db[size_t(l)] += delta.colwise().sum().transpose();
        if (l > 0) {
            MatrixXd back = delta * net.weights[size_t(l)];
            // ReLU mask from the stored post-activation
            delta = ((acts[size_t(l)].array() > 0.0).cast<double>() * back.array()).matrix();
        } else {
            delta = delta * net.weights[0];  // n x (d+1), input gradient
        }
    }

    // encoder path of dV: x_i g_{z,i}^T
    grads.dV += X.transpose() * delta.leftCols(net.d);
    return loss;
}

// Convenience wrapper matching the single-batch gradient contract.
inline NetworkGrads backprop(const ScoreNetwork& net, const TimeSchedule& sched,
                             const MatrixXd& X, const VectorXd& ts, const MatrixXd& Y,
                             double* loss_out = nullptr) {
    NetworkGrads g = zero_grads(net);
    double loss = batch_loss_and_grads(net, sched, X, ts, Y, g);
    if (loss_out) *loss_out = loss;
    return g;
}

struct LipschitzProbe {
    double gamma_hat;    // spatial Lipschitz lower bound
    double gamma_t_hat;  // temporal Lipschitz lower bound
};

// Empirical Lipschitz estimates of a latent-space field f(z, t) by random
// pair ratios and finite differences. Lower bounds of the true constants.
inline LipschitzProbe lipschitz_probe(
    const std::function<VectorXd(const VectorXd&, double)>& f, int d, double t_lo, double t_hi,
    long n_pairs, double radius, Rng& rng) {
    double gamma = 0.0, gamma_t = 0.0;
    std::uniform_real_distribution<double> ut(t_lo, t_hi);
    std::uniform_real_distribution<double> ux(-radius, radius);
    const double fd = 1e-5;
    for (long i = 0; i < n_pairs; ++i) {
        VectorXd z1(d), z2(d);
        for (int k = 0; k < d; ++k) {
            z1[k] = ux(rng);
            z2[k] = ux(rng);
        }
        double t = ut(rng);
        double dz = (z1 - z2).norm();
        if (dz > 1e-12)
            gamma = std::max(gamma, (f(z1, t) - f(z2, t)).norm() / dz);
        // finite-difference probes around z1
        VectorXd dir = gaussian_vector(d, rng);
        dir.normalize();
        gamma = std::max(gamma, (f(z1 + fd * dir, t) - f(z1 - fd * dir, t)).norm() / (2.0 * fd));
        double t_plus = std::min(t + fd, t_hi), t_minus = std::max(t - fd, t_lo);
        if (t_plus > t_minus)
            gamma_t = std::max(gamma_t, (f(z1, t_plus) - f(z1, t_minus)).norm() / (t_plus - t_minus));
    }
    return {gamma, gamma_t};
}

inline LipschitzProbe lipschitz_probe(const ScoreNetwork& net, double t_lo, double t_hi,
                                      long n_pairs, double radius, Rng& rng) {
    auto f = [&net](const VectorXd& z, double t) { return mlp_forward(net, z, t); };
    return lipschitz_probe(f, net.d, t_lo, t_hi, n_pairs, radius, rng);
}

// Checkpoint format: 8-byte little-endian header length, JSON header with
// dims and config, then all parameters as little-endian doubles in order
// V (row-major), then W_l (row-major), b_l per layer.
inline void save_checkpoint(const ScoreNetwork& net, const std::string& path) {
    nlohmann::json header;
    header["D"] = net.D;
    header["d"] = net.d;
    header["depth"] = net.config.depth;
    header["width"] = net.config.width;
    header["kappa"] = net.config.kappa;
    header["output_clip"] = net.config.output_clip;
    header["v_mode"] = net.v_mode == VMode::fixed ? "fixed" : "learned";
    std::string hs = header.dump();

    std::vector<double> blob;
    for (int i = 0; i < net.D; ++i)
        for (int j = 0; j < net.d; ++j) blob.push_back(net.V(i, j));
    for (int l = 0; l < net.n_layers(); ++l) {
        const MatrixXd& W = net.weights[size_t(l)];
        for (long i = 0; i < W.rows(); ++i)
            for (long j = 0; j < W.cols(); ++j) blob.push_back(W(i, j));
        const VectorXd& b = net.biases[size_t(l)];
        blob.insert(blob.end(), b.begin(), b.end());
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    std::uint64_t len = hs.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(hs.data(), std::streamsize(hs.size()));
    out.write(reinterpret_cast<const char*>(blob.data()),
              std::streamsize(blob.size() * sizeof(double)));
}

inline ScoreNetwork load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string hs(len, '\0');
    in.read(hs.data(), std::streamsize(len));
    nlohmann::json header = nlohmann::json::parse(hs);

    ScoreNetwork net;
    net.D = header.at("D");
    net.d = header.at("d");
    net.config.depth = header.at("depth");
    net.config.width = header.at("width");
    net.config.kappa = header.at("kappa");
    net.config.output_clip = header.at("output_clip");
    net.v_mode = header.at("v_mode") == "fixed" ? VMode::fixed : VMode::learned;

    auto read_doubles = [&in](long count) {
        std::vector<double> v(static_cast<size_t>(count), 0.0);
        in.read(reinterpret_cast<char*>(v.data()), std::streamsize(size_t(count) * sizeof(double)));
        if (!in) throw std::runtime_error("load_checkpoint: truncated blob");
        return v;
    };
    {
        auto v = read_doubles(long(net.D) * net.d);
        net.V.resize(net.D, net.d);
        for (int i = 0; i < net.D; ++i)
            for (int j = 0; j < net.d; ++j) net.V(i, j) = v[size_t(i) * size_t(net.d) + size_t(j)];
    }
    int in_dim = net.d + 1;
    for (int l = 0; l < net.config.depth; ++l) {
        int fan_in = l == 0 ? in_dim : net.config.width;
        int fan_out = l == net.config.depth - 1 ? net.d : net.config.width;
        auto wv = read_doubles(long(fan_out) * fan_in);
        MatrixXd W(fan_out, fan_in);
        for (int i = 0; i < fan_out; ++i)
            for (int j = 0; j < fan_in; ++j) W(i, j) = wv[size_t(i) * size_t(fan_in) + size_t(j)];
        net.weights.push_back(W);
        auto bv = read_doubles(fan_out);
        net.biases.push_back(Eigen::Map<VectorXd>(bv.data(), fan_out));
    }
    return net;
}

}  // namespace subdiff
