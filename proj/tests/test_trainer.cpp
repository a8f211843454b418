#include <catch2/catch_amalgamated.hpp>

#include "subdiff/trainer.hpp"

using namespace subdiff;

namespace {

SubspaceModel simple_model(int D, int d, double var, std::uint64_t seed) {
    Rng rng(seed);
    return SubspaceModel::random(D, d, LatentDistribution::diag_gaussian(
                                           VectorXd::Constant(d, var)), rng);
}

// (1/(T-t0)) int [ d/h(t) - sum_k 1/(alpha^2 lambda_k^2 + h) ] dt by trapezoid;
// the exact mean denoising loss of the true score for a Gaussian model
double oracle_loss_floor(const SubspaceModel& model, const TimeSchedule& sched) {
    const int n = 20001;
    double t0 = sched.early_stop(), T = sched.horizon();
    double step = (T - t0) / double(n - 1);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double t = t0 + step * i;
        auto [a, h] = sched.alpha_h(t);
        double val = double(model.d) / h;
        for (int k = 0; k < model.d; ++k)
            val -= 1.0 / (a * a * model.latent.variances[k] + h);
        acc += (i == 0 || i == n - 1 ? 0.5 : 1.0) * val;
    }
    return acc * step / (T - t0);
}

}  // namespace

TEST_CASE("training time sampler") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    Rng rng(1);
    const long n = 100000;
    double lo = 1e9, hi = -1e9, mean = 0.0;
    for (long i = 0; i < n; ++i) {
        double t = sample_training_time(sched, rng);
        lo = std::min(lo, t);
        hi = std::max(hi, t);
        mean += t / double(n);
    }
    CHECK(lo >= 0.1);
    CHECK(hi <= 5.0);
    CHECK(lo <= 0.11);   // support actually reaches the ends
    CHECK(hi >= 4.99);
    double se = (5.0 - 0.1) / std::sqrt(12.0 * double(n));
    CHECK(std::abs(mean - 2.55) <= 4.0 * se);
}

TEST_CASE("denoising loss estimator") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    auto model = simple_model(4, 2, 1.0, 2);
    Rng rng(3);
    MatrixXd data = sample_data(model, 200, rng);

    SECTION("score fed the conditional truth has exactly zero loss") {
        // the estimator passes the row index, so the closure can recover x0
        auto cheating = [&](const VectorXd& xt, double t, long i) {
            return noise_score_target(sched, VectorXd(data.row(i)), xt, t);
        };
        auto est = dsm_loss(cheating, data, sched, 8, rng);
        CHECK(est.mean == 0.0);
        CHECK(est.se == 0.0);
    }

    SECTION("true score sits on the analytic loss floor") {
        auto truth = [&](const VectorXd& xt, double t) {
            return oracle_score(model, sched, t, xt).total();
        };
        auto est = dsm_loss(truth, data, sched, 400, rng);
        double floor = oracle_loss_floor(model, sched);
        CHECK(std::abs(est.mean - floor) <= 4.0 * est.se);
    }

    SECTION("standard error shrinks with more data points") {
        auto zero_score = [&](const VectorXd& xt, double t) {
            return VectorXd(-xt / sched.h(t));
        };
        Rng r1(4), r2(4);
        MatrixXd small = sample_data(model, 100, r1);
        MatrixXd large = sample_data(model, 1600, r1);
        auto e_small = dsm_loss(zero_score, small, sched, 20, r2);
        auto e_large = dsm_loss(zero_score, large, sched, 20, r2);
        CHECK(e_large.se <= 0.8 * e_small.se);  // expected factor 1/4
    }
}

TEST_CASE("loss equivalence gap") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    auto model = simple_model(4, 2, 1.0, 5);
    Rng rng(6);

    SECTION("identical networks give an exactly zero gap") {
        ScoreNetwork net = init_network(4, 2, {3, 16}, VInit::random, rng);
        auto gap = loss_equivalence_gap(net, net, model, sched, 200, 4, rng);
        CHECK(gap.gap_dsm == 0.0);
        CHECK(gap.gap_explicit == 0.0);
    }

    SECTION("gap between two random networks agrees under both losses") {
        ScoreNetwork a = init_network(4, 2, {3, 16}, VInit::random, rng);
        ScoreNetwork b = init_network(4, 2, {3, 16}, VInit::random, rng);
        auto gap = loss_equivalence_gap(a, b, model, sched, 4000, 4, rng);
        double se = std::sqrt(gap.gap_dsm_se * gap.gap_dsm_se +
                              gap.gap_explicit_se * gap.gap_explicit_se);
        CHECK(std::abs(gap.gap_dsm - gap.gap_explicit) <= 5.0 * se);
        // and the gap itself is nonzero for distinct networks
        CHECK(std::abs(gap.gap_dsm) > 0.0);
    }
}

TEST_CASE("optimizer wiring") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    auto model = simple_model(4, 2, 1.0, 7);
    Rng rng(8);
    MatrixXd data = sample_data(model, 256, rng);

    SECTION("lr = 0 leaves every parameter untouched") {
        ScoreNetwork net = init_network(4, 2, {3, 8}, VInit::random, rng);
        ScoreNetwork before = net;
        TrainConfig cfg;
        cfg.n_steps = 10;
        cfg.batch_size = 8;
        cfg.times_per_sample = 2;
        cfg.lr = 0.0;
        train(net, data, cfg, sched);
        CHECK((net.V - before.V).norm() == 0.0);
        for (int l = 0; l < net.n_layers(); ++l) {
            CHECK((net.weights[size_t(l)] - before.weights[size_t(l)]).norm() == 0.0);
            CHECK((net.biases[size_t(l)] - before.biases[size_t(l)]).norm() == 0.0);
        }
    }

    SECTION("one momentum step equals a hand-computed gradient step") {
        ScoreNetwork net = init_network(4, 2, {2, 8}, VInit::random, rng);
        ScoreNetwork copy = net;
        TrainConfig cfg;
        cfg.n_steps = 1;
        cfg.batch_size = 4;
        cfg.times_per_sample = 2;
        cfg.lr = 0.01;
        cfg.optimizer = Optimizer::sgd_momentum;
        cfg.seed = 42;
        train(net, data, cfg, sched);

        // replay the exact batch construction
        Rng replay = split_rng(42, 0x7261696eULL);
        std::uniform_int_distribution<long> pick(0, data.rows() - 1);
        long rows = cfg.batch_size * cfg.times_per_sample;
        MatrixXd X(rows, 4), Y(rows, 4);
        VectorXd ts(rows);
        long r = 0;
        for (long b = 0; b < cfg.batch_size; ++b) {
            VectorXd x0 = data.row(pick(replay));
            for (long k = 0; k < cfg.times_per_sample; ++k, ++r) {
                double t = sample_training_time(sched, replay);
                VectorXd xt = forward_kernel_sample(sched, x0, t, replay);
                X.row(r) = xt;
                ts[r] = t;
                Y.row(r) = noise_score_target(sched, x0, xt, t);
            }
        }
        NetworkGrads g = backprop(copy, sched, X, ts, Y);
        for (int l = 0; l < net.n_layers(); ++l) {
            MatrixXd expected = copy.weights[size_t(l)] - cfg.lr * g.dW[size_t(l)];
            CHECK((net.weights[size_t(l)] - expected).norm() <= 1e-12);
        }
    }

    SECTION("weight clip is enforced after each step") {
        ScoreNetwork net = init_network(4, 2, {2, 8}, VInit::random, rng);
        TrainConfig cfg;
        cfg.n_steps = 5;
        cfg.batch_size = 8;
        cfg.times_per_sample = 2;
        cfg.lr = 0.05;
        cfg.kappa = 0.2;
        train(net, data, cfg, sched);
        for (int l = 0; l < net.n_layers(); ++l) {
            CHECK(net.weights[size_t(l)].lpNorm<Eigen::Infinity>() <= 0.2);
            CHECK(net.biases[size_t(l)].lpNorm<Eigen::Infinity>() <= 0.2);
        }
    }

    SECTION("divergence aborts with a step-indexed error") {
        ScoreNetwork net = init_network(4, 2, {3, 8}, VInit::random, rng);
        TrainConfig cfg;
        cfg.n_steps = 500;
        cfg.batch_size = 8;
        cfg.times_per_sample = 2;
        cfg.lr = 100.0;
        cfg.optimizer = Optimizer::sgd_momentum;
        CHECK_THROWS_AS(train(net, data, cfg, sched), std::runtime_error);
    }

    SECTION("bad inputs rejected") {
        ScoreNetwork net = init_network(4, 2, {2, 4}, VInit::random, rng);
        TrainConfig cfg;
        cfg.n_steps = 0;
        CHECK_THROWS(train(net, data, cfg, sched));
        TrainConfig ok;
        CHECK_THROWS(train(net, MatrixXd(0, 4), ok, sched));
    }
}

TEST_CASE("learned V stays orthonormal through training") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    auto model = simple_model(6, 2, 1.0, 9);
    Rng rng(10);
    MatrixXd data = sample_data(model, 512, rng);
    ScoreNetwork net = init_network(6, 2, {3, 16}, VInit::random, rng, nullptr, VMode::learned);
    MatrixXd v0 = net.V;
    TrainConfig cfg;
    cfg.n_steps = 50;
    cfg.batch_size = 16;
    cfg.times_per_sample = 2;
    cfg.lr = 5e-3;
    cfg.v_mode = VMode::learned;
    cfg.seed = 11;
    train(net, data, cfg, sched);
    CHECK((net.V.transpose() * net.V - MatrixXd::Identity(2, 2)).norm() <= 1e-10);
    CHECK((net.V - v0).norm() > 1e-6);  // it actually moved
}

TEST_CASE("training reduces both losses") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    auto model = simple_model(4, 1, 1.0, 12);
    Rng rng(13);
    MatrixXd data = sample_data(model, 2048, rng);
    ScoreNetwork net = init_network(4, 1, {3, 32}, VInit::oracle, rng, &model.A);

    auto field = [&](const VectorXd& x, double t) { return eval_score(net, sched, x, t); };
    Rng eval_rng(14);
    double explicit_before = explicit_score_loss(field, model, sched, 400, 4, eval_rng).mean;

    TrainConfig cfg;
    cfg.n_steps = 800;
    cfg.batch_size = 64;
    cfg.times_per_sample = 4;
    cfg.lr = 2e-3;
    cfg.seed = 15;
    TrainResult res = train(net, data, cfg, sched);

    REQUIRE(long(res.loss_trace.size()) == cfg.n_steps);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 50; ++i) {
        head += res.loss_trace[size_t(i)] / 50.0;
        tail += res.loss_trace[res.loss_trace.size() - 1 - size_t(i)] / 50.0;
    }
    CHECK(tail < head);

    Rng eval_rng2(14);
    double explicit_after = explicit_score_loss(field, model, sched, 400, 4, eval_rng2).mean;
    INFO("explicit before=" << explicit_before << " after=" << explicit_after);
    CHECK(explicit_after < 0.5 * explicit_before);

    // the denoising loss approaches the analytic floor from above
    Rng eval_rng3(16);
    auto dsm_after = dsm_loss(net, data, sched, 50, eval_rng3);
    double floor = oracle_loss_floor(model, sched);
    CHECK(dsm_after.mean >= floor - 4.0 * dsm_after.se);
}
