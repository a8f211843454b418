#include <catch2/catch_amalgamated.hpp>

#include "subdiff/constructive_approx.hpp"

using namespace subdiff;

namespace {

// scalar-valued smooth test target with known Lipschitz constants:
// spatial slope <= 2, time slope <= 1 on the whole domain
VectorXd wave_target(const VectorXd& z, double t) {
    double s = 0.0;
    for (long i = 0; i < z.size(); ++i) s += z[i];
    return VectorXd::Constant(1, std::sin(2.0 * s / std::sqrt(double(z.size()))) * std::cos(t));
}

double interior_sup_error(const GridApproximant& approx, const LatentField& target,
                          const TimeSchedule& sched, long n_probe, Rng& rng) {
    int d = approx.dim();
    double R = approx.radius();
    double cell_z = 2.0 * R / approx.n1();
    double cell_t = approx.horizon() / approx.n2();
    std::uniform_real_distribution<double> uz(-R + cell_z, R - cell_z);
    std::uniform_real_distribution<double> ut(std::max(sched.early_stop(), cell_t),
                                              approx.horizon() - cell_t);
    double sup = 0.0;
    for (long i = 0; i < n_probe; ++i) {
        VectorXd z(d);
        for (int k = 0; k < d; ++k) z[k] = uz(rng);
        double t = ut(rng);
        sup = std::max(sup, (approx.evaluate(z, t) - target(z, t)).norm());
    }
    return sup;
}

}  // namespace

TEST_CASE("trapezoid bump") {
    CHECK(trapezoid(0.0) == 1.0);
    CHECK(trapezoid(0.999) == 1.0);
    CHECK(trapezoid(-0.999) == 1.0);
    CHECK(trapezoid(1.5) == 0.5);
    CHECK(trapezoid(-1.5) == 0.5);
    CHECK(trapezoid(2.0) == 0.0);
    CHECK(trapezoid(-2.0) == 0.0);
    CHECK(trapezoid(3.7) == 0.0);
    // the four-ReLU identity realizing the bump
    auto relu = [](double a) { return std::max(a, 0.0); };
    for (double a = -3.0; a <= 3.0; a += 0.01) {
        double v = relu(a + 2.0) - relu(a + 1.0) - relu(a - 1.0) + relu(a - 2.0);
        CHECK(std::abs(v - trapezoid(a)) <= 1e-14);
    }
}

TEST_CASE("partition of unity away from the boundary") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    Rng rng(1);
    SECTION("d = 1") {
        GridApproximant approx(1, 2.0, 12, 8, 5.0, 1);
        CHECK(partition_of_unity_check(approx, 5000, rng) <= 1e-12);
    }
    SECTION("d = 2") {
        GridApproximant approx(2, 1.5, 9, 6, 5.0, 1);
        CHECK(partition_of_unity_check(approx, 5000, rng) <= 1e-12);
    }
}

TEST_CASE("exact reproduction cases") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    Rng rng(2);

    SECTION("constant target is reproduced in the interior") {
        auto constant = [](const VectorXd&, double) { return VectorXd::Constant(1, 3.25); };
        auto approx = build_approximant(constant, 2, 1, 1.5, 8, 6, sched);
        auto err = interior_sup_error(approx, constant, sched, 3000, rng);
        CHECK(err <= 1e-12);
    }

    SECTION("zero target yields the zero field everywhere") {
        auto zero = [](const VectorXd&, double) { return VectorXd::Zero(2); };
        auto approx = build_approximant(zero, 1, 2, 2.0, 10, 5, sched);
        Rng r2(3);
        std::uniform_real_distribution<double> u(-4.0, 4.0), ut(0.0, 5.0);
        for (int i = 0; i < 200; ++i) {
            VectorXd z = VectorXd::Constant(1, u(r2));
            CHECK(approx.evaluate(z, ut(r2)).norm() == 0.0);
        }
    }

    SECTION("interior cell centers interpolate exactly") {
        auto approx = build_approximant(wave_target, 1, 1, 2.0, 10, 8, sched);
        for (int mi = 2; mi < 8; ++mi)
            for (int j = 2; j < 6; ++j) {
                std::vector<int> m{mi};
                VectorXd z = approx.center_point(m);
                double t = approx.center_time(j);
                CHECK((approx.evaluate(z, t) - approx.center(m, j)).norm() <= 1e-12);
            }
    }

    SECTION("hard truncation outside the cube") {
        auto one = [](const VectorXd&, double) { return VectorXd::Constant(1, 1.0); };
        auto approx = build_approximant(one, 2, 1, 1.0, 6, 4, sched);
        VectorXd z(2);
        z << 1.01, 0.0;
        CHECK(approx.evaluate(z, 2.0).norm() == 0.0);
        z << 0.5, -3.0;
        CHECK(approx.evaluate(z, 2.0).norm() == 0.0);
    }
}

TEST_CASE("sup error within the Lipschitz budget") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    Rng rng(4);
    const double beta = 1.0;  // wave target: spatial slope 2 = 1 + beta

    for (int d : {1, 2}) {
        double R = 1.5;
        int N1 = d == 1 ? 24 : 12, N2 = 8;
        auto approx = build_approximant(wave_target, d, 1, R, N1, N2, sched);
        double tau_hat = measure_tau(wave_target, d, R, sched);
        CHECK(tau_hat <= 1.0 + 1e-6);
        double budget = approximation_error_budget(R, beta, d, sched.horizon(), tau_hat, N1, N2);
        double err = interior_sup_error(approx, wave_target, sched, 5000, rng);
        INFO("d=" << d << " err=" << err << " budget=" << budget);
        CHECK(err <= budget);
    }
}

TEST_CASE("doubling N1 roughly halves the spatial error") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    Rng rng(5);
    // time-independent target isolates the spatial term
    auto spatial = [](const VectorXd& z, double) {
        return VectorXd::Constant(1, std::sin(2.0 * z[0]));
    };
    double R = 1.5;
    int N2 = 4;
    auto coarse = build_approximant(spatial, 1, 1, R, 16, N2, sched);
    auto fine = build_approximant(spatial, 1, 1, R, 32, N2, sched);
    Rng r1(6), r2(6);
    double e_coarse = interior_sup_error(coarse, spatial, sched, 20000, r1);
    double e_fine = interior_sup_error(fine, spatial, sched, 20000, r2);
    INFO("coarse=" << e_coarse << " fine=" << e_fine);
    CHECK(e_fine <= 0.75 * e_coarse);
}

TEST_CASE("approximant Lipschitz constants stay within the class budget") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    Rng rng(7);
    const double beta = 1.0, tau = 1.0;

    for (int d : {1, 2}) {
        double R = 1.5;
        auto approx = build_approximant(wave_target, d, 1, R, d == 1 ? 20 : 10, 8, sched);
        double cell_z = 2.0 * R / approx.n1();
        auto field = [&](const VectorXd& z, double t) { return approx.evaluate(z, t); };
        // probe strictly inside so truncation discontinuities are not hit
        double cell_t = approx.horizon() / approx.n2();
        auto probe = lipschitz_probe(field, d, cell_t, approx.horizon() - cell_t, 3000,
                                     R - cell_z, rng);
        INFO("d=" << d << " gamma_hat=" << probe.gamma_hat
                  << " gamma_t_hat=" << probe.gamma_t_hat);
        CHECK(probe.gamma_hat <= 10.0 * d * (1.0 + beta));
        CHECK(probe.gamma_t_hat <= 10.0 * tau);
    }
}

TEST_CASE("measure_tau on known rates") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    auto linear_t = [](const VectorXd&, double t) { return VectorXd::Constant(1, 0.7 * t); };
    CHECK(measure_tau(linear_t, 1, 1.0, sched) == Catch::Approx(0.7).epsilon(1e-10));
    auto cos_t = [](const VectorXd&, double t) { return VectorXd::Constant(1, std::cos(3.0 * t)); };
    // sup |d/dt cos(3t)| = 3 on [0.1, 5]
    CHECK(measure_tau(cos_t, 1, 1.0, sched) == Catch::Approx(3.0).epsilon(1e-2));
}

TEST_CASE("ReLU compilation of a 1-D slice") {
    TimeSchedule sched(5.0, 0.1, 0.01);
    auto approx = build_approximant(wave_target, 1, 1, 2.0, 15, 8, sched);

    for (double t_slice : {0.5, 1.875, 3.3}) {
        ScoreNetwork net = compile_relu_1d(approx, t_slice);
        REQUIRE(net.n_layers() == 2);
        REQUIRE(net.weights[0].rows() == 60);  // 4 ReLU units per center
        Rng rng(8);
        std::uniform_real_distribution<double> uz(-2.0, 2.0);
        for (int i = 0; i < 10000; ++i) {
            VectorXd z = VectorXd::Constant(1, uz(rng));
            double compiled = mlp_forward(net, z, t_slice)[0];
            double reference = approx.evaluate(z, t_slice)[0];
            REQUIRE(std::abs(compiled - reference) <= 1e-10);
        }
        // the time input column is dead weight
        VectorXd z = VectorXd::Constant(1, 0.37);
        CHECK(mlp_forward(net, z, 0.0) == mlp_forward(net, z, 4.0));
    }

    SECTION("d = 2 refused") {
        GridApproximant a2(2, 1.0, 4, 4, 5.0, 1);
        CHECK_THROWS(compile_relu_1d(a2, 1.0));
    }
}

TEST_CASE("construction guards") {
    CHECK_THROWS(GridApproximant(1, 0.0, 4, 4, 5.0, 1));
    CHECK_THROWS(GridApproximant(1, 1.0, 0, 4, 5.0, 1));
    CHECK_THROWS(GridApproximant(3, 1.0, 500, 200, 5.0, 1));  // cell-count guard
}
