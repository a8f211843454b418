#include <catch2/catch_amalgamated.hpp>

#include "subdiff/eval_metrics.hpp"

using namespace subdiff;

namespace {

MatrixXd rotation2(double theta) {
    MatrixXd Q(2, 2);
    Q << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
    return Q;
}

}  // namespace

TEST_CASE("subspace error") {
    SECTION("identical bases give zero") {
        Rng rng(1);
        MatrixXd A = random_orthonormal(8, 2, rng);
        CHECK(subspace_error(A, A) == Catch::Approx(0.0).margin(1e-12));
    }

    SECTION("orthogonal one-dimensional spans give the maximum 2") {
        MatrixXd e1 = MatrixXd::Identity(3, 1);
        MatrixXd e2 = MatrixXd::Zero(3, 1);
        e2(1, 0) = 1.0;
        CHECK(subspace_error(e1, e2) == Catch::Approx(2.0).epsilon(1e-14));
    }

    SECTION("planar rotation by theta gives 2 sin^2 theta") {
        MatrixXd e1 = MatrixXd::Identity(2, 1);
        for (double theta : {0.1, 0.5, 1.0}) {
            MatrixXd v = rotation2(theta) * e1;
            CHECK(subspace_error(v, e1) ==
                  Catch::Approx(2.0 * std::sin(theta) * std::sin(theta)).epsilon(1e-12));
        }
    }

    SECTION("invariant to right-rotation of either basis") {
        Rng rng(2);
        MatrixXd A = random_orthonormal(6, 2, rng);
        MatrixXd V = random_orthonormal(6, 2, rng);
        double base = subspace_error(V, A);
        for (double theta : {0.3, 1.2, 2.9}) {
            MatrixXd Q = rotation2(theta);
            CHECK(subspace_error(V * Q, A) == Catch::Approx(base).margin(1e-10));
            CHECK(subspace_error(V, A * Q) == Catch::Approx(base).margin(1e-10));
        }
    }

    SECTION("equals 2 ||(I - VV^T) A||_F^2 for orthonormal inputs") {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            MatrixXd A = random_orthonormal(7, 2, rng);
            MatrixXd V = random_orthonormal(7, 2, rng);
            MatrixXd resid = A - V * (V.transpose() * A);
            CHECK(std::abs(subspace_error(V, A) - 2.0 * resid.squaredNorm()) <= 1e-10);
        }
    }

    SECTION("shape mismatch rejected") {
        CHECK_THROWS(subspace_error(MatrixXd::Identity(4, 2), MatrixXd::Identity(4, 1)));
    }
}

TEST_CASE("Procrustes alignment") {
    Rng rng(4);

    SECTION("recovers a planted rotation exactly") {
        MatrixXd A = random_orthonormal(6, 2, rng);
        for (int trial = 0; trial < 50; ++trial) {
            MatrixXd Q = rotation2(6.28 * double(trial) / 50.0);
            if (trial % 2 == 1) Q.col(0) = -Q.col(0);  // include reflections
            MatrixXd V = A * Q.transpose();
            auto res = procrustes_align(V, A);
            CHECK((res.U - Q).norm() <= 1e-10);
            CHECK_FALSE(res.rank_deficient);
        }
    }

    SECTION("minimizes over a sampled set of orthogonal candidates") {
        MatrixXd A = random_orthonormal(6, 2, rng);
        MatrixXd V = random_orthonormal(6, 2, rng);
        auto res = procrustes_align(V, A);
        MatrixXd VtA = V.transpose() * A;
        double best = (res.U - VtA).squaredNorm();
        for (int trial = 0; trial < 50; ++trial) {
            MatrixXd Q = rotation2(6.28 * double(trial) / 50.0);
            if (trial % 2 == 1) Q.col(0) = -Q.col(0);
            CHECK(best <= (Q - VtA).squaredNorm() + 1e-12);
        }
        CHECK((res.U.transpose() * res.U - MatrixXd::Identity(2, 2)).norm() <= 1e-12);
    }

    SECTION("flags rank deficiency for orthogonal spans") {
        MatrixXd e1 = MatrixXd::Identity(3, 1);
        MatrixXd e2 = MatrixXd::Zero(3, 1);
        e2(2, 0) = 1.0;
        CHECK(procrustes_align(e1, e2).rank_deficient);
    }
}

TEST_CASE("orthogonality lemma inequalities hold for random basis pairs") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        int D = 3 + int(trial % 6);
        int d = 1 + int(trial % 2);
        if (d >= D) d = 1;
        MatrixXd A = random_orthonormal(D, d, rng);
        MatrixXd V = random_orthonormal(D, d, rng);
        auto r = ortho_lemma_check(A, V);
        REQUIRE(r.holds);
        REQUIRE(std::abs(r.lhs_a1 - r.eps) <= 1e-9);  // equality by trace symmetry
        REQUIRE(r.eps >= -1e-12);
    }
    // nearly aligned pair: everything collapses to ~0
    MatrixXd A = random_orthonormal(5, 2, rng);
    auto r = ortho_lemma_check(A, A);
    CHECK(r.eps <= 1e-10);
    CHECK(r.lhs_b <= 1e-10);
}

TEST_CASE("empirical W2") {
    Rng rng(6);

    SECTION("identical samples give zero") {
        MatrixXd x = gaussian_matrix(500, 2, rng);
        CHECK(w2_latent(x, x) == 0.0);
    }

    SECTION("d = 1 shifted point masses: exactly the shift") {
        MatrixXd a = MatrixXd::Zero(100, 1);
        MatrixXd b = MatrixXd::Constant(100, 1, 0.5);
        CHECK(w2_latent(a, b) == Catch::Approx(0.5).epsilon(1e-14));
    }

    SECTION("d = 1 shifted Gaussians approach the mean distance") {
        const long n = 20000;
        MatrixXd a = gaussian_matrix(n, 1, rng);
        MatrixXd b = gaussian_matrix(n, 1, rng);
        b.array() += 0.5;
        CHECK(w2_latent(a, b) == Catch::Approx(0.5).margin(0.05));
    }

    SECTION("d = 2 shifted Gaussians via exact assignment") {
        const long n = 1024;
        MatrixXd a = gaussian_matrix(n, 2, rng);
        MatrixXd b = gaussian_matrix(n, 2, rng);
        b.col(0).array() += 0.5;
        double w2 = w2_latent(a, b);
        // empirical bias at n = 1024 inflates the estimate slightly
        CHECK(w2 >= 0.4);
        CHECK(w2 <= 0.75);
    }

    SECTION("d = 2 deterministic matching sanity") {
        MatrixXd a(3, 2), b(3, 2);
        a << 0, 0, 1, 0, 2, 0;
        b << 2.1, 0, 0.1, 0, 1.1, 0;
        // optimal matching pairs each point with its shift by 0.1
        CHECK(w2_latent(a, b) == Catch::Approx(0.1).epsilon(1e-12));
    }

    SECTION("guards") {
        CHECK_THROWS(w2_latent(MatrixXd::Zero(4, 1), MatrixXd::Zero(5, 1)));
        CHECK_THROWS(w2_latent(MatrixXd::Zero(4, 3), MatrixXd::Zero(4, 3)));
        CHECK_THROWS(w2_latent(MatrixXd::Zero(3000, 2), MatrixXd::Zero(3000, 2)));
    }
}

TEST_CASE("histogram total variation") {
    Rng rng(7);

    SECTION("identical samples give zero") {
        MatrixXd x = gaussian_matrix(5000, 1, rng);
        CHECK(tv_latent_histogram(x, x) == 0.0);
    }

    SECTION("disjoint supports give one") {
        MatrixXd a = MatrixXd::Zero(1000, 1);
        MatrixXd b = MatrixXd::Constant(1000, 1, 100.0);
        a.col(0) = VectorXd::LinSpaced(1000, 0.0, 1.0);
        b.col(0) = VectorXd::LinSpaced(1000, 100.0, 101.0);
        CHECK(tv_latent_histogram(a, b) == Catch::Approx(1.0).margin(1e-12));
    }

    SECTION("independent draws from one law sit near the noise floor") {
        const long n = 100000;
        MatrixXd a = gaussian_matrix(n, 1, rng);
        MatrixXd b = gaussian_matrix(n, 1, rng);
        CHECK(tv_latent_histogram(a, b) <= 0.05);
    }

    SECTION("d = 2 separated blobs") {
        const long n = 5000;
        MatrixXd a = gaussian_matrix(n, 2, rng);
        MatrixXd b = gaussian_matrix(n, 2, rng);
        b.array() += 20.0;
        CHECK(tv_latent_histogram(a, b) >= 0.99);
    }

    SECTION("d > 2 refused") {
        CHECK_THROWS(tv_latent_histogram(MatrixXd::Zero(10, 3), MatrixXd::Zero(10, 3)));
    }
}

TEST_CASE("log-log rate fit") {
    SECTION("exact power laws are recovered to machine precision") {
        for (double p : {-1.0, -0.5, 2.0}) {
            std::vector<double> xs, ys;
            for (double x : {10.0, 100.0, 1000.0, 10000.0}) {
                xs.push_back(x);
                ys.push_back(3.0 * std::pow(x, p));
            }
            auto fit = rate_fit(xs, ys);
            CHECK(fit.slope == Catch::Approx(p).margin(1e-12));
            CHECK(fit.intercept == Catch::Approx(std::log(3.0)).margin(1e-12));
            CHECK(fit.r_squared == Catch::Approx(1.0).margin(1e-12));
        }
    }

    SECTION("noisy power law recovered within 0.15") {
        Rng rng(8);
        std::vector<double> xs, ys;
        for (int k = 4; k <= 14; ++k) {
            double x = std::pow(2.0, k);
            xs.push_back(x);
            ys.push_back(std::pow(x, -0.5) * std::exp(0.1 * standard_normal(rng)));
        }
        auto fit = rate_fit(xs, ys);
        CHECK(std::abs(fit.slope + 0.5) <= 0.15);
        CHECK(fit.r_squared >= 0.9);
    }

    SECTION("guards") {
        CHECK_THROWS(rate_fit({1.0, 2.0}, {1.0, 2.0}));
        CHECK_THROWS(rate_fit({1.0, 2.0, -3.0}, {1.0, 2.0, 3.0}));
        CHECK_THROWS(rate_fit({1.0, 2.0, 3.0}, {1.0, 2.0}));
    }
}

TEST_CASE("evaluation report serialization") {
    EvalReport r;
    r.subspace_err = 0.125;
    r.align_U = rotation2(0.7);
    r.tv_latent = 0.05;
    r.w2_latent = 0.02;
    r.ortho_second_moment = 0.11;
    r.moments = {1.25, 1.0, 5.0, 0.0};
    auto j = eval_report_to_json(r);
    CHECK(j["subspace_err"] == 0.125);
    CHECK(j["align_U"].size() == 2);
    CHECK(double(j["align_U"][0][0]) == Catch::Approx(std::cos(0.7)));
    CHECK(j["moments"]["C_E"] == 1.25);
}
