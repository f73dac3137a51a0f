#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "mvfbdsde/parallel.hpp"
#include "mvfbdsde/paths.hpp"

using namespace mvfb;

namespace {

double sample_variance(const Vector& v) {
    const double m = v.mean();
    return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

}  // namespace

TEST_SUITE("paths") {

TEST_CASE("time grid nodes") {
    TimeGrid g(2.0, 8);
    CHECK(g.dt() == doctest::Approx(0.25));
    CHECK(g.t(0) == 0.0);
    CHECK(g.t(8) == 2.0);
    for (std::size_t k = 0; k < 8; ++k) CHECK(g.t(k + 1) > g.t(k));
    CHECK_THROWS(TimeGrid(0.0, 4));
    CHECK_THROWS(TimeGrid(1.0, 0));
}

TEST_CASE("driver sampling is reproducible and seed dependent") {
    TimeGrid g(1.0, 20);
    const auto a = sample_driver_pair(g, 1, 2, 50, 17);
    const auto b = sample_driver_pair(g, 1, 2, 50, 17);
    const auto c = sample_driver_pair(g, 1, 2, 50, 18);
    CHECK(a.dW == b.dW);
    CHECK(a.dB == b.dB);
    CHECK_FALSE(a.dW == c.dW);
    CHECK_THROWS(sample_driver_pair(g, 1, 1, 0, 1));
    CHECK_THROWS(sample_driver_pair(g, 0, 1, 10, 1));
}

TEST_CASE("driver streams do not depend on thread count") {
    TimeGrid g(1.0, 30);
    set_thread_count(1);
    const auto a = sample_driver_pair(g, 1, 1, 3000, 5);
    set_thread_count(4);
    const auto b = sample_driver_pair(g, 1, 1, 3000, 5);
    set_thread_count(0);
    CHECK(a.dW == b.dW);
    CHECK(a.dB == b.dB);
}

TEST_CASE("particle streams depend only on seed and particle") {
    TimeGrid g(1.0, 10);
    const auto small = sample_driver_pair(g, 1, 1, 5, 9);
    const auto large = sample_driver_pair(g, 1, 1, 40, 9);
    for (std::size_t k = 0; k < 10; ++k)
        for (std::size_t p = 0; p < 5; ++p) {
            CHECK(small.w(k, p, 0) == large.w(k, p, 0));
            CHECK(small.b(k, p, 0) == large.b(k, p, 0));
        }
}

TEST_CASE("increment statistics") {
    TimeGrid g(1.0, 10000);
    const auto d = sample_driver_pair(g, 1, 1, 100, 2024);
    const double n = static_cast<double>(g.N * 100);
    double sw = 0, sb = 0, sww = 0, sbb = 0, swb = 0;
    for (std::size_t k = 0; k < g.N; ++k)
        for (std::size_t p = 0; p < 100; ++p) {
            const double w = d.w(k, p, 0), b = d.b(k, p, 0);
            sw += w;
            sb += b;
            sww += w * w;
            sbb += b * b;
            swb += w * b;
        }
    const double dt = g.dt();
    CHECK(std::abs(sw / n) <= 4.0 * std::sqrt(dt / n));
    CHECK(std::abs(sb / n) <= 4.0 * std::sqrt(dt / n));
    CHECK(sww / n >= 0.9 * dt);
    CHECK(sww / n <= 1.1 * dt);
    CHECK(sbb / n >= 0.9 * dt);
    CHECK(sbb / n <= 1.1 * dt);
    const double corr = (swb / n) / std::sqrt((sww / n) * (sbb / n));
    CHECK(std::abs(corr) <= 4.0 / std::sqrt(n));
}

TEST_CASE("backward tail accumulates increments from the right") {
    TimeGrid g(1.0, 6);
    const auto d = sample_driver_pair(g, 1, 1, 3, 4);
    const PathArray tail = d.backward_tail();
    REQUIRE(tail.nodes() == g.N + 1);
    for (std::size_t p = 0; p < 3; ++p) {
        CHECK(tail.at(g.N, p)[0] == 0.0);
        double acc = 0.0;
        for (std::size_t k = g.N; k-- > 0;) {
            acc += d.b(k, p, 0);
            CHECK(tail.at(k, p)[0] == doctest::Approx(acc));
        }
    }
}

TEST_CASE("integrals of constants telescope") {
    TimeGrid g(1.0, 25);
    const auto d = sample_driver_pair(g, 1, 1, 4, 3);
    const Matrix dw = d.forward_slice(), db = d.backward_slice();
    const Vector fw = forward_ito_integral(Matrix::Constant(4, 25, 2.5), dw);
    const Vector bw = backward_ito_integral(Matrix::Constant(4, 26, -1.5), db);
    CHECK(forward_ito_integral(Matrix::Zero(4, 25), dw).cwiseAbs().maxCoeff() == 0.0);
    CHECK(backward_ito_integral(Matrix::Zero(4, 26), db).cwiseAbs().maxCoeff() == 0.0);
    for (Eigen::Index p = 0; p < 4; ++p) {
        CHECK(fw[p] == doctest::Approx(2.5 * dw.row(p).sum()).epsilon(1e-12));
        CHECK(bw[p] == doctest::Approx(-1.5 * db.row(p).sum()).epsilon(1e-12));
    }
    CHECK_THROWS(forward_ito_integral(Matrix::Zero(4, 24), dw));
    CHECK_THROWS(backward_ito_integral(Matrix::Zero(3, 26), db));
}

TEST_CASE("backward integral uses the right endpoint") {
    TimeGrid g(1.0, 3);
    const auto d = sample_driver_pair(g, 1, 1, 1, 8);
    Matrix integrand(1, 4);
    integrand << 10, 20, 30, 40;
    const Vector r = backward_ito_integral(integrand, d.backward_slice());
    CHECK(r[0] == doctest::Approx(20 * d.b(0, 0, 0) + 30 * d.b(1, 0, 0) + 40 * d.b(2, 0, 0)));
    Matrix left(1, 3);
    left << 10, 20, 30;
    const Vector f = forward_ito_integral(left, d.forward_slice());
    CHECK(f[0] == doctest::Approx(10 * d.w(0, 0, 0) + 20 * d.w(1, 0, 0) + 30 * d.w(2, 0, 0)));
}

TEST_CASE("integrals are linear in the integrand") {
    TimeGrid g(1.0, 12);
    const auto d = sample_driver_pair(g, 1, 1, 7, 21);
    const Matrix f = Matrix::Random(7, 13), h = Matrix::Random(7, 13);
    const Matrix dw = d.forward_slice(), db = d.backward_slice();
    const Vector lin_b = backward_ito_integral(2.0 * f - 3.0 * h, db);
    const Vector sep_b = 2.0 * backward_ito_integral(f, db) - 3.0 * backward_ito_integral(h, db);
    CHECK((lin_b - sep_b).cwiseAbs().maxCoeff() <= 1e-12);
    const Matrix fl = f.leftCols(12), hl = h.leftCols(12);
    const Vector lin_f = forward_ito_integral(2.0 * fl - 3.0 * hl, dw);
    const Vector sep_f = 2.0 * forward_ito_integral(fl, dw) - 3.0 * forward_ito_integral(hl, dw);
    CHECK((lin_f - sep_f).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("isometry for unit integrands") {
    TimeGrid g(1.0, 50);
    const auto d = sample_driver_pair(g, 1, 1, 10000, 31);
    const Vector fw = forward_ito_integral(Matrix::Ones(10000, 50), d.forward_slice());
    const Vector bw = backward_ito_integral(Matrix::Ones(10000, 51), d.backward_slice());
    for (const Vector* v : {&fw, &bw}) {
        const double var = sample_variance(*v);
        CHECK(std::abs(v->mean()) <= 4.0 * std::sqrt(var / 10000.0));
        CHECK(std::abs(var - 1.0) <= 0.1);
    }
}

TEST_CASE("product rule check: deterministic processes") {
    TimeGrid g(1.0, 100);
    const auto d = sample_driver_pair(g, 1, 1, 10, 1);
    ProcessSpec a{1.0, [](double t) { return std::cos(t); }, nullptr, nullptr};
    ProcessSpec b{2.0, [](double) { return 1.0; }, nullptr, nullptr};
    const auto r = discrete_ito_product_check(a, b, d);
    CHECK(r.residual <= 5.0 * g.dt());
    CHECK(r.standard_error <= 1e-12);
}

TEST_CASE("product rule check: backward square reproduces the variance") {
    TimeGrid g(1.0, 100);
    const auto d = sample_driver_pair(g, 1, 1, 10000, 2);
    ProcessSpec a{0.0, nullptr, nullptr, [](double) { return 1.0; }};
    const auto r = discrete_ito_product_check(a, a, d);
    // alpha_T = 0 while alpha_0 carries the whole backward integral, so the
    // right side balances E[alpha_0^2] = T against the covariation term.
    CHECK(std::abs(r.lhs) <= 1e-12);
    CHECK(r.residual <= 5.0 * g.dt());
    // a plus sign on the covariation would leave a gap of 2T
    CHECK(std::abs(r.rhs + 2.0 * g.T - r.lhs) > 1.5);
}

TEST_CASE("product rule check: forward against backward") {
    TimeGrid g(1.0, 100);
    const auto d = sample_driver_pair(g, 1, 1, 10000, 3);
    ProcessSpec a{0.0, nullptr, [](double) { return 1.0; }, nullptr};
    ProcessSpec b{0.0, nullptr, nullptr, [](double) { return 1.0; }};
    const auto r = discrete_ito_product_check(a, b, d);
    CHECK(r.residual <= 4.0 * r.standard_error + 1e-15);
    CHECK(r.residual <= 5.0 * g.dt());
}

TEST_CASE("increment dump round trip") {
    TimeGrid g(1.0, 5);
    const auto d = sample_driver_pair(g, 2, 1, 3, 6);
    const auto path = (std::filesystem::temp_directory_path() / "mvfb_incr_test.bin").string();
    write_increments_binary(path, d, Driver::W);
    const auto dump = read_increments_binary(path);
    CHECK(dump.particles == 3);
    CHECK(dump.steps == 5);
    CHECK(dump.dim == 2);
    REQUIRE(dump.values.size() == 30);
    // particle-major, then step, then component
    CHECK(dump.values[(2 * 5 + 4) * 2 + 1] == d.w(4, 2, 1));
    CHECK(dump.values[0] == d.w(0, 0, 0));
    std::remove(path.c_str());
    CHECK_THROWS(read_increments_binary(path));
}

}
