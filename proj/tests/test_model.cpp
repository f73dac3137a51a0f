#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "mvfbdsde/model.hpp"

using namespace mvfb;

namespace {

const Dimensions kScalar{1, 1, 1};

// Single-row ensemble, so the law is the Dirac at v.
Vector eval_at(const CoefficientSet& c, const Vector& v) {
    Matrix s(1, v.size());
    s.row(0) = v.transpose();
    return eval_system(c, 0.3, s).row(0).transpose();
}

Vector quad(double y, double Y, double z, double Z) {
    Vector v(4);
    v << y, Y, z, Z;
    return v;
}

Vector hom(const HomotopyProblem& p, const Vector& v, const Vector& stat) {
    Vector out(v.size());
    evaluate_homotopy(p, PointContext{0.2, 0, 0}, v, stat, out);
    return out;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("example coefficients at simple inputs") {
    const auto c = builtin_example_meanfield(kScalar);
    CHECK(c.law_dependence == LawDependence::first_moment);
    CHECK(eval_at(c, quad(0, 0, 0, 0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(eval_at(c, quad(0, 2, 0, 0))[1] == doctest::Approx(-1.0));   // f
    CHECK(eval_at(c, quad(0, 0, 0, 4))[3] == doctest::Approx(-1.0));   // g
    CHECK(eval_at(c, quad(1, 0, 0, 0))[0] == doctest::Approx(-0.5));   // F
    CHECK(eval_at(c, quad(0, 0, 2, 0))[2] == doctest::Approx(-0.5));   // G
    Vector y(1), stat(1), h(1);
    y << 2.0;
    stat << 2.0;
    evaluate_terminal(c, PointContext{}, y, stat, h);
    CHECK(h[0] == doctest::Approx(1.0));
}

TEST_CASE("example coefficients in higher dimension") {
    const Dimensions dims{2, 3, 3};
    const auto c = builtin_example_meanfield(dims);
    Vector v = Vector::LinSpaced(static_cast<Eigen::Index>(dims.packed()), 1.0, 2.0);
    const Vector out = eval_at(c, v);
    // Dirac law: every coefficient is a negative multiple of its own slot.
    CHECK(out.head(4).isApprox(-0.5 * v.head(4)));
    CHECK(out.tail(12).isApprox(-0.25 * v.tail(12)));
    CHECK_THROWS(builtin_example_meanfield(Dimensions{1, 1, 2}));
}

TEST_CASE("first moment models ignore mean preserving resampling") {
    const auto c = builtin_example_meanfield(kScalar);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    Matrix s(6, 4);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = g(rng);
    Matrix perm = s.colwise().reverse();
    Matrix dup(12, 4);
    dup << s, s;
    const EmpiricalLaw a(s), b(perm), d(dup);
    const Matrix probe = s.topRows(2);
    CHECK(eval_system(c, 0.1, probe, &a).isApprox(eval_system(c, 0.1, probe, &b)));
    CHECK(eval_system(c, 0.1, probe, &a).isApprox(eval_system(c, 0.1, probe, &d)));
}

TEST_CASE("pairing identity for deterministic displacements") {
    const auto c = builtin_example_meanfield(kScalar);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 50; ++trial) {
        Matrix s(8, 4);
        for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = g(rng);
        const Vector dv = quad(g(rng), g(rng), g(rng), g(rng));
        Matrix t = s.rowwise() + dv.transpose();
        const Matrix A = eval_system(c, 0.0, s), B = eval_system(c, 0.0, t);
        double pairing = 0.0;
        for (Eigen::Index r = 0; r < 8; ++r) pairing += (B.row(r) - A.row(r)).dot(t.row(r) - s.row(r));
        pairing /= 8.0;
        const double expected = -0.5 * dv[0] * dv[0] - 0.5 * dv[1] * dv[1] - 0.25 * dv[2] * dv[2] - 0.25 * dv[3] * dv[3];
        CHECK(pairing == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("non-finite output names the coefficient") {
    CoefficientSet c;
    c.name = "bad";
    c.dims = kScalar;
    c.law_dependence = LawDependence::none;
    c.coefficients = [](const PointContext&, ConstVecRef v, ConstVecRef, VecRef out) {
        out = v;
        out[3] = std::log(-1.0);
    };
    try {
        eval_at(c, quad(1, 1, 1, 1));
        FAIL("expected an error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find(coefficient_name(kScalar, 3)) != std::string::npos);
    }
    CHECK(coefficient_name(kScalar, 3) != coefficient_name(kScalar, 1));
}

TEST_CASE("case one homotopy") {
    const auto base = builtin_example_meanfield(kScalar);
    const Matrix x = Matrix::Constant(1, 1, 1.0), xi(0, 1);
    const Vector v = quad(0.7, -1.2, 0.4, 2.0), stat = quad(0.1, 0.3, -0.2, 0.5);
    Vector b(4);
    evaluate(base, PointContext{}, v, stat, b);

    const auto p0 = build_homotopy_case1(base, 0.0, 0.25, nullptr, xi, x);
    const Vector h0 = hom(p0, v, stat);
    CHECK(h0[0] == doctest::Approx(-0.25 * 0.7));
    CHECK(h0[1] == 0.0);
    CHECK(h0[2] == doctest::Approx(-0.25 * 0.4));
    CHECK(h0[3] == 0.0);

    const auto ph = build_homotopy_case1(base, 0.5, 0.25, nullptr, xi, x);
    const Vector hh = hom(ph, v, stat);
    CHECK(hh[1] == doctest::Approx(0.5 * b[1]));
    CHECK(hh[0] == doctest::Approx(0.5 * b[0] - 0.5 * 0.25 * 0.7));

    Vector y(1), ys(1), out(1);
    y << 2.0;
    ys << 0.4;
    evaluate_homotopy_terminal(p0, PointContext{}, y, ys, out);
    CHECK(out[0] == doctest::Approx(2.0));
    evaluate_homotopy_terminal(ph, PointContext{}, y, ys, out);
    CHECK(out[0] == doctest::Approx(0.5 * (2.0 - 0.2) + 0.5 * 2.0));

    CHECK_THROWS(build_homotopy_case1(base, 1.5, 0.25, nullptr, xi, x));
    CHECK_THROWS(build_homotopy_case1(base, 0.5, 0.0, nullptr, xi, x));
}

TEST_CASE("case two homotopy") {
    const auto base = builtin_example_meanfield(kScalar);
    const Matrix x = Matrix::Constant(1, 1, 1.0), xi(0, 1);
    const Vector v = quad(0.7, -1.2, 0.4, 2.0), stat = quad(0.1, 0.3, -0.2, 0.5);
    const auto p0 = build_homotopy_case2(base, 0.0, 0.25, nullptr, xi, x);
    const Vector h0 = hom(p0, v, stat);
    CHECK(h0[0] == 0.0);
    CHECK(h0[1] == doctest::Approx(0.25 * 1.2));
    CHECK(h0[2] == 0.0);
    CHECK(h0[3] == doctest::Approx(-0.25 * 2.0));
    Vector y(1), ys(1), out(1);
    y << 2.0;
    ys << 0.4;
    evaluate_homotopy_terminal(p0, PointContext{}, y, ys, out);
    CHECK(out[0] == 0.0);
    CHECK_THROWS(build_homotopy_case2(base, 0.5, 0.0, nullptr, xi, x));
}

TEST_CASE("alpha one with zero forcing equals the base") {
    const Dimensions dims{2, 1, 1};
    const auto base = builtin_example_meanfield(dims);
    const auto n = static_cast<Eigen::Index>(dims.packed());
    const Matrix x = Matrix::Zero(1, 2), xi(0, 2);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    for (auto build : {build_homotopy_case1, build_homotopy_case2}) {
        const auto p = build(base, 1.0, 0.25, nullptr, xi, x);
        for (int i = 0; i < 100; ++i) {
            Vector v(n), stat(n), b(n);
            for (Eigen::Index j = 0; j < n; ++j) {
                v[j] = g(rng);
                stat[j] = g(rng);
            }
            evaluate(base, PointContext{}, v, stat, b);
            CHECK((hom(p, v, stat) - b).cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("homotopy is affine in alpha") {
    const auto base = builtin_example_meanfield(kScalar);
    const Matrix x = Matrix::Constant(1, 1, 1.0), xi(0, 1);
    const Vector v = quad(0.3, 0.9, -0.6, 1.1), stat = quad(-0.4, 0.2, 0.3, 0.0);
    for (auto build : {build_homotopy_case1, build_homotopy_case2}) {
        const Vector a0 = hom(build(base, 0.0, 0.5, nullptr, xi, x), v, stat);
        const Vector a1 = hom(build(base, 1.0, 0.5, nullptr, xi, x), v, stat);
        for (double a : {0.1, 0.37, 0.8}) {
            const Vector mid = hom(build(base, a, 0.5, nullptr, xi, x), v, stat);
            CHECK((mid - ((1 - a) * a0 + a * a1)).cwiseAbs().maxCoeff() <= 1e-14);
        }
    }
}

TEST_CASE("counterexample has the two known solutions") {
    const auto ce = builtin_counterexample();
    CHECK(ce.T == doctest::Approx(3.0 * std::numbers::pi / 4.0));
    CHECK(ce.x.size() == 1);
    CHECK(ce.x[0] == 0.0);
    const TimeGrid grid(ce.T, 300);
    const auto drivers = sample_driver_pair(grid, 1, 1, 50, 4);
    const auto problem = make_problem(ce.coeffs, ce.x);

    const auto zero = deterministic_state(grid, ce.dims, 50, [](double, VecRef v) { v.setZero(); });
    const auto r0 = residual(problem, zero, drivers);
    CHECK(r0.max() == 0.0);

    const auto trig = deterministic_state(grid, ce.dims, 50, [](double t, VecRef v) {
        v[0] = std::sin(t);
        v[1] = std::cos(t);
    });
    const auto r1 = residual(problem, trig, drivers);
    CHECK(r1.forward <= 0.05);
    CHECK(r1.backward <= 0.05);
    CHECK(r1.terminal <= 1e-12);
    // Euler consistency: the local defect is O(dt^2).
    CHECK(r1.forward <= grid.dt() * grid.dt());
}

TEST_CASE("exact Euler trajectory has zero forward residual") {
    const auto base = builtin_example_meanfield(kScalar);
    const TimeGrid grid(1.0, 40);
    const std::size_t M = 30;
    const auto drivers = sample_driver_pair(grid, 1, 1, M, 8);
    const auto problem = make_problem(base, Vector::Ones(1));
    EnsembleState s(grid, kScalar, M);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g;
    for (std::size_t k = 0; k <= grid.N; ++k)
        for (std::size_t p = 0; p < M; ++p) {
            s.at(k, p)[1] = g(rng);
            s.at(k, p)[2] = g(rng);
            s.at(k, p)[3] = g(rng);
        }
    for (std::size_t p = 0; p < M; ++p) s.at(0, p)[0] = 1.0;
    for (std::size_t k = 0; k < grid.N; ++k) {
        const Vector stat = s.law(k).mean();
        for (std::size_t p = 0; p < M; ++p) {
            const Vector v = s.at(k, p);
            Vector a(4);
            evaluate(base, PointContext{grid.t(k), k, p}, v, stat, a);
            s.at(k + 1, p)[0] = v[0] + a[1] * grid.dt() + a[3] * drivers.w(k, p, 0) - v[2] * drivers.b(k, p, 0);
        }
    }
    CHECK(residual(problem, s, drivers).forward <= 1e-13);
}

TEST_CASE("state helpers and shape checks") {
    const auto base = builtin_example_meanfield(kScalar);
    const TimeGrid grid(1.0, 10);
    const auto problem = make_problem(base, Vector::Constant(1, 2.0));
    const auto s = constant_state(problem, grid, 5);
    CHECK(s.mean(0, 0) == 2.0);
    CHECK(s.mean(10, 0) == 2.0);
    CHECK(s.law_y(3).dim() == 1);
    const auto wrong = sample_driver_pair(grid, 1, 1, 4, 1);
    CHECK_THROWS(residual(problem, s, wrong));
    CHECK(to_string(HomotopyCase::case1) == "case1");
    CHECK(to_string(HomotopyCase::case2) == "case2");
}

TEST_CASE("linear model validation") {
    auto m = LinearMeanFieldModel::zeros(kScalar);
    CHECK_NOTHROW(m.validate());
    CHECK(make_coefficients(m).law_dependence == LawDependence::none);
    m.K = Matrix::Zero(3, 3);
    CHECK_THROWS(m.validate());
}

}
