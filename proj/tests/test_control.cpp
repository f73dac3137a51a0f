#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "mvfbdsde/control.hpp"
#include "oracles.hpp"

using namespace mvfb;

namespace {

Vector vec(std::initializer_list<double> xs) {
    Vector v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

ControlPath constant_control(const ControlProblem& p, std::size_t M, double value) {
    return deterministic_control(p.grid, M, 1, [value](double, VecRef u) { u[0] = value; });
}

ControlPath oracle_control(const ControlProblem& p, std::size_t M, const oracle::LqSolution& o) {
    return deterministic_control(p.grid, M, 1, [&](double t, VecRef u) {
        u[0] = o.u[static_cast<std::size_t>(std::lround(t / p.grid.dt()))];
    });
}

double node_mean(const EnsembleState& s, std::size_t k, std::size_t i) { return s.mean(k, i); }

// Zero-cost variant of a control problem.
ControlProblem without_costs(ControlProblem p) {
    p.running.value = [](double, ConstVecRef, ConstVecRef, ConstVecRef) { return 0.0; };
    p.running.gradient = [](double, ConstVecRef, ConstVecRef, ConstVecRef, VecRef gv, VecRef gu, VecRef gm) {
        gv.setZero();
        gu.setZero();
        gm.setZero();
    };
    auto zero_end = [](ConstVecRef, ConstVecRef) { return 0.0; };
    auto zero_grad = [](ConstVecRef, ConstVecRef, VecRef gx, VecRef gm) {
        gx.setZero();
        gm.setZero();
    };
    p.terminal_cost.value = zero_end;
    p.terminal_cost.gradient = zero_grad;
    p.initial_cost.value = zero_end;
    p.initial_cost.gradient = zero_grad;
    return p;
}

}  // namespace

TEST_SUITE("control") {

TEST_CASE("hamiltonian with zero adjoint is minus the running cost") {
    const auto p = make_lq_problem(LqParams{});
    const Vector V = vec({0.7, -0.3, 0.2, 0.4}), m = vec({0.5, 0.1, 0.0, 0.0}), u = vec({0.9});
    const double l = p.running.value(0.0, V, u, m);
    CHECK(hamiltonian(p, 0.0, V, u, Vector::Zero(4), m) == doctest::Approx(-l));
}

TEST_CASE("hamiltonian matches the hand expansion") {
    const LqParams q;
    const auto p = make_lq_problem(q);
    const double y = 0.7, Y = -0.3, z = 0.2, Z = 0.4, my = 0.5, mY = 0.1, u = 0.9;
    const double pp = 1.1, PP = -0.6, qq = 0.3, QQ = 0.8;
    const double expected = pp * (q.a_y * y + q.abar_y * my) - PP * (q.a_Y * Y + q.abar_Y * mY + q.b * u) +
                            qq * q.g_z * z - QQ * q.g_Z * Z -
                            (0.5 * q.q * y * y + 0.5 * q.qbar * my * my + 0.5 * q.r * u * u);
    const double H = hamiltonian(p, 0.2, vec({y, Y, z, Z}), vec({u}), vec({pp, PP, qq, QQ}), vec({my, mY, 0, 0}));
    CHECK(H == doctest::Approx(expected).epsilon(1e-14));
    // law overload uses the ensemble mean
    Matrix s(2, 4);
    s << 0.4, 0.0, 1.0, -1.0, 0.6, 0.2, -1.0, 1.0;
    const double Hl = hamiltonian(p, 0.2, vec({y, Y, z, Z}), vec({u}), vec({pp, PP, qq, QQ}), EmpiricalLaw(s));
    CHECK(Hl == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("hamiltonian sign audit on the running cost") {
    const auto p = make_lq_problem(LqParams{});
    const auto p0 = without_costs(p);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g;
    for (int i = 0; i < 50; ++i) {
        const Vector V = vec({g(rng), g(rng), g(rng), g(rng)}), chi = vec({g(rng), g(rng), g(rng), g(rng)});
        const Vector m = vec({g(rng), g(rng), 0, 0}), u = vec({g(rng)});
        const double l = p.running.value(0.0, V, u, m);
        CHECK(hamiltonian(p, 0.0, V, u, chi, m) + l == doctest::Approx(hamiltonian(p0, 0.0, V, u, chi, m)));
    }
}

TEST_CASE("pure control cost is maximized at the smallest norm point") {
    auto p = without_costs(make_lq_problem(LqParams{}));
    p.dynamics.coefficients = [](double, ConstVecRef, ConstVecRef, ConstVecRef, VecRef out) { out.setZero(); };
    p.dynamics.jacobians = nullptr;
    p.running.value = [](double, ConstVecRef, ConstVecRef u, ConstVecRef) { return u.squaredNorm(); };
    p.running.gradient = nullptr;
    const Vector V = Vector::Zero(4), chi = Vector::Ones(4), m = Vector::Zero(4);
    const Vector inside = maximize_hamiltonian(p, 0.0, V, chi, m, vec({1.5}));
    CHECK(std::abs(inside[0]) <= 1e-6);
    p.box.lower = vec({0.5});
    p.box.upper = vec({2.0});
    const Vector edge = maximize_hamiltonian(p, 0.0, V, chi, m, vec({1.5}));
    CHECK(edge[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(hamiltonian(p, 0.0, V, edge, chi, m) == doctest::Approx(-0.25));
}

TEST_CASE("control box") {
    ControlBox box{vec({-1.0, 0.0}), vec({1.0, 2.0})};
    CHECK(box.contains(vec({0.0, 1.0})));
    CHECK_FALSE(box.contains(vec({1.5, 1.0})));
    const Vector pr = box.project(vec({1.5, -3.0}));
    CHECK(pr[0] == 1.0);
    CHECK(pr[1] == 0.0);
}

TEST_CASE("L-derivative of moment functionals") {
    Matrix s(4, 1);
    s << 1.0, 2.0, 3.0, 6.0;  // mean 3
    const EmpiricalLaw law(s);
    const Matrix pts = s;
    MeasureFunctional square;
    square.moment_map = [](ConstVecRef m) { return 0.5 * m[0] * m[0]; };
    const Matrix d1 = l_derivative(square, law, pts);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(d1(i, 0) == doctest::Approx(3.0).epsilon(1e-8));
    MeasureFunctional constant;
    constant.moment_map = [](ConstVecRef) { return 4.0; };
    CHECK(l_derivative(constant, law, pts).cwiseAbs().maxCoeff() <= 1e-9);
    MeasureFunctional linear;
    linear.moment_map = [](ConstVecRef m) { return m[0]; };
    linear.moment_gradient = [](ConstVecRef) { return Vector::Ones(1); };
    CHECK(l_derivative(linear, law, pts).isApprox(Matrix::Ones(4, 1)));
    MeasureFunctional general;
    general.structure = LawDependence::general;
    CHECK_THROWS_WITH(l_derivative(general, law, pts), "L-derivative unavailable");
    general.analytic = [](const EmpiricalLaw&, ConstVecRef x) { return Vector(2.0 * x); };
    CHECK(l_derivative(general, law, pts)(3, 0) == doctest::Approx(12.0));
}

TEST_CASE("lift consistency of the L-derivative") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g;
    Matrix s(50, 2), h(50, 2);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        s.data()[i] = g(rng);
        h.data()[i] = g(rng);
    }
    MeasureFunctional phi;
    phi.moment_map = [](ConstVecRef m) { return std::sin(m[0]) + m[0] * m[1] * m[1]; };
    const EmpiricalLaw law(s);
    const Matrix D = l_derivative(phi, law, s);
    double directional = 0.0;
    for (Eigen::Index i = 0; i < 50; ++i) directional += D.row(i).dot(h.row(i));
    directional /= 50.0;
    const double base = phi.moment_map(law.mean());
    auto remainder = [&](double eps) {
        const EmpiricalLaw moved(Matrix(s + eps * h));
        return std::abs(phi.moment_map(moved.mean()) - base - eps * directional);
    };
    const double r3 = remainder(1e-3), r4 = remainder(1e-4);
    CHECK(r3 <= 1e-4);
    CHECK(r4 <= r3 / 20.0);  // o(eps): faster than linear decay
}

TEST_CASE("cost of trivial problems") {
    const auto lq = make_lq_problem(LqParams{});
    const std::size_t M = 20;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 3);
    const auto u = constant_control(lq, M, 0.3);
    const auto zero = without_costs(lq);
    const auto c0 = estimate_cost(zero, u, drivers, RegressionConfig{});
    CHECK(c0.J == 0.0);
    auto unit = zero;
    unit.running.value = [](double, ConstVecRef, ConstVecRef, ConstVecRef) { return 1.0; };
    const auto c1 = estimate_cost(unit, u, drivers, RegressionConfig{});
    CHECK(std::abs(c1.J - lq.grid.T) <= 1e-12);
    CHECK(c1.standard_error <= 1e-12);
}

TEST_CASE("inadmissible controls are rejected") {
    const auto lq = make_lq_problem(LqParams{});
    const std::size_t M = 10;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 3);
    auto u = constant_control(lq, M, 0.0);
    u.at(7, 3)[0] = 5.0;
    CHECK_THROWS_WITH(require_admissible(lq, u), doctest::Contains("node 7"));
    CHECK_THROWS(estimate_cost(lq, u, drivers, RegressionConfig{}));
    CHECK_THROWS(verify_smp(lq, u, 2, drivers, RegressionConfig{}));
}

TEST_CASE("backward sign flip negates the backward slots") {
    const auto lq = make_lq_problem(LqParams{});
    const auto c = canonical_coefficients_at(lq, vec({0.4}));
    const auto f = flip_backward_sign(c);
    const Vector v = vec({0.3, -0.8, 0.5, 0.1}), stat = vec({0.2, 0.1, 0.0, 0.0});
    Vector a(4), b(4);
    evaluate(c, PointContext{}, v, stat, a);
    evaluate(f, PointContext{}, v, stat, b);
    CHECK(b.size() == 4);
    CHECK(f.dims == c.dims);
    // flipping twice is the identity
    Vector bb(4);
    evaluate(flip_backward_sign(f), PointContext{}, v, stat, bb);
    CHECK((bb - a).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK((a - b).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("state and adjoint match the deterministic reduction") {
    const LqParams q;
    const auto lq = make_lq_problem(q);
    const auto o = oracle::lq_bvp(q);
    const std::size_t M = 100;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 42);
    const auto u = oracle_control(lq, M, o);
    const auto state = solve_state(lq, u, drivers, RegressionConfig{});
    const auto adj = solve_adjoint(lq, state.final_state, u, drivers, RegressionConfig{});
    double es = 0.0, ea = 0.0;
    for (std::size_t k = 0; k <= lq.grid.N; ++k) {
        es = std::max(es, std::abs(node_mean(state.final_state, k, 0) - o.y[k]));
        es = std::max(es, std::abs(node_mean(state.final_state, k, 1) - o.Y[k]));
        ea = std::max(ea, std::abs(node_mean(adj.chi, k, 0) - o.p[k]));
        ea = std::max(ea, std::abs(node_mean(adj.chi, k, 1) - o.P[k]));
    }
    MESSAGE("state error " << es << " adjoint error " << ea);
    CHECK(es <= 0.02);
    CHECK(ea <= 0.02);
    CHECK(adj.initial_residual <= lq.solver.picard.tol);
    CHECK(adj.terminal_residual <= lq.solver.picard.tol);
    const auto cost = estimate_cost(lq, u, drivers, RegressionConfig{});
    CHECK(cost.J == doctest::Approx(o.J).epsilon(0.02));
}

TEST_CASE("adjoint of a zero-cost problem vanishes") {
    const auto lq = without_costs(make_lq_problem(LqParams{}));
    const std::size_t M = 50;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 5);
    const auto u = constant_control(lq, M, 0.5);
    const auto state = solve_state(lq, u, drivers, RegressionConfig{});
    const auto adj = solve_adjoint(lq, state.final_state, u, drivers, RegressionConfig{});
    double m = 0.0;
    for (double v : adj.chi.values.raw()) m = std::max(m, std::abs(v));
    CHECK(m <= 1e-12);
}

TEST_CASE("adjoint is linear in the costs") {
    LqParams q, q2;
    q2.q *= 2;
    q2.qbar *= 2;
    q2.r *= 2;
    q2.s *= 2;
    q2.sbar *= 2;
    q2.k *= 2;
    const auto p1 = make_lq_problem(q), p2 = make_lq_problem(q2);
    const std::size_t M = 50;
    const auto drivers = sample_driver_pair(p1.grid, 1, 1, M, 6);
    const auto u = constant_control(p1, M, -0.4);
    const auto state = solve_state(p1, u, drivers, RegressionConfig{});
    const auto a1 = solve_adjoint(p1, state.final_state, u, drivers, RegressionConfig{});
    const auto a2 = solve_adjoint(p2, state.final_state, u, drivers, RegressionConfig{});
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a1.chi.values.raw().size(); ++i) {
        err = std::max(err, std::abs(a2.chi.values.raw()[i] - 2.0 * a1.chi.values.raw()[i]));
        scale = std::max(scale, std::abs(a1.chi.values.raw()[i]));
    }
    CHECK(err <= 1e-8 * (1.0 + scale));
}

TEST_CASE("finite-difference hooks agree with analytic gradients") {
    const auto lq = make_lq_problem(LqParams{});
    auto fd = lq;
    fd.dynamics.jacobians = nullptr;
    fd.running.gradient = nullptr;
    fd.terminal_cost.gradient = nullptr;
    fd.initial_cost.gradient = nullptr;
    const Vector v = vec({0.3, -0.2, 0.1, 0.5}), u = vec({0.7}), m = vec({0.2, 0.4, 0.0, 0.0});
    Matrix dv1, du1, dm1, dv2, du2, dm2;
    controlled_jacobians(lq, 0.1, v, u, m, dv1, du1, dm1);
    controlled_jacobians(fd, 0.1, v, u, m, dv2, du2, dm2);
    CHECK((dv1 - dv2).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((du1 - du2).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((dm1 - dm2).cwiseAbs().maxCoeff() <= 1e-8);

    const std::size_t M = 50;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 7);
    const auto ctl = constant_control(lq, M, 0.2);
    const auto state = solve_state(lq, ctl, drivers, RegressionConfig{});
    const auto a = solve_adjoint(lq, state.final_state, ctl, drivers, RegressionConfig{});
    const auto b = solve_adjoint(fd, state.final_state, ctl, drivers, RegressionConfig{});
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a.chi.values.raw().size(); ++i) {
        err = std::max(err, std::abs(a.chi.values.raw()[i] - b.chi.values.raw()[i]));
        scale = std::max(scale, std::abs(a.chi.values.raw()[i]));
    }
    CHECK(err <= 1e-4 * scale);
}

TEST_CASE("gradient consistency away from the optimum") {
    const auto lq = make_lq_problem(LqParams{});
    const std::size_t M = 100;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 8);
    const auto u = constant_control(lq, M, 0.0);
    const auto zero_dir = constant_control(lq, M, 0.0);
    const auto r0 = gradient_consistency(lq, u, zero_dir, 1e-3, drivers, RegressionConfig{});
    CHECK(r0.finite_difference == 0.0);
    CHECK(r0.adjoint == 0.0);
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> amp(-1.0, 1.0);
    const double a0 = amp(rng), a1 = amp(rng), a2 = amp(rng);
    const auto dir = deterministic_control(lq.grid, M, 1, [&](double t, VecRef d) {
        d[0] = a0 + a1 * std::sin(std::numbers::pi * t) + a2 * std::cos(2 * std::numbers::pi * t);
    });
    const auto r = gradient_consistency(lq, u, dir, 1e-3, drivers, RegressionConfig{});
    MESSAGE("fd " << r.finite_difference << " adjoint " << r.adjoint);
    CHECK(std::abs(r.finite_difference) > 1e-3);
    CHECK(r.relative_error <= 0.05);
}

TEST_CASE("first-order candidate and its certificate") {
    const LqParams q;
    const auto lq = make_lq_problem(q);
    const auto o = oracle::lq_bvp(q);
    const std::size_t M = 100;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 42);
    const auto fo = first_order_candidate(lq, drivers, RegressionConfig{});
    CHECK(fo.converged);
    double eu = 0.0;
    for (std::size_t k = 0; k <= lq.grid.N; ++k) {
        double m = 0.0;
        for (std::size_t p = 0; p < M; ++p) m += fo.control.at(k, p)[0];
        eu = std::max(eu, std::abs(m / M - o.u[k]));
    }
    MESSAGE("control error " << eu);
    CHECK(eu <= 0.02);
    CHECK_NOTHROW(require_admissible(lq, fo.control));

    // first-order optimality: no descent direction, inward or outward
    const auto dir = deterministic_control(lq.grid, M, 1, [](double t, VecRef d) { d[0] = std::cos(t); });
    const auto g = gradient_consistency(lq, fo.control, dir, 1e-3, drivers, RegressionConfig{});
    CHECK(std::abs(g.adjoint) <= 1e-4);

    const auto rep = verify_smp(lq, fo.control, 10, drivers, RegressionConfig{});
    CHECK(rep.verified());
    CHECK(rep.verdict() == "sampled-certified optimal");
    CHECK(rep.perturbation_J.size() == 10);
    CHECK(rep.adjoint_boundary_residual <= lq.solver.picard.tol);
}

TEST_CASE("suboptimal constant control is not certified") {
    const auto lq = make_lq_problem(LqParams{});
    const std::size_t M = 100;
    const auto drivers = sample_driver_pair(lq.grid, 1, 1, M, 42);
    const auto rep = verify_smp(lq, constant_control(lq, M, 0.0), 10, drivers, RegressionConfig{});
    CHECK_FALSE(rep.verified());
    CHECK((!rep.max_condition.pass || !rep.empirical.pass));
    CHECK_FALSE((rep.max_condition.pass ? rep.empirical.witness : rep.max_condition.witness).empty());
    CHECK(rep.verdict() == "not certified");
}

}
