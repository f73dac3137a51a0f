#include "mvfbdsde/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mvfbdsde/parallel.hpp"

namespace mvfb {

std::string to_string(RegressionBasis b) {
    switch (b) {
        case RegressionBasis::constant: return "constant";
        case RegressionBasis::affine_y: return "affine_y";
        case RegressionBasis::poly2_y_plus_Btail: return "poly2_y_plus_Btail";
    }
    return "?";
}

RegressionBasis regression_basis_from_string(const std::string& s) {
    if (s == "constant") return RegressionBasis::constant;
    if (s == "affine_y") return RegressionBasis::affine_y;
    if (s == "poly2_y_plus_Btail") return RegressionBasis::poly2_y_plus_Btail;
    throw std::invalid_argument("unknown regression basis: " + s);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double d_norm(const EnsembleState& a, const EnsembleState& b) {
    if (a.grid.N != b.grid.N || a.particles() != b.particles() || a.dims.packed() != b.dims.packed())
        throw std::invalid_argument("d_norm: shape mismatch");
    const std::size_t N = a.grid.N, M = a.particles(), n = a.dims.packed(), d = a.dims.d;
    const double dt = a.grid.dt();
    double total = 0.0;
    for (std::size_t k = 0; k < N; ++k) {
        const double* pa = a.values.ptr(k, 0);
        const double* pb = b.values.ptr(k, 0);
        double s = 0.0;
        for (std::size_t i = 0; i < M * n; ++i) s += (pa[i] - pb[i]) * (pa[i] - pb[i]);
        total += s * dt;
    }
    for (std::size_t p = 0; p < M; ++p)
        for (std::size_t i = 0; i < d; ++i) {
            const double e = a.values.ptr(N, p)[i] - b.values.ptr(N, p)[i];
            total += e * e;
        }
    return total / static_cast<double>(M);
}

namespace {

// Standardized basis columns; column 0 is the intercept. Columns that are
// numerically constant are dropped.
Matrix standardize(const Matrix& raw) {
    const auto M = raw.rows();
    std::vector<Eigen::Index> keep;
    Matrix out(M, raw.cols() + 1);
    out.col(0).setOnes();
    Eigen::Index q = 1;
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
        const double mean = raw.col(c).mean();
        const double sd = std::sqrt((raw.col(c).array() - mean).square().mean());
        if (!(sd > 1e-12 * (1.0 + std::abs(mean)))) continue;
        out.col(q++) = (raw.col(c).array() - mean) / sd;
    }
    return out.leftCols(q);
}

Matrix y_features(RegressionBasis basis, const PathArray& values, const PathArray* tail, std::size_t k,
                  std::size_t d) {
    const auto M = static_cast<Eigen::Index>(values.particles());
    const auto node = values.node(k);
    if (basis == RegressionBasis::constant) return Matrix::Ones(M, 1);
    std::size_t cols = d;
    if (basis == RegressionBasis::poly2_y_plus_Btail) cols += d * (d + 1) / 2 + tail->width();
    Matrix raw(M, static_cast<Eigen::Index>(cols));
    for (Eigen::Index p = 0; p < M; ++p) {
        Eigen::Index c = 0;
        for (std::size_t i = 0; i < d; ++i) raw(p, c++) = node(p, static_cast<Eigen::Index>(i));
        if (basis == RegressionBasis::poly2_y_plus_Btail) {
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = i; j < d; ++j)
                    raw(p, c++) = node(p, static_cast<Eigen::Index>(i)) * node(p, static_cast<Eigen::Index>(j));
            const double* tb = tail->ptr(k, static_cast<std::size_t>(p));
            for (std::size_t j = 0; j < tail->width(); ++j) raw(p, c++) = tb[j];
        }
    }
    return standardize(raw);
}

// Features for the z projection of step k -> k + 1: only information that
// survives at t_{k+1}, i.e. B_T - B_{t_{k+1}}.
Matrix z_features(RegressionBasis basis, const PathArray* tail, std::size_t k, std::size_t M) {
    if (basis != RegressionBasis::poly2_y_plus_Btail) return Matrix::Ones(static_cast<Eigen::Index>(M), 1);
    Matrix raw(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(tail->width()));
    for (std::size_t p = 0; p < M; ++p)
        for (std::size_t j = 0; j < tail->width(); ++j)
            raw(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j)) = tail->ptr(k + 1, p)[j];
    return standardize(raw);
}

// [phi, phi * xi_1, ..., phi * xi_m] for the per-particle driver increments.
Matrix design(const Matrix& phi, const PathArray& increments, std::size_t k) {
    const auto M = phi.rows(), q = phi.cols();
    const auto m = static_cast<Eigen::Index>(increments.width());
    Matrix X(M, q * (1 + m));
    X.leftCols(q) = phi;
    for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index p = 0; p < M; ++p)
            X.block(p, q * (1 + j), 1, q) = phi.row(p) * increments.ptr(k, static_cast<std::size_t>(p))[j];
    return X;
}

Matrix fit(const Matrix& X, const Matrix& targets, double ridge, std::size_t node, const char* what) {
    Matrix beta;
    if (ridge > 0.0) {
        Matrix A = X.transpose() * X;
        A.diagonal().array() += ridge * static_cast<double>(X.rows());
        beta = A.ldlt().solve(X.transpose() * targets);
    } else {
        Eigen::ColPivHouseholderQR<Matrix> qr(X);
        if (qr.rank() == 0) {
            std::ostringstream os;
            os << "singular " << what << " regression at node " << node;
            throw std::runtime_error(os.str());
        }
        beta = qr.solve(targets);
    }
    if (!beta.allFinite()) {
        std::ostringstream os;
        os << "non-finite " << what << " regression at node " << node;
        throw std::runtime_error(os.str());
    }
    return beta;
}

struct StepContext {
    const HomotopyProblem& prob;
    const BrownianPair& drv;
    const RegressionConfig& reg;
    const Dimensions& dm;
    std::size_t N, M, n, d;
    double dt;
    PathArray frozen_coeffs;  // alpha A(frozen) + forcing, nodes 0..N-1
    PathArray tail;
};

// Forward sweep: y_{k+1} = P_k - z_k dB_k where P_k carries the drift and
// dW parts and z_k is the dB_k projection of P_k.
void forward_sweep(StepContext& c, EnsembleState& out, bool theta2_terms) {
    const auto& dm = c.dm;
    const double damp = (1.0 - c.prob.alpha) * c.prob.theta2;
    const PathArray* tail = c.reg.basis == RegressionBasis::poly2_y_plus_Btail ? &c.tail : nullptr;
    Matrix P(static_cast<Eigen::Index>(c.M), static_cast<Eigen::Index>(c.d));
    for (std::size_t k = 0; k < c.N; ++k) {
        for (std::size_t p = 0; p < c.M; ++p) {
            const auto v = out.at(k, p);
            const double* a = c.frozen_coeffs.ptr(k, p);
            const double* dW = c.drv.dW.ptr(k, p);
            for (std::size_t i = 0; i < c.d; ++i) {
                double f = a[dm.Y_off() + i];
                if (theta2_terms) f -= damp * v[dm.Y_off() + i];
                double val = v[i] + f * c.dt;
                for (std::size_t j = 0; j < dm.d_W; ++j) {
                    const std::size_t zi = dm.Z_off() + i * dm.d_W + j;
                    double g = a[zi];
                    if (theta2_terms) g -= damp * v[zi];
                    val += g * dW[j];
                }
                P(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = val;
            }
        }
        const Matrix phi = z_features(c.reg.basis, tail, k, c.M);
        const Matrix X = design(phi, c.drv.dB, k);
        const Matrix beta = fit(X, P, c.reg.ridge, k, "z");
        const auto q = phi.cols();
        for (std::size_t p = 0; p < c.M; ++p) {
            auto vk = out.at(k, p);
            auto vn = out.at(k + 1, p);
            const double* dB = c.drv.dB.ptr(k, p);
            const auto row = phi.row(static_cast<Eigen::Index>(p));
            for (std::size_t i = 0; i < c.d; ++i) {
                double y = P(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i));
                for (std::size_t j = 0; j < dm.d_B; ++j) {
                    const double zij =
                        row.dot(beta.block(q * static_cast<Eigen::Index>(1 + j), static_cast<Eigen::Index>(i), q, 1).col(0));
                    vk[dm.z_off() + i * dm.d_B + j] = zij;
                    y -= zij * dB[j];
                }
                vn[i] = y;
            }
        }
    }
}

// Backward sweep: Y_k = E_k[Y_{k+1} - F dt] - G dB_k with Z_k from the dW_k
// projection. `features` supplies y_k for the regression basis.
void backward_sweep(StepContext& c, EnsembleState& out, const EnsembleState& features, bool theta1_terms) {
    const auto& dm = c.dm;
    const double damp = (1.0 - c.prob.alpha) * c.prob.theta1;
    const PathArray* tail = c.reg.basis == RegressionBasis::poly2_y_plus_Btail ? &c.tail : nullptr;
    Matrix target(static_cast<Eigen::Index>(c.M), static_cast<Eigen::Index>(c.d));
    for (std::size_t k = c.N; k-- > 0;) {
        for (std::size_t p = 0; p < c.M; ++p) {
            const auto v = out.at(k, p);
            const auto vn = out.at(k + 1, p);
            const double* a = c.frozen_coeffs.ptr(k, p);
            for (std::size_t i = 0; i < c.d; ++i) {
                double F = a[dm.y_off() + i];
                if (theta1_terms) F -= damp * v[i];
                target(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = vn[dm.Y_off() + i] - F * c.dt;
            }
        }
        const Matrix phi = y_features(c.reg.basis, features.values, tail, k, c.d);
        const Matrix X = design(phi, c.drv.dW, k);
        const Matrix beta = fit(X, target, c.reg.ridge, k, "Y");
        const auto q = phi.cols();
        const Matrix cond = phi * beta.topRows(q);
        for (std::size_t p = 0; p < c.M; ++p) {
            auto v = out.at(k, p);
            const double* a = c.frozen_coeffs.ptr(k, p);
            const double* dB = c.drv.dB.ptr(k, p);
            const auto row = phi.row(static_cast<Eigen::Index>(p));
            for (std::size_t i = 0; i < c.d; ++i) {
                for (std::size_t j = 0; j < dm.d_W; ++j)
                    v[dm.Z_off() + i * dm.d_W + j] =
                        row.dot(beta.block(q * static_cast<Eigen::Index>(1 + j), static_cast<Eigen::Index>(i), q, 1).col(0));
                double Y = cond(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i));
                for (std::size_t j = 0; j < dm.d_B; ++j) {
                    const std::size_t zi = dm.z_off() + i * dm.d_B + j;
                    double G = a[zi];
                    if (theta1_terms) G -= damp * v[zi];
                    Y -= G * dB[j];
                }
                v[dm.Y_off() + i] = Y;
            }
        }
    }
}

void terminal_values(const HomotopyProblem& prob, EnsembleState& out, const EnsembleState& source) {
    const std::size_t N = out.grid.N, d = prob.base.dims.d;
    const PointContext ctx{out.grid.T, N, 0};
    const Vector stat = prob.alpha > 0.0 ? terminal_statistic(prob.base, ctx, source.law_y(N)) : Vector();
    Vector h(d);
    for (std::size_t p = 0; p < out.particles(); ++p) {
        evaluate_homotopy_terminal(prob, PointContext{ctx.t, N, p}, source.at(N, p).head(d), stat, h);
        auto v = out.at(N, p);
        v.segment(prob.base.dims.Y_off(), d) = h + prob.shift_for(p);
        v.tail(prob.base.dims.z_size() + prob.base.dims.Z_size()).setZero();
    }
}

}  // namespace

EnsembleState solve_decoupled_step(const HomotopyProblem& problem, const EnsembleState& frozen,
                                   const BrownianPair& drivers, const RegressionConfig& reg) {
    problem.validate();
    if (reg.ridge < 0.0) throw std::invalid_argument("ridge must be nonnegative");
    const Dimensions& dm = problem.base.dims;
    const std::size_t N = frozen.grid.N, M = frozen.particles(), n = dm.packed();
    if (frozen.dims.packed() != n || drivers.grid.N != N || drivers.particles != M || drivers.d_W != dm.d_W ||
        drivers.d_B != dm.d_B)
        throw std::invalid_argument("shape mismatch between problem, frozen state and drivers");
    if (problem.initial.rows() != 1 && static_cast<std::size_t>(problem.initial.rows()) != M)
        throw std::invalid_argument("initial value rows must be 1 or M");
    if (problem.forcing && (problem.forcing->nodes() < N || problem.forcing->particles() != M))
        throw std::invalid_argument("forcing shape mismatch");

    StepContext c{problem, drivers, reg, dm, N, M, n, dm.d, frozen.grid.dt(), PathArray(N, M, n), PathArray()};
    if (reg.basis == RegressionBasis::poly2_y_plus_Btail) c.tail = drivers.backward_tail();

    if (problem.alpha > 0.0) {
        parallel_for(N, [&](std::size_t k) {
            const PointContext node_ctx{frozen.grid.t(k), k, 0};
            const Vector stat = law_statistic(problem.base, node_ctx, frozen.law(k));
            for (std::size_t p = 0; p < M; ++p) {
                Eigen::Map<Vector> out = c.frozen_coeffs.at(k, p);
                evaluate(problem.base, PointContext{node_ctx.t, k, p}, frozen.at(k, p), stat, out);
                out *= problem.alpha;
            }
        }, 1);
    }
    if (problem.forcing)
        for (std::size_t k = 0; k < N; ++k)
            for (std::size_t p = 0; p < M; ++p) c.frozen_coeffs.at(k, p) += problem.forcing->at(k, p);
    for (double v : c.frozen_coeffs.raw())
        if (!std::isfinite(v)) throw std::runtime_error("non-finite coefficient value in decoupled step");

    EnsembleState out(frozen.grid, dm, M);
    for (std::size_t p = 0; p < M; ++p) out.at(0, p).head(dm.d) = problem.initial_for(p);

    if (problem.homotopy_case == HomotopyCase::case1) {
        forward_sweep(c, out, false);
        terminal_values(problem, out, out);
        backward_sweep(c, out, out, true);
    } else {
        // The Y equation no longer sees the new y, so it goes first.
        terminal_values(problem, out, frozen);
        backward_sweep(c, out, frozen, false);
        forward_sweep(c, out, true);
    }
    return out;
}

EnsembleState linear_base_solve(const HomotopyProblem& problem, const BrownianPair& drivers,
                                const RegressionConfig& reg) {
    if (problem.alpha != 0.0) throw std::invalid_argument("linear_base_solve needs alpha = 0");
    const EnsembleState start = constant_state(problem, drivers.grid, drivers.particles);
    return solve_decoupled_step(problem, start, drivers, reg);
}

double tail_median_ratio(const std::vector<double>& ratios) {
    std::vector<double> tail;
    const std::size_t skip = ratios.size() > 2 ? 2 : 0;
    for (std::size_t i = skip; i < ratios.size(); ++i)
        if (std::isfinite(ratios[i])) tail.push_back(ratios[i]);
    if (tail.empty()) return 0.0;
    std::sort(tail.begin(), tail.end());
    const std::size_t m = tail.size();
    return m % 2 ? tail[m / 2] : 0.5 * (tail[m / 2 - 1] + tail[m / 2]);
}

SolveReport picard_solve(const HomotopyProblem& problem, const EnsembleState& warm, const BrownianPair& drivers,
                         const RegressionConfig& reg, const PicardOptions& options) {
    if (!(options.tol > 0.0)) throw std::invalid_argument("tol must be positive");
    if (!(options.damping > 0.0 && options.damping <= 1.0)) throw std::invalid_argument("damping must lie in (0,1]");
    const auto start = std::chrono::steady_clock::now();
    SolveReport rep;
    EnsembleState v = warm;
    double D0 = 0.0;
    for (std::size_t m = 1; m <= options.max_iter; ++m) {
        EnsembleState next = solve_decoupled_step(problem, v, drivers, reg);
        if (options.damping < 1.0) {
            auto& nx = next.values.raw();
            const auto& old = v.values.raw();
            for (std::size_t i = 0; i < nx.size(); ++i)
                nx[i] = (1.0 - options.damping) * old[i] + options.damping * nx[i];
        }
        const double D = d_norm(next, v);
        if (!rep.picard_residuals.empty()) {
            const double prev = rep.picard_residuals.back();
            rep.contraction_ratios.push_back(prev > 0.0 ? D / prev : 0.0);
        }
        rep.picard_residuals.push_back(D);
        rep.iterations = m;
        v = std::move(next);
        if (m == 1) D0 = D;
        if (!std::isfinite(D) || (m > 1 && D > 1e6 * D0)) {
            rep.final_state = v;
            rep.wallclock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            throw SolverError("Picard divergence", std::move(rep));
        }
        if (D <= options.tol) {
            rep.converged = true;
            break;
        }
    }
    rep.final_state = std::move(v);
    rep.residuals = residual(problem, rep.final_state, drivers);
    rep.wallclock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

SolveReport continuation_solve(const HomotopyProblem& target, const ContinuationOptions& options,
                               const BrownianPair& drivers, const RegressionConfig& reg) {
    if (!(options.delta > 0.0 && options.delta <= 1.0)) throw std::invalid_argument("delta must lie in (0,1]");
    target.validate();
    const auto start = std::chrono::steady_clock::now();
    SolveReport rep;
    HomotopyProblem rung = target;
    rung.alpha = 0.0;
    EnsembleState cur = linear_base_solve(rung, drivers, reg);
    {
        LadderRung r;
        r.alpha = 0.0;
        r.iterations = 1;
        r.converged = true;
        r.final_D = d_norm(solve_decoupled_step(rung, cur, drivers, reg), cur);
        rep.alpha_ladder.push_back(r);
        rep.iterations = 1;
    }
    double alpha = 0.0, delta = options.delta;
    // halvings are shared by the whole ladder, so the rung count stays bounded
    const double min_delta = std::ldexp(options.delta, -static_cast<int>(options.max_halvings));
    while (alpha < 1.0) {
        for (;;) {
            double next = alpha + delta;
            if (next > 1.0 - 1e-12) next = 1.0;
            rung.alpha = next;
            SolveReport r;
            bool ok = false;
            try {
                r = picard_solve(rung, cur, drivers, reg, options.picard);
                ok = r.converged;
            } catch (const SolverError& e) {
                r = e.report();
            }
            LadderRung lr;
            lr.alpha = next;
            lr.iterations = r.iterations;
            lr.converged = ok;
            lr.final_D = r.picard_residuals.empty() ? 0.0 : r.picard_residuals.back();
            lr.median_ratio = tail_median_ratio(r.contraction_ratios);
            lr.picard_residuals = r.picard_residuals;
            rep.alpha_ladder.push_back(lr);
            rep.iterations += r.iterations;
            if (ok) {
                rep.picard_residuals = r.picard_residuals;
                rep.contraction_ratios = r.contraction_ratios;
                cur = std::move(r.final_state);
                alpha = next;
                break;
            }
            if (delta > min_delta * (1.0 + 1e-12)) {
                delta *= 0.5;
                continue;
            }
            rep.final_state = cur;
            rep.wallclock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            std::ostringstream os;
            os << "continuation failed at alpha=" << next;
            throw ContinuationError(os.str(), next, std::move(rep));
        }
    }
    HomotopyProblem final_problem = target;
    final_problem.alpha = 1.0;
    rep.final_state = std::move(cur);
    rep.residuals = residual(final_problem, rep.final_state, drivers);
    rep.converged = true;
    rep.wallclock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

namespace {

struct ReducedSystem {
    Matrix A;  // (y, Y)' = A (y, Y) + b
    Vector b;
    Matrix terminal;  // Y(T) = terminal y(T) + terminal_shift
    Vector terminal_shift;
};

Matrix integrate(const ReducedSystem& s, const Vector& start, const TimeGrid& grid) {
    const auto m = start.size();
    Matrix out(static_cast<Eigen::Index>(grid.N + 1), m);
    out.row(0) = start.transpose();
    const std::size_t sub = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(grid.dt() / 1e-3)));
    const double h = grid.dt() / static_cast<double>(sub);
    Vector u = start;
    auto rhs = [&](const Vector& w) -> Vector { return s.A * w + s.b; };
    for (std::size_t k = 0; k < grid.N; ++k) {
        for (std::size_t r = 0; r < sub; ++r) {
            const Vector k1 = rhs(u);
            const Vector k2 = rhs(u + 0.5 * h * k1);
            const Vector k3 = rhs(u + 0.5 * h * k2);
            const Vector k4 = rhs(u + h * k3);
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out.row(static_cast<Eigen::Index>(k + 1)) = u.transpose();
    }
    return out;
}

}  // namespace

OracleSolution moment_ode_oracle(const LinearMeanFieldModel& model, const Vector& x, const TimeGrid& grid,
                                 const Vector& xi) {
    model.validate();
    const Dimensions& dm = model.dims;
    const auto d = static_cast<Eigen::Index>(dm.d);
    if (x.size() != d) throw std::invalid_argument("oracle start has wrong dimension");
    const Matrix Ks = model.K + model.K_bar;
    const auto y = static_cast<Eigen::Index>(dm.y_off()), Y = static_cast<Eigen::Index>(dm.Y_off());
    const auto zrows = static_cast<Eigen::Index>(dm.z_size() + dm.Z_size());
    const auto z = static_cast<Eigen::Index>(dm.z_off());
    if (!Ks.block(z, 0, zrows, 2 * d).isZero(0.0) || !model.k0.segment(z, zrows).isZero(0.0))
        throw std::invalid_argument("oracle requires g and G to vanish at z = Z = 0");

    ReducedSystem s;
    s.A.resize(2 * d, 2 * d);
    s.A.topLeftCorner(d, d) = Ks.block(Y, y, d, d);  // y' = f
    s.A.topRightCorner(d, d) = Ks.block(Y, Y, d, d);
    s.A.bottomLeftCorner(d, d) = Ks.block(y, y, d, d);  // Y' = F
    s.A.bottomRightCorner(d, d) = Ks.block(y, Y, d, d);
    s.b.resize(2 * d);
    s.b << model.k0.segment(Y, d), model.k0.segment(y, d);
    if (model.terminal_kind == TerminalKind::linear) {
        s.terminal = model.c * Matrix::Identity(d, d);
        s.terminal_shift = Vector::Zero(d);
    } else {
        s.terminal = model.H + model.H_bar;
        s.terminal_shift = model.h0;
    }
    if (xi.size() == d) s.terminal_shift += xi;

    auto shoot = [&](const Vector& Y0) -> Vector {
        Vector start(2 * d);
        start << x, Y0;
        const Matrix path = integrate(s, start, grid);
        const Vector end = path.row(static_cast<Eigen::Index>(grid.N)).transpose();
        return end.tail(d) - s.terminal * end.head(d) - s.terminal_shift;
    };

    OracleSolution out;
    out.grid = grid;
    const Vector r0 = shoot(Vector::Zero(d));
    Matrix J(d, d);
    for (Eigen::Index j = 0; j < d; ++j) J.col(j) = shoot(Vector::Unit(d, j)) - r0;
    // Compare the shooting Jacobian with the size of the two terms it is the
    // difference of, so exact cancellation is detected as singularity.
    Matrix Jend(2 * d, d);
    {
        Vector s0(2 * d);
        s0 << x, Vector::Zero(d);
        const Vector e0 = integrate(s, s0, grid).row(static_cast<Eigen::Index>(grid.N)).transpose();
        for (Eigen::Index j = 0; j < d; ++j) {
            Vector sj(2 * d);
            sj << x, Vector::Unit(d, j);
            Jend.col(j) = integrate(s, sj, grid).row(static_cast<Eigen::Index>(grid.N)).transpose() - e0;
        }
    }
    const double scale = 1.0 + Jend.norm() * (1.0 + s.terminal.norm()) + r0.norm();
    Eigen::JacobiSVD<Matrix> svd(J, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Index rank = 0;
    for (Eigen::Index i = 0; i < d; ++i)
        if (svd.singularValues()[i] > 1e-9 * scale) ++rank;

    Vector root;
    if (rank < d) {
        // Singular shooting map: either no solution or a whole family.
        Vector particular = Vector::Zero(d);
        for (Eigen::Index i = 0; i < rank; ++i)
            particular -= svd.matrixV().col(i) * (svd.matrixU().col(i).dot(r0) / svd.singularValues()[i]);
        if ((J * particular + r0).norm() > 1e-8 * scale)
            throw std::runtime_error("shooting fails to bracket a root");
        out.unique = false;
        out.roots.push_back(particular);
        out.roots.push_back(particular + svd.matrixV().col(d - 1));
        root = particular;
    } else if (d == 1) {
        // Bisection on the scalar shooting residual.
        auto r = [&](double v) { return shoot(Vector::Constant(1, v))[0]; };
        const double guess = -r0[0] / J(0, 0);
        double width = 1.0 + std::abs(guess);
        double lo = guess - width, hi = guess + width;
        double rlo = r(lo), rhi = r(hi);
        for (int expand = 0; rlo * rhi > 0.0 && expand < 60; ++expand) {
            width *= 2.0;
            lo = guess - width;
            hi = guess + width;
            rlo = r(lo);
            rhi = r(hi);
        }
        if (rlo * rhi > 0.0) throw std::runtime_error("shooting fails to bracket a root");
        for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + std::abs(lo)); ++it) {
            const double mid = 0.5 * (lo + hi);
            const double rm = r(mid);
            if (rm == 0.0) {
                lo = hi = mid;
                break;
            }
            if ((rm < 0.0) == (rlo < 0.0)) {
                lo = mid;
                rlo = rm;
            } else {
                hi = mid;
            }
        }
        root = Vector::Constant(1, 0.5 * (lo + hi));
        out.roots.push_back(root);
    } else {
        root = J.partialPivLu().solve(-r0);
        out.roots.push_back(root);
    }
    Vector start(2 * d);
    start << x, root;
    const Matrix path = integrate(s, start, grid);
    out.y = path.leftCols(d);
    out.Y = path.rightCols(d);
    return out;
}

NonuniquenessReport detect_nonuniqueness(const HomotopyProblem& problem, const std::vector<EnsembleState>& warm_starts,
                                         const BrownianPair& drivers, const RegressionConfig& reg,
                                         const PicardOptions& options) {
    NonuniquenessReport rep;
    PicardOptions inner = options;
    inner.tol = options.tol / 100.0;
    for (std::size_t i = 0; i < warm_starts.size(); ++i) {
        try {
            rep.limits.push_back(picard_solve(problem, warm_starts[i], drivers, reg, inner));
        } catch (const SolverError& e) {
            rep.failures.push_back("warm start " + std::to_string(i) + ": " + e.what());
        }
    }
    const auto L = static_cast<Eigen::Index>(rep.limits.size());
    rep.distances = Matrix::Zero(L, L);
    for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = i + 1; j < L; ++j)
            rep.distances(i, j) = rep.distances(j, i) =
                d_norm(rep.limits[static_cast<std::size_t>(i)].final_state, rep.limits[static_cast<std::size_t>(j)].final_state);
    return rep;
}

void write_trajectory_csv(const EnsembleState& state, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path);
    const Dimensions& dm = state.dims;
    const std::size_t M = state.particles();
    os << "t";
    for (std::size_t i = 0; i < dm.d; ++i) os << ",mean_y[" << i << "]";
    for (std::size_t i = 0; i < dm.d; ++i) os << ",mean_Y[" << i << "]";
    os << ",rms_z,rms_Z,std_y,std_Y\n";
    for (std::size_t k = 0; k <= state.grid.N; ++k) {
        os << format_double(state.grid.t(k));
        std::vector<double> my(dm.d), mY(dm.d);
        for (std::size_t i = 0; i < dm.d; ++i) {
            my[i] = state.mean(k, dm.y_off() + i);
            mY[i] = state.mean(k, dm.Y_off() + i);
        }
        double vz = 0.0, vZ = 0.0, vy = 0.0, vY = 0.0;
        for (std::size_t p = 0; p < M; ++p) {
            const double* v = state.values.ptr(k, p);
            for (std::size_t i = 0; i < dm.z_size(); ++i) vz += v[dm.z_off() + i] * v[dm.z_off() + i];
            for (std::size_t i = 0; i < dm.Z_size(); ++i) vZ += v[dm.Z_off() + i] * v[dm.Z_off() + i];
            for (std::size_t i = 0; i < dm.d; ++i) {
                vy += (v[dm.y_off() + i] - my[i]) * (v[dm.y_off() + i] - my[i]);
                vY += (v[dm.Y_off() + i] - mY[i]) * (v[dm.Y_off() + i] - mY[i]);
            }
        }
        const double Md = static_cast<double>(M);
        for (double m : my) os << "," << format_double(m);
        for (double m : mY) os << "," << format_double(m);
        os << "," << format_double(std::sqrt(vz / Md)) << "," << format_double(std::sqrt(vZ / Md)) << ","
           << format_double(std::sqrt(vy / (Md * static_cast<double>(dm.d)))) << ","
           << format_double(std::sqrt(vY / (Md * static_cast<double>(dm.d)))) << "\n";
    }
}

void write_ladder_csv(const std::vector<LadderRung>& ladder, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "alpha,iterations,final_D,median_ratio\n";
    for (const auto& r : ladder)
        os << format_double(r.alpha) << "," << r.iterations << "," << format_double(r.final_D) << ","
           << format_double(r.median_ratio) << "\n";
}

}  // namespace mvfb
