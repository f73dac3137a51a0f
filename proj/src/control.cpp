#include "mvfbdsde/control.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "mvfbdsde/parallel.hpp"

namespace mvfb {

bool ControlBox::contains(ConstVecRef u, double tol) const {
    return u.size() == lower.size() && (u.array() >= lower.array() - tol).all() &&
           (u.array() <= upper.array() + tol).all();
}

Vector ControlBox::project(ConstVecRef u) const { return u.cwiseMax(lower).cwiseMin(upper); }

void ControlProblem::validate() const {
    dynamics.dims.validate();
    const auto d = static_cast<Eigen::Index>(dynamics.dims.d);
    const auto du = static_cast<Eigen::Index>(dynamics.control_dim);
    if (du == 0) throw std::invalid_argument("control dimension must be positive");
    if (!dynamics.coefficients) throw std::invalid_argument("controlled dynamics missing");
    if (box.lower.size() != du || box.upper.size() != du || (box.lower.array() > box.upper.array()).any())
        throw std::invalid_argument("control set must be a nonempty box of the control dimension");
    if (x.size() != d) throw std::invalid_argument("initial value has wrong dimension");
    if (xi.size() != 0 && xi.size() != d) throw std::invalid_argument("terminal shift has wrong dimension");
    if (c == 0.0) throw std::invalid_argument("terminal coefficient c must be nonzero");
}

ControlPath deterministic_control(const TimeGrid& grid, std::size_t particles, std::size_t control_dim,
                                  const std::function<void(double, VecRef)>& fill) {
    ControlPath u(grid.N + 1, particles, control_dim);
    Vector v(control_dim);
    for (std::size_t k = 0; k <= grid.N; ++k) {
        v.setZero();
        fill(grid.t(k), v);
        for (std::size_t p = 0; p < particles; ++p) u.at(k, p) = v;
    }
    return u;
}

void require_admissible(const ControlProblem& problem, const ControlPath& control) {
    if (control.nodes() != problem.grid.N + 1 || control.width() != problem.dynamics.control_dim)
        throw std::invalid_argument("control path has wrong shape");
    for (std::size_t k = 0; k < control.nodes(); ++k)
        for (std::size_t p = 0; p < control.particles(); ++p)
            if (!problem.box.contains(control.at(k, p)) || !control.at(k, p).allFinite()) {
                std::ostringstream os;
                os << "control outside U at node " << k << " (t=" << problem.grid.t(k) << ")";
                throw std::invalid_argument(os.str());
            }
}

namespace {

// +1 on the F and G slots, -1 on f and g.
Vector hamiltonian_signs(const Dimensions& dm) {
    Vector s = Vector::Ones(static_cast<Eigen::Index>(dm.packed()));
    s.segment(dm.Y_off(), dm.d).setConstant(-1.0);
    s.segment(dm.Z_off(), dm.Z_size()).setConstant(-1.0);
    return s;
}

// Negates the Y and Z slots.
Vector backward_flip(const Dimensions& dm) { return hamiltonian_signs(dm); }

double fd_step(double x) { return 1e-5 * std::max(1.0, std::abs(x)); }

}  // namespace

void controlled_jacobians(const ControlProblem& P, double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean, Matrix& dv,
                        Matrix& du, Matrix& dm) {
    const auto n = static_cast<Eigen::Index>(P.dynamics.dims.packed());
    const auto nu = static_cast<Eigen::Index>(P.dynamics.control_dim);
    dv.resize(n, n);
    du.resize(n, nu);
    dm.resize(n, n);
    if (P.dynamics.jacobians) {
        P.dynamics.jacobians(t, v, u, mean, dv, du, dm);
        return;
    }
    Vector a(n), b(n);
    Vector vv = v, uu = u, mm = mean;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double h = fd_step(vv[i]), keep = vv[i];
        vv[i] = keep + h;
        P.dynamics.coefficients(t, vv, uu, mm, a);
        vv[i] = keep - h;
        P.dynamics.coefficients(t, vv, uu, mm, b);
        vv[i] = keep;
        dv.col(i) = (a - b) / (2.0 * h);
    }
    for (Eigen::Index i = 0; i < nu; ++i) {
        const double h = fd_step(uu[i]), keep = uu[i];
        uu[i] = keep + h;
        P.dynamics.coefficients(t, vv, uu, mm, a);
        uu[i] = keep - h;
        P.dynamics.coefficients(t, vv, uu, mm, b);
        uu[i] = keep;
        du.col(i) = (a - b) / (2.0 * h);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const double h = fd_step(mm[i]), keep = mm[i];
        mm[i] = keep + h;
        P.dynamics.coefficients(t, vv, uu, mm, a);
        mm[i] = keep - h;
        P.dynamics.coefficients(t, vv, uu, mm, b);
        mm[i] = keep;
        dm.col(i) = (a - b) / (2.0 * h);
    }
}

namespace {

void running_gradient(const ControlProblem& P, double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean, Vector& gv,
                      Vector& gu, Vector& gm) {
    const auto n = v.size(), nu = u.size();
    gv = Vector::Zero(n);
    gu = Vector::Zero(nu);
    gm = Vector::Zero(n);
    if (!P.running.value) return;
    if (P.running.gradient) {
        P.running.gradient(t, v, u, mean, gv, gu, gm);
        return;
    }
    Vector vv = v, uu = u, mm = mean;
    auto central = [&](Vector& arg, Vector& out) {
        for (Eigen::Index i = 0; i < arg.size(); ++i) {
            const double h = fd_step(arg[i]), keep = arg[i];
            arg[i] = keep + h;
            const double a = P.running.value(t, vv, uu, mm);
            arg[i] = keep - h;
            const double b = P.running.value(t, vv, uu, mm);
            arg[i] = keep;
            out[i] = (a - b) / (2.0 * h);
        }
    };
    central(vv, gv);
    central(uu, gu);
    central(mm, gm);
}

void endpoint_gradient(const EndpointCost& cost, ConstVecRef x, ConstVecRef mean, Vector& gx, Vector& gm) {
    gx = Vector::Zero(x.size());
    gm = Vector::Zero(mean.size());
    if (!cost.value) return;
    if (cost.gradient) {
        cost.gradient(x, mean, gx, gm);
        return;
    }
    Vector xx = x, mm = mean;
    auto central = [&](Vector& arg, Vector& out) {
        for (Eigen::Index i = 0; i < arg.size(); ++i) {
            const double h = fd_step(arg[i]), keep = arg[i];
            arg[i] = keep + h;
            const double a = cost.value(xx, mm);
            arg[i] = keep - h;
            const double b = cost.value(xx, mm);
            arg[i] = keep;
            out[i] = (a - b) / (2.0 * h);
        }
    };
    central(xx, gx);
    central(mm, gm);
}

double endpoint_value(const EndpointCost& cost, ConstVecRef x, ConstVecRef mean) {
    return cost.value ? cost.value(x, mean) : 0.0;
}

double running_value(const ControlProblem& P, double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean) {
    return P.running.value ? P.running.value(t, v, u, mean) : 0.0;
}

Vector grad_u_hamiltonian(const ControlProblem& P, double t, ConstVecRef V, ConstVecRef u, ConstVecRef chi,
                          ConstVecRef mean) {
    Matrix dv, du, dm;
    controlled_jacobians(P, t, V, u, mean, dv, du, dm);
    Vector gv, gu, gm;
    running_gradient(P, t, V, u, mean, gv, gu, gm);
    const Vector s = hamiltonian_signs(P.dynamics.dims);
    return du.transpose() * s.cwiseProduct(chi) - gu;
}

}  // namespace

CoefficientSet canonical_coefficients(const ControlProblem& problem, std::shared_ptr<const ControlPath> control) {
    problem.validate();
    if (!control || control->width() != problem.dynamics.control_dim)
        throw std::invalid_argument("control path has wrong width");
    auto prob = std::make_shared<const ControlProblem>(problem);
    CoefficientSet c;
    c.name = problem.name + "-state";
    c.dims = problem.dynamics.dims;
    c.law_dependence = LawDependence::first_moment;
    const Dimensions dm = c.dims;
    c.coefficients = [prob, control, dm](const PointContext& ctx, ConstVecRef v, ConstVecRef stat, VecRef out) {
        const std::size_t k = std::min(ctx.node, control->nodes() - 1);
        const std::size_t p = control->particles() == 1 ? 0 : ctx.particle;
        prob->dynamics.coefficients(ctx.t, v, control->at(k, p), stat, out);
        out.segment(dm.y_off(), dm.d) *= -1.0;
        out.segment(dm.z_off(), dm.z_size()) *= -1.0;
    };
    c.terminal_kind = TerminalKind::linear;
    c.terminal_coefficient = problem.c;
    return c;
}

CoefficientSet canonical_coefficients_at(const ControlProblem& problem, const Vector& u) {
    auto path = std::make_shared<ControlPath>(1, 1, problem.dynamics.control_dim);
    path->at(0, 0) = u;
    return canonical_coefficients(problem, path);
}

CoefficientSet flip_backward_sign(const CoefficientSet& c) {
    auto orig = std::make_shared<const CoefficientSet>(c);
    const Dimensions dm = c.dims;
    const Vector S = backward_flip(dm);
    CoefficientSet out;
    out.name = c.name + "-flipped";
    out.dims = dm;
    out.law_dependence = c.law_dependence;
    if (c.law_statistic) {
        out.law_statistic = [orig, S](const PointContext& ctx, const EmpiricalLaw& law) {
            Matrix samples = law.samples() * S.asDiagonal();
            const EmpiricalLaw flipped = law.uniform() ? EmpiricalLaw(std::move(samples))
                                                       : EmpiricalLaw(std::move(samples), law.weights());
            return orig->law_statistic(ctx, flipped);
        };
    } else if (c.law_dependence == LawDependence::first_moment) {
        out.law_statistic = [S](const PointContext&, const EmpiricalLaw& law) -> Vector {
            return S.cwiseProduct(law.mean());
        };
    }
    out.coefficients = [orig, S, dm](const PointContext& ctx, ConstVecRef v, ConstVecRef stat, VecRef res) {
        const Vector w = S.cwiseProduct(v);
        evaluate(*orig, ctx, w, stat, res);
        res.segment(dm.y_off(), dm.d) *= -1.0;
        res.segment(dm.z_off(), dm.z_size()) *= -1.0;
    };
    out.terminal_kind = c.terminal_kind;
    out.terminal_coefficient = -c.terminal_coefficient;
    out.terminal_statistic = c.terminal_statistic;
    if (c.terminal_kind == TerminalKind::law_map) {
        out.terminal = [orig](const PointContext& ctx, ConstVecRef y, ConstVecRef stat, VecRef res) {
            evaluate_terminal(*orig, ctx, y, stat, res);
            res = -res;
        };
    }
    return out;
}

SolveReport solve_with_direction(const HomotopyProblem& target, bool reversed, const ContinuationOptions& options,
                                 const BrownianPair& drivers, const RegressionConfig& reg) {
    if (!reversed) return continuation_solve(target, options, drivers, reg);
    const Dimensions& dm = target.base.dims;
    HomotopyProblem flipped = target;
    flipped.base = flip_backward_sign(target.base);
    if (target.forcing) {
        auto f = std::make_shared<PathArray>(*target.forcing);
        for (std::size_t k = 0; k < f->nodes(); ++k)
            for (std::size_t p = 0; p < f->particles(); ++p) {
                auto a = f->at(k, p);
                a.segment(dm.y_off(), dm.d) *= -1.0;
                a.segment(dm.z_off(), dm.z_size()) *= -1.0;
            }
        flipped.forcing = f;
    }
    flipped.terminal_shift = -target.terminal_shift;
    SolveReport rep = continuation_solve(flipped, options, drivers, reg);
    const Vector S = backward_flip(dm);
    for (std::size_t k = 0; k <= rep.final_state.grid.N; ++k)
        for (std::size_t p = 0; p < rep.final_state.particles(); ++p) rep.final_state.at(k, p).array() *= S.array();
    HomotopyProblem original = target;
    original.alpha = 1.0;
    rep.residuals = residual(original, rep.final_state, drivers);
    return rep;
}

SolveReport solve_state(const ControlProblem& problem, const ControlPath& control, const BrownianPair& drivers,
                        const RegressionConfig& reg) {
    require_admissible(problem, control);
    HomotopyProblem target;
    target.base = canonical_coefficients(problem, std::make_shared<const ControlPath>(control));
    target.alpha = 1.0;
    target.homotopy_case = HomotopyCase::case1;
    target.theta1 = problem.theta1;
    target.theta2 = problem.theta2;
    target.initial = problem.x.transpose();
    if (problem.xi.size() > 0) target.terminal_shift = problem.xi.transpose();
    return solve_with_direction(target, problem.c < 0.0, problem.solver, drivers, reg);
}

double hamiltonian(const ControlProblem& problem, double t, ConstVecRef V, ConstVecRef u, ConstVecRef chi,
                   ConstVecRef mean) {
    const Dimensions& dm = problem.dynamics.dims;
    const auto n = static_cast<Eigen::Index>(dm.packed());
    if (V.size() != n || chi.size() != n || mean.size() != n ||
        u.size() != static_cast<Eigen::Index>(problem.dynamics.control_dim))
        throw std::invalid_argument("hamiltonian: inconsistent shapes");
    Vector A(n);
    problem.dynamics.coefficients(t, V, u, mean, A);
    const double H = hamiltonian_signs(dm).cwiseProduct(A).dot(chi) - running_value(problem, t, V, u, mean);
    if (!std::isfinite(H)) throw std::runtime_error("non-finite Hamiltonian");
    return H;
}

double hamiltonian(const ControlProblem& problem, double t, ConstVecRef V, ConstVecRef u, ConstVecRef chi,
                   const EmpiricalLaw& law) {
    return hamiltonian(problem, t, V, u, chi, law.mean());
}

Matrix l_derivative(const MeasureFunctional& functional, const EmpiricalLaw& law, const Matrix& points) {
    if (points.cols() != static_cast<Eigen::Index>(law.dim()) && points.rows() > 0)
        throw std::invalid_argument("evaluation points have wrong dimension");
    Matrix out(points.rows(), static_cast<Eigen::Index>(law.dim()));
    if (functional.analytic) {
        for (Eigen::Index i = 0; i < points.rows(); ++i)
            out.row(i) = functional.analytic(law, points.row(i).transpose()).transpose();
        return out;
    }
    if (functional.structure != LawDependence::first_moment || !functional.moment_map)
        throw std::invalid_argument("L-derivative unavailable");
    Vector m = law.mean();
    Vector grad(m.size());
    if (functional.moment_gradient) {
        grad = functional.moment_gradient(m);
    } else {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double h = 1e-6 * std::max(1.0, std::abs(m[i])), keep = m[i];
            m[i] = keep + h;
            const double a = functional.moment_map(m);
            m[i] = keep - h;
            const double b = functional.moment_map(m);
            m[i] = keep;
            grad[i] = (a - b) / (2.0 * h);
        }
    }
    for (Eigen::Index i = 0; i < points.rows(); ++i) out.row(i) = grad.transpose();
    return out;
}

namespace {

struct AdjointData {
    std::size_t N = 0, M = 0, n = 0;
    PathArray jac_v;      // n*n per (k, p), row-major J_v
    PathArray jac_mean;   // n*n per (k, p)
    PathArray grad_v;     // n
    PathArray grad_mean;  // n
    std::vector<std::vector<std::uint32_t>> boot;
    Vector signs;
};

std::vector<std::uint32_t> bootstrap_indices(std::size_t M, std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(M - 1));
    std::vector<std::uint32_t> idx(M);
    for (auto& i : idx) i = pick(rng);
    return idx;
}

}  // namespace

AdjointSystem build_adjoint_coefficients(const ControlProblem& problem, const EnsembleState& state,
                                         const ControlPath& control, const AdjointOptions& options) {
    problem.validate();
    require_admissible(problem, control);
    const Dimensions& dm = problem.dynamics.dims;
    const std::size_t N = state.grid.N, M = state.particles(), n = dm.packed(), d = dm.d;
    const std::size_t nu = problem.dynamics.control_dim;
    if (state.dims.packed() != n || control.particles() != M)
        throw std::invalid_argument("state and control disagree in shape");

    auto data = std::make_shared<AdjointData>();
    data->N = N;
    data->M = M;
    data->n = n;
    data->jac_v = PathArray(N, M, n * n);
    data->jac_mean = PathArray(N, M, n * n);
    data->grad_v = PathArray(N, M, n);
    data->grad_mean = PathArray(N, M, n);
    data->signs = hamiltonian_signs(dm);
    data->boot.resize(N);

    AdjointSystem sys;
    sys.jac_u = PathArray(N, M, n * nu);
    sys.grad_u_cost = PathArray(N, M, nu);

    parallel_for(N, [&](std::size_t k) {
        const double t = state.grid.t(k);
        const Vector mean = state.law(k).mean();
        Matrix dv, du, dmn;
        Vector gv, gu, gm;
        for (std::size_t p = 0; p < M; ++p) {
            const auto V = state.at(k, p);
            const auto u = control.at(k, p);
            controlled_jacobians(problem, t, V, u, mean, dv, du, dmn);
            running_gradient(problem, t, V, u, mean, gv, gu, gm);
            if (!dv.allFinite() || !du.allFinite() || !dmn.allFinite() || !gv.allFinite() || !gu.allFinite() ||
                !gm.allFinite()) {
                std::ostringstream os;
                os << "non-finite derivative at node " << k;
                throw std::runtime_error(os.str());
            }
            Eigen::Map<RowMatrix>(data->jac_v.ptr(k, p), n, n) = dv;
            Eigen::Map<RowMatrix>(data->jac_mean.ptr(k, p), n, n) = dmn;
            data->grad_v.at(k, p) = gv;
            data->grad_mean.at(k, p) = gm;
            Eigen::Map<RowMatrix>(sys.jac_u.ptr(k, p), n, nu) = du;
            sys.grad_u_cost.at(k, p) = gu;
        }
        data->boot[k] = bootstrap_indices(M, options.bootstrap_seed, k);
    }, 1);

    CoefficientSet& c = sys.coeffs;
    c.name = problem.name + "-adjoint";
    c.dims = dm;
    c.law_dependence = LawDependence::general;
    // E~[d_mu H(V~, chi~)(V)]: for mean-dependent H it is the same for every
    // particle, so it is computed once per node from a bootstrap copy.
    c.law_statistic = [data](const PointContext& ctx, const EmpiricalLaw& law) -> Vector {
        const std::size_t n = data->n;
        Vector acc = Vector::Zero(static_cast<Eigen::Index>(n));
        if (ctx.node >= data->N) return acc;
        if (law.size() != data->M) throw std::invalid_argument("adjoint law must carry the state ensemble size");
        for (std::uint32_t j : data->boot[ctx.node]) {
            const Eigen::Map<const RowMatrix> Jm(data->jac_mean.ptr(ctx.node, j), n, n);
            const Vector chi = law.samples().row(j).transpose();
            acc.noalias() += Jm.transpose() * data->signs.cwiseProduct(chi);
            acc -= data->grad_mean.at(ctx.node, j);
        }
        return acc / static_cast<double>(data->boot[ctx.node].size());
    };
    c.coefficients = [data](const PointContext& ctx, ConstVecRef chi, ConstVecRef stat, VecRef out) {
        const std::size_t n = data->n;
        const std::size_t k = std::min(ctx.node, data->N - 1);
        const Eigen::Map<const RowMatrix> Jv(data->jac_v.ptr(k, ctx.particle), n, n);
        out.noalias() = Jv.transpose() * data->signs.cwiseProduct(chi);
        out -= data->grad_v.at(k, ctx.particle);
        if (stat.size() > 0) out += stat;
    };
    c.terminal_kind = TerminalKind::linear;
    c.terminal_coefficient = -problem.c;

    // Boundary data from the endpoint costs.
    const auto Md = static_cast<double>(M);
    sys.initial.resize(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(d));
    sys.terminal_shift.resize(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(d));
    {
        Vector mY0 = Vector::Zero(static_cast<Eigen::Index>(d)), myT = Vector::Zero(static_cast<Eigen::Index>(d));
        for (std::size_t p = 0; p < M; ++p) {
            mY0 += state.at(0, p).segment(dm.Y_off(), d);
            myT += state.at(N, p).head(d);
        }
        mY0 /= Md;
        myT /= Md;
        Matrix gx0(M, d), gm0(M, d), gxT(M, d), gmT(M, d);
        Vector gx, gm;
        for (std::size_t p = 0; p < M; ++p) {
            endpoint_gradient(problem.initial_cost, state.at(0, p).segment(dm.Y_off(), d), mY0, gx, gm);
            gx0.row(static_cast<Eigen::Index>(p)) = gx.transpose();
            gm0.row(static_cast<Eigen::Index>(p)) = gm.transpose();
            endpoint_gradient(problem.terminal_cost, state.at(N, p).head(d), myT, gx, gm);
            gxT.row(static_cast<Eigen::Index>(p)) = gx.transpose();
            gmT.row(static_cast<Eigen::Index>(p)) = gm.transpose();
        }
        const auto b0 = bootstrap_indices(M, options.bootstrap_seed, N + 1);
        const auto bT = bootstrap_indices(M, options.bootstrap_seed, N + 2);
        Vector L0 = Vector::Zero(static_cast<Eigen::Index>(d)), LT = Vector::Zero(static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < M; ++i) {
            L0 += gm0.row(b0[i]).transpose();
            LT += gmT.row(bT[i]).transpose();
        }
        L0 /= Md;
        LT /= Md;
        for (std::size_t p = 0; p < M; ++p) {
            sys.initial.row(static_cast<Eigen::Index>(p)) = -(gx0.row(static_cast<Eigen::Index>(p)) + L0.transpose());
            sys.terminal_shift.row(static_cast<Eigen::Index>(p)) = gxT.row(static_cast<Eigen::Index>(p)) + LT.transpose();
        }
    }
    return sys;
}

AdjointSolution solve_adjoint(const ControlProblem& problem, const EnsembleState& state, const ControlPath& control,
                              const BrownianPair& drivers, const RegressionConfig& reg, const AdjointOptions& options) {
    AdjointSystem sys = build_adjoint_coefficients(problem, state, control, options);
    const Dimensions& dm = problem.dynamics.dims;
    const std::size_t N = state.grid.N, M = state.particles(), d = dm.d, n = dm.packed();
    const std::size_t nu = problem.dynamics.control_dim;

    HomotopyProblem target;
    target.base = sys.coeffs;
    target.alpha = 1.0;
    target.homotopy_case = HomotopyCase::case1;
    target.theta1 = problem.theta1;
    target.theta2 = problem.theta2;
    target.initial = sys.initial;
    target.terminal_shift = sys.terminal_shift;

    AdjointSolution out;
    // The adjoint of a system satisfying the standard monotonicity condition
    // satisfies the reversed one, and vice versa.
    out.report = solve_with_direction(target, problem.c > 0.0, problem.solver, drivers, reg);
    out.chi = out.report.final_state;

    double si = 0.0, st = 0.0;
    for (std::size_t p = 0; p < M; ++p) {
        const auto v0 = out.chi.at(0, p);
        const auto vN = out.chi.at(N, p);
        si += (v0.head(d) - sys.initial.row(static_cast<Eigen::Index>(p)).transpose()).squaredNorm();
        const Vector required = -problem.c * vN.head(d) + sys.terminal_shift.row(static_cast<Eigen::Index>(p)).transpose();
        st += (vN.segment(dm.Y_off(), d) - required).squaredNorm();
    }
    out.initial_residual = std::sqrt(si / static_cast<double>(M));
    out.terminal_residual = std::sqrt(st / static_cast<double>(M));

    const Vector s = hamiltonian_signs(dm);
    out.grad_u = PathArray(N, M, nu);
    for (std::size_t k = 0; k < N; ++k)
        for (std::size_t p = 0; p < M; ++p) {
            const Eigen::Map<const RowMatrix> Ju(sys.jac_u.ptr(k, p), n, nu);
            out.grad_u.at(k, p) = Ju.transpose() * s.cwiseProduct(Vector(out.chi.at(k, p))) - sys.grad_u_cost.at(k, p);
        }
    return out;
}

CostEstimate estimate_cost(const ControlProblem& problem, const ControlPath& control, const BrownianPair& drivers,
                           const RegressionConfig& reg) {
    require_admissible(problem, control);
    CostEstimate out;
    out.state = solve_state(problem, control, drivers, reg);
    const EnsembleState& st = out.state.final_state;
    const Dimensions& dm = problem.dynamics.dims;
    const std::size_t N = st.grid.N, M = st.particles(), d = dm.d;
    const double dt = st.grid.dt();
    out.per_particle = Vector::Zero(static_cast<Eigen::Index>(M));
    for (std::size_t k = 0; k < N; ++k) {
        const Vector mean = st.law(k).mean();
        const double t = st.grid.t(k);
        for (std::size_t p = 0; p < M; ++p)
            out.per_particle[static_cast<Eigen::Index>(p)] += running_value(problem, t, st.at(k, p), control.at(k, p), mean) * dt;
    }
    Vector mY0 = Vector::Zero(static_cast<Eigen::Index>(d)), myT = Vector::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t p = 0; p < M; ++p) {
        mY0 += st.at(0, p).segment(dm.Y_off(), d);
        myT += st.at(N, p).head(d);
    }
    mY0 /= static_cast<double>(M);
    myT /= static_cast<double>(M);
    for (std::size_t p = 0; p < M; ++p) {
        out.per_particle[static_cast<Eigen::Index>(p)] += endpoint_value(problem.terminal_cost, st.at(N, p).head(d), myT) +
                                                          endpoint_value(problem.initial_cost, st.at(0, p).segment(dm.Y_off(), d), mY0);
    }
    if (!out.per_particle.allFinite()) throw std::runtime_error("non-finite cost");
    out.J = out.per_particle.mean();
    const double var = M > 1 ? (out.per_particle.array() - out.J).square().sum() / static_cast<double>(M - 1) : 0.0;
    out.standard_error = std::sqrt(var / static_cast<double>(M));
    return out;
}

Vector maximize_hamiltonian(const ControlProblem& problem, double t, ConstVecRef V, ConstVecRef chi, ConstVecRef mean,
                            ConstVecRef u0) {
    Vector u = problem.box.project(u0);
    double H = hamiltonian(problem, t, V, u, chi, mean);
    for (int it = 0; it < 200; ++it) {
        const Vector g = grad_u_hamiltonian(problem, t, V, u, chi, mean);
        double step = 1.0;
        bool moved = false;
        while (step > 1e-12) {
            const Vector cand = problem.box.project(u + step * g);
            const double Hc = hamiltonian(problem, t, V, cand, chi, mean);
            if (Hc >= H + 1e-4 * g.dot(cand - u) && Hc >= H) {
                moved = (cand - u).norm() > 1e-14 * (1.0 + u.norm());
                u = cand;
                H = Hc;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break;
    }
    return u;
}

FirstOrderResult first_order_candidate(const ControlProblem& problem, const BrownianPair& drivers,
                                       const RegressionConfig& reg, const FirstOrderOptions& options) {
    problem.validate();
    const std::size_t nu = problem.dynamics.control_dim, M = drivers.particles, N = problem.grid.N;
    const Vector start = problem.box.project(Vector::Zero(static_cast<Eigen::Index>(nu)));
    FirstOrderResult res;
    res.control = deterministic_control(problem.grid, M, nu, [&](double, VecRef u) { u = start; });
    for (std::size_t it = 1; it <= options.max_iter; ++it) {
        const SolveReport state = solve_state(problem, res.control, drivers, reg);
        const AdjointSolution adj = solve_adjoint(problem, state.final_state, res.control, drivers, reg);
        ControlPath next = res.control;
        std::vector<double> change(N + 1, 0.0);
        parallel_for(N + 1, [&](std::size_t k) {
            const Vector mean = state.final_state.law(k).mean();
            const double t = problem.grid.t(k);
            for (std::size_t p = 0; p < M; ++p) {
                const Vector best = maximize_hamiltonian(problem, t, state.final_state.at(k, p), adj.chi.at(k, p), mean,
                                                         res.control.at(k, p));
                const Vector u = (1.0 - options.relaxation) * res.control.at(k, p) + options.relaxation * best;
                change[k] = std::max(change[k], (u - res.control.at(k, p)).cwiseAbs().maxCoeff());
                next.at(k, p) = u;
            }
        }, 1);
        res.control = std::move(next);
        res.iterations = it;
        res.last_change = *std::max_element(change.begin(), change.end());
        if (res.last_change <= options.tol) {
            res.converged = true;
            break;
        }
    }
    return res;
}

std::string SMPReport::verdict() const {
    return verified() ? "sampled-certified optimal" : "not certified";
}

namespace {

std::string describe(ConstVecRef v) {
    std::ostringstream os;
    os << "(";
    for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << format_double(v[i]);
    os << ")";
    return os.str();
}

// L-convexity margin of X -> E[cost(X, E X)] between two ensembles.
double l_convexity_margin(const EndpointCost& cost, const Matrix& X, const Matrix& Xp) {
    const auto m = X.rows();
    const Vector mean = X.colwise().mean().transpose();
    const Vector mean_p = Xp.colwise().mean().transpose();
    double v0 = 0.0, v1 = 0.0;
    Matrix gx(m, X.cols()), gm(m, X.cols());
    Vector a, b;
    for (Eigen::Index i = 0; i < m; ++i) {
        v0 += endpoint_value(cost, X.row(i).transpose(), mean);
        v1 += endpoint_value(cost, Xp.row(i).transpose(), mean_p);
        endpoint_gradient(cost, X.row(i).transpose(), mean, a, b);
        gx.row(i) = a.transpose();
        gm.row(i) = b.transpose();
    }
    v0 /= static_cast<double>(m);
    v1 /= static_cast<double>(m);
    const Vector L = gm.colwise().mean().transpose();
    double lin = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) lin += (gx.row(i) + L.transpose()).dot(Xp.row(i) - X.row(i));
    lin /= static_cast<double>(m);
    return v1 - v0 - lin;
}

}  // namespace

SMPReport verify_smp(const ControlProblem& problem, const ControlPath& candidate, std::size_t n_perturbations,
                     const BrownianPair& drivers, const RegressionConfig& reg, const SmpOptions& options) {
    problem.validate();
    require_admissible(problem, candidate);
    const Dimensions& dm = problem.dynamics.dims;
    const std::size_t N = problem.grid.N, M = drivers.particles, d = dm.d, n = dm.packed();
    const std::size_t nu = problem.dynamics.control_dim;
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;

    SMPReport rep;
    const CostEstimate base = estimate_cost(problem, candidate, drivers, reg);
    const EnsembleState& st = base.state.final_state;
    rep.J_candidate = base.J;
    rep.J_standard_error = base.standard_error;
    const AdjointSolution adj = solve_adjoint(problem, st, candidate, drivers, reg);
    rep.adjoint_boundary_residual = std::max(adj.initial_residual, adj.terminal_residual);

    // (a) L-convexity of the endpoint costs.
    {
        SmpCheck& chk = rep.convexity;
        chk.name = "convexity";
        chk.pass = true;
        chk.margin = std::numeric_limits<double>::infinity();
        const std::size_t atoms = 32;
        for (std::size_t s = 0; s < options.convexity_samples; ++s) {
            const bool terminal = s % 2 == 0;
            const EndpointCost& cost = terminal ? problem.terminal_cost : problem.initial_cost;
            if (!cost.value) continue;
            const std::size_t off = terminal ? dm.y_off() : dm.Y_off();
            const std::size_t node = terminal ? N : 0;
            const double scale = s % 4 < 2 ? 0.1 : 1.0;
            Matrix X(atoms, d), Xp(atoms, d);
            Vector shift(d);
            for (auto& c : shift) c = scale * normal(rng);
            for (std::size_t i = 0; i < atoms; ++i) {
                const std::size_t p = static_cast<std::size_t>(unif(rng) * static_cast<double>(M)) % M;
                for (std::size_t j = 0; j < d; ++j) {
                    X(i, j) = st.at(node, p)[off + j] + scale * normal(rng);
                    Xp(i, j) = X(i, j) + shift[j] + scale * normal(rng);
                }
            }
            const double raw = l_convexity_margin(cost, X, Xp);
            const double norm = raw / (1.0 + (Xp - X).rowwise().squaredNorm().mean());
            if (norm < chk.margin) {
                chk.margin = norm;
                std::ostringstream os;
                os << (terminal ? "terminal" : "initial") << " cost, sample " << s << ", margin " << format_double(raw);
                chk.witness = os.str();
            }
            if (norm < -1e-9) chk.pass = false;
        }
        if (!std::isfinite(chk.margin)) chk.margin = 0.0;
    }

    // (b) midpoint concavity of H in (v, mean, u).
    {
        SmpCheck& chk = rep.concavity;
        chk.name = "concavity";
        chk.pass = true;
        chk.margin = std::numeric_limits<double>::infinity();
        std::vector<Vector> means(N);
        for (std::size_t k = 0; k < N; ++k) means[k] = st.law(k).mean();
        for (std::size_t s = 0; s < options.concavity_samples; ++s) {
            const std::size_t k = static_cast<std::size_t>(unif(rng) * static_cast<double>(N)) % N;
            const std::size_t p = static_cast<std::size_t>(unif(rng) * static_cast<double>(M)) % M;
            const double t = problem.grid.t(k);
            const Vector V = st.at(k, p), chi = adj.chi.at(k, p), u = candidate.at(k, p);
            const double scale = 0.5 * (1.0 + V.cwiseAbs().maxCoeff());
            Vector V1 = V, V2 = V, m1 = means[k], m2 = means[k], u1 = u, u2 = u;
            for (std::size_t i = 0; i < n; ++i) {
                V1[i] += scale * normal(rng);
                V2[i] += scale * normal(rng);
                m1[i] += scale * normal(rng);
                m2[i] += scale * normal(rng);
            }
            for (std::size_t i = 0; i < nu; ++i) {
                const double w = problem.box.upper[i] - problem.box.lower[i];
                u1[i] += 0.5 * w * normal(rng);
                u2[i] += 0.5 * w * normal(rng);
            }
            u1 = problem.box.project(u1);
            u2 = problem.box.project(u2);
            const double H1 = hamiltonian(problem, t, V1, u1, chi, m1);
            const double H2 = hamiltonian(problem, t, V2, u2, chi, m2);
            const double Hm = hamiltonian(problem, t, 0.5 * (V1 + V2), 0.5 * (u1 + u2), chi, 0.5 * (m1 + m2));
            const double raw = Hm - 0.5 * (H1 + H2);
            const double dist = (V1 - V2).squaredNorm() + (m1 - m2).squaredNorm() + (u1 - u2).squaredNorm();
            const double norm = raw / (1.0 + dist);
            if (norm < chk.margin) {
                chk.margin = norm;
                std::ostringstream os;
                os << "t=" << format_double(t) << " particle " << p << " midpoint gap " << format_double(raw);
                chk.witness = os.str();
            }
            if (norm < -1e-9) chk.pass = false;
        }
    }

    // (c) pointwise maximum condition over U on a time subsample.
    {
        SmpCheck& chk = rep.max_condition;
        chk.name = "max_condition";
        chk.pass = true;
        chk.margin = std::numeric_limits<double>::infinity();
        const std::size_t nt = std::max<std::size_t>(1, std::min(options.time_samples, N));
        const std::size_t np = std::max<std::size_t>(1, std::min(options.particle_samples, M));
        std::vector<Vector> grid_points;
        if (nu <= 2) {
            const std::size_t per = nu == 1 ? 201 : 41;
            const std::size_t total = nu == 1 ? per : per * per;
            for (std::size_t g = 0; g < total; ++g) {
                Vector u(nu);
                std::size_t rest = g;
                for (std::size_t i = 0; i < nu; ++i) {
                    const std::size_t idx = rest % per;
                    rest /= per;
                    u[i] = problem.box.lower[i] + (problem.box.upper[i] - problem.box.lower[i]) * static_cast<double>(idx) /
                                                     static_cast<double>(per - 1);
                }
                grid_points.push_back(u);
            }
        } else {
            for (std::size_t g = 0; g < 2000; ++g) {
                Vector u(nu);
                for (std::size_t i = 0; i < nu; ++i)
                    u[i] = problem.box.lower[i] + (problem.box.upper[i] - problem.box.lower[i]) * unif(rng);
                grid_points.push_back(u);
            }
        }
        for (std::size_t a = 0; a < nt; ++a) {
            const std::size_t k = nt == 1 ? 0 : a * (N - 1) / (nt - 1);
            const double t = problem.grid.t(k);
            const Vector mean = st.law(k).mean();
            for (std::size_t b = 0; b < np; ++b) {
                const std::size_t p = np == 1 ? 0 : b * (M - 1) / (np - 1);
                const Vector V = st.at(k, p), chi = adj.chi.at(k, p), uh = candidate.at(k, p);
                const double Hhat = hamiltonian(problem, t, V, uh, chi, mean);
                Vector best = uh;
                double Hbest = Hhat;
                for (const auto& u : grid_points) {
                    const double H = hamiltonian(problem, t, V, u, chi, mean);
                    if (H > Hbest) {
                        Hbest = H;
                        best = u;
                    }
                }
                for (const Vector& from : {best, uh}) {
                    const Vector polished = maximize_hamiltonian(problem, t, V, chi, mean, from);
                    const double H = hamiltonian(problem, t, V, polished, chi, mean);
                    if (H > Hbest) {
                        Hbest = H;
                        best = polished;
                    }
                }
                const double gap = Hbest - Hhat;
                const double tol = 1e-7 * (1.0 + std::abs(Hhat));
                if (-gap < chk.margin) {
                    chk.margin = -gap;
                    std::ostringstream os;
                    os << "t=" << format_double(t) << " particle " << p << " v=" << describe(V) << " u_hat=" << describe(uh)
                       << " better u=" << describe(best) << " H gap " << format_double(gap);
                    chk.witness = os.str();
                }
                if (gap > tol) chk.pass = false;
            }
        }
    }

    // (d) empirical optimality against random admissible perturbations.
    {
        SmpCheck& chk = rep.empirical;
        chk.name = "empirical";
        chk.pass = true;
        chk.margin = std::numeric_limits<double>::infinity();
        const double T = problem.grid.T;
        for (std::size_t i = 0; i < n_perturbations; ++i) {
            std::vector<Vector> coef(7, Vector(nu));
            for (auto& cf : coef)
                for (auto& x : cf) x = normal(rng) / std::sqrt(7.0);
            Vector amp(nu);
            for (std::size_t j = 0; j < nu; ++j)
                amp[j] = (options.min_amplitude + (options.max_amplitude - options.min_amplitude) * unif(rng)) * 0.5 *
                         (problem.box.upper[j] - problem.box.lower[j]);
            ControlPath u = candidate;
            for (std::size_t k = 0; k <= N; ++k) {
                const double t = problem.grid.t(k);
                Vector w = coef[0];
                for (int j = 1; j <= 3; ++j)
                    w += coef[2 * j - 1] * std::sin(j * std::numbers::pi * t / T) +
                         coef[2 * j] * std::cos(j * std::numbers::pi * t / T);
                const Vector shift = amp.cwiseProduct(w);
                for (std::size_t p = 0; p < M; ++p) u.at(k, p) = problem.box.project(candidate.at(k, p) + shift);
            }
            const CostEstimate ce = estimate_cost(problem, u, drivers, reg);
            const Vector diff = ce.per_particle - base.per_particle;
            const double md = diff.mean();
            const double se =
                M > 1 ? std::sqrt((diff.array() - md).square().sum() / static_cast<double>(M - 1) / static_cast<double>(M)) : 0.0;
            const double threshold = base.J - 3.0 * se;
            rep.perturbation_J.push_back(ce.J);
            rep.perturbation_threshold.push_back(threshold);
            const double margin = ce.J - threshold;
            if (3.0 * se > 0.5 * std::abs(md)) rep.inconclusive = true;
            if (margin < chk.margin) {
                chk.margin = margin;
                std::ostringstream os;
                os << "perturbation " << i << ": J=" << format_double(ce.J) << " vs J(u_hat)=" << format_double(base.J)
                   << " (3 SE " << format_double(3.0 * se) << ")";
                chk.witness = os.str();
            }
            if (margin < 0.0) chk.pass = false;
        }
        if (!std::isfinite(chk.margin)) chk.margin = 0.0;
    }
    return rep;
}

GradientReport gradient_consistency(const ControlProblem& problem, const ControlPath& control,
                                    const ControlPath& direction, double h, const BrownianPair& drivers,
                                    const RegressionConfig& reg) {
    if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
    if (direction.nodes() != control.nodes() || direction.particles() != control.particles() ||
        direction.width() != control.width())
        throw std::invalid_argument("direction and control differ in shape");
    GradientReport rep;
    const std::size_t N = problem.grid.N, M = control.particles();
    const bool zero = std::all_of(direction.raw().begin(), direction.raw().end(), [](double v) { return v == 0.0; });
    if (zero) return rep;

    ControlPath up = control, down = control;
    for (std::size_t i = 0; i < up.raw().size(); ++i) {
        up.raw()[i] += h * direction.raw()[i];
        down.raw()[i] -= h * direction.raw()[i];
    }
    rep.finite_difference = (estimate_cost(problem, up, drivers, reg).J - estimate_cost(problem, down, drivers, reg).J) / (2.0 * h);

    const SolveReport state = solve_state(problem, control, drivers, reg);
    const AdjointSolution adj = solve_adjoint(problem, state.final_state, control, drivers, reg);
    double acc = 0.0;
    for (std::size_t k = 0; k < N; ++k)
        for (std::size_t p = 0; p < M; ++p) acc += adj.grad_u.at(k, p).dot(direction.at(k, p));
    rep.adjoint = -acc * problem.grid.dt() / static_cast<double>(M);
    const double scale = std::max(std::abs(rep.finite_difference), std::abs(rep.adjoint));
    rep.relative_error = scale > 0.0 ? std::abs(rep.finite_difference - rep.adjoint) / scale : 0.0;
    return rep;
}

ControlProblem make_lq_problem(const LqParams& q) {
    ControlProblem P;
    P.name = "lq_control";
    P.dynamics.dims = Dimensions{1, 1, 1};
    P.dynamics.control_dim = 1;
    P.dynamics.coefficients = [q](double, ConstVecRef v, ConstVecRef u, ConstVecRef m, VecRef out) {
        out[0] = q.a_y * v[0] + q.abar_y * m[0];
        out[1] = q.a_Y * v[1] + q.abar_Y * m[1] + q.b * u[0];
        out[2] = q.g_z * v[2];
        out[3] = q.g_Z * v[3];
    };
    P.dynamics.jacobians = [q](double, ConstVecRef, ConstVecRef, ConstVecRef, MatRef dv, MatRef du, MatRef dm) {
        dv.setZero();
        du.setZero();
        dm.setZero();
        dv(0, 0) = q.a_y;
        dv(1, 1) = q.a_Y;
        dv(2, 2) = q.g_z;
        dv(3, 3) = q.g_Z;
        du(1, 0) = q.b;
        dm(0, 0) = q.abar_y;
        dm(1, 1) = q.abar_Y;
    };
    P.running.value = [q](double, ConstVecRef v, ConstVecRef u, ConstVecRef m) {
        return 0.5 * q.q * v[0] * v[0] + 0.5 * q.qbar * m[0] * m[0] + 0.5 * q.r * u[0] * u[0];
    };
    P.running.gradient = [q](double, ConstVecRef v, ConstVecRef u, ConstVecRef m, VecRef gv, VecRef gu, VecRef gm) {
        gv.setZero();
        gm.setZero();
        gv[0] = q.q * v[0];
        gu[0] = q.r * u[0];
        gm[0] = q.qbar * m[0];
    };
    P.terminal_cost.value = [q](ConstVecRef x, ConstVecRef m) { return 0.5 * q.s * x[0] * x[0] + 0.5 * q.sbar * m[0] * m[0]; };
    P.terminal_cost.gradient = [q](ConstVecRef x, ConstVecRef m, VecRef gx, VecRef gm) {
        gx[0] = q.s * x[0];
        gm[0] = q.sbar * m[0];
    };
    P.initial_cost.value = [q](ConstVecRef x, ConstVecRef) { return 0.5 * q.k * x[0] * x[0]; };
    P.initial_cost.gradient = [q](ConstVecRef x, ConstVecRef, VecRef gx, VecRef gm) {
        gx[0] = q.k * x[0];
        gm[0] = 0.0;
    };
    P.box.lower = Vector::Constant(1, q.u_min);
    P.box.upper = Vector::Constant(1, q.u_max);
    P.c = q.c;
    P.xi = Vector::Constant(1, q.xi);
    P.x = Vector::Constant(1, q.x);
    P.grid = TimeGrid(q.T, q.N);
    P.gamma = q.gamma;
    P.theta1 = q.theta1;
    P.theta2 = q.theta2;
    P.solver.delta = 0.2;
    P.solver.picard.tol = 1e-14;
    P.solver.picard.max_iter = 500;
    P.validate();
    return P;
}

}  // namespace mvfb
