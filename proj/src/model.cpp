#include "mvfbdsde/model.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mvfbdsde/parallel.hpp"

namespace mvfb {

std::string to_string(LawDependence l) {
    switch (l) {
        case LawDependence::none: return "none";
        case LawDependence::first_moment: return "first_moment";
        case LawDependence::general: return "general";
    }
    return "?";
}

std::string to_string(HomotopyCase c) { return c == HomotopyCase::case1 ? "case1" : "case2"; }

Vector law_statistic(const CoefficientSet& c, const PointContext& ctx, const EmpiricalLaw& law) {
    if (c.law_statistic) return c.law_statistic(ctx, law);
    switch (c.law_dependence) {
        case LawDependence::none: return Vector();
        case LawDependence::first_moment: return law.mean();
        case LawDependence::general: break;
    }
    throw std::invalid_argument("general law dependence needs a law_statistic hook");
}

Vector terminal_statistic(const CoefficientSet& c, const PointContext& ctx, const EmpiricalLaw& law_yT) {
    if (c.terminal_kind == TerminalKind::linear) return Vector();
    if (c.terminal_statistic) return c.terminal_statistic(ctx, law_yT);
    switch (c.law_dependence) {
        case LawDependence::none: return Vector();
        case LawDependence::first_moment: return law_yT.mean();
        case LawDependence::general: break;
    }
    throw std::invalid_argument("general law dependence needs a terminal_statistic hook");
}

void evaluate(const CoefficientSet& c, const PointContext& ctx, ConstVecRef v, ConstVecRef stat, VecRef out) {
    if (!c.coefficients) {
        out.setZero();
        return;
    }
    c.coefficients(ctx, v, stat, out);
}

void evaluate_terminal(const CoefficientSet& c, const PointContext& ctx, ConstVecRef y, ConstVecRef stat,
                       VecRef out) {
    if (c.terminal_kind == TerminalKind::linear) {
        out = c.terminal_coefficient * y;
        return;
    }
    if (!c.terminal) {
        out.setZero();
        return;
    }
    c.terminal(ctx, y, stat, out);
}

std::string coefficient_name(const Dimensions& dims, std::size_t i) {
    if (i < dims.Y_off()) return "F";
    if (i < dims.z_off()) return "f";
    if (i < dims.Z_off()) return "G";
    return "g";
}

Matrix eval_system(const CoefficientSet& c, double t, const Matrix& states, const EmpiricalLaw* law) {
    const std::size_t n = c.dims.packed();
    if (static_cast<std::size_t>(states.cols()) != n) throw std::invalid_argument("state width does not match dims");
    EmpiricalLaw own;
    if (!law) {
        own = EmpiricalLaw(states);
        law = &own;
    }
    const PointContext node_ctx{t, 0, 0};
    const Vector stat = law_statistic(c, node_ctx, *law);
    Matrix out(states.rows(), static_cast<Eigen::Index>(n));
    for (Eigen::Index r = 0; r < states.rows(); ++r) {
        Vector v = states.row(r).transpose();
        Vector o(n);
        evaluate(c, PointContext{t, 0, static_cast<std::size_t>(r)}, v, stat, o);
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(o[i])) {
                std::ostringstream os;
                os << "non-finite coefficient " << coefficient_name(c.dims, i) << " at t=" << t << " sample " << r;
                throw std::runtime_error(os.str());
            }
        }
        out.row(r) = o.transpose();
    }
    return out;
}

void HomotopyProblem::validate() const {
    base.dims.validate();
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha outside [0,1]");
    if (theta1 < 0.0 || theta2 < 0.0) throw std::invalid_argument("theta must be nonnegative");
    if (homotopy_case == HomotopyCase::case1 && !(theta1 > 0.0)) throw std::invalid_argument("case1 requires theta1 > 0");
    if (homotopy_case == HomotopyCase::case2 && !(theta2 > 0.0)) throw std::invalid_argument("case2 requires theta2 > 0");
    const auto d = static_cast<Eigen::Index>(base.dims.d);
    if (initial.rows() < 1 || initial.cols() != d) throw std::invalid_argument("initial value has wrong shape");
    if (terminal_shift.rows() > 0 && terminal_shift.cols() != d)
        throw std::invalid_argument("terminal shift has wrong shape");
    if (forcing && forcing->width() != base.dims.packed()) throw std::invalid_argument("forcing has wrong width");
}

Vector HomotopyProblem::initial_for(std::size_t p) const {
    return initial.rows() == 1 ? Vector(initial.row(0).transpose())
                               : Vector(initial.row(static_cast<Eigen::Index>(p)).transpose());
}

Vector HomotopyProblem::shift_for(std::size_t p) const {
    if (terminal_shift.rows() == 0) return Vector::Zero(static_cast<Eigen::Index>(base.dims.d));
    if (terminal_shift.rows() == 1) return terminal_shift.row(0).transpose();
    return terminal_shift.row(static_cast<Eigen::Index>(p)).transpose();
}

HomotopyProblem make_problem(const CoefficientSet& base, const Vector& x, const Vector& xi) {
    HomotopyProblem p;
    p.base = base;
    p.alpha = 1.0;
    p.homotopy_case = HomotopyCase::case1;
    p.theta1 = 1.0;
    p.initial = x.transpose();
    if (xi.size() > 0) p.terminal_shift = xi.transpose();
    p.validate();
    return p;
}

namespace {
HomotopyProblem build(const CoefficientSet& base, double alpha, HomotopyCase hc, double theta,
                      std::shared_ptr<const PathArray> forcing, const Matrix& xi, const Matrix& x) {
    HomotopyProblem p;
    p.base = base;
    p.alpha = alpha;
    p.homotopy_case = hc;
    (hc == HomotopyCase::case1 ? p.theta1 : p.theta2) = theta;
    p.forcing = std::move(forcing);
    p.terminal_shift = xi;
    p.initial = x;
    p.validate();
    return p;
}
}  // namespace

HomotopyProblem build_homotopy_case1(const CoefficientSet& base, double alpha, double theta1,
                                     std::shared_ptr<const PathArray> forcing, const Matrix& xi, const Matrix& x) {
    return build(base, alpha, HomotopyCase::case1, theta1, std::move(forcing), xi, x);
}

HomotopyProblem build_homotopy_case2(const CoefficientSet& base, double alpha, double theta2,
                                     std::shared_ptr<const PathArray> forcing, const Matrix& xi, const Matrix& x) {
    return build(base, alpha, HomotopyCase::case2, theta2, std::move(forcing), xi, x);
}

void evaluate_homotopy(const HomotopyProblem& p, const PointContext& ctx, ConstVecRef v, ConstVecRef stat,
                       VecRef out) {
    const Dimensions& dm = p.base.dims;
    if (p.alpha > 0.0) {
        evaluate(p.base, ctx, v, stat, out);
        out *= p.alpha;
    } else {
        out.setZero();
    }
    const double damp = 1.0 - p.alpha;
    if (damp == 0.0) return;
    if (p.homotopy_case == HomotopyCase::case1) {
        // F gets -theta1 y, G gets -theta1 z.
        out.segment(dm.y_off(), dm.d) -= damp * p.theta1 * v.segment(dm.y_off(), dm.d);
        out.segment(dm.z_off(), dm.z_size()) -= damp * p.theta1 * v.segment(dm.z_off(), dm.z_size());
    } else {
        // f gets -theta2 Y, g gets -theta2 Z.
        out.segment(dm.Y_off(), dm.d) -= damp * p.theta2 * v.segment(dm.Y_off(), dm.d);
        out.segment(dm.Z_off(), dm.Z_size()) -= damp * p.theta2 * v.segment(dm.Z_off(), dm.Z_size());
    }
}

void evaluate_homotopy_terminal(const HomotopyProblem& p, const PointContext& ctx, ConstVecRef y, ConstVecRef stat,
                                VecRef out) {
    if (p.alpha > 0.0) {
        evaluate_terminal(p.base, ctx, y, stat, out);
        out *= p.alpha;
    } else {
        out.setZero();
    }
    if (p.homotopy_case == HomotopyCase::case1) out += (1.0 - p.alpha) * y;
}

EmpiricalLaw EnsembleState::law_y(std::size_t k) const {
    return EmpiricalLaw(Matrix(values.node(k).leftCols(static_cast<Eigen::Index>(dims.d))));
}

double EnsembleState::mean(std::size_t k, std::size_t i) const {
    double s = 0.0;
    for (std::size_t p = 0; p < particles(); ++p) s += values.ptr(k, p)[i];
    return s / static_cast<double>(particles());
}

EnsembleState constant_state(const HomotopyProblem& prob, const TimeGrid& grid, std::size_t particles) {
    EnsembleState s(grid, prob.base.dims, particles);
    for (std::size_t p = 0; p < particles; ++p) {
        const Vector x = prob.initial_for(p);
        for (std::size_t k = 0; k <= grid.N; ++k) s.at(k, p).head(prob.base.dims.d) = x;
    }
    return s;
}

EnsembleState deterministic_state(const TimeGrid& grid, const Dimensions& dims, std::size_t particles,
                                  const std::function<void(double, VecRef)>& fill) {
    EnsembleState s(grid, dims, particles);
    Vector v(dims.packed());
    for (std::size_t k = 0; k <= grid.N; ++k) {
        v.setZero();
        fill(grid.t(k), v);
        for (std::size_t p = 0; p < particles; ++p) s.at(k, p) = v;
    }
    return s;
}

ResidualTriple residual(const HomotopyProblem& prob, const EnsembleState& state, const BrownianPair& drivers) {
    const Dimensions& dm = prob.base.dims;
    const std::size_t N = state.grid.N, M = state.particles(), n = dm.packed(), d = dm.d;
    if (drivers.grid.N != N || drivers.particles != M || drivers.d_W != dm.d_W || drivers.d_B != dm.d_B ||
        state.dims.packed() != n)
        throw std::invalid_argument("shape mismatch between state, problem and drivers");
    const double dt = state.grid.dt();

    std::vector<double> fwd(N, 0.0), bwd(N, 0.0);
    parallel_for(N, [&](std::size_t k) {
        const PointContext node_ctx{state.grid.t(k), k, 0};
        const Vector stat = law_statistic(prob.base, node_ctx, state.law(k));
        Vector a(n), ef(d), eb(d);
        double sf = 0.0, sb = 0.0;
        for (std::size_t p = 0; p < M; ++p) {
            const auto v = state.at(k, p);
            const auto v1 = state.at(k + 1, p);
            evaluate_homotopy(prob, PointContext{node_ctx.t, k, p}, v, stat, a);
            if (prob.forcing) a += prob.forcing->at(k, p);
            const double* dW = drivers.dW.ptr(k, p);
            const double* dB = drivers.dB.ptr(k, p);
            for (std::size_t i = 0; i < d; ++i) {
                double fi = v[i] + a[dm.Y_off() + i] * dt;
                double bi = v1[dm.Y_off() + i] - a[dm.y_off() + i] * dt;
                for (std::size_t j = 0; j < dm.d_W; ++j) {
                    fi += a[dm.Z_off() + i * dm.d_W + j] * dW[j];
                    bi -= v[dm.Z_off() + i * dm.d_W + j] * dW[j];
                }
                for (std::size_t j = 0; j < dm.d_B; ++j) {
                    fi -= v[dm.z_off() + i * dm.d_B + j] * dB[j];
                    bi -= a[dm.z_off() + i * dm.d_B + j] * dB[j];
                }
                ef[i] = v1[i] - fi;
                eb[i] = v[dm.Y_off() + i] - bi;
            }
            sf += ef.squaredNorm();
            sb += eb.squaredNorm();
        }
        fwd[k] = std::sqrt(sf / static_cast<double>(M));
        bwd[k] = std::sqrt(sb / static_cast<double>(M));
    }, 1);

    ResidualTriple r;
    for (std::size_t k = 0; k < N; ++k) {
        r.forward = std::max(r.forward, fwd[k]);
        r.backward = std::max(r.backward, bwd[k]);
    }
    const PointContext end_ctx{state.grid.T, N, 0};
    const Vector tstat = terminal_statistic(prob.base, end_ctx, state.law_y(N));
    Vector h(d);
    double st = 0.0;
    for (std::size_t p = 0; p < M; ++p) {
        const auto v = state.at(N, p);
        evaluate_homotopy_terminal(prob, PointContext{end_ctx.t, N, p}, v.head(d), tstat, h);
        h += prob.shift_for(p);
        st += (v.segment(dm.Y_off(), d) - h).squaredNorm();
    }
    r.terminal = std::sqrt(st / static_cast<double>(M));
    return r;
}

LinearMeanFieldModel LinearMeanFieldModel::zeros(const Dimensions& dims) {
    dims.validate();
    LinearMeanFieldModel m;
    m.dims = dims;
    const auto n = static_cast<Eigen::Index>(dims.packed());
    const auto d = static_cast<Eigen::Index>(dims.d);
    m.K = Matrix::Zero(n, n);
    m.K_bar = Matrix::Zero(n, n);
    m.k0 = Vector::Zero(n);
    m.H = Matrix::Zero(d, d);
    m.H_bar = Matrix::Zero(d, d);
    m.h0 = Vector::Zero(d);
    return m;
}

void LinearMeanFieldModel::validate() const {
    dims.validate();
    const auto n = static_cast<Eigen::Index>(dims.packed());
    const auto d = static_cast<Eigen::Index>(dims.d);
    if (K.rows() != n || K.cols() != n || K_bar.rows() != n || K_bar.cols() != n || k0.size() != n)
        throw std::invalid_argument("linear model coefficient tables have wrong shape");
    if (H.rows() != d || H.cols() != d || H_bar.rows() != d || H_bar.cols() != d || h0.size() != d)
        throw std::invalid_argument("linear model terminal tables have wrong shape");
}

CoefficientSet make_coefficients(const LinearMeanFieldModel& m) {
    m.validate();
    CoefficientSet c;
    c.name = m.name;
    c.dims = m.dims;
    const bool mean_field = !m.K_bar.isZero(0.0) || (m.terminal_kind == TerminalKind::law_map && !m.H_bar.isZero(0.0));
    c.law_dependence = mean_field ? LawDependence::first_moment : LawDependence::none;
    auto model = std::make_shared<const LinearMeanFieldModel>(m);
    c.coefficients = [model](const PointContext&, ConstVecRef v, ConstVecRef stat, VecRef out) {
        out.noalias() = model->K * v;
        out += model->k0;
        if (stat.size() > 0) out.noalias() += model->K_bar * stat;
    };
    c.terminal_kind = m.terminal_kind;
    c.terminal_coefficient = m.c;
    c.terminal = [model](const PointContext&, ConstVecRef y, ConstVecRef stat, VecRef out) {
        out.noalias() = model->H * y;
        out += model->h0;
        if (stat.size() > 0) out.noalias() += model->H_bar * stat;
    };
    c.jacobian_v = [model](const PointContext&, ConstVecRef, ConstVecRef, MatRef out) { out = model->K; };
    c.jacobian_stat = [model](const PointContext&, ConstVecRef, ConstVecRef, MatRef out) { out = model->K_bar; };
    return c;
}

LinearMeanFieldModel example_meanfield_model(const Dimensions& dims) {
    if (dims.d_W != dims.d_B) throw std::invalid_argument("example model needs d_W == d_B");
    auto m = LinearMeanFieldModel::zeros(dims);
    m.name = "example1";
    const auto d = static_cast<Eigen::Index>(dims.d);
    const auto y = static_cast<Eigen::Index>(dims.y_off()), Y = static_cast<Eigen::Index>(dims.Y_off());
    const auto z = static_cast<Eigen::Index>(dims.z_off()), Z = static_cast<Eigen::Index>(dims.Z_off());
    const auto zs = static_cast<Eigen::Index>(dims.z_size()), Zs = static_cast<Eigen::Index>(dims.Z_size());
    // F = E[y]/2 - y
    m.K.block(y, y, d, d) = -Matrix::Identity(d, d);
    m.K_bar.block(y, y, d, d) = 0.5 * Matrix::Identity(d, d);
    // f = E[Y]/2 - Y
    m.K.block(Y, Y, d, d) = -Matrix::Identity(d, d);
    m.K_bar.block(Y, Y, d, d) = 0.5 * Matrix::Identity(d, d);
    // G = E[z]/4 - z/2
    m.K.block(z, z, zs, zs) = -0.5 * Matrix::Identity(zs, zs);
    m.K_bar.block(z, z, zs, zs) = 0.25 * Matrix::Identity(zs, zs);
    // g = E[Z]/4 - Z/2
    m.K.block(Z, Z, Zs, Zs) = -0.5 * Matrix::Identity(Zs, Zs);
    m.K_bar.block(Z, Z, Zs, Zs) = 0.25 * Matrix::Identity(Zs, Zs);
    // h = -E[y_T]/2 + y_T
    m.H = Matrix::Identity(d, d);
    m.H_bar = -0.5 * Matrix::Identity(d, d);
    return m;
}

CoefficientSet builtin_example_meanfield(const Dimensions& dims) { return make_coefficients(example_meanfield_model(dims)); }

BuiltinCounterexample builtin_counterexample() {
    BuiltinCounterexample out;
    out.dims = Dimensions{1, 1, 1};
    auto m = LinearMeanFieldModel::zeros(out.dims);
    m.name = "example2";
    const auto& dm = out.dims;
    m.K_bar(dm.Y_off(), dm.Y_off()) = 1.0;   // f = E[Y]
    m.K_bar(dm.y_off(), dm.y_off()) = -1.0;  // F = -E[y]
    m.K(dm.z_off(), dm.z_off()) = -1.0;      // G = -z
    m.H_bar(0, 0) = -1.0;                    // h = -E[y_T]
    out.model = m;
    out.coeffs = make_coefficients(m);
    out.T = 0.75 * std::numbers::pi;
    out.x = Vector::Zero(1);
    return out;
}

}  // namespace mvfb
