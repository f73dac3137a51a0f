#pragma once

#include <functional>
#include <memory>
#include <string>

#include "mvfbdsde/measure.hpp"
#include "mvfbdsde/paths.hpp"
#include "mvfbdsde/types.hpp"

namespace mvfb {

enum class LawDependence { none, first_moment, general };
enum class TerminalKind { law_map, linear };

std::string to_string(LawDependence l);

/// Where a coefficient is being evaluated. `node` and `particle` let
/// coefficients that carry precomputed path data (adjoint systems) look it up.
struct PointContext {
    double t = 0.0;
    std::size_t node = 0;
    std::size_t particle = 0;
};

/// Summary of a law computed once per time node and handed to every
/// particle's evaluation. For first_moment models it is the mean.
using LawStatisticFn = std::function<Vector(const PointContext&, const EmpiricalLaw&)>;
/// Writes the packed (F, f, G, g) at (t, v) given the law statistic.
using CoefficientFn = std::function<void(const PointContext&, ConstVecRef v, ConstVecRef stat, VecRef out)>;
/// Writes h(y, law) given the statistic of the law of y_T.
using TerminalFn = std::function<void(const PointContext&, ConstVecRef y, ConstVecRef stat, VecRef out)>;
/// Jacobian of the packed coefficients with respect to v or the statistic.
using JacobianFn = std::function<void(const PointContext&, ConstVecRef v, ConstVecRef stat, MatRef out)>;

struct CoefficientSet {
    std::string name;
    Dimensions dims;
    LawDependence law_dependence = LawDependence::first_moment;
    LawStatisticFn law_statistic;       ///< optional; default is the mean (first_moment) or empty (none)
    CoefficientFn coefficients;
    TerminalKind terminal_kind = TerminalKind::law_map;
    double terminal_coefficient = 0.0;  ///< c when terminal_kind == linear
    LawStatisticFn terminal_statistic;  ///< optional; over the law of y_T
    TerminalFn terminal;                ///< h; unused for linear terminals
    JacobianFn jacobian_v;              ///< optional n x n
    JacobianFn jacobian_stat;           ///< optional n x dim(stat)
};

Vector law_statistic(const CoefficientSet& c, const PointContext& ctx, const EmpiricalLaw& law);
Vector terminal_statistic(const CoefficientSet& c, const PointContext& ctx, const EmpiricalLaw& law_yT);
void evaluate(const CoefficientSet& c, const PointContext& ctx, ConstVecRef v, ConstVecRef stat, VecRef out);
void evaluate_terminal(const CoefficientSet& c, const PointContext& ctx, ConstVecRef y, ConstVecRef stat, VecRef out);

/// Name of the coefficient stored at packed index i ("F", "f", "G", "g").
std::string coefficient_name(const Dimensions& dims, std::size_t i);

/// Evaluates packed (F, f, G, g) for each row of `states`. The law defaults
/// to the empirical law of the rows; pass `law` to freeze it.
Matrix eval_system(const CoefficientSet& c, double t, const Matrix& states, const EmpiricalLaw* law = nullptr);

enum class HomotopyCase { case1, case2 };
std::string to_string(HomotopyCase c);

struct HomotopyProblem {
    CoefficientSet base;
    double alpha = 1.0;
    HomotopyCase homotopy_case = HomotopyCase::case1;
    double theta1 = 0.0;
    double theta2 = 0.0;
    /// Packed (psi, phi, kappa, varphi) in the (F, f, G, g) slots, per node and
    /// particle; null means zero.
    std::shared_ptr<const PathArray> forcing;
    /// 0 rows: zero; 1 row: common to every particle; M rows: per particle.
    Matrix terminal_shift;
    /// 1 row common start x, or M rows (random start).
    Matrix initial;

    void validate() const;
    Vector initial_for(std::size_t p) const;
    Vector shift_for(std::size_t p) const;
};

/// Base system at alpha = 1 with zero forcing.
HomotopyProblem make_problem(const CoefficientSet& base, const Vector& x, const Vector& xi = Vector());

HomotopyProblem build_homotopy_case1(const CoefficientSet& base, double alpha, double theta1,
                                     std::shared_ptr<const PathArray> forcing, const Matrix& xi, const Matrix& x);
HomotopyProblem build_homotopy_case2(const CoefficientSet& base, double alpha, double theta2,
                                     std::shared_ptr<const PathArray> forcing, const Matrix& xi, const Matrix& x);

/// A^alpha(t, v, stat) without forcing.
void evaluate_homotopy(const HomotopyProblem& p, const PointContext& ctx, ConstVecRef v, ConstVecRef stat, VecRef out);
/// h^alpha(y, stat) without xi.
void evaluate_homotopy_terminal(const HomotopyProblem& p, const PointContext& ctx, ConstVecRef y, ConstVecRef stat,
                                VecRef out);

/// Solution ensemble: (N + 1) nodes x M particles x packed quadruple.
struct EnsembleState {
    TimeGrid grid;
    Dimensions dims;
    PathArray values;

    EnsembleState() = default;
    EnsembleState(const TimeGrid& g, const Dimensions& d, std::size_t particles)
        : grid(g), dims(d), values(g.N + 1, particles, d.packed()) {}

    std::size_t particles() const { return values.particles(); }
    Eigen::Map<Vector> at(std::size_t k, std::size_t p) { return values.at(k, p); }
    Eigen::Map<const Vector> at(std::size_t k, std::size_t p) const { return values.at(k, p); }
    /// Uniform law of node k.
    EmpiricalLaw law(std::size_t k) const { return EmpiricalLaw::from_rows(values.node(k)); }
    EmpiricalLaw law_y(std::size_t k) const;
    /// Particle average of component i at node k.
    double mean(std::size_t k, std::size_t i) const;
};

/// Fills y at every node with the problem's start and zeros elsewhere.
EnsembleState constant_state(const HomotopyProblem& p, const TimeGrid& grid, std::size_t particles);

/// Builds a state from deterministic functions of time (same for every particle).
EnsembleState deterministic_state(const TimeGrid& grid, const Dimensions& dims, std::size_t particles,
                                  const std::function<void(double, VecRef)>& fill);

struct ResidualTriple {
    double forward = 0.0;
    double backward = 0.0;
    double terminal = 0.0;
    double max() const { return std::max(forward, std::max(backward, terminal)); }
};

ResidualTriple residual(const HomotopyProblem& p, const EnsembleState& state, const BrownianPair& drivers);

/// A = K v + K_bar E[v] + k0, h = H y + H_bar E[y] + h0 (or c y when linear).
struct LinearMeanFieldModel {
    std::string name = "linear";
    Dimensions dims;
    Matrix K, K_bar;
    Vector k0;
    Matrix H, H_bar;
    Vector h0;
    TerminalKind terminal_kind = TerminalKind::law_map;
    double c = 0.0;

    static LinearMeanFieldModel zeros(const Dimensions& dims);
    void validate() const;
};

CoefficientSet make_coefficients(const LinearMeanFieldModel& m);

/// f = E[Y]/2 - Y, g = E[Z]/4 - Z/2, F = E[y]/2 - y, G = E[z]/4 - z/2,
/// h = -E[y_T]/2 + y_T. Requires d_W == d_B.
LinearMeanFieldModel example_meanfield_model(const Dimensions& dims);
CoefficientSet builtin_example_meanfield(const Dimensions& dims);

struct BuiltinCounterexample {
    CoefficientSet coeffs;
    LinearMeanFieldModel model;
    double T = 0.0;
    Vector x;
    Dimensions dims;
};

/// Scalar system f = E[Y], g = 0, F = -E[y], G = -z, h = -E[y_T] on
/// T = 3 pi / 4 with x = 0. Both 0 and (sin t, cos t, 0, 0) solve it.
BuiltinCounterexample builtin_counterexample();

}  // namespace mvfb
