#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvfbdsde/measure.hpp"
#include "mvfbdsde/model.hpp"
#include "mvfbdsde/solver.hpp"

namespace mvfb {

/// Controlled coefficients in the form
///   dy = f dt + g dW - z dB-bar,  dY = -F dt - G dB-bar + Z dW,  Y_T = c y_T + xi,
/// packed as (F, f, G, g). Law dependence is through the mean of the
/// quadruple law only.
struct ControlledDynamics {
    Dimensions dims;
    std::size_t control_dim = 1;
    std::function<void(double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean, VecRef out)> coefficients;
    /// Optional analytic Jacobians: dv (n x n), du (n x d_u), dmean (n x n).
    std::function<void(double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean, MatRef dv, MatRef du, MatRef dmean)>
        jacobians;
};

struct RunningCost {
    std::function<double(double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean)> value;
    /// Optional analytic gradient.
    std::function<void(double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean, VecRef gv, VecRef gu, VecRef gmean)>
        gradient;
};

/// phi(y_T, law of y_T) or psi(Y_0, law of Y_0), through the marginal mean.
struct EndpointCost {
    std::function<double(ConstVecRef x, ConstVecRef mean)> value;
    std::function<void(ConstVecRef x, ConstVecRef mean, VecRef gx, VecRef gmean)> gradient;
};

struct ControlBox {
    Vector lower, upper;
    bool contains(ConstVecRef u, double tol = 1e-12) const;
    Vector project(ConstVecRef u) const;
};

struct ControlProblem {
    std::string name;
    ControlledDynamics dynamics;
    RunningCost running;
    EndpointCost terminal_cost;
    EndpointCost initial_cost;
    ControlBox box;
    double c = 1.0;
    Vector xi;  ///< deterministic terminal shift; empty means zero
    Vector x;
    TimeGrid grid;
    double gamma = 0.125;
    double theta1 = 0.25;
    double theta2 = 0.25;
    ContinuationOptions solver;

    void validate() const;
};

/// Control values per node and particle: (N + 1) x M x d_u.
using ControlPath = PathArray;

ControlPath deterministic_control(const TimeGrid& grid, std::size_t particles, std::size_t control_dim,
                                  const std::function<void(double, VecRef)>& fill);

/// Jacobians of the packed dynamics in v, u and the mean; analytic when
/// provided, central differences with relative step 1e-5 otherwise.
void controlled_jacobians(const ControlProblem& problem, double t, ConstVecRef v, ConstVecRef u, ConstVecRef mean,
                          Matrix& dv, Matrix& du, Matrix& dmean);

/// Throws "control outside U at node k" for the first offending node.
void require_admissible(const ControlProblem& problem, const ControlPath& control);

/// Canonical coefficients (-F, f, -G, g) with the control baked in.
CoefficientSet canonical_coefficients(const ControlProblem& problem, std::shared_ptr<const ControlPath> control);
/// Same with a fixed control value everywhere.
CoefficientSet canonical_coefficients_at(const ControlProblem& problem, const Vector& u);

/// Negates the backward pair (Y, Z). A system satisfying the reversed
/// monotonicity condition becomes one satisfying the standard one.
CoefficientSet flip_backward_sign(const CoefficientSet& c);

/// Continuation solve of `target`, routed through flip_backward_sign when
/// `reversed` is set. The returned state is in the original variables.
SolveReport solve_with_direction(const HomotopyProblem& target, bool reversed, const ContinuationOptions& options,
                                 const BrownianPair& drivers, const RegressionConfig& reg);

SolveReport solve_state(const ControlProblem& problem, const ControlPath& control, const BrownianPair& drivers,
                        const RegressionConfig& reg);

/// H = <p,F> - <P,f> + <q,G> - <Q,g> - l.
double hamiltonian(const ControlProblem& problem, double t, ConstVecRef V, ConstVecRef u, ConstVecRef chi,
                   ConstVecRef mean);
double hamiltonian(const ControlProblem& problem, double t, ConstVecRef V, ConstVecRef u, ConstVecRef chi,
                   const EmpiricalLaw& law);

/// Measure functional Phi(mu) with a declared moment structure.
struct MeasureFunctional {
    LawDependence structure = LawDependence::first_moment;
    std::function<double(ConstVecRef mean)> moment_map;  ///< Phi(mu) = moment_map(mean) when first_moment
    std::function<Vector(ConstVecRef mean)> moment_gradient;  ///< optional; finite differences otherwise
    std::function<Vector(const EmpiricalLaw&, ConstVecRef point)> analytic;  ///< for other structures
};

/// d_mu Phi(mu)(x_i) for each row x_i of `points`.
Matrix l_derivative(const MeasureFunctional& functional, const EmpiricalLaw& law, const Matrix& points);

/// Precomputed derivative data of the state trajectory that the adjoint
/// system and the gradient of H need.
struct AdjointSystem {
    CoefficientSet coeffs;  ///< canonical form over (p, P, q, Q)
    Matrix initial;         ///< p_0 per particle
    Matrix terminal_shift;  ///< grad phi + E~ d_mu phi per particle
    PathArray jac_u;        ///< n x d_u per (node, particle), row-major
    PathArray grad_u_cost;  ///< d_u per (node, particle)
};

struct AdjointOptions {
    std::uint64_t bootstrap_seed = 0xb007ULL;
};

AdjointSystem build_adjoint_coefficients(const ControlProblem& problem, const EnsembleState& state,
                                         const ControlPath& control, const AdjointOptions& options = {});

struct AdjointSolution {
    EnsembleState chi;  ///< (p, P, q, Q) in the packed layout
    SolveReport report;
    double initial_residual = 0.0;   ///< RMS of p_0 - required value
    double terminal_residual = 0.0;  ///< RMS of P_T - required value
    PathArray grad_u;                ///< grad_u H per (node, particle)
};

AdjointSolution solve_adjoint(const ControlProblem& problem, const EnsembleState& state, const ControlPath& control,
                              const BrownianPair& drivers, const RegressionConfig& reg,
                              const AdjointOptions& options = {});

struct CostEstimate {
    double J = 0.0;
    double standard_error = 0.0;
    Vector per_particle;
    SolveReport state;
};

CostEstimate estimate_cost(const ControlProblem& problem, const ControlPath& control, const BrownianPair& drivers,
                           const RegressionConfig& reg);

struct FirstOrderOptions {
    double relaxation = 0.5;
    std::size_t max_iter = 200;
    double tol = 1e-9;
};

struct FirstOrderResult {
    ControlPath control;
    std::size_t iterations = 0;
    double last_change = 0.0;
    bool converged = false;
};

/// Iterates u <- (1 - w) u + w argmax_{u in U} H(state(u), adjoint(u)).
FirstOrderResult first_order_candidate(const ControlProblem& problem, const BrownianPair& drivers,
                                       const RegressionConfig& reg, const FirstOrderOptions& options = {});

/// Maximizes H(t, V, ., chi, mean) over the box by projected gradient ascent
/// started at u0.
Vector maximize_hamiltonian(const ControlProblem& problem, double t, ConstVecRef V, ConstVecRef chi,
                            ConstVecRef mean, ConstVecRef u0);

struct SmpCheck {
    std::string name;
    bool pass = false;
    double margin = 0.0;  ///< worst observed value; negative means violated
    std::string witness;
};

struct SMPReport {
    SmpCheck convexity;
    SmpCheck concavity;
    SmpCheck max_condition;
    SmpCheck empirical;
    double J_candidate = 0.0;
    double J_standard_error = 0.0;
    std::vector<double> perturbation_J;
    std::vector<double> perturbation_threshold;  ///< J(u_hat) - 3 SE for each perturbation
    bool inconclusive = false;
    double adjoint_boundary_residual = 0.0;
    bool verified() const { return convexity.pass && concavity.pass && max_condition.pass && empirical.pass; }
    std::string verdict() const;
};

struct SmpOptions {
    std::uint64_t seed = 99;
    std::size_t convexity_samples = 200;
    std::size_t concavity_samples = 2000;
    std::size_t time_samples = 20;
    std::size_t particle_samples = 8;
    double min_amplitude = 0.05;
    double max_amplitude = 0.5;
};

SMPReport verify_smp(const ControlProblem& problem, const ControlPath& candidate, std::size_t n_perturbations,
                     const BrownianPair& drivers, const RegressionConfig& reg, const SmpOptions& options = {});

struct GradientReport {
    double finite_difference = 0.0;
    double adjoint = 0.0;
    double relative_error = 0.0;
};

GradientReport gradient_consistency(const ControlProblem& problem, const ControlPath& control,
                                    const ControlPath& direction, double h, const BrownianPair& drivers,
                                    const RegressionConfig& reg);

/// Scalar mean-field linear-quadratic problem:
///   F = a_y y + abar_y E[y], f = a_Y Y + abar_Y E[Y] + b u, G = g_z z, g = g_Z Z,
///   l = q y^2 / 2 + qbar E[y]^2 / 2 + r u^2 / 2,
///   phi = s y^2 / 2 + sbar E[y]^2 / 2, psi = k Y^2 / 2, U = [u_min, u_max].
struct LqParams {
    double T = 1.0;
    std::size_t N = 100;
    double x = 1.0;
    double c = 1.0;
    double xi = 0.0;
    double a_y = 1.0, abar_y = -0.5;
    double a_Y = -1.0, abar_Y = 0.5, b = 1.0;
    double g_z = 0.25, g_Z = -0.25;
    double q = 1.0, qbar = 0.5, r = 1.0;
    double s = 1.0, sbar = 0.5;
    double k = 1.0;
    double u_min = -2.0, u_max = 2.0;
    double gamma = 0.125, theta1 = 0.25, theta2 = 0.25;
};

ControlProblem make_lq_problem(const LqParams& params);

}  // namespace mvfb
