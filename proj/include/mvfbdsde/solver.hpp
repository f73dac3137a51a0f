#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mvfbdsde/model.hpp"
#include "mvfbdsde/paths.hpp"

namespace mvfb {

enum class RegressionBasis { constant, affine_y, poly2_y_plus_Btail };

std::string to_string(RegressionBasis b);
RegressionBasis regression_basis_from_string(const std::string& s);

/// Basis for the conditional expectations at node k. Features use only y_k
/// and B_T - B_{t_k}.
struct RegressionConfig {
    RegressionBasis basis = RegressionBasis::affine_y;
    double ridge = 0.0;
};

struct PicardOptions {
    double tol = 1e-4;
    std::size_t max_iter = 200;
    double damping = 1.0;
};

struct LadderRung {
    double alpha = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    double final_D = 0.0;
    double median_ratio = 0.0;  ///< median of the tail contraction ratios
    std::vector<double> picard_residuals;
};

struct SolveReport {
    EnsembleState final_state;
    std::vector<double> picard_residuals;    ///< D(v^{m+1}, v^m) per iteration
    std::vector<double> contraction_ratios;  ///< D_m / D_{m-1}
    std::vector<LadderRung> alpha_ladder;
    ResidualTriple residuals;
    double wallclock_seconds = 0.0;
    bool converged = false;
    std::size_t iterations = 0;
};

class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, SolveReport report) : std::runtime_error(what), report_(std::move(report)) {}
    const SolveReport& report() const { return report_; }

private:
    SolveReport report_;
};

class ContinuationError : public std::runtime_error {
public:
    ContinuationError(const std::string& what, double alpha, SolveReport partial)
        : std::runtime_error(what), failing_alpha_(alpha), partial_(std::move(partial)) {}
    double failing_alpha() const { return failing_alpha_; }
    const SolveReport& partial() const { return partial_; }

private:
    double failing_alpha_;
    SolveReport partial_;
};

/// D(u, v) = (1/M) sum_p [ sum_{k<N} |u - v|^2 dt + |u_y - v_y|^2 at N ].
double d_norm(const EnsembleState& a, const EnsembleState& b);

/// One sweep of the decoupled map: every base coefficient (and the mean
/// field) is frozen at `frozen`; the (1 - alpha) theta terms act on the new
/// iterate.
EnsembleState solve_decoupled_step(const HomotopyProblem& problem, const EnsembleState& frozen,
                                   const BrownianPair& drivers, const RegressionConfig& reg);

/// Exact solve of the alpha = 0 linear system.
EnsembleState linear_base_solve(const HomotopyProblem& problem, const BrownianPair& drivers,
                                const RegressionConfig& reg);

/// Damped Picard iteration from `warm`. Throws SolverError("Picard
/// divergence") when D grows beyond 1e6 D_0 or turns non-finite.
SolveReport picard_solve(const HomotopyProblem& problem, const EnsembleState& warm, const BrownianPair& drivers,
                         const RegressionConfig& reg, const PicardOptions& options);

struct ContinuationOptions {
    double delta = 0.2;
    PicardOptions picard;
    std::size_t max_halvings = 3;
};

/// Ladder alpha = 0, delta, 2 delta, ..., 1 on `target` (whose alpha is
/// ignored). A rung that fails is retried with half the step, up to
/// max_halvings times; then ContinuationError is thrown.
SolveReport continuation_solve(const HomotopyProblem& target, const ContinuationOptions& options,
                               const BrownianPair& drivers, const RegressionConfig& reg);

/// Median of the ratios after the first two iterations (all ratios when
/// fewer are available).
double tail_median_ratio(const std::vector<double>& ratios);

struct OracleSolution {
    TimeGrid grid;
    Matrix y;  ///< (N + 1) x d
    Matrix Y;  ///< (N + 1) x d
    bool unique = true;
    std::vector<Vector> roots;  ///< Y(0) values that solve the boundary problem
};

/// Deterministic reduction of a linear first-moment model with z = Z = 0,
/// solved by shooting on Y(0).
OracleSolution moment_ode_oracle(const LinearMeanFieldModel& model, const Vector& x, const TimeGrid& grid,
                                 const Vector& xi = Vector());

struct NonuniquenessReport {
    std::vector<SolveReport> limits;
    std::vector<std::string> failures;  ///< warm starts whose iteration broke down
    Matrix distances;                   ///< pairwise D between limits
    double max_distance() const { return distances.size() ? distances.maxCoeff() : 0.0; }
};

/// Runs Picard from each warm start at tol / 100 so that limit distances are
/// resolved well below tol.
NonuniquenessReport detect_nonuniqueness(const HomotopyProblem& problem, const std::vector<EnsembleState>& warm_starts,
                                         const BrownianPair& drivers, const RegressionConfig& reg,
                                         const PicardOptions& options);

/// Formats with 17 significant digits.
std::string format_double(double v);

/// t, mean_y[i], mean_Y[i], rms_z, rms_Z, std_y, std_Y per node.
void write_trajectory_csv(const EnsembleState& state, const std::string& path);
void write_ladder_csv(const std::vector<LadderRung>& ladder, const std::string& path);

}  // namespace mvfb
