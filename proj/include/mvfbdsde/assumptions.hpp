#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvfbdsde/control.hpp"
#include "mvfbdsde/model.hpp"

namespace mvfb {

/// Random ensemble pairs used by the sampling checks. Families cycle with the
/// sample index: independent ensembles, coupled random displacement,
/// deterministic axis displacement, mean shift, and same law with displaced
/// evaluation points.
struct SamplerConfig {
    std::uint64_t seed = 2024;
    std::size_t ensemble_size = 16;
    double scale = 1.0;
    double t_min = 0.0;
    double t_max = 1.0;

    void validate() const;
};

enum class SamplerFamily { independent, coupled, axis, mean_shift, same_law };
std::string to_string(SamplerFamily f);

struct Witness {
    std::string assumption;
    SamplerFamily family = SamplerFamily::independent;
    std::size_t sample = 0;
    double t = 0.0;
    double margin = 0.0;
    double functional = 0.0;  ///< monotonicity pairing or Lipschitz ratio at the witness
    Matrix first, second;  ///< the two ensembles (rows are packed quadruples)
    std::string describe() const;
};

struct LipschitzReport {
    double C_hat = 0.0;
    double gamma_hat = 0.0;
    std::size_t violations = 0;  ///< samples needing gamma >= 1/2
    std::size_t samples = 0;
    bool gamma_ok() const { return gamma_hat < 0.5; }
    std::vector<Witness> witnesses;
};

LipschitzReport estimate_lipschitz(const CoefficientSet& coeffs, const SamplerConfig& sampler, std::size_t n_pairs);

enum class MonotonicityDirection { A2, A2_prime, A2_collapsed };
std::string to_string(MonotonicityDirection d);

struct AssumptionReport {
    std::string model;
    MonotonicityDirection direction = MonotonicityDirection::A2;
    double theta1 = 0.0, theta2 = 0.0, alpha1 = 0.0;
    double estimated_C = 0.0;      ///< filled when a Lipschitz estimate is attached
    double estimated_gamma = 0.0;
    bool lipschitz_checked = false;
    bool lipschitz_pass = true;
    double monotonicity_margin = 0.0;  ///< largest observed required-side gap; > 0 is a violation
    double alpha1_margin = 0.0;        ///< same for the terminal condition
    bool monotonicity_pass = true;
    bool terminal_pass = true;
    bool integrability_checked = false;
    bool integrability_pass = true;
    std::size_t samples_used = 0;
    std::size_t violations = 0;
    std::vector<Witness> witnesses;

    bool pass() const { return lipschitz_pass && monotonicity_pass && terminal_pass && integrability_pass; }
    void attach(const LipschitzReport& lip);
    std::string to_text() const;
    std::string to_key_value() const;
};

struct MonotonicityOptions {
    bool local_search = true;
    std::size_t local_steps = 200;
};

AssumptionReport check_monotonicity(const CoefficientSet& coeffs, double theta1, double theta2, double alpha1,
                                    MonotonicityDirection direction, const SamplerConfig& sampler,
                                    std::size_t n_pairs, const MonotonicityOptions& options = {});

struct IntegrabilityReport {
    bool pass = true;
    std::size_t offending_node = 0;
    std::string message;
};

/// Evaluates the coefficients at every grid node for each probe row of
/// `probe_law` (frozen at that law) and the terminal map on the y-parts.
IntegrabilityReport check_integrability(const CoefficientSet& coeffs, const TimeGrid& grid, const EmpiricalLaw& probe_law);

struct ControlAssumptionReport {
    double gamma = 0.0;
    double dg_dz = 0.0, dg_dZ = 0.0, dG_dz = 0.0, dG_dZ = 0.0;  ///< largest squared operator norms
    double lg_dz = 0.0, lg_dZ = 0.0, lG_dz = 0.0, lG_dZ = 0.0;  ///< same for the mean blocks
    bool gamma_in_range = false;
    bool derivative_pass = false;
    bool l_derivative_pass = false;
    std::vector<AssumptionReport> monotonicity;  ///< one per probed control value
    bool monotonicity_pass = false;
    std::size_t samples = 0;
    bool pass() const { return gamma_in_range && derivative_pass && l_derivative_pass && monotonicity_pass; }
    std::string to_text() const;
    std::string to_key_value() const;
};

/// Throws "A6 requires c≠0" when c == 0.
ControlAssumptionReport check_control_assumptions(const ControlProblem& problem, const SamplerConfig& sampler,
                                                  std::size_t n_pairs = 10000);

}  // namespace mvfb
