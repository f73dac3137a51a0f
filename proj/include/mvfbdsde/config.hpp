#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvfbdsde/control.hpp"
#include "mvfbdsde/model.hpp"
#include "mvfbdsde/solver.hpp"

namespace mvfb {

enum class Scenario { example1, example2, linear_base, lq_control, custom };
enum class Command { solve, check_assumptions, detect_nonuniqueness, verify_smp, ito_check };

std::string to_string(Scenario s);
std::string to_string(Command c);
Scenario scenario_from_string(const std::string& s);
Command command_from_string(const std::string& s);

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat key=value scenario description. See README for the grammar.
struct ScenarioConfig {
    Scenario scenario = Scenario::example1;
    Command command = Command::solve;
    Dimensions dims{1, 1, 1};
    double T = 1.0;
    std::size_t N = 200;
    std::size_t M = 4000;
    std::uint64_t seed = 42;

    double delta = 0.2;
    double tol = 1e-4;
    RegressionBasis basis = RegressionBasis::affine_y;
    double ridge = 0.0;
    double damping = 1.0;
    std::size_t max_iter = 200;
    std::size_t max_halvings = 3;

    double theta1 = 0.25, theta2 = 0.25, alpha1 = 0.5;
    std::size_t assumption_samples = 10000;
    std::size_t perturbations = 50;

    std::string output_dir = "out";
    std::size_t threads = 0;
    std::optional<double> override_horizon;

    Vector x = Vector::Ones(1);
    Vector xi = Vector::Zero(1);
    LinearMeanFieldModel model;  ///< used by `custom`

    HomotopyCase base_case = HomotopyCase::case1;  ///< used by `linear_base`
    double base_theta = 1.0;

    LqParams lq;

    /// Horizon actually used: example2 pins 3 pi / 4 unless overridden.
    double effective_horizon() const;
    void validate() const;
    bool operator==(const ScenarioConfig& o) const;
};

ScenarioConfig default_config(Scenario s);

using ConfigEntry = std::pair<std::string, std::string>;

/// Reads `key = value` lines; `#` starts a comment. Throws ConfigError with
/// the source name and line number.
std::vector<ConfigEntry> read_entries(std::istream& in, const std::string& source);

/// Builds a config from entries: the last `scenario` entry selects the
/// defaults, then every entry is applied in order.
ScenarioConfig config_from_entries(const std::vector<ConfigEntry>& entries, const std::string& source = "config");

ScenarioConfig parse_config(std::istream& in, const std::string& source = "config");
ScenarioConfig parse_config_string(const std::string& text);
ScenarioConfig parse_config_file(const std::string& path);

std::string serialize(const ScenarioConfig& c);

}  // namespace mvfb
