#include "mvfbdsde/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace mvfb {

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::example1: return "example1";
        case Scenario::example2: return "example2";
        case Scenario::linear_base: return "linear_base";
        case Scenario::lq_control: return "lq_control";
        case Scenario::custom: return "custom";
    }
    return "?";
}

std::string to_string(Command c) {
    switch (c) {
        case Command::solve: return "solve";
        case Command::check_assumptions: return "check_assumptions";
        case Command::detect_nonuniqueness: return "detect_nonuniqueness";
        case Command::verify_smp: return "verify_smp";
        case Command::ito_check: return "ito_check";
    }
    return "?";
}

Scenario scenario_from_string(const std::string& s) {
    for (auto v : {Scenario::example1, Scenario::example2, Scenario::linear_base, Scenario::lq_control, Scenario::custom})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown scenario '" + s + "'");
}

Command command_from_string(const std::string& s) {
    for (auto v : {Command::solve, Command::check_assumptions, Command::detect_nonuniqueness, Command::verify_smp,
                   Command::ito_check})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown command '" + s + "'");
}

ScenarioConfig default_config(Scenario s) {
    ScenarioConfig c;
    c.scenario = s;
    c.model = LinearMeanFieldModel::zeros(c.dims);
    c.model.name = "custom";
    switch (s) {
        case Scenario::example1:
        case Scenario::custom:
            break;
        case Scenario::example2:
            c.T = 3.0 * std::numbers::pi / 4.0;
            c.N = 300;
            c.M = 2000;
            c.damping = 0.25;
            c.max_iter = 400;
            c.x = Vector::Zero(1);
            break;
        case Scenario::linear_base:
            c.N = 100;
            c.M = 2000;
            c.xi = Vector::Constant(1, 0.5);
            break;
        case Scenario::lq_control:
            c.command = Command::verify_smp;
            c.N = 100;
            c.M = 100;
            c.tol = 1e-14;
            c.max_iter = 500;
            c.model.terminal_kind = TerminalKind::linear;
            c.model.c = 1.0;
            break;
    }
    return c;
}

double ScenarioConfig::effective_horizon() const {
    if (override_horizon) return *override_horizon;
    if (scenario == Scenario::example2) return 3.0 * std::numbers::pi / 4.0;
    return T;
}

void ScenarioConfig::validate() const {
    dims.validate();
    const double h = effective_horizon();
    if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("grid.T: horizon must be positive");
    if (N < 2) throw ConfigError("grid.N: need at least 2 steps");
    if (M < 2) throw ConfigError("particles: need at least 2 particles");
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("solver.delta: must lie in (0, 1]");
    if (!(tol > 0.0)) throw ConfigError("solver.tol: must be positive");
    if (!(damping > 0.0 && damping <= 1.0)) throw ConfigError("solver.damping: must lie in (0, 1]");
    if (ridge < 0.0) throw ConfigError("solver.ridge: must be nonnegative");
    if (max_iter == 0) throw ConfigError("solver.max_iter: must be positive");
    if (x.size() != static_cast<Eigen::Index>(dims.d)) throw ConfigError("model.x: expected " + std::to_string(dims.d) + " entries");
    if (xi.size() != static_cast<Eigen::Index>(dims.d)) throw ConfigError("model.xi: expected " + std::to_string(dims.d) + " entries");
    if (scenario == Scenario::custom) {
        try {
            model.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("model: ") + e.what());
        }
    }
    if ((scenario == Scenario::example1 || scenario == Scenario::example2 || scenario == Scenario::lq_control) &&
        !(dims.d_W == dims.d_B))
        throw ConfigError("dims: this scenario needs d_W == d_B");
    if ((scenario == Scenario::example2 || scenario == Scenario::lq_control) && !(dims == Dimensions{1, 1, 1}))
        throw ConfigError("dims: this scenario is scalar");
}

namespace {

bool same(const Matrix& a, const Matrix& b) { return a.rows() == b.rows() && a.cols() == b.cols() && a == b; }
bool same(const Vector& a, const Vector& b) { return a.size() == b.size() && a == b; }

bool same_model(const LinearMeanFieldModel& a, const LinearMeanFieldModel& b) {
    return a.name == b.name && a.dims == b.dims && same(a.K, b.K) && same(a.K_bar, b.K_bar) && same(a.k0, b.k0) &&
           same(a.H, b.H) && same(a.H_bar, b.H_bar) && same(a.h0, b.h0) && a.terminal_kind == b.terminal_kind && a.c == b.c;
}

bool same_lq(const LqParams& a, const LqParams& b) {
    return a.a_y == b.a_y && a.abar_y == b.abar_y && a.a_Y == b.a_Y && a.abar_Y == b.abar_Y && a.b == b.b &&
           a.g_z == b.g_z && a.g_Z == b.g_Z && a.q == b.q && a.qbar == b.qbar && a.r == b.r && a.s == b.s &&
           a.sbar == b.sbar && a.k == b.k && a.u_min == b.u_min && a.u_max == b.u_max && a.gamma == b.gamma;
}

}  // namespace

bool ScenarioConfig::operator==(const ScenarioConfig& o) const {
    return scenario == o.scenario && command == o.command && dims == o.dims && T == o.T && N == o.N && M == o.M &&
           seed == o.seed && delta == o.delta && tol == o.tol && basis == o.basis && ridge == o.ridge &&
           damping == o.damping && max_iter == o.max_iter && max_halvings == o.max_halvings && theta1 == o.theta1 &&
           theta2 == o.theta2 && alpha1 == o.alpha1 && assumption_samples == o.assumption_samples &&
           perturbations == o.perturbations && output_dir == o.output_dir && threads == o.threads &&
           override_horizon == o.override_horizon && same(x, o.x) && same(xi, o.xi) && same_model(model, o.model) &&
           base_case == o.base_case && base_theta == o.base_theta && same_lq(lq, o.lq);
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& v) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("expected a number, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("expected a number, got '" + v + "'");
    return out;
}

std::uint64_t parse_unsigned(const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError("expected a nonnegative integer, got '" + v + "'");
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError("integer out of range: '" + v + "'");
    }
}

Vector parse_vector(const std::string& v) {
    std::vector<double> vals;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) vals.push_back(parse_double(trim(item)));
    if (vals.empty()) throw ConfigError("expected a comma-separated list");
    return Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

Matrix parse_matrix(const std::string& v) {
    std::vector<Vector> rows;
    std::stringstream ss(v);
    std::string row;
    while (std::getline(ss, row, ';')) rows.push_back(parse_vector(trim(row)));
    if (rows.empty()) throw ConfigError("expected a matrix");
    Matrix m(static_cast<Eigen::Index>(rows.size()), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != m.cols()) throw ConfigError("ragged matrix rows");
        m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    }
    return m;
}

std::string vector_text(const Vector& v) {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    return s;
}

std::string matrix_text(const Matrix& m) {
    std::string s;
    for (Eigen::Index i = 0; i < m.rows(); ++i) s += (i ? ";" : "") + vector_text(m.row(i).transpose());
    return s;
}

using Setter = std::function<void(ScenarioConfig&, const std::string&)>;

std::map<std::string, double LqParams::*> lq_fields() {
    return {{"a_y", &LqParams::a_y},   {"abar_y", &LqParams::abar_y}, {"a_Y", &LqParams::a_Y},
            {"abar_Y", &LqParams::abar_Y}, {"b", &LqParams::b},       {"g_z", &LqParams::g_z},
            {"g_Z", &LqParams::g_Z},   {"q", &LqParams::q},           {"qbar", &LqParams::qbar},
            {"r", &LqParams::r},       {"s", &LqParams::s},           {"sbar", &LqParams::sbar},
            {"k", &LqParams::k},       {"u_min", &LqParams::u_min},   {"u_max", &LqParams::u_max},
            {"gamma", &LqParams::gamma}};
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        t["scenario"] = [](ScenarioConfig& c, const std::string& v) { c.scenario = scenario_from_string(v); };
        t["command"] = [](ScenarioConfig& c, const std::string& v) { c.command = command_from_string(v); };
        t["dims.d"] = [](ScenarioConfig& c, const std::string& v) { c.dims.d = parse_unsigned(v); };
        t["dims.d_W"] = [](ScenarioConfig& c, const std::string& v) { c.dims.d_W = parse_unsigned(v); };
        t["dims.d_B"] = [](ScenarioConfig& c, const std::string& v) { c.dims.d_B = parse_unsigned(v); };
        t["grid.T"] = [](ScenarioConfig& c, const std::string& v) { c.T = parse_double(v); };
        t["grid.N"] = [](ScenarioConfig& c, const std::string& v) { c.N = parse_unsigned(v); };
        t["particles"] = [](ScenarioConfig& c, const std::string& v) { c.M = parse_unsigned(v); };
        t["seed"] = [](ScenarioConfig& c, const std::string& v) { c.seed = parse_unsigned(v); };
        t["solver.delta"] = [](ScenarioConfig& c, const std::string& v) { c.delta = parse_double(v); };
        t["solver.tol"] = [](ScenarioConfig& c, const std::string& v) { c.tol = parse_double(v); };
        t["solver.basis"] = [](ScenarioConfig& c, const std::string& v) {
            try {
                c.basis = regression_basis_from_string(v);
            } catch (const std::exception&) {
                throw ConfigError("unknown regression basis '" + v + "'");
            }
        };
        t["solver.ridge"] = [](ScenarioConfig& c, const std::string& v) { c.ridge = parse_double(v); };
        t["solver.damping"] = [](ScenarioConfig& c, const std::string& v) { c.damping = parse_double(v); };
        t["solver.max_iter"] = [](ScenarioConfig& c, const std::string& v) { c.max_iter = parse_unsigned(v); };
        t["solver.max_halvings"] = [](ScenarioConfig& c, const std::string& v) { c.max_halvings = parse_unsigned(v); };
        t["monotonicity.theta1"] = [](ScenarioConfig& c, const std::string& v) { c.theta1 = parse_double(v); };
        t["monotonicity.theta2"] = [](ScenarioConfig& c, const std::string& v) { c.theta2 = parse_double(v); };
        t["monotonicity.alpha1"] = [](ScenarioConfig& c, const std::string& v) { c.alpha1 = parse_double(v); };
        t["assumptions.samples"] = [](ScenarioConfig& c, const std::string& v) { c.assumption_samples = parse_unsigned(v); };
        t["smp.perturbations"] = [](ScenarioConfig& c, const std::string& v) { c.perturbations = parse_unsigned(v); };
        t["output.dir"] = [](ScenarioConfig& c, const std::string& v) { c.output_dir = v; };
        t["threads"] = [](ScenarioConfig& c, const std::string& v) { c.threads = parse_unsigned(v); };
        t["override_horizon"] = [](ScenarioConfig& c, const std::string& v) {
            if (v == "none")
                c.override_horizon.reset();
            else
                c.override_horizon = parse_double(v);
        };
        t["model.x"] = [](ScenarioConfig& c, const std::string& v) { c.x = parse_vector(v); };
        t["model.xi"] = [](ScenarioConfig& c, const std::string& v) { c.xi = parse_vector(v); };
        t["model.K"] = [](ScenarioConfig& c, const std::string& v) { c.model.K = parse_matrix(v); };
        t["model.K_bar"] = [](ScenarioConfig& c, const std::string& v) { c.model.K_bar = parse_matrix(v); };
        t["model.k0"] = [](ScenarioConfig& c, const std::string& v) { c.model.k0 = parse_vector(v); };
        t["model.H"] = [](ScenarioConfig& c, const std::string& v) { c.model.H = parse_matrix(v); };
        t["model.H_bar"] = [](ScenarioConfig& c, const std::string& v) { c.model.H_bar = parse_matrix(v); };
        t["model.h0"] = [](ScenarioConfig& c, const std::string& v) { c.model.h0 = parse_vector(v); };
        t["model.terminal"] = [](ScenarioConfig& c, const std::string& v) {
            if (v == "law_map")
                c.model.terminal_kind = TerminalKind::law_map;
            else if (v == "linear")
                c.model.terminal_kind = TerminalKind::linear;
            else
                throw ConfigError("model.terminal must be law_map or linear");
        };
        t["model.c"] = [](ScenarioConfig& c, const std::string& v) { c.model.c = parse_double(v); };
        t["linear_base.case"] = [](ScenarioConfig& c, const std::string& v) {
            if (v == "case1")
                c.base_case = HomotopyCase::case1;
            else if (v == "case2")
                c.base_case = HomotopyCase::case2;
            else
                throw ConfigError("linear_base.case must be case1 or case2");
        };
        t["linear_base.theta"] = [](ScenarioConfig& c, const std::string& v) { c.base_theta = parse_double(v); };
        for (const auto& [name, field] : lq_fields()) {
            auto f = field;
            t["lq." + name] = [f](ScenarioConfig& c, const std::string& v) { c.lq.*f = parse_double(v); };
        }
        return t;
    }();
    return table;
}

// Model blocks not given explicitly follow the dimensions.
void finalize(ScenarioConfig& c, const std::set<std::string>& given) {
    const Dimensions& dm = c.dims;
    const auto n = static_cast<Eigen::Index>(dm.packed());
    const auto d = static_cast<Eigen::Index>(dm.d);
    c.model.dims = dm;
    if (!given.count("model.K") && c.model.K.rows() != n) c.model.K = Matrix::Zero(n, n);
    if (!given.count("model.K_bar") && c.model.K_bar.rows() != n) c.model.K_bar = Matrix::Zero(n, n);
    if (!given.count("model.k0") && c.model.k0.size() != n) c.model.k0 = Vector::Zero(n);
    if (!given.count("model.H") && c.model.H.rows() != d) c.model.H = Matrix::Zero(d, d);
    if (!given.count("model.H_bar") && c.model.H_bar.rows() != d) c.model.H_bar = Matrix::Zero(d, d);
    if (!given.count("model.h0") && c.model.h0.size() != d) c.model.h0 = Vector::Zero(d);
    if (!given.count("model.x") && c.x.size() != d) c.x = Vector::Constant(d, c.x.size() ? c.x[0] : 0.0);
    if (!given.count("model.xi") && c.xi.size() != d) c.xi = Vector::Constant(d, c.xi.size() ? c.xi[0] : 0.0);
}

}  // namespace

std::vector<ConfigEntry> read_entries(std::istream& in, const std::string& source) {
    std::vector<ConfigEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
        if (!setters().count(key))
            throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        out.emplace_back(key, value);
    }
    return out;
}

ScenarioConfig config_from_entries(const std::vector<ConfigEntry>& entries, const std::string& source) {
    Scenario s = Scenario::example1;
    for (const auto& [k, v] : entries)
        if (k == "scenario") {
            try {
                s = scenario_from_string(v);
            } catch (const ConfigError& e) {
                throw ConfigError(source + ": key 'scenario': " + e.what());
            }
        }
    ScenarioConfig c = default_config(s);
    std::set<std::string> given;
    for (const auto& [k, v] : entries) {
        const auto it = setters().find(k);
        if (it == setters().end()) throw ConfigError(source + ": unknown key '" + k + "'");
        try {
            it->second(c, v);
        } catch (const ConfigError& e) {
            throw ConfigError(source + ": key '" + k + "': " + e.what());
        }
        given.insert(k);
    }
    finalize(c, given);
    return c;
}

ScenarioConfig parse_config(std::istream& in, const std::string& source) {
    return config_from_entries(read_entries(in, source), source);
}

ScenarioConfig parse_config_string(const std::string& text) {
    std::istringstream in(text);
    return parse_config(in, "config");
}

ScenarioConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse_config(in, path);
}

std::string serialize(const ScenarioConfig& c) {
    std::ostringstream os;
    os << "scenario = " << to_string(c.scenario) << "\n";
    os << "command = " << to_string(c.command) << "\n";
    os << "dims.d = " << c.dims.d << "\ndims.d_W = " << c.dims.d_W << "\ndims.d_B = " << c.dims.d_B << "\n";
    os << "grid.T = " << format_double(c.T) << "\ngrid.N = " << c.N << "\n";
    os << "particles = " << c.M << "\nseed = " << c.seed << "\n";
    os << "solver.delta = " << format_double(c.delta) << "\nsolver.tol = " << format_double(c.tol) << "\n";
    os << "solver.basis = " << to_string(c.basis) << "\nsolver.ridge = " << format_double(c.ridge) << "\n";
    os << "solver.damping = " << format_double(c.damping) << "\nsolver.max_iter = " << c.max_iter << "\n";
    os << "solver.max_halvings = " << c.max_halvings << "\n";
    os << "monotonicity.theta1 = " << format_double(c.theta1) << "\nmonotonicity.theta2 = " << format_double(c.theta2)
       << "\nmonotonicity.alpha1 = " << format_double(c.alpha1) << "\n";
    os << "assumptions.samples = " << c.assumption_samples << "\nsmp.perturbations = " << c.perturbations << "\n";
    os << "output.dir = " << c.output_dir << "\nthreads = " << c.threads << "\n";
    os << "override_horizon = " << (c.override_horizon ? format_double(*c.override_horizon) : std::string("none")) << "\n";
    os << "model.x = " << vector_text(c.x) << "\nmodel.xi = " << vector_text(c.xi) << "\n";
    os << "model.K = " << matrix_text(c.model.K) << "\nmodel.K_bar = " << matrix_text(c.model.K_bar) << "\n";
    os << "model.k0 = " << vector_text(c.model.k0) << "\n";
    os << "model.H = " << matrix_text(c.model.H) << "\nmodel.H_bar = " << matrix_text(c.model.H_bar) << "\n";
    os << "model.h0 = " << vector_text(c.model.h0) << "\n";
    os << "model.terminal = " << (c.model.terminal_kind == TerminalKind::linear ? "linear" : "law_map") << "\n";
    os << "model.c = " << format_double(c.model.c) << "\n";
    os << "linear_base.case = " << to_string(c.base_case) << "\nlinear_base.theta = " << format_double(c.base_theta) << "\n";
    for (const auto& [name, field] : lq_fields()) os << "lq." << name << " = " << format_double(c.lq.*field) << "\n";
    return os.str();
}

}  // namespace mvfb
