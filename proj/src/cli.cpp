#include "mvfbdsde/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "mvfbdsde/assumptions.hpp"
#include "mvfbdsde/control.hpp"
#include "mvfbdsde/parallel.hpp"
#include "mvfbdsde/paths.hpp"

namespace mvfb {

namespace fs = std::filesystem;

void emit_report(const SolveReport& report, const std::string& dir) {
    fs::create_directories(dir);
    write_trajectory_csv(report.final_state, (fs::path(dir) / "trajectory.csv").string());
    write_ladder_csv(report.alpha_ladder, (fs::path(dir) / "ladder.csv").string());
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

struct Context {
    const ScenarioConfig& cfg;
    TimeGrid grid;
    RegressionConfig reg;
    ContinuationOptions opts;
    fs::path out;
    std::ostringstream report;
};

struct BaseModel {
    CoefficientSet coeffs;
    std::optional<LinearMeanFieldModel> linear;  ///< for the moment oracle
};

BaseModel base_model(const ScenarioConfig& cfg) {
    switch (cfg.scenario) {
        case Scenario::example1:
        case Scenario::linear_base: {
            LinearMeanFieldModel m = example_meanfield_model(cfg.dims);
            return {make_coefficients(m), m};
        }
        case Scenario::example2: {
            BuiltinCounterexample cx = builtin_counterexample();
            return {cx.coeffs, cx.model};
        }
        case Scenario::custom:
            return {make_coefficients(cfg.model), cfg.model};
        case Scenario::lq_control:
            break;
    }
    throw std::invalid_argument("scenario " + to_string(cfg.scenario) + " has no uncontrolled model");
}

ControlProblem lq_problem(const ScenarioConfig& cfg, const TimeGrid& grid, const ContinuationOptions& opts) {
    LqParams q = cfg.lq;
    q.T = grid.T;
    q.N = grid.N;
    q.x = cfg.x[0];
    q.xi = cfg.xi[0];
    q.c = cfg.model.c;
    q.theta1 = cfg.theta1;
    q.theta2 = cfg.theta2;
    ControlProblem p = make_lq_problem(q);
    p.solver = opts;
    return p;
}

void describe_solve(Context& cx, const SolveReport& rep) {
    auto& os = cx.report;
    os << "converged: " << (rep.converged ? "yes" : "no") << "\n";
    os << "iterations: " << rep.iterations << "\n";
    os << "residuals: forward " << format_double(rep.residuals.forward) << ", backward "
       << format_double(rep.residuals.backward) << ", terminal " << format_double(rep.residuals.terminal) << "\n";
    for (const auto& r : rep.alpha_ladder)
        os << "rung alpha=" << format_double(r.alpha) << " iterations=" << r.iterations
           << " converged=" << (r.converged ? 1 : 0) << " final_D=" << format_double(r.final_D)
           << " median_ratio=" << format_double(r.median_ratio) << "\n";
}

void describe_oracle(Context& cx, const EnsembleState& st, const LinearMeanFieldModel& m) {
    OracleSolution o;
    try {
        o = moment_ode_oracle(m, cx.cfg.x, cx.grid, cx.cfg.xi);
    } catch (const std::exception& e) {
        cx.report << "oracle: unavailable (" << e.what() << ")\n";
        return;
    }
    const std::size_t d = st.dims.d;
    double err = 0.0;
    for (std::size_t k = 0; k <= cx.grid.N; ++k)
        for (std::size_t i = 0; i < d; ++i) {
            err = std::max(err, std::abs(st.mean(k, i) - o.y(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i))));
            err = std::max(err, std::abs(st.mean(k, d + i) - o.Y(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i))));
        }
    cx.report << "oracle: unique=" << (o.unique ? 1 : 0) << " max_mean_error=" << format_double(err) << "\n";
}

int cmd_solve(Context& cx) {
    const ScenarioConfig& cfg = cx.cfg;
    const auto& dm = cfg.dims;
    const BrownianPair drivers = sample_driver_pair(cx.grid, dm.d_W, dm.d_B, cfg.M, cfg.seed);

    if (cfg.scenario == Scenario::lq_control) {
        const ControlProblem P = lq_problem(cfg, cx.grid, cx.opts);
        const FirstOrderResult fo = first_order_candidate(P, drivers, cx.reg);
        const CostEstimate ce = estimate_cost(P, fo.control, drivers, cx.reg);
        emit_report(ce.state, cx.out.string());
        std::ostringstream csv;
        csv << "t,mean_u\n";
        for (std::size_t k = 0; k <= cx.grid.N; ++k) {
            double s = 0.0;
            for (std::size_t p = 0; p < cfg.M; ++p) s += fo.control.at(k, p)[0];
            csv << format_double(cx.grid.t(k)) << "," << format_double(s / static_cast<double>(cfg.M)) << "\n";
        }
        write_text(cx.out / "control.csv", csv.str());
        cx.report << "first-order iterations: " << fo.iterations << " (converged " << (fo.converged ? 1 : 0)
                  << ", last change " << format_double(fo.last_change) << ")\n";
        cx.report << "J: " << format_double(ce.J) << " (standard error " << format_double(ce.standard_error) << ")\n";
        describe_solve(cx, ce.state);
        return fo.converged ? kExitOk : kExitRefuted;
    }

    const BaseModel bm = base_model(cfg);
    if (cfg.scenario == Scenario::linear_base) {
        const Matrix x = cfg.x.transpose(), xi = cfg.xi.transpose();
        const HomotopyProblem prob = cfg.base_case == HomotopyCase::case1
                                         ? build_homotopy_case1(bm.coeffs, 0.0, cfg.base_theta, nullptr, xi, x)
                                         : build_homotopy_case2(bm.coeffs, 0.0, cfg.base_theta, nullptr, xi, x);
        SolveReport rep;
        rep.final_state = linear_base_solve(prob, drivers, cx.reg);
        rep.residuals = residual(prob, rep.final_state, drivers);
        rep.converged = true;
        LadderRung rung;
        rung.alpha = 0.0;
        rung.converged = true;
        rep.alpha_ladder.push_back(rung);
        emit_report(rep, cx.out.string());
        describe_solve(cx, rep);
        if (cfg.base_case == HomotopyCase::case1) {
            double err = 0.0;
            for (std::size_t k = 0; k <= cx.grid.N; ++k)
                for (std::size_t i = 0; i < dm.d; ++i) {
                    const auto ii = static_cast<Eigen::Index>(i);
                    const double exact = cfg.x[ii] + cfg.xi[ii] + cfg.base_theta * cfg.x[ii] * (cx.grid.T - cx.grid.t(k));
                    err = std::max(err, std::abs(rep.final_state.mean(k, dm.d + i) - exact));
                }
            cx.report << "closed-form max error in mean Y: " << format_double(err) << "\n";
        }
        return kExitOk;
    }

    const HomotopyProblem prob = make_problem(bm.coeffs, cfg.x, cfg.xi);
    try {
        const SolveReport rep = continuation_solve(prob, cx.opts, drivers, cx.reg);
        emit_report(rep, cx.out.string());
        cx.report << "wallclock_seconds: " << format_double(rep.wallclock_seconds) << "\n";
        describe_solve(cx, rep);
        if (bm.linear) describe_oracle(cx, rep.final_state, *bm.linear);
        return rep.converged ? kExitOk : kExitRefuted;
    } catch (const ContinuationError& e) {
        emit_report(e.partial(), cx.out.string());
        cx.report << "continuation failed at alpha=" << format_double(e.failing_alpha()) << ": " << e.what() << "\n";
        describe_solve(cx, e.partial());
        return kExitRefuted;
    }
}

int cmd_check(Context& cx) {
    const ScenarioConfig& cfg = cx.cfg;
    SamplerConfig sampler;
    sampler.seed = cfg.seed;
    sampler.t_min = 0.0;
    sampler.t_max = cx.grid.T;
    if (cfg.scenario == Scenario::lq_control) {
        const ControlProblem P = lq_problem(cfg, cx.grid, cx.opts);
        const ControlAssumptionReport rep = check_control_assumptions(P, sampler, cfg.assumption_samples);
        cx.report << rep.to_text();
        write_text(cx.out / "assumptions.kv", rep.to_key_value());
        return rep.pass() ? kExitOk : kExitRefuted;
    }
    const BaseModel bm = base_model(cfg);
    const LipschitzReport lip = estimate_lipschitz(bm.coeffs, sampler, cfg.assumption_samples);
    AssumptionReport rep = check_monotonicity(bm.coeffs, cfg.theta1, cfg.theta2, cfg.alpha1, MonotonicityDirection::A2,
                                              sampler, cfg.assumption_samples);
    rep.attach(lip);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> nd;
    Matrix probes(16, static_cast<Eigen::Index>(cfg.dims.packed()));
    for (Eigen::Index j = 0; j < probes.cols(); ++j)
        for (Eigen::Index i = 0; i < probes.rows(); ++i) probes(i, j) = nd(rng);
    const IntegrabilityReport integ = check_integrability(bm.coeffs, cx.grid, EmpiricalLaw(probes));
    rep.integrability_checked = true;
    rep.integrability_pass = integ.pass;
    cx.report << rep.to_text();
    if (!integ.pass) cx.report << "A3: " << integ.message << "\n";
    write_text(cx.out / "assumptions.kv", rep.to_key_value());
    return rep.pass() ? kExitOk : kExitRefuted;
}

int cmd_nonuniqueness(Context& cx) {
    const ScenarioConfig& cfg = cx.cfg;
    const auto& dm = cfg.dims;
    const BaseModel bm = base_model(cfg);
    const BrownianPair drivers = sample_driver_pair(cx.grid, dm.d_W, dm.d_B, cfg.M, cfg.seed);
    const HomotopyProblem prob = make_problem(bm.coeffs, cfg.x, cfg.xi);

    std::vector<EnsembleState> warm;
    warm.push_back(constant_state(prob, cx.grid, cfg.M));
    EnsembleState second;
    if (cfg.scenario == Scenario::example2) {
        second = deterministic_state(cx.grid, dm, cfg.M, [](double t, VecRef v) {
            v[0] = std::sin(t);
            v[1] = std::cos(t);
        });
    } else {
        second = constant_state(prob, cx.grid, cfg.M);
        try {
            const OracleSolution o = moment_ode_oracle(*bm.linear, cfg.x, cx.grid, cfg.xi);
            for (std::size_t k = 0; k <= cx.grid.N; ++k)
                for (std::size_t p = 0; p < cfg.M; ++p) {
                    second.at(k, p).head(dm.d) = o.y.row(static_cast<Eigen::Index>(k)).transpose();
                    second.at(k, p).segment(dm.Y_off(), dm.d) = o.Y.row(static_cast<Eigen::Index>(k)).transpose();
                }
        } catch (const std::exception&) {
            for (auto& v : second.values.raw()) v += 1.0;
        }
    }
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> nd(0.0, 0.01);
    for (std::size_t k = 1; k <= cx.grid.N; ++k)
        for (std::size_t p = 0; p < cfg.M; ++p)
            for (std::size_t i = 0; i < 2 * dm.d; ++i) second.at(k, p)[static_cast<Eigen::Index>(i)] += nd(rng);
    warm.push_back(std::move(second));

    const NonuniquenessReport rep = detect_nonuniqueness(prob, warm, drivers, cx.reg, cx.opts.picard);
    for (std::size_t i = 0; i < rep.limits.size(); ++i) {
        const auto& lim = rep.limits[i];
        if (i == 0)
            emit_report(lim, cx.out.string());
        else
            write_trajectory_csv(lim.final_state, (cx.out / ("trajectory_limit" + std::to_string(i) + ".csv")).string());
        cx.report << "limit " << i << ": iterations " << lim.iterations << ", converged " << (lim.converged ? 1 : 0)
                  << ", residuals " << format_double(lim.residuals.forward) << " " << format_double(lim.residuals.backward)
                  << " " << format_double(lim.residuals.terminal) << "\n";
    }
    for (const auto& f : rep.failures) cx.report << "failed warm start: " << f << "\n";
    cx.report << "max pairwise D: " << format_double(rep.max_distance()) << "\n";
    const bool distinct = rep.max_distance() > 2.0 * cfg.tol;
    cx.report << (distinct ? "distinct limits found: uniqueness refuted\n" : "all limits coincide\n");
    if (rep.limits.empty()) return kExitError;
    return distinct ? kExitRefuted : kExitOk;
}

int cmd_verify_smp(Context& cx) {
    const ScenarioConfig& cfg = cx.cfg;
    if (cfg.scenario != Scenario::lq_control) throw std::invalid_argument("verify_smp requires a control scenario");
    const BrownianPair drivers = sample_driver_pair(cx.grid, 1, 1, cfg.M, cfg.seed);
    const ControlProblem P = lq_problem(cfg, cx.grid, cx.opts);
    const FirstOrderResult fo = first_order_candidate(P, drivers, cx.reg);
    SmpOptions so;
    so.seed = cfg.seed;
    const SMPReport rep = verify_smp(P, fo.control, cfg.perturbations, drivers, cx.reg, so);
    const CostEstimate ce = estimate_cost(P, fo.control, drivers, cx.reg);
    emit_report(ce.state, cx.out.string());
    std::ostringstream csv;
    csv << "condition,pass,margin\n";
    for (const SmpCheck* c : {&rep.convexity, &rep.concavity, &rep.max_condition, &rep.empirical})
        csv << c->name << "," << (c->pass ? 1 : 0) << "," << format_double(c->margin) << "\n";
    write_text(cx.out / "smp.csv", csv.str());
    cx.report << "first-order iterations: " << fo.iterations << " (converged " << (fo.converged ? 1 : 0) << ")\n";
    cx.report << "J(candidate): " << format_double(rep.J_candidate) << " (standard error "
              << format_double(rep.J_standard_error) << ")\n";
    for (const SmpCheck* c : {&rep.convexity, &rep.concavity, &rep.max_condition, &rep.empirical})
        cx.report << c->name << ": " << (c->pass ? "pass" : "FAIL") << " margin " << format_double(c->margin)
                  << (c->witness.empty() ? "" : " [" + c->witness + "]") << "\n";
    cx.report << "adjoint boundary residual: " << format_double(rep.adjoint_boundary_residual) << "\n";
    if (rep.inconclusive) cx.report << "note: some perturbation comparisons are within Monte Carlo noise\n";
    cx.report << "verdict: " << rep.verdict() << "\n";
    return rep.verified() ? kExitOk : kExitRefuted;
}

int cmd_ito(Context& cx) {
    const ScenarioConfig& cfg = cx.cfg;
    const BrownianPair drivers = sample_driver_pair(cx.grid, 1, 1, cfg.M, cfg.seed);
    const double bound = 5.0 * cx.grid.dt();
    struct Case {
        const char* name;
        ProcessSpec a, b;
    };
    auto one = [](double) { return 1.0; };
    std::vector<Case> cases;
    cases.push_back({"deterministic", ProcessSpec{1.0, [](double t) { return std::cos(t); }, nullptr, nullptr},
                     ProcessSpec{2.0, one, nullptr, nullptr}});
    cases.push_back({"backward_square", ProcessSpec{0.0, nullptr, nullptr, one}, ProcessSpec{0.0, nullptr, nullptr, one}});
    cases.push_back({"forward_backward", ProcessSpec{0.0, nullptr, one, nullptr}, ProcessSpec{0.0, nullptr, nullptr, one}});
    bool ok = true;
    std::ostringstream csv;
    csv << "case,lhs,rhs,residual,standard_error,bound\n";
    for (const auto& c : cases) {
        const ItoProductCheck r = discrete_ito_product_check(c.a, c.b, drivers);
        const bool pass = r.residual <= bound;
        ok = ok && pass;
        cx.report << c.name << ": residual " << format_double(r.residual) << " (bound " << format_double(bound)
                  << ", standard error " << format_double(r.standard_error) << ") " << (pass ? "pass" : "FAIL") << "\n";
        csv << c.name << "," << format_double(r.lhs) << "," << format_double(r.rhs) << "," << format_double(r.residual)
            << "," << format_double(r.standard_error) << "," << format_double(bound) << "\n";
    }
    write_text(cx.out / "ito.csv", csv.str());
    return ok ? kExitOk : kExitRefuted;
}

}  // namespace

int run(const ScenarioConfig& config, std::ostream& log) {
    Context cx{config, TimeGrid(), {}, {}, {}, {}};
    int code = kExitError;
    try {
        config.validate();
        set_thread_count(config.threads);
        cx.grid = TimeGrid(config.effective_horizon(), config.N);
        cx.reg = RegressionConfig{config.basis, config.ridge};
        cx.opts.delta = config.delta;
        cx.opts.max_halvings = config.max_halvings;
        cx.opts.picard = PicardOptions{config.tol, config.max_iter, config.damping};
        cx.out = config.output_dir;
        fs::create_directories(cx.out);
        cx.report << "scenario: " << to_string(config.scenario) << "\ncommand: " << to_string(config.command) << "\n";
        cx.report << "T=" << format_double(cx.grid.T) << " N=" << config.N << " M=" << config.M << " seed=" << config.seed
                  << "\n";
        switch (config.command) {
            case Command::solve: code = cmd_solve(cx); break;
            case Command::check_assumptions: code = cmd_check(cx); break;
            case Command::detect_nonuniqueness: code = cmd_nonuniqueness(cx); break;
            case Command::verify_smp: code = cmd_verify_smp(cx); break;
            case Command::ito_check: code = cmd_ito(cx); break;
        }
        cx.report << "exit: " << code << "\n";
        write_text(cx.out / "report.txt", cx.report.str());
        log << cx.report.str();
    } catch (const std::exception& e) {
        log << cx.report.str() << "error: " << e.what() << "\n";
        return kExitError;
    }
    return code;
}

int cli_main(int argc, char** argv) {
    CLI::App app{"Continuation-Picard solver and checks for mean-field forward-backward doubly stochastic systems"};
    std::string config_path, scenario, command, seed, steps, particles, delta, tol, out, threads, horizon;
    std::string pos_command, pos_scenario;
    app.add_option("--config", config_path, "scenario configuration file (key = value)");
    app.add_option("--scenario", scenario, "example1, example2, linear_base, lq_control or custom");
    app.add_option("--command", command, "solve, check_assumptions, detect_nonuniqueness, verify_smp or ito_check");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--steps", steps, "time steps N");
    app.add_option("--particles", particles, "particles M");
    app.add_option("--delta", delta, "continuation step");
    app.add_option("--tol", tol, "Picard tolerance on the D-distance");
    app.add_option("--out", out, "output directory (MVFBDSDE_OUT takes precedence)");
    app.add_option("--threads", threads, "worker threads, 0 = all cores");
    app.add_option("--override-horizon", horizon, "horizon T, also for example2");
    std::vector<std::string> sets;
    app.add_option("--set", sets, "extra key=value configuration entries, applied last");
    app.add_option("action", pos_command, "command (same as --command)");
    app.add_option("name", pos_scenario, "scenario (same as --scenario)");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitError;
    }
    try {
        std::vector<ConfigEntry> entries;
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw ConfigError("cannot open config file '" + config_path + "'");
            entries = read_entries(in, config_path);
        }
        auto add = [&](const char* key, const std::string& v) {
            if (!v.empty()) entries.emplace_back(key, v);
        };
        add("command", pos_command);
        add("scenario", pos_scenario);
        add("scenario", scenario);
        add("command", command);
        add("seed", seed);
        add("grid.N", steps);
        add("particles", particles);
        add("solver.delta", delta);
        add("solver.tol", tol);
        add("output.dir", out);
        add("threads", threads);
        add("override_horizon", horizon);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            entries.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (const char* env = std::getenv("MVFBDSDE_OUT"); env && *env) entries.emplace_back("output.dir", env);
        const ScenarioConfig cfg = config_from_entries(entries, config_path.empty() ? "command line" : config_path);
        return run(cfg, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
}

}  // namespace mvfb
