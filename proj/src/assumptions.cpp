#include "mvfbdsde/assumptions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "mvfbdsde/measure.hpp"
#include "mvfbdsde/solver.hpp"

namespace mvfb {

void SamplerConfig::validate() const {
    if (!(scale > 0.0) || ensemble_size < 2 || !(t_max >= t_min) || !std::isfinite(scale))
        throw std::invalid_argument("degenerate sampler");
}

std::string to_string(SamplerFamily f) {
    switch (f) {
        case SamplerFamily::independent: return "independent";
        case SamplerFamily::coupled: return "coupled";
        case SamplerFamily::axis: return "axis";
        case SamplerFamily::mean_shift: return "mean_shift";
        case SamplerFamily::same_law: return "same_law";
    }
    return "?";
}

std::string to_string(MonotonicityDirection d) {
    switch (d) {
        case MonotonicityDirection::A2: return "A2";
        case MonotonicityDirection::A2_prime: return "A2_prime";
        case MonotonicityDirection::A2_collapsed: return "A2_collapsed";
    }
    return "?";
}

namespace {

std::string row_text(const Matrix& m, Eigen::Index r) {
    std::ostringstream os;
    os << "(";
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? ", " : "") << format_double(m(r, j));
    os << ")";
    return os.str();
}

struct SamplePair {
    SamplerFamily family = SamplerFamily::independent;
    double t = 0.0;
    Matrix V1, V2;  ///< evaluation points
    Matrix L1, L2;  ///< atoms of the two laws
};

std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
    return std::mt19937_64(seq);
}

Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double s) {
    std::normal_distribution<double> nd(0.0, s);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
    return m;
}

// When `law_follows_points` is set every family keeps each law equal to the
// law of its evaluation points (monotonicity); otherwise the same_law family
// displaces the points while both laws stay at the first ensemble (Lipschitz).
SamplePair draw_pair(const SamplerConfig& cfg, std::size_t n, std::size_t i, bool law_follows_points) {
    auto rng = sample_rng(cfg.seed, i);
    const auto m = static_cast<Eigen::Index>(cfg.ensemble_size);
    const auto cols = static_cast<Eigen::Index>(n);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> nd;
    SamplePair s;
    s.family = static_cast<SamplerFamily>(i % 5);
    s.t = cfg.t_min + (cfg.t_max - cfg.t_min) * unif(rng);
    const Vector offset = gaussian(rng, cols, 1, cfg.scale);
    s.V1 = gaussian(rng, m, cols, cfg.scale).rowwise() + offset.transpose();
    switch (s.family) {
        case SamplerFamily::independent: {
            const Vector off2 = gaussian(rng, cols, 1, cfg.scale);
            s.V2 = gaussian(rng, m, cols, cfg.scale).rowwise() + off2.transpose();
            break;
        }
        case SamplerFamily::coupled: {
            const double sigma = cfg.scale * std::pow(10.0, -2.0 * unif(rng));
            s.V2 = s.V1 + gaussian(rng, m, cols, sigma);
            break;
        }
        case SamplerFamily::axis: {
            const auto axis = static_cast<Eigen::Index>((i / 5) % n);
            double a = cfg.scale * nd(rng);
            if (a == 0.0) a = cfg.scale;
            s.V2 = s.V1;
            s.V2.col(axis).array() += a;
            break;
        }
        case SamplerFamily::mean_shift: {
            const Vector shift = gaussian(rng, cols, 1, cfg.scale);
            s.V2 = s.V1.rowwise() + shift.transpose();
            break;
        }
        case SamplerFamily::same_law: {
            if (law_follows_points) {
                std::vector<Eigen::Index> perm(static_cast<std::size_t>(m));
                std::iota(perm.begin(), perm.end(), 0);
                std::shuffle(perm.begin(), perm.end(), rng);
                s.V2.resize(m, cols);
                for (Eigen::Index r = 0; r < m; ++r) s.V2.row(r) = s.V1.row(perm[static_cast<std::size_t>(r)]);
            } else {
                const double sigma = cfg.scale * std::pow(10.0, -2.0 * unif(rng));
                s.V2 = s.V1 + gaussian(rng, m, cols, sigma);
            }
            break;
        }
    }
    s.L1 = s.V1;
    s.L2 = (s.family == SamplerFamily::same_law && !law_follows_points) ? s.V1 : s.V2;
    return s;
}

Matrix evaluate_rows(const CoefficientSet& c, double t, const Matrix& V, const Vector& stat) {
    Matrix out(V.rows(), V.cols());
    Vector buf(V.cols());
    PointContext ctx{t, 0, 0};
    for (Eigen::Index r = 0; r < V.rows(); ++r) {
        ctx.particle = static_cast<std::size_t>(r);
        evaluate(c, ctx, V.row(r).transpose(), stat, buf);
        out.row(r) = buf.transpose();
    }
    return out;
}

Matrix evaluate_terminal_rows(const CoefficientSet& c, double t, const Matrix& Y, const Vector& stat) {
    Matrix out(Y.rows(), Y.cols());
    Vector buf(Y.cols());
    PointContext ctx{t, 0, 0};
    for (Eigen::Index r = 0; r < Y.rows(); ++r) {
        ctx.particle = static_cast<std::size_t>(r);
        evaluate_terminal(c, ctx, Y.row(r).transpose(), stat, buf);
        out.row(r) = buf.transpose();
    }
    return out;
}

struct GammaTerm {
    double num, a, b;
    std::size_t sample;
};

}  // namespace

std::string Witness::describe() const {
    std::ostringstream os;
    os << assumption << " witness: sample " << sample << " (" << to_string(family) << "), t=" << format_double(t)
       << ", margin " << format_double(margin) << ", functional " << format_double(functional);
    if (first.rows() > 0) {
        const Vector d = (first - second).colwise().mean().transpose();
        os << ", mean displacement (";
        for (Eigen::Index j = 0; j < d.size(); ++j) os << (j ? ", " : "") << format_double(d[j]);
        os << "), first atom pair " << row_text(first, 0) << " vs " << row_text(second, 0);
    }
    return os.str();
}

LipschitzReport estimate_lipschitz(const CoefficientSet& coeffs, const SamplerConfig& sampler, std::size_t n_pairs) {
    sampler.validate();
    if (n_pairs == 0) throw std::invalid_argument("degenerate sampler");
    const Dimensions& dm = coeffs.dims;
    const std::size_t n = dm.packed(), d = dm.d;
    const auto ffF = static_cast<Eigen::Index>(2 * d);

    LipschitzReport rep;
    std::vector<GammaTerm> gterms;
    double best_ratio = -1.0;
    Witness c_witness;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const SamplePair s = draw_pair(sampler, n, i, false);
        const bool same = s.family == SamplerFamily::same_law;
        const EmpiricalLaw law1(s.L1), law2(s.L2);
        const PointContext ctx{s.t, 0, 0};
        const Vector st1 = law_statistic(coeffs, ctx, law1), st2 = law_statistic(coeffs, ctx, law2);
        const double w2 = same ? 0.0 : wasserstein2_exact(law1, law2);
        const Matrix A1 = evaluate_rows(coeffs, s.t, s.V1, st1), A2 = evaluate_rows(coeffs, s.t, s.V2, st2);

        const Matrix Y1 = s.V1.leftCols(static_cast<Eigen::Index>(d)), Y2 = s.V2.leftCols(static_cast<Eigen::Index>(d));
        const EmpiricalLaw ly1(s.L1.leftCols(static_cast<Eigen::Index>(d))), ly2(s.L2.leftCols(static_cast<Eigen::Index>(d)));
        const double w2y = same ? 0.0 : wasserstein2_exact(ly1, ly2);
        const Matrix H1 = evaluate_terminal_rows(coeffs, s.t, Y1, terminal_statistic(coeffs, ctx, ly1));
        const Matrix H2 = evaluate_terminal_rows(coeffs, s.t, Y2, terminal_statistic(coeffs, ctx, ly2));

        // Pure-C probes: same law, the gamma-weighted argument held fixed.
        Matrix Gpure, gpure;
        if (same) {
            Matrix VZ = s.V2, Vz = s.V2;
            VZ.middleCols(dm.Z_off(), dm.Z_size()) = s.V1.middleCols(dm.Z_off(), dm.Z_size());
            Vz.middleCols(dm.z_off(), dm.z_size()) = s.V1.middleCols(dm.z_off(), dm.z_size());
            Gpure = evaluate_rows(coeffs, s.t, VZ, st1);
            gpure = evaluate_rows(coeffs, s.t, Vz, st1);
        }

        double sample_ratio = 0.0;
        for (Eigen::Index r = 0; r < s.V1.rows(); ++r) {
            const Vector dv = (s.V1.row(r) - s.V2.row(r)).transpose();
            const Vector dA = (A1.row(r) - A2.row(r)).transpose();
            const double den_i = dv.norm() + w2;
            if (den_i > 1e-12) sample_ratio = std::max(sample_ratio, dA.head(ffF).norm() / den_i);
            const double den_iv = dv.head(static_cast<Eigen::Index>(d)).norm() + w2y;
            if (den_iv > 1e-12) sample_ratio = std::max(sample_ratio, (H1.row(r) - H2.row(r)).norm() / den_iv);

            const double dz2 = dv.segment(dm.z_off(), dm.z_size()).squaredNorm();
            const double dZ2 = dv.segment(dm.Z_off(), dm.Z_size()).squaredNorm();
            const double dyY2 = dv.head(ffF).squaredNorm();
            gterms.push_back({dA.segment(dm.z_off(), dm.z_size()).squaredNorm(), dyY2 + dz2, dZ2 + w2 * w2, i});
            gterms.push_back({dA.segment(dm.Z_off(), dm.Z_size()).squaredNorm(), dyY2 + dZ2, dz2 + w2 * w2, i});
            if (same) {
                const double aG = dyY2 + dz2, ag = dyY2 + dZ2;
                const double nG = (A1.row(r) - Gpure.row(r)).segment(dm.z_off(), dm.z_size()).squaredNorm();
                const double ng = (A1.row(r) - gpure.row(r)).segment(dm.Z_off(), dm.Z_size()).squaredNorm();
                if (aG > 1e-24) sample_ratio = std::max(sample_ratio, nG / aG);
                if (ag > 1e-24) sample_ratio = std::max(sample_ratio, ng / ag);
            }
        }
        if (!std::isfinite(sample_ratio)) throw std::runtime_error("non-finite coefficient during Lipschitz sampling");
        if (sample_ratio > best_ratio) {
            best_ratio = sample_ratio;
            c_witness = Witness{"A1 C", s.family, i, s.t, sample_ratio, sample_ratio, s.V1, s.V2};
        }
    }
    rep.C_hat = std::max(0.0, best_ratio);
    rep.samples = n_pairs;

    double gmax = 0.0;
    std::vector<char> bad(n_pairs, 0);
    std::size_t gsample = 0;
    for (const auto& g : gterms) {
        if (g.b <= 1e-14 * (1.0 + g.a)) continue;
        const double need = (g.num - rep.C_hat * g.a) / g.b;
        if (need > gmax) {
            gmax = need;
            gsample = g.sample;
        }
        if (need >= 0.5) bad[g.sample] = 1;
    }
    rep.gamma_hat = gmax;
    rep.violations = static_cast<std::size_t>(std::count(bad.begin(), bad.end(), 1));
    rep.witnesses.push_back(c_witness);
    if (gmax > 0.0) {
        const SamplePair s = draw_pair(sampler, n, gsample, false);
        rep.witnesses.push_back(Witness{"A1 gamma", s.family, gsample, s.t, gmax, gmax, s.V1, s.V2});
    }
    return rep;
}

namespace {

struct MonoEval {
    double functional = 0.0;  ///< E[(A1 - A2, v1 - v2)]
    double margin = 0.0;      ///< > 0 violates the pairing condition
    double h_pairing = 0.0;
    double h_margin = 0.0;    ///< > 0 violates the terminal condition
    double dv2 = 0.0;         ///< E|v1 - v2|^2
};

MonoEval evaluate_monotonicity(const CoefficientSet& c, double t, const Matrix& V1, const Matrix& V2,
                               double theta1, double theta2, double alpha1, MonotonicityDirection dir) {
    const Dimensions& dm = c.dims;
    const auto d = static_cast<Eigen::Index>(dm.d);
    const PointContext ctx{t, 0, 0};
    const EmpiricalLaw law1(V1), law2(V2);
    const Matrix A1 = evaluate_rows(c, t, V1, law_statistic(c, ctx, law1));
    const Matrix A2 = evaluate_rows(c, t, V2, law_statistic(c, ctx, law2));
    const Matrix D = V1 - V2;
    const auto m = static_cast<double>(V1.rows());
    MonoEval e;
    e.functional = (A1 - A2).cwiseProduct(D).sum() / m;
    const double qy = (D.leftCols(d).squaredNorm() + D.middleCols(dm.z_off(), dm.z_size()).squaredNorm()) / m;
    const double qY = (D.middleCols(dm.Y_off(), d).squaredNorm() + D.middleCols(dm.Z_off(), dm.Z_size()).squaredNorm()) / m;
    const double quad = theta1 * qy + theta2 * qY;
    e.dv2 = D.squaredNorm() / m;
    e.margin = dir == MonotonicityDirection::A2_prime ? quad - e.functional : e.functional + quad;
    if (dir != MonotonicityDirection::A2_collapsed) {
        const Matrix y1 = V1.leftCols(d), y2 = V2.leftCols(d);
        const EmpiricalLaw ly1(y1), ly2(y2);
        const Matrix H1 = evaluate_terminal_rows(c, t, y1, terminal_statistic(c, ctx, ly1));
        const Matrix H2 = evaluate_terminal_rows(c, t, y2, terminal_statistic(c, ctx, ly2));
        e.h_pairing = (H1 - H2).cwiseProduct(y1 - y2).sum() / m;
        const double ey = (y1 - y2).squaredNorm() / m;
        e.h_margin = dir == MonotonicityDirection::A2_prime ? e.h_pairing + alpha1 * ey : alpha1 * ey - e.h_pairing;
    }
    if (!std::isfinite(e.functional) || !std::isfinite(e.h_pairing))
        throw std::runtime_error("non-finite coefficient during monotonicity sampling");
    return e;
}

double violation_tol(const MonoEval& e) { return 1e-10 * (1.0 + e.dv2); }

double normalized_score(const MonoEval& e) {
    const double s = e.dv2 > 0.0 ? 1.0 / e.dv2 : 0.0;
    return std::max(e.margin, e.h_margin) * s;
}

}  // namespace

AssumptionReport check_monotonicity(const CoefficientSet& coeffs, double theta1, double theta2, double alpha1,
                                    MonotonicityDirection direction, const SamplerConfig& sampler,
                                    std::size_t n_pairs, const MonotonicityOptions& options) {
    const bool constants_ok = theta1 >= 0.0 && theta2 >= 0.0 && alpha1 >= 0.0 && theta1 + theta2 > 0.0 &&
                              alpha1 + theta2 > 0.0 &&
                              (direction != MonotonicityDirection::A2_collapsed || theta2 > 0.0);
    if (!constants_ok) {
        std::ostringstream os;
        os << "invalid monotonicity constants: theta1=" << theta1 << " theta2=" << theta2 << " alpha1=" << alpha1
           << " (need theta1+theta2>0 and alpha1+theta2>0)";
        throw std::invalid_argument(os.str());
    }
    sampler.validate();
    if (n_pairs == 0) throw std::invalid_argument("degenerate sampler");
    const std::size_t n = coeffs.dims.packed();

    AssumptionReport rep;
    rep.model = coeffs.name;
    rep.direction = direction;
    rep.theta1 = theta1;
    rep.theta2 = theta2;
    rep.alpha1 = alpha1;
    rep.monotonicity_margin = -std::numeric_limits<double>::infinity();
    rep.alpha1_margin = direction == MonotonicityDirection::A2_collapsed ? 0.0 : -std::numeric_limits<double>::infinity();

    double worst_score = -std::numeric_limits<double>::infinity();
    SamplePair worst;
    std::size_t worst_index = 0;
    Witness mono_w, term_w;
    bool have_mono_w = false, have_term_w = false;

    auto record = [&](const MonoEval& e, const SamplePair& s, std::size_t idx) {
        const double tol = violation_tol(e);
        bool violated = false;
        if (e.margin > rep.monotonicity_margin) {
            rep.monotonicity_margin = e.margin;
            mono_w = Witness{to_string(direction), s.family, idx, s.t, e.margin, e.functional, s.V1, s.V2};
            have_mono_w = true;
        }
        if (e.margin > tol) {
            rep.monotonicity_pass = false;
            violated = true;
        }
        if (direction != MonotonicityDirection::A2_collapsed) {
            if (e.h_margin > rep.alpha1_margin) {
                rep.alpha1_margin = e.h_margin;
                term_w = Witness{to_string(direction) + " terminal", s.family, idx, s.t, e.h_margin, e.h_pairing, s.V1, s.V2};
                have_term_w = true;
            }
            if (e.h_margin > tol) {
                rep.terminal_pass = false;
                violated = true;
            }
        }
        return violated;
    };

    for (std::size_t i = 0; i < n_pairs; ++i) {
        const SamplePair s = draw_pair(sampler, n, i, true);
        const MonoEval e = evaluate_monotonicity(coeffs, s.t, s.V1, s.V2, theta1, theta2, alpha1, direction);
        if (record(e, s, i)) ++rep.violations;
        const double score = normalized_score(e);
        if (score > worst_score) {
            worst_score = score;
            worst = s;
            worst_index = i;
        }
    }
    rep.samples_used = n_pairs;

    if (options.local_search && worst.V1.size() > 0) {
        auto rng = sample_rng(sampler.seed ^ 0x5eedULL, worst_index);
        SamplePair cur = worst;
        double cur_score = worst_score;
        for (std::size_t step = 0; step < options.local_steps; ++step) {
            const double sigma =
                0.1 * sampler.scale * (1.0 - static_cast<double>(step) / static_cast<double>(options.local_steps)) + 1e-3 * sampler.scale;
            SamplePair cand = cur;
            cand.V1 += gaussian(rng, cur.V1.rows(), cur.V1.cols(), sigma);
            cand.V2 += gaussian(rng, cur.V2.rows(), cur.V2.cols(), sigma);
            cand.L1 = cand.V1;
            cand.L2 = cand.V2;
            const MonoEval e = evaluate_monotonicity(coeffs, cand.t, cand.V1, cand.V2, theta1, theta2, alpha1, direction);
            const double score = normalized_score(e);
            ++rep.samples_used;
            if (score > cur_score) {
                cur = cand;
                cur_score = score;
                if (record(e, cand, worst_index)) ++rep.violations;
            }
        }
    }
    if (have_mono_w) rep.witnesses.push_back(mono_w);
    if (have_term_w) rep.witnesses.push_back(term_w);
    return rep;
}

void AssumptionReport::attach(const LipschitzReport& lip) {
    lipschitz_checked = true;
    estimated_C = lip.C_hat;
    estimated_gamma = lip.gamma_hat;
    lipschitz_pass = lip.gamma_ok() && lip.violations == 0;
    for (const auto& w : lip.witnesses) witnesses.push_back(w);
}

std::string AssumptionReport::to_text() const {
    std::ostringstream os;
    auto flag = [](bool b) { return b ? "pass" : "FAIL"; };
    os << "assumption report for " << model << "\n";
    os << "  constants: theta1=" << format_double(theta1) << " theta2=" << format_double(theta2)
       << " alpha1=" << format_double(alpha1) << " direction=" << to_string(direction) << "\n";
    if (lipschitz_checked)
        os << "  A1 Lipschitz: " << flag(lipschitz_pass) << " (C_hat=" << format_double(estimated_C)
           << ", gamma_hat=" << format_double(estimated_gamma) << ")\n";
    os << "  " << to_string(direction) << " pairing: " << flag(monotonicity_pass)
       << " (largest margin " << format_double(monotonicity_margin) << ")\n";
    if (direction != MonotonicityDirection::A2_collapsed)
        os << "  terminal condition: " << flag(terminal_pass) << " (largest margin " << format_double(alpha1_margin) << ")\n";
    if (integrability_checked) os << "  A3 integrability: " << flag(integrability_pass) << "\n";
    os << "  samples: " << samples_used << ", violations: " << violations << "\n";
    for (const auto& w : witnesses) os << "  " << w.describe() << "\n";
    os << "  overall: " << flag(pass()) << "\n";
    return os.str();
}

std::string AssumptionReport::to_key_value() const {
    std::ostringstream os;
    os << "model=" << model << "\n";
    os << "direction=" << to_string(direction) << "\n";
    os << "theta1=" << format_double(theta1) << "\ntheta2=" << format_double(theta2) << "\nalpha1=" << format_double(alpha1) << "\n";
    if (lipschitz_checked) {
        os << "estimated_C=" << format_double(estimated_C) << "\n";
        os << "estimated_gamma=" << format_double(estimated_gamma) << "\n";
        os << "pass.A1=" << (lipschitz_pass ? 1 : 0) << "\n";
    }
    os << "monotonicity_margin=" << format_double(monotonicity_margin) << "\n";
    os << "alpha1_margin=" << format_double(alpha1_margin) << "\n";
    os << "pass.pairing=" << (monotonicity_pass ? 1 : 0) << "\n";
    os << "pass.terminal=" << (terminal_pass ? 1 : 0) << "\n";
    if (integrability_checked) os << "pass.A3=" << (integrability_pass ? 1 : 0) << "\n";
    os << "samples_used=" << samples_used << "\nviolations=" << violations << "\n";
    for (std::size_t i = 0; i < witnesses.size(); ++i) {
        os << "witness." << i << ".assumption=" << witnesses[i].assumption << "\n";
        os << "witness." << i << ".sample=" << witnesses[i].sample << "\n";
        os << "witness." << i << ".family=" << to_string(witnesses[i].family) << "\n";
        os << "witness." << i << ".margin=" << format_double(witnesses[i].margin) << "\n";
        os << "witness." << i << ".functional=" << format_double(witnesses[i].functional) << "\n";
    }
    os << "pass=" << (pass() ? 1 : 0) << "\n";
    return os.str();
}

IntegrabilityReport check_integrability(const CoefficientSet& coeffs, const TimeGrid& grid, const EmpiricalLaw& probe_law) {
    if (probe_law.empty()) throw std::invalid_argument("empty measure");
    const Dimensions& dm = coeffs.dims;
    if (probe_law.dim() != dm.packed()) throw std::invalid_argument("probe law has wrong dimension");
    IntegrabilityReport rep;
    const Matrix& P = probe_law.samples();
    const auto rows = P.rows();
    Vector integral = Vector::Zero(rows);
    Vector buf(static_cast<Eigen::Index>(dm.packed()));
    for (std::size_t k = 0; k <= grid.N; ++k) {
        const PointContext ctx0{grid.t(k), k, 0};
        Vector stat;
        try {
            stat = law_statistic(coeffs, ctx0, probe_law);
        } catch (const std::exception& e) {
            rep.pass = false;
            rep.offending_node = k;
            rep.message = std::string("law statistic failed: ") + e.what();
            return rep;
        }
        for (Eigen::Index r = 0; r < rows; ++r) {
            const PointContext ctx{grid.t(k), k, static_cast<std::size_t>(r)};
            evaluate(coeffs, ctx, P.row(r).transpose(), stat, buf);
            if (!buf.allFinite()) {
                std::ostringstream os;
                os << "non-finite coefficient at node " << k << " (t=" << format_double(grid.t(k)) << "), probe " << r;
                rep.pass = false;
                rep.offending_node = k;
                rep.message = os.str();
                return rep;
            }
            if (k < grid.N) integral[r] += buf.squaredNorm() * grid.dt();
        }
    }
    for (Eigen::Index r = 0; r < rows; ++r)
        if (!std::isfinite(integral[r]) || integral[r] > 1e200) {
            rep.pass = false;
            rep.offending_node = grid.N;
            rep.message = "time integral of |A|^2 is not finite";
            return rep;
        }
    const auto d = static_cast<Eigen::Index>(dm.d);
    const EmpiricalLaw ly = probe_law.marginal(0, dm.d);
    const PointContext ctxT{grid.T, grid.N, 0};
    const Vector tstat = terminal_statistic(coeffs, ctxT, ly);
    Vector h(d);
    double second = 0.0;
    for (Eigen::Index r = 0; r < rows; ++r) {
        evaluate_terminal(coeffs, ctxT, P.row(r).head(d).transpose(), tstat, h);
        second += probe_law.weights()[r] * h.squaredNorm();
    }
    if (!std::isfinite(second)) {
        rep.pass = false;
        rep.offending_node = grid.N;
        rep.message = "terminal map has no finite second moment";
        return rep;
    }
    rep.message = "ok";
    return rep;
}

namespace {

double squared_operator_norm(const Matrix& m) {
    if (m.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(m);
    const double s = svd.singularValues()[0];
    return s * s;
}

}  // namespace

ControlAssumptionReport check_control_assumptions(const ControlProblem& problem, const SamplerConfig& sampler,
                                                  std::size_t n_pairs) {
    if (problem.c == 0.0) throw std::invalid_argument("A6 requires c≠0");
    problem.validate();
    sampler.validate();
    const Dimensions& dm = problem.dynamics.dims;
    const auto n = static_cast<Eigen::Index>(dm.packed());
    const auto nu = static_cast<Eigen::Index>(problem.dynamics.control_dim);

    ControlAssumptionReport rep;
    rep.gamma = problem.gamma;
    rep.gamma_in_range = problem.gamma > 0.0 && problem.gamma < 1.0 / 6.0;

    const std::size_t points = std::max<std::size_t>(1, std::min<std::size_t>(n_pairs, 2000));
    auto rng = sample_rng(sampler.seed, 0xc0de);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Matrix dv, du, dmean;
    for (std::size_t i = 0; i < points; ++i) {
        const double t = problem.grid.T * unif(rng);
        const Vector v = gaussian(rng, n, 1, sampler.scale);
        const Vector mean = gaussian(rng, n, 1, sampler.scale);
        Vector u(nu);
        for (Eigen::Index j = 0; j < nu; ++j) u[j] = problem.box.lower[j] + (problem.box.upper[j] - problem.box.lower[j]) * unif(rng);
        controlled_jacobians(problem, t, v, u, mean, dv, du, dmean);
        auto block = [&](const Matrix& J, Eigen::Index r0, Eigen::Index nr, Eigen::Index c0, Eigen::Index nc) {
            return squared_operator_norm(J.block(r0, c0, nr, nc));
        };
        const auto zo = static_cast<Eigen::Index>(dm.z_off()), zs = static_cast<Eigen::Index>(dm.z_size());
        const auto Zo = static_cast<Eigen::Index>(dm.Z_off()), Zs = static_cast<Eigen::Index>(dm.Z_size());
        rep.dG_dz = std::max(rep.dG_dz, block(dv, zo, zs, zo, zs));
        rep.dG_dZ = std::max(rep.dG_dZ, block(dv, zo, zs, Zo, Zs));
        rep.dg_dz = std::max(rep.dg_dz, block(dv, Zo, Zs, zo, zs));
        rep.dg_dZ = std::max(rep.dg_dZ, block(dv, Zo, Zs, Zo, Zs));
        rep.lG_dz = std::max(rep.lG_dz, block(dmean, zo, zs, zo, zs));
        rep.lG_dZ = std::max(rep.lG_dZ, block(dmean, zo, zs, Zo, Zs));
        rep.lg_dz = std::max(rep.lg_dz, block(dmean, Zo, Zs, zo, zs));
        rep.lg_dZ = std::max(rep.lg_dZ, block(dmean, Zo, Zs, Zo, Zs));
    }
    rep.samples = points;
    const double g = problem.gamma;
    rep.derivative_pass = rep.dG_dz < g && rep.dG_dZ < g && rep.dg_dz < g && rep.dg_dZ < g;
    rep.l_derivative_pass = rep.lG_dz < g / 3.0 && rep.lG_dZ < g / 3.0 && rep.lg_dz < g / 3.0 && rep.lg_dZ < g / 3.0;

    const MonotonicityDirection dir = problem.c > 0.0 ? MonotonicityDirection::A2 : MonotonicityDirection::A2_prime;
    SamplerConfig s = sampler;
    s.t_min = 0.0;
    s.t_max = problem.grid.T;
    rep.monotonicity_pass = true;
    const Vector center = 0.5 * (problem.box.lower + problem.box.upper);
    for (const Vector& u : {problem.box.lower, center, problem.box.upper}) {
        AssumptionReport r = check_monotonicity(canonical_coefficients_at(problem, u), problem.theta1, problem.theta2,
                                                std::abs(problem.c), dir, s, n_pairs);
        rep.monotonicity_pass = rep.monotonicity_pass && r.pass();
        rep.monotonicity.push_back(std::move(r));
    }
    return rep;
}

std::string ControlAssumptionReport::to_text() const {
    std::ostringstream os;
    auto flag = [](bool b) { return b ? "pass" : "FAIL"; };
    os << "control assumption report (gamma=" << format_double(gamma) << ")\n";
    os << "  gamma in (0, 1/6): " << flag(gamma_in_range) << "\n";
    os << "  A4 derivative bounds: " << flag(derivative_pass) << " (|dg/dz|^2=" << format_double(dg_dz)
       << ", |dg/dZ|^2=" << format_double(dg_dZ) << ", |dG/dz|^2=" << format_double(dG_dz)
       << ", |dG/dZ|^2=" << format_double(dG_dZ) << ")\n";
    os << "  A5 L-derivative bounds: " << flag(l_derivative_pass) << " (g: " << format_double(lg_dz) << ", "
       << format_double(lg_dZ) << "; G: " << format_double(lG_dz) << ", " << format_double(lG_dZ) << ")\n";
    os << "  A6 monotonicity: " << flag(monotonicity_pass) << "\n";
    for (const auto& r : monotonicity) {
        std::istringstream in(r.to_text());
        std::string line;
        while (std::getline(in, line)) os << "    " << line << "\n";
    }
    os << "  overall: " << flag(pass()) << "\n";
    return os.str();
}

std::string ControlAssumptionReport::to_key_value() const {
    std::ostringstream os;
    os << "gamma=" << format_double(gamma) << "\n";
    os << "dg_dz=" << format_double(dg_dz) << "\ndg_dZ=" << format_double(dg_dZ) << "\n";
    os << "dG_dz=" << format_double(dG_dz) << "\ndG_dZ=" << format_double(dG_dZ) << "\n";
    os << "lg_dz=" << format_double(lg_dz) << "\nlg_dZ=" << format_double(lg_dZ) << "\n";
    os << "lG_dz=" << format_double(lG_dz) << "\nlG_dZ=" << format_double(lG_dZ) << "\n";
    os << "pass.gamma=" << (gamma_in_range ? 1 : 0) << "\npass.A4=" << (derivative_pass ? 1 : 0)
       << "\npass.A5=" << (l_derivative_pass ? 1 : 0) << "\npass.A6=" << (monotonicity_pass ? 1 : 0) << "\n";
    os << "samples=" << samples << "\npass=" << (pass() ? 1 : 0) << "\n";
    return os.str();
}

}  // namespace mvfb
