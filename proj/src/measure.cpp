#include "mvfbdsde/measure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace mvfb {

EmpiricalLaw::EmpiricalLaw(Matrix samples) : samples_(std::move(samples)) {
    const auto n = samples_.rows();
    weights_ = n > 0 ? Vector::Constant(n, 1.0 / static_cast<double>(n)) : Vector();
    uniform_ = true;
    finish();
}

EmpiricalLaw::EmpiricalLaw(Matrix samples, Vector weights) : samples_(std::move(samples)), weights_(std::move(weights)) {
    if (weights_.size() != samples_.rows()) throw std::invalid_argument("weights and samples differ in count");
    if ((weights_.array() < 0.0).any()) throw std::invalid_argument("negative weight");
    if (samples_.rows() > 0) {
        const double total = weights_.sum();
        if (std::abs(total - 1.0) > 1e-12) {
            if (!(total > 0.0)) throw std::invalid_argument("weights sum to zero");
            weights_ /= total;
        }
    }
    uniform_ = samples_.rows() == 0 ||
               (weights_.array() - 1.0 / static_cast<double>(samples_.rows())).abs().maxCoeff() < 1e-15;
    finish();
}

EmpiricalLaw EmpiricalLaw::from_rows(const Eigen::Ref<const RowMatrix>& rows) { return EmpiricalLaw(Matrix(rows)); }

EmpiricalLaw EmpiricalLaw::dirac(const Vector& point) { return EmpiricalLaw(Matrix(point.transpose())); }

void EmpiricalLaw::finish() {
    if (samples_.rows() == 0) return;
    mean_ = samples_.transpose() * weights_;
    second_moment_ = weights_.dot(samples_.rowwise().squaredNorm());
}

const Vector& EmpiricalLaw::mean() const {
    if (empty()) throw std::invalid_argument("empty measure");
    return mean_;
}

double EmpiricalLaw::second_moment() const {
    if (empty()) throw std::invalid_argument("empty measure");
    return second_moment_;
}

EmpiricalLaw EmpiricalLaw::marginal(std::size_t offset, std::size_t width) const {
    if (offset + width > dim()) throw std::invalid_argument("marginal outside sample dimension");
    Matrix block = samples_.middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(width));
    if (uniform_) return EmpiricalLaw(std::move(block));
    return EmpiricalLaw(std::move(block), weights_);
}

Vector empirical_mean(const EmpiricalLaw& law) { return law.mean(); }

std::string to_string(W2Method m) {
    switch (m) {
        case W2Method::exact_1d: return "exact_1d";
        case W2Method::assignment: return "assignment";
        case W2Method::sliced: return "sliced";
    }
    return "?";
}

W2Method w2_method_from_string(const std::string& s) {
    if (s == "exact_1d") return W2Method::exact_1d;
    if (s == "assignment") return W2Method::assignment;
    if (s == "sliced") return W2Method::sliced;
    throw std::invalid_argument("unknown W2 method: " + s);
}

namespace {

// Squared W2 between weighted 1-D clouds by quantile matching.
double w2_squared_1d(const Vector& xa, const Vector& wa, const Vector& xb, const Vector& wb) {
    std::vector<Eigen::Index> ia(xa.size()), ib(xb.size());
    std::iota(ia.begin(), ia.end(), 0);
    std::iota(ib.begin(), ib.end(), 0);
    std::sort(ia.begin(), ia.end(), [&](auto l, auto r) { return xa[l] < xa[r]; });
    std::sort(ib.begin(), ib.end(), [&](auto l, auto r) { return xb[l] < xb[r]; });

    double total = 0.0;
    std::size_t i = 0, j = 0;
    double ra = wa[ia[0]], rb = wb[ib[0]];
    while (i < ia.size() && j < ib.size()) {
        const double mass = std::min(ra, rb);
        const double gap = xa[ia[i]] - xb[ib[j]];
        total += mass * gap * gap;
        ra -= mass;
        rb -= mass;
        // Advance whichever side is exhausted; ties advance both.
        const bool next_a = ra <= 1e-15;
        const bool next_b = rb <= 1e-15;
        if (next_a) {
            ++i;
            if (i < ia.size()) ra = wa[ia[i]];
        }
        if (next_b) {
            ++j;
            if (j < ib.size()) rb = wb[ib[j]];
        }
        if (!next_a && !next_b) break;  // unreachable for normalized weights
    }
    return total;
}

void require_same_dim(const EmpiricalLaw& a, const EmpiricalLaw& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("empty measure");
    if (a.dim() != b.dim()) {
        std::ostringstream os;
        os << "dimension mismatch: " << a.dim() << " vs " << b.dim();
        throw std::invalid_argument(os.str());
    }
}

}  // namespace

std::vector<std::size_t> solve_assignment(const Matrix& cost) {
    // Shortest augmenting path with potentials (Kuhn-Munkres), O(n^3).
    const std::size_t n = static_cast<std::size_t>(cost.rows());
    if (cost.cols() != cost.rows()) throw std::invalid_argument("assignment needs a square cost matrix");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> assign(n);
    for (std::size_t j = 1; j <= n; ++j) assign[match[j] - 1] = j - 1;
    return assign;
}

W2Result wasserstein2_detailed(const EmpiricalLaw& a, const EmpiricalLaw& b, W2Method method,
                               const W2Options& options) {
    require_same_dim(a, b);
    W2Result out;
    switch (method) {
        case W2Method::exact_1d: {
            if (a.dim() != 1) throw std::invalid_argument("exact_1d requires dimension 1");
            out.distance = std::sqrt(std::max(0.0, w2_squared_1d(a.samples().col(0), a.weights(), b.samples().col(0),
                                                                 b.weights())));
            return out;
        }
        case W2Method::assignment: {
            if (a.size() != b.size()) throw std::invalid_argument("assignment requires equal atom counts");
            if (a.size() > kMaxAssignmentAtoms) throw std::invalid_argument("assignment limited to 512 atoms");
            if (!a.uniform() || !b.uniform()) throw std::invalid_argument("assignment requires uniform weights");
            const auto n = static_cast<Eigen::Index>(a.size());
            Matrix cost(n, n);
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j)
                    cost(i, j) = (a.samples().row(i) - b.samples().row(j)).squaredNorm();
            const auto assign = solve_assignment(cost);
            double total = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) total += cost(i, static_cast<Eigen::Index>(assign[i]));
            out.distance = std::sqrt(total / static_cast<double>(n));
            return out;
        }
        case W2Method::sliced: {
            if (options.projections == 0) throw std::invalid_argument("sliced W2 needs at least one projection");
            std::mt19937_64 rng(options.seed);
            std::normal_distribution<double> normal;
            double total = 0.0;
            Vector dir(a.dim());
            for (std::size_t r = 0; r < options.projections; ++r) {
                for (auto& c : dir) c = normal(rng);
                const double len = dir.norm();
                if (len == 0.0) dir.setUnit(0); else dir /= len;
                total += w2_squared_1d(a.samples() * dir, a.weights(), b.samples() * dir, b.weights());
            }
            // E over the sphere of the projected cost equals W^2 / dim for a
            // fixed coupling; rescale so the estimate is comparable to W2.
            out.distance = std::sqrt(static_cast<double>(a.dim()) * total / static_cast<double>(options.projections));
            out.projections = options.projections;
            return out;
        }
    }
    throw std::invalid_argument("unsupported method");
}

double wasserstein2(const EmpiricalLaw& a, const EmpiricalLaw& b, W2Method method, const W2Options& options) {
    return wasserstein2_detailed(a, b, method, options).distance;
}

double wasserstein2_exact(const EmpiricalLaw& a, const EmpiricalLaw& b) {
    require_same_dim(a, b);
    return wasserstein2(a, b, a.dim() == 1 ? W2Method::exact_1d : W2Method::assignment);
}

MeanW2Bounds check_mean_w2_bounds(const EmpiricalLaw& a, const EmpiricalLaw& b, const Matrix& first,
                                  const Matrix& second, double slack) {
    require_same_dim(a, b);
    if (first.rows() == 0 || first.rows() != second.rows() || first.cols() != second.cols() ||
        static_cast<std::size_t>(first.cols()) != a.dim())
        throw std::invalid_argument("coupling samples have inconsistent shape");
    const Vector m1 = first.colwise().mean();
    const Vector m2 = second.colwise().mean();
    const double scale = 1.0 + a.mean().norm() + b.mean().norm();
    const double gap1 = (m1 - a.mean()).norm();
    const double gap2 = (m2 - b.mean()).norm();
    if (gap1 > 1e-9 * scale || gap2 > 1e-9 * scale) {
        std::ostringstream os;
        os << "coupling marginal mismatch: mean discrepancy " << std::max(gap1, gap2);
        throw std::invalid_argument(os.str());
    }
    MeanW2Bounds out;
    out.mean_gap = (a.mean() - b.mean()).norm();
    out.w2 = wasserstein2_exact(a, b);
    out.coupling_l2 = std::sqrt((first - second).rowwise().squaredNorm().mean());
    out.chain_holds = out.mean_gap <= out.w2 + slack && out.w2 <= out.coupling_l2 + slack;
    return out;
}

}  // namespace mvfb
