#include "mvfbdsde/paths.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "mvfbdsde/parallel.hpp"

namespace mvfb {

namespace {
Matrix slice(const PathArray& a, std::size_t component) {
    if (component >= a.width()) throw std::invalid_argument("driver component out of range");
    Matrix out(a.particles(), a.nodes());
    for (std::size_t k = 0; k < a.nodes(); ++k)
        for (std::size_t p = 0; p < a.particles(); ++p) out(p, k) = a.ptr(k, p)[component];
    return out;
}
}  // namespace

Matrix BrownianPair::forward_slice(std::size_t component) const { return slice(dW, component); }
Matrix BrownianPair::backward_slice(std::size_t component) const { return slice(dB, component); }

PathArray BrownianPair::backward_tail() const {
    PathArray tail(grid.N + 1, particles, d_B, 0.0);
    for (std::size_t k = grid.N; k-- > 0;)
        for (std::size_t p = 0; p < particles; ++p)
            for (std::size_t j = 0; j < d_B; ++j) tail.ptr(k, p)[j] = tail.ptr(k + 1, p)[j] + dB.ptr(k, p)[j];
    return tail;
}

BrownianPair sample_driver_pair(const TimeGrid& grid, std::size_t d_W, std::size_t d_B, std::size_t particles,
                                std::uint64_t seed) {
    if (particles == 0) throw std::invalid_argument("zero particles");
    if (grid.N == 0) throw std::invalid_argument("zero steps");
    if (d_W == 0 || d_B == 0) throw std::invalid_argument("driver dimension must be positive");
    BrownianPair out;
    out.grid = grid;
    out.particles = particles;
    out.d_W = d_W;
    out.d_B = d_B;
    out.seed = seed;
    out.dW = PathArray(grid.N, particles, d_W);
    out.dB = PathArray(grid.N, particles, d_B);
    const double sd = std::sqrt(grid.dt());
    parallel_for(particles, [&](std::size_t p) {
        // Stream depends only on (seed, p).
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(std::uint64_t(p) >> 32)};
        std::mt19937_64 rng(seq);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t k = 0; k < grid.N; ++k) {
            double* w = out.dW.ptr(k, p);
            for (std::size_t j = 0; j < d_W; ++j) w[j] = sd * normal(rng);
            double* b = out.dB.ptr(k, p);
            for (std::size_t j = 0; j < d_B; ++j) b[j] = sd * normal(rng);
        }
    }, 16);
    return out;
}

Vector forward_ito_integral(const Matrix& integrand, const Matrix& driver) {
    const auto N = driver.cols();
    if (integrand.rows() != driver.rows() || (integrand.cols() != N && integrand.cols() != N + 1)) {
        std::ostringstream os;
        os << "shape mismatch: integrand " << integrand.rows() << "x" << integrand.cols() << ", driver "
           << driver.rows() << "x" << N;
        throw std::invalid_argument(os.str());
    }
    return (integrand.leftCols(N).array() * driver.array()).rowwise().sum();
}

Vector backward_ito_integral(const Matrix& integrand, const Matrix& driver) {
    const auto N = driver.cols();
    if (integrand.rows() != driver.rows() || integrand.cols() != N + 1) {
        std::ostringstream os;
        os << "shape mismatch: integrand " << integrand.rows() << "x" << integrand.cols() << ", driver "
           << driver.rows() << "x" << N << " (right endpoints need N + 1 columns)";
        throw std::invalid_argument(os.str());
    }
    return (integrand.rightCols(N).array() * driver.array()).rowwise().sum();
}

namespace {

struct SimulatedProcess {
    Matrix path;      // M x (N + 1)
    Vector beta, gamma, delta;  // per node, N + 1
};

double eval(const std::function<double(double)>& fn, double t) { return fn ? fn(t) : 0.0; }

SimulatedProcess simulate(const ProcessSpec& spec, const BrownianPair& drv) {
    const std::size_t N = drv.grid.N, M = drv.particles;
    SimulatedProcess s;
    s.beta.resize(N + 1);
    s.gamma.resize(N + 1);
    s.delta.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k) {
        const double t = drv.grid.t(k);
        s.beta[k] = eval(spec.drift, t);
        s.gamma[k] = eval(spec.forward_integrand, t);
        s.delta[k] = eval(spec.backward_integrand, t);
    }
    const double dt = drv.grid.dt();
    s.path.resize(M, N + 1);
    for (std::size_t p = 0; p < M; ++p) {
        // a_0 carries the whole backward integral so that a_T = initial + ...
        // stays F_T-measurable and a_t depends on B only through [t, T].
        double back = 0.0;
        for (std::size_t k = 0; k < N; ++k) back += s.delta[k + 1] * drv.b(k, p, 0);
        double a = spec.initial - back;
        s.path(p, 0) = a;
        for (std::size_t k = 0; k < N; ++k) {
            a += s.beta[k] * dt + s.gamma[k] * drv.w(k, p, 0) + s.delta[k + 1] * drv.b(k, p, 0);
            s.path(p, k + 1) = a;
        }
    }
    return s;
}

}  // namespace

ItoProductCheck discrete_ito_product_check(const ProcessSpec& alpha, const ProcessSpec& alpha_tilde,
                                           const BrownianPair& drivers) {
    if (drivers.particles == 0 || drivers.grid.N == 0 || drivers.dW.nodes() != drivers.grid.N ||
        drivers.dB.nodes() != drivers.grid.N || drivers.d_W == 0 || drivers.d_B == 0)
        throw std::invalid_argument("inconsistent dimensions in driver pair");
    const std::size_t N = drivers.grid.N, M = drivers.particles;
    const double dt = drivers.grid.dt();
    const auto a = simulate(alpha, drivers);
    const auto b = simulate(alpha_tilde, drivers);

    // Deterministic covariation integrals (left-point Riemann sums).
    double cov_delta = 0.0, cov_gamma = 0.0;
    for (std::size_t k = 0; k < N; ++k) {
        cov_delta += a.delta[k + 1] * b.delta[k + 1] * dt;
        cov_gamma += a.gamma[k] * b.gamma[k] * dt;
    }

    // Per-particle difference lhs - rhs, to get a standard error.
    Vector diff(M);
    double lhs_sum = 0.0, rhs_sum = 0.0;
    for (std::size_t p = 0; p < M; ++p) {
        double ida = 0.0, ida_t = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
            const double dw = drivers.w(k, p, 0), db = drivers.b(k, p, 0);
            // Drift and forward parts at the left endpoint, backward part at
            // the right endpoint.
            ida += a.path(p, k) * (b.beta[k] * dt + b.gamma[k] * dw) + a.path(p, k + 1) * b.delta[k + 1] * db;
            ida_t += b.path(p, k) * (a.beta[k] * dt + a.gamma[k] * dw) + b.path(p, k + 1) * a.delta[k + 1] * db;
        }
        const double lhs = a.path(p, N) * b.path(p, N);
        const double rhs = a.path(p, 0) * b.path(p, 0) + ida + ida_t - cov_delta + cov_gamma;
        lhs_sum += lhs;
        rhs_sum += rhs;
        diff[p] = lhs - rhs;
    }
    ItoProductCheck out;
    out.lhs = lhs_sum / static_cast<double>(M);
    out.rhs = rhs_sum / static_cast<double>(M);
    out.residual = std::abs(out.lhs - out.rhs);
    const double mean = diff.mean();
    const double var = M > 1 ? (diff.array() - mean).square().sum() / static_cast<double>(M - 1) : 0.0;
    out.standard_error = std::sqrt(var / static_cast<double>(M));
    return out;
}

namespace {
void put_u64(std::ofstream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 8);
}
std::uint64_t get_u64(std::ifstream& is) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("truncated increment dump");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
    return v;
}
}  // namespace

void write_increments_binary(const std::string& path, const BrownianPair& drivers, Driver which) {
    const PathArray& a = which == Driver::W ? drivers.dW : drivers.dB;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path);
    os.write("MVFB", 4);
    put_u64(os, drivers.particles);
    put_u64(os, drivers.grid.N);
    put_u64(os, a.width());
    for (std::size_t p = 0; p < drivers.particles; ++p)
        for (std::size_t k = 0; k < drivers.grid.N; ++k)
            for (std::size_t j = 0; j < a.width(); ++j) put_u64(os, std::bit_cast<std::uint64_t>(a.ptr(k, p)[j]));
}

IncrementDump read_increments_binary(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MVFB", 4) != 0) throw std::runtime_error("bad magic in " + path);
    IncrementDump out;
    out.particles = get_u64(is);
    out.steps = get_u64(is);
    out.dim = get_u64(is);
    out.values.resize(out.particles * out.steps * out.dim);
    for (auto& v : out.values) v = std::bit_cast<double>(get_u64(is));
    return out;
}

}  // namespace mvfb
