#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "mvfbdsde/types.hpp"

namespace mvfb {

/// Increments of the forward driver W and the backward driver B for M
/// particles over N steps.
struct BrownianPair {
    TimeGrid grid;
    std::size_t particles = 0;
    std::size_t d_W = 0;
    std::size_t d_B = 0;
    std::uint64_t seed = 0;
    PathArray dW;  ///< N nodes x M particles x d_W
    PathArray dB;  ///< N nodes x M particles x d_B

    double w(std::size_t k, std::size_t p, std::size_t j) const { return dW.ptr(k, p)[j]; }
    double b(std::size_t k, std::size_t p, std::size_t j) const { return dB.ptr(k, p)[j]; }

    /// M x N matrix of one component of dW (or dB).
    Matrix forward_slice(std::size_t component = 0) const;
    Matrix backward_slice(std::size_t component = 0) const;

    /// B_T - B_{t_k} per particle for component j, k = 0..N (zero at N).
    PathArray backward_tail() const;
};

BrownianPair sample_driver_pair(const TimeGrid& grid, std::size_t d_W, std::size_t d_B, std::size_t particles,
                                std::uint64_t seed);

/// sum_k integrand(p, k) * driver(p, k). integrand may carry N or N + 1
/// columns; only the left endpoints 0..N-1 are used.
Vector forward_ito_integral(const Matrix& integrand, const Matrix& driver);

/// sum_k integrand(p, k + 1) * driver(p, k). integrand must carry N + 1
/// columns (right endpoints).
Vector backward_ito_integral(const Matrix& integrand, const Matrix& driver);

/// Scalar process a_t = a_0 + int beta ds + int gamma dW + int delta dB-bar with
/// deterministic coefficient functions of time (null means zero). The
/// anchor is the value at T of the backward-driven part, so the process is
/// adapted to the mixed information F_t.
struct ProcessSpec {
    double initial = 0.0;
    std::function<double(double)> drift;
    std::function<double(double)> forward_integrand;
    std::function<double(double)> backward_integrand;
};

struct ItoProductCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    double residual = 0.0;
    double standard_error = 0.0;  ///< Monte Carlo standard error of lhs - rhs
};

/// Simulates both processes with component 0 of each driver and compares
/// E<a_T, a~_T> with the integration-by-parts expansion
/// E<a_0,a~_0> + E int <a, da~> + E int <a~, da> - E int <delta, delta~> ds
///   + E int <gamma, gamma~> ds.
ItoProductCheck discrete_ito_product_check(const ProcessSpec& alpha, const ProcessSpec& alpha_tilde,
                                           const BrownianPair& drivers);

enum class Driver { W, B };

/// Flat little-endian dump: "MVFB", then M, N, d as uint64, then doubles in
/// (particle, step, component) order.
void write_increments_binary(const std::string& path, const BrownianPair& drivers, Driver which);

struct IncrementDump {
    std::uint64_t particles = 0, steps = 0, dim = 0;
    std::vector<double> values;
};
IncrementDump read_increments_binary(const std::string& path);

}  // namespace mvfb
