#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mvfb {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecRef = Eigen::Ref<Vector>;
using ConstVecRef = Eigen::Ref<const Vector>;
using MatRef = Eigen::Ref<Matrix>;

/// Sizes of the state space H (d), the forward driver space (d_W) and the
/// backward driver space (d_B).
///
/// A quadruple v = (y, Y, z, Z) is stored flat as
/// [y (d) | Y (d) | z (d x d_B, row-major) | Z (d x d_W, row-major)].
/// Coefficient outputs use the same layout for (F, f, G, g), so the pairing
/// (A, v) = <F,y> + <f,Y> + <G,z> + <g,Z> is a plain dot product.
struct Dimensions {
    std::size_t d = 1;
    std::size_t d_W = 1;
    std::size_t d_B = 1;

    void validate() const {
        if (d == 0 || d_W == 0 || d_B == 0)
            throw std::invalid_argument("dimensions must be >= 1");
    }
    std::size_t packed() const { return 2 * d + d * d_B + d * d_W; }
    std::size_t y_off() const { return 0; }
    std::size_t Y_off() const { return d; }
    std::size_t z_off() const { return 2 * d; }
    std::size_t Z_off() const { return 2 * d + d * d_B; }
    std::size_t z_size() const { return d * d_B; }
    std::size_t Z_size() const { return d * d_W; }

    bool operator==(const Dimensions&) const = default;
};

/// Uniform grid t_k = k T / N on [0, T].
struct TimeGrid {
    double T = 1.0;
    std::size_t N = 1;

    TimeGrid() = default;
    TimeGrid(double horizon, std::size_t steps) : T(horizon), N(steps) {
        if (!(horizon > 0.0)) throw std::invalid_argument("horizon must be positive");
        if (steps == 0) throw std::invalid_argument("zero steps");
    }
    double dt() const { return T / static_cast<double>(N); }
    double t(std::size_t k) const { return k == N ? T : T * static_cast<double>(k) / static_cast<double>(N); }
    std::size_t nodes() const { return N + 1; }
};

/// Dense (node, particle, component) array stored node-major, so that one
/// node's ensemble is a contiguous M x width row-major block.
class PathArray {
public:
    PathArray() = default;
    PathArray(std::size_t nodes, std::size_t particles, std::size_t width, double fill = 0.0)
        : nodes_(nodes), particles_(particles), width_(width), data_(nodes * particles * width, fill) {}

    std::size_t nodes() const { return nodes_; }
    std::size_t particles() const { return particles_; }
    std::size_t width() const { return width_; }
    bool empty() const { return data_.empty(); }

    double* ptr(std::size_t k, std::size_t p) { return data_.data() + (k * particles_ + p) * width_; }
    const double* ptr(std::size_t k, std::size_t p) const { return data_.data() + (k * particles_ + p) * width_; }

    Eigen::Map<Vector> at(std::size_t k, std::size_t p) { return {ptr(k, p), static_cast<Eigen::Index>(width_)}; }
    Eigen::Map<const Vector> at(std::size_t k, std::size_t p) const {
        return {ptr(k, p), static_cast<Eigen::Index>(width_)};
    }
    /// Node k as an M x width matrix view.
    Eigen::Map<RowMatrix> node(std::size_t k) {
        return {ptr(k, 0), static_cast<Eigen::Index>(particles_), static_cast<Eigen::Index>(width_)};
    }
    Eigen::Map<const RowMatrix> node(std::size_t k) const {
        return {ptr(k, 0), static_cast<Eigen::Index>(particles_), static_cast<Eigen::Index>(width_)};
    }

    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool operator==(const PathArray&) const = default;

private:
    std::size_t nodes_ = 0;
    std::size_t particles_ = 0;
    std::size_t width_ = 0;
    std::vector<double> data_;
};

}  // namespace mvfb
