#pragma once

#include <cstdint>
#include <string>

#include "mvfbdsde/types.hpp"

namespace mvfb {

/// Weighted sample cloud. Rows of `samples` are atoms.
class EmpiricalLaw {
public:
    EmpiricalLaw() = default;
    /// Uniform weights.
    explicit EmpiricalLaw(Matrix samples);
    EmpiricalLaw(Matrix samples, Vector weights);
    /// Uniform law over the rows of a node block.
    static EmpiricalLaw from_rows(const Eigen::Ref<const RowMatrix>& rows);
    static EmpiricalLaw dirac(const Vector& point);

    std::size_t size() const { return static_cast<std::size_t>(samples_.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(samples_.cols()); }
    bool empty() const { return samples_.rows() == 0; }
    bool uniform() const { return uniform_; }

    const Matrix& samples() const { return samples_; }
    const Vector& weights() const { return weights_; }
    /// Throws "empty measure" on an empty law.
    const Vector& mean() const;
    double second_moment() const;

    /// Law of the columns [offset, offset + width).
    EmpiricalLaw marginal(std::size_t offset, std::size_t width) const;

private:
    void finish();

    Matrix samples_;
    Vector weights_;
    Vector mean_;
    double second_moment_ = 0.0;
    bool uniform_ = true;
};

Vector empirical_mean(const EmpiricalLaw& law);

enum class W2Method { exact_1d, assignment, sliced };

std::string to_string(W2Method m);
W2Method w2_method_from_string(const std::string& s);

struct W2Options {
    std::size_t projections = 64;
    std::uint64_t seed = 0x5eedULL;
};

struct W2Result {
    double distance = 0.0;
    std::size_t projections = 0;  ///< nonzero only for the sliced method
};

/// Largest atom count accepted by the assignment method.
inline constexpr std::size_t kMaxAssignmentAtoms = 512;

W2Result wasserstein2_detailed(const EmpiricalLaw& a, const EmpiricalLaw& b, W2Method method,
                               const W2Options& options = {});
double wasserstein2(const EmpiricalLaw& a, const EmpiricalLaw& b, W2Method method, const W2Options& options = {});

/// Exact method for the shapes at hand: exact_1d in one dimension,
/// assignment otherwise.
double wasserstein2_exact(const EmpiricalLaw& a, const EmpiricalLaw& b);

/// Optimal assignment for a square cost matrix; returns col index per row.
std::vector<std::size_t> solve_assignment(const Matrix& cost);

struct MeanW2Bounds {
    double mean_gap = 0.0;
    double w2 = 0.0;
    double coupling_l2 = 0.0;
    bool chain_holds = false;
};

/// Evaluates |E a - E b| <= W2(a, b) <= (E|X - X'|^2)^{1/2} where rows of
/// (first, second) are the coupled pairs (equal weights).
MeanW2Bounds check_mean_w2_bounds(const EmpiricalLaw& a, const EmpiricalLaw& b, const Matrix& first,
                                  const Matrix& second, double slack = 1e-9);

}  // namespace mvfb
