#pragma once

#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "convtran/autodiff.hpp"
#include "convtran/types.hpp"

namespace convtran {

enum class AbsoluteKind { VanillaAPE, TAPE, Learned };

std::string_view to_string(AbsoluteKind kind);

/// L x d_model absolute position embeddings, always held in double precision.
struct PositionTable {
  MatrixXd values;
  AbsoluteKind kind = AbsoluteKind::VanillaAPE;
  bool trainable = false;

  Index length() const { return values.rows(); }
  Index d_model() const { return values.cols(); }
};

/// Half-width of the uniform initialisation used for learned tables.
inline constexpr double kLearnedInitScale = 0.02;

/// Sinusoidal table with frequencies 10000^(-2k/d_model).
PositionTable build_vanilla_ape(Index length, Index d_model);

/// Sinusoidal table with frequencies rescaled by d_model / length.
PositionTable build_tape(Index length, Index d_model);

PositionTable build_learned_ape(Index length, Index d_model, std::uint64_t seed);

/// Frequency of sin/cos pair k: 10000^(-2k/d_model) * rescale.
double sinusoid_frequency(Index k, Index d_model, double rescale = 1.0);

/// x + table, differentiable in both arguments.
template <typename Scalar>
ad::Tensor<Scalar> inject_absolute(const ad::Tensor<Scalar>& x, const ad::Tensor<Scalar>& table) {
  if (x.rows() != table.rows() || x.cols() != table.cols())
    throw std::invalid_argument("inject_absolute: input " + std::to_string(x.rows()) + "x" +
                                std::to_string(x.cols()) + " does not match table " +
                                std::to_string(table.rows()) + "x" + std::to_string(table.cols()));
  return ad::add(x, table);
}

template <typename Derived>
Matrix<typename Derived::Scalar> inject_absolute(const Eigen::MatrixBase<Derived>& x, const PositionTable& table) {
  using Scalar = typename Derived::Scalar;
  if (x.rows() != table.length() || x.cols() != table.d_model())
    throw std::invalid_argument("inject_absolute: shape mismatch with position table");
  return x + table.values.cast<Scalar>();
}

struct CurvePoint {
  long offset;
  double dot_product;
};

/// For each offset K in [-(L-1), L-1], the mean over valid i of <row i, row i+K>.
std::vector<CurvePoint> similarity_curve(const PositionTable& table);

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve);

/// Mean cosine similarity over all ordered pairs of distinct rows.
double mean_offdiagonal_cosine(const PositionTable& table, bool absolute = false);

/// Counts steps K -> K+1 with K in [0, max_offset) where the curve rises by
/// more than `tolerance`.
int monotonicity_violations(const std::vector<CurvePoint>& curve, long max_offset, double tolerance = 1e-9);

}  // namespace convtran
