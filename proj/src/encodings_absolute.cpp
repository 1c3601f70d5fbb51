#include "convtran/encodings_absolute.hpp"

#include <cmath>
#include <map>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>

namespace convtran {

std::string_view to_string(AbsoluteKind kind) {
  switch (kind) {
    case AbsoluteKind::VanillaAPE: return "vanilla";
    case AbsoluteKind::TAPE: return "tape";
    case AbsoluteKind::Learned: return "learned";
  }
  return "unknown";
}

namespace {

void check_shape(Index length, Index d_model, bool sinusoidal) {
  if (length < 1) throw std::invalid_argument("position table: length must be at least 1");
  if (d_model < 1) throw std::invalid_argument("position table: d_model must be positive");
  if (sinusoidal && d_model % 2 != 0)
    throw std::invalid_argument("position table: d_model must be even for sinusoidal encodings, got " +
                                std::to_string(d_model));
}

PositionTable sinusoidal(Index length, Index d_model, double rescale, AbsoluteKind kind) {
  check_shape(length, d_model, true);
  PositionTable table{MatrixXd(length, d_model), kind, false};
  for (Index k = 0; k < d_model / 2; ++k) {
    const double w = sinusoid_frequency(k, d_model, rescale);
    for (Index i = 0; i < length; ++i) {
      const double angle = static_cast<double>(i) * w;
      table.values(i, 2 * k) = std::sin(angle);
      table.values(i, 2 * k + 1) = std::cos(angle);
    }
  }
  return table;
}

}  // namespace

double sinusoid_frequency(Index k, Index d_model, double rescale) {
  const double w = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d_model));
  return w * rescale;
}

PositionTable build_vanilla_ape(Index length, Index d_model) {
  return sinusoidal(length, d_model, 1.0, AbsoluteKind::VanillaAPE);
}

PositionTable build_tape(Index length, Index d_model) {
  check_shape(length, d_model, true);
  return sinusoidal(length, d_model, static_cast<double>(d_model) / static_cast<double>(length), AbsoluteKind::TAPE);
}

PositionTable build_learned_ape(Index length, Index d_model, std::uint64_t seed) {
  check_shape(length, d_model, false);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-kLearnedInitScale, kLearnedInitScale);
  PositionTable table{MatrixXd(length, d_model), AbsoluteKind::Learned, true};
  for (Index i = 0; i < table.values.size(); ++i) table.values.data()[i] = dist(rng);
  return table;
}

std::vector<CurvePoint> similarity_curve(const PositionTable& table) {
  const Index L = table.length();
  if (L < 2) throw std::invalid_argument("similarity_curve: table needs at least two rows");
  const MatrixXd gram = table.values * table.values.transpose();
  std::vector<CurvePoint> curve;
  curve.reserve(static_cast<std::size_t>(2 * L - 1));
  for (Index K = -(L - 1); K <= L - 1; ++K) {
    double total = 0.0;
    Index count = 0;
    for (Index i = std::max<Index>(0, -K); i < L && i + K < L; ++i) {
      total += gram(i, i + K);
      ++count;
    }
    curve.push_back({static_cast<long>(K), total / static_cast<double>(count)});
  }
  return curve;
}

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "offset,dot_product\n";
  out.precision(17);
  for (const auto& p : curve) out << p.offset << ',' << p.dot_product << '\n';
}

double mean_offdiagonal_cosine(const PositionTable& table, bool absolute) {
  const Index L = table.length();
  if (L < 2) throw std::invalid_argument("mean_offdiagonal_cosine: table needs at least two rows");
  MatrixXd unit = table.values;
  for (Index i = 0; i < L; ++i) {
    const double n = unit.row(i).norm();
    if (n > 0) unit.row(i) /= n;
  }
  const MatrixXd cos = unit * unit.transpose();
  double total = 0.0;
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < L; ++j)
      if (i != j) total += absolute ? std::abs(cos(i, j)) : cos(i, j);
  return total / static_cast<double>(L * (L - 1));
}

int monotonicity_violations(const std::vector<CurvePoint>& curve, long max_offset, double tolerance) {
  std::map<long, double> by_offset;
  for (const auto& p : curve) by_offset[p.offset] = p.dot_product;
  int violations = 0;
  for (long K = 0; K < max_offset; ++K) {
    auto a = by_offset.find(K);
    auto b = by_offset.find(K + 1);
    if (a == by_offset.end() || b == by_offset.end()) break;
    if (b->second - a->second > tolerance) ++violations;
  }
  return violations;
}

}  // namespace convtran
