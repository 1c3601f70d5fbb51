#include "convtran/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace convtran {

std::vector<double> rank_row(const std::vector<double>& accuracies) {
  const std::size_t n = accuracies.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return accuracies[a] > accuracies[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && accuracies[order[j + 1]] == accuracies[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

RankTable average_ranks(const std::vector<std::string>& methods, const std::vector<std::string>& datasets,
                        const MatrixXd& accuracy, std::vector<std::string>* warnings) {
  if (methods.size() < 2) throw std::invalid_argument("average_ranks: need at least two configurations");
  if (accuracy.rows() != static_cast<Index>(datasets.size()) || accuracy.cols() != static_cast<Index>(methods.size()))
    throw std::invalid_argument("average_ranks: accuracy matrix must be datasets x methods");
  RankTable t;
  t.methods = methods;
  t.datasets = datasets;
  t.accuracy = accuracy;
  t.ranks = MatrixXd::Constant(accuracy.rows(), accuracy.cols(), std::numeric_limits<double>::quiet_NaN());
  t.included.assign(datasets.size(), false);
  t.average_rank.assign(methods.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<double> sums(methods.size(), 0.0);
  std::size_t used = 0;
  for (Index d = 0; d < accuracy.rows(); ++d) {
    if (accuracy.row(d).hasNaN()) {
      if (warnings) warnings->push_back("dataset '" + datasets[static_cast<std::size_t>(d)] +
                                        "' has a failed run and is excluded from ranking");
      continue;
    }
    std::vector<double> row(accuracy.row(d).data(), accuracy.row(d).data() + accuracy.cols());
    const auto r = rank_row(row);
    for (std::size_t m = 0; m < r.size(); ++m) {
      t.ranks(d, static_cast<Index>(m)) = r[m];
      sums[m] += r[m];
    }
    t.included[static_cast<std::size_t>(d)] = true;
    ++used;
  }
  if (used > 0)
    for (std::size_t m = 0; m < sums.size(); ++m) t.average_rank[m] = sums[m] / static_cast<double>(used);
  else if (warnings)
    warnings->push_back("no dataset could be ranked");
  return t;
}

void write_rank_csv(std::ostream& out, const RankTable& t) {
  out << "dataset";
  for (const auto& m : t.methods) out << ',' << m;
  out << '\n';
  for (std::size_t d = 0; d < t.datasets.size(); ++d) {
    out << t.datasets[d];
    for (Index m = 0; m < t.accuracy.cols(); ++m) {
      const double a = t.accuracy(static_cast<Index>(d), m);
      out << ',';
      if (std::isnan(a))
        out << "failed";
      else
        out << a;
    }
    out << '\n';
  }
  out << "average_rank";
  for (double r : t.average_rank) {
    out << ',';
    if (std::isnan(r))
      out << "nan";
    else
      out << r;
  }
  out << '\n';
}

}  // namespace convtran
