#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "convtran/types.hpp"

namespace convtran {

/// Ranks within one row: 1 = highest accuracy, ties share the mean of the
/// ranks they span.
std::vector<double> rank_row(const std::vector<double>& accuracies);

struct RankTable {
  std::vector<std::string> methods;
  std::vector<std::string> datasets;
  MatrixXd accuracy;             // datasets x methods, NaN marks a failed cell
  MatrixXd ranks;                // NaN rows for excluded datasets
  std::vector<bool> included;    // per dataset
  std::vector<double> average_rank;  // per method, over included datasets
};

/// Datasets with any failed (NaN) cell are excluded from the averages and
/// produce a warning. Throws std::invalid_argument for fewer than two methods.
RankTable average_ranks(const std::vector<std::string>& methods, const std::vector<std::string>& datasets,
                        const MatrixXd& accuracy, std::vector<std::string>* warnings = nullptr);

/// CSV with one row per dataset (accuracies) and a final "average_rank" row.
void write_rank_csv(std::ostream& out, const RankTable& table);

}  // namespace convtran
