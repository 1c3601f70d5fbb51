#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "convtran/types.hpp"

namespace convtran {

/// n samples of d_x x L values with labels in [0, classes).
struct TimeSeriesDataset {
  std::vector<MatrixXd> samples;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  struct Meta {
    std::string problem_name;
    bool equal_length = true;
    std::vector<Index> original_lengths;
  } meta;

  Index size() const { return static_cast<Index>(samples.size()); }
  Index channels() const { return samples.empty() ? 0 : samples.front().rows(); }
  Index length() const { return samples.empty() ? 0 : samples.front().cols(); }
  Index classes() const { return static_cast<Index>(class_names.size()); }

  TimeSeriesDataset subset(const std::vector<std::size_t>& indices) const;
};

bool operator==(const TimeSeriesDataset& a, const TimeSeriesDataset& b);

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Reads a UEA/sktime `.ts` file. Unequal-length series are right-padded
/// with zeros to the longest series.
TimeSeriesDataset parse_ts(const std::filesystem::path& path);
TimeSeriesDataset parse_ts(std::istream& in, const std::string& source = "<stream>");

/// Writes `.ts` text; padded tails are not written, so parse(write(ds)) == ds.
void write_ts(std::ostream& out, const TimeSeriesDataset& ds);

/// Right-pads (zeros) or truncates every sample to `length`.
TimeSeriesDataset pad_to_length(TimeSeriesDataset ds, Index length);

/// Per-sample, per-channel zero mean / unit variance over the original
/// length; near-constant channels (std < 1e-8) become zeros.
TimeSeriesDataset znormalize(TimeSeriesDataset ds);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Per class, round(fraction * n_c) samples go to train (at least one) and
/// the rest to validation. Single-sample classes stay in train and produce
/// a warning in `warnings`.
SplitIndices stratified_split_indices(const TimeSeriesDataset& ds, double fraction, std::uint64_t seed,
                                      std::vector<std::string>* warnings = nullptr);

std::pair<TimeSeriesDataset, TimeSeriesDataset> stratified_split(const TimeSeriesDataset& ds, double fraction,
                                                                 std::uint64_t seed,
                                                                 std::vector<std::string>* warnings = nullptr);

/// One-channel Gaussian noise (sd 0.1) with a unit pulse placed uniformly in
/// the first half (class 0) or the second half (class 1). Classes alternate,
/// so each holds n/2 +- 1 samples.
TimeSeriesDataset synth_order_task(Index n, Index length, std::uint64_t seed);

/// Dataset checkpoint in the same JSON container used for models.
nlohmann::json dataset_to_json(const TimeSeriesDataset& ds);
TimeSeriesDataset dataset_from_json(const nlohmann::json& j);

}  // namespace convtran
