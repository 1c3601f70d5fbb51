#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convtran/data.hpp"
#include "convtran/model.hpp"

namespace convtran {

struct TrainOptions {
  int epochs = 100;
  int patience = 20;
  Index batch = 16;
  double lr = 1e-3;
  double val_fraction = 0.2;
  bool znorm = true;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;  // per-epoch progress when set
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool diverged = false;
  std::string failure;
  std::vector<EpochStats> history;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
};

/// Eval-mode loss and accuracy over a dataset padded to the model length.
Evaluation evaluate(ConvTranNet<double>& net, const TimeSeriesDataset& ds, Index batch = 64);

/// Adam + early stopping on `val` loss; the best snapshot is restored on
/// return. With an empty `val` the training loss drives early stopping.
TrainResult fit(ConvTranNet<double>& net, const TimeSeriesDataset& train, const TimeSeriesDataset& val,
                const TrainOptions& opts);

/// Pads train and test to a common length and z-normalizes when asked.
void prepare_pair(TimeSeriesDataset& train, TimeSeriesDataset& test, bool znorm);

/// Fills d_x, length and classes from the dataset.
ModelConfig config_for(const TimeSeriesDataset& ds, ModelConfig base);

struct RunRecord {
  std::string dataset;
  nlohmann::json config;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  int epochs_run = 0;
  int best_epoch = 0;
  double wall_time_s = 0.0;
  Index param_count = 0;
  bool failed = false;
  std::string failure;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

/// Full pipeline for one seed: split, train, test. A thrown error or a
/// diverged run gives a record with failed = true. The trained model is
/// returned through `trained` when given.
RunRecord run_experiment(const std::string& name, TimeSeriesDataset train, TimeSeriesDataset test,
                         const ModelConfig& base, const TrainOptions& opts,
                         std::optional<ConvTranNet<double>>* trained = nullptr);

struct SeedSummary {
  double best = 0.0;
  double mean = 0.0;
  double median = 0.0;
  std::size_t failed = 0;
};

/// Over non-failed records; NaN fields when every run failed.
SeedSummary summarize(const std::vector<RunRecord>& records);

}  // namespace convtran
