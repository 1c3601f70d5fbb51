#include "convtran/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "convtran/optim.hpp"

namespace convtran {

namespace {

Matrix<double> stack_batch(const TimeSeriesDataset& ds, const std::vector<std::size_t>& idx, std::size_t begin,
                           std::size_t end, std::vector<int>& labels) {
  std::vector<const MatrixXd*> ptrs;
  labels.clear();
  for (std::size_t i = begin; i < end; ++i) {
    ptrs.push_back(&ds.samples[idx[i]]);
    labels.push_back(ds.labels[idx[i]]);
  }
  return stack_samples<double>(ptrs);
}

}  // namespace

Evaluation evaluate(ConvTranNet<double>& net, const TimeSeriesDataset& ds, Index batch) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  const TimeSeriesDataset* data = &ds;
  TimeSeriesDataset padded;
  if (ds.length() != net.config().length) {
    padded = pad_to_length(ds, net.config().length);
    data = &padded;
  }
  std::vector<std::size_t> idx(ds.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Evaluation ev;
  std::vector<int> labels;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  const auto step = static_cast<std::size_t>(std::max<Index>(batch, 1));
  for (std::size_t b = 0; b < idx.size(); b += step) {
    const std::size_t e = std::min(idx.size(), b + step);
    auto x = ad::Tensor<double>::constant(stack_batch(*data, idx, b, e, labels));
    auto logits = net.forward(x, false);
    loss_sum += ad::cross_entropy(logits, std::span<const int>(labels)).item() * static_cast<double>(e - b);
    for (Index r = 0; r < logits.rows(); ++r) {
      Index arg = 0;
      logits.value().row(r).maxCoeff(&arg);
      ev.predictions.push_back(static_cast<int>(arg));
      if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
    }
  }
  ev.loss = loss_sum / static_cast<double>(idx.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  return ev;
}

TrainResult fit(ConvTranNet<double>& net, const TimeSeriesDataset& train, const TimeSeriesDataset& val,
                const TrainOptions& opts) {
  if (train.size() == 0) throw std::invalid_argument("fit: empty training set");
  if (opts.epochs < 1) throw std::invalid_argument("fit: epochs must be positive");
  if (opts.batch < 1) throw std::invalid_argument("fit: batch must be positive");
  if (train.length() != net.config().length)
    throw std::invalid_argument("fit: training series length differs from the model length");

  auto params = net.parameters();
  AdamOptions<double> adam;
  adam.lr = opts.lr;
  AdamState<double> state(params, adam);
  EarlyStopper<ConvTranNet<double>::Snapshot> stopper(opts.patience);
  std::mt19937_64 rng(opts.seed + 0x5851f42d4c957f2dULL);

  std::vector<std::size_t> order(train.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  TrainResult result;
  const auto step = static_cast<std::size_t>(opts.batch);

  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats;
    stats.epoch = epoch;
    double loss_sum = 0.0;
    try {
      for (std::size_t b = 0; b < order.size(); b += step) {
        const std::size_t e = std::min(order.size(), b + step);
        auto x = ad::Tensor<double>::constant(stack_batch(train, order, b, e, labels));
        auto loss = ad::cross_entropy(net.forward(x, true), std::span<const int>(labels));
        loss_sum += loss.item() * static_cast<double>(e - b);
        ad::backward(loss);
        adam_step(params, state);
      }
      stats.train_loss = loss_sum / static_cast<double>(order.size());
      if (val.size() > 0) {
        const auto ev = evaluate(net, val);
        stats.val_loss = ev.loss;
        stats.val_accuracy = ev.accuracy;
      } else {
        stats.val_loss = stats.train_loss;
      }
    } catch (const std::runtime_error& err) {
      result.diverged = true;
      result.failure = err.what();
      result.epochs_run = epoch;
      break;
    }
    result.history.push_back(stats);
    result.epochs_run = epoch;
    if (opts.log)
      *opts.log << "epoch " << epoch << " train_loss " << stats.train_loss << " val_loss " << stats.val_loss
                << " val_acc " << stats.val_accuracy << '\n';
    const auto decision = stopper.update(stats.val_loss, net.snapshot());
    if (decision == StopDecision::Diverged) {
      result.diverged = true;
      result.failure = "non-finite validation loss at epoch " + std::to_string(epoch);
      break;
    }
    if (decision == StopDecision::Stop) break;
  }
  if (stopper.best_checkpoint()) net.restore(*stopper.best_checkpoint());
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

void prepare_pair(TimeSeriesDataset& train, TimeSeriesDataset& test, bool znorm) {
  const Index len = std::max(train.length(), test.length());
  if (train.length() != len) train = pad_to_length(std::move(train), len);
  if (test.length() != len) test = pad_to_length(std::move(test), len);
  if (train.channels() != test.channels()) throw std::invalid_argument("train and test channel counts differ");
  if (train.class_names != test.class_names) throw std::invalid_argument("train and test class labels differ");
  if (znorm) {
    train = znormalize(std::move(train));
    test = znormalize(std::move(test));
  }
}

ModelConfig config_for(const TimeSeriesDataset& ds, ModelConfig base) {
  base.d_x = ds.channels();
  base.length = ds.length();
  base.classes = ds.classes();
  return base;
}

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j = {{"dataset", r.dataset},   {"config", r.config},         {"seed", r.seed},
                      {"epochs_run", r.epochs_run}, {"best_epoch", r.best_epoch}, {"wall_time_s", r.wall_time_s},
                      {"param_count", r.param_count}, {"failed", r.failed}};
  j["test_accuracy"] = r.failed ? nlohmann::json(nullptr) : nlohmann::json(r.test_accuracy);
  if (r.failed) j["failure"] = r.failure;
  return j;
}

RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.dataset = j.at("dataset").get<std::string>();
  r.config = j.at("config");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.failed = j.value("failed", false);
  r.test_accuracy = j.at("test_accuracy").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                     : j.at("test_accuracy").get<double>();
  r.epochs_run = j.at("epochs_run").get<int>();
  r.best_epoch = j.value("best_epoch", 0);
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.param_count = j.at("param_count").get<Index>();
  r.failure = j.value("failure", "");
  return r;
}

RunRecord run_experiment(const std::string& name, TimeSeriesDataset train, TimeSeriesDataset test,
                         const ModelConfig& base, const TrainOptions& opts,
                         std::optional<ConvTranNet<double>>* trained) {
  const auto start = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.dataset = name;
  rec.seed = opts.seed;
  try {
    prepare_pair(train, test, opts.znorm);
    auto cfg = config_for(train, base);
    cfg.seed = opts.seed;
    rec.config = to_json(cfg);
    ConvTranNet<double> net(cfg);
    rec.param_count = net.count_parameters();
    std::pair<TimeSeriesDataset, TimeSeriesDataset> parts{train, TimeSeriesDataset{}};
    if (opts.val_fraction > 0.0) parts = stratified_split(train, 1.0 - opts.val_fraction, opts.seed);
    const auto fitted = fit(net, parts.first, parts.second, opts);
    rec.epochs_run = fitted.epochs_run;
    rec.best_epoch = fitted.best_epoch;
    if (fitted.diverged && fitted.best_epoch == 0) {
      rec.failed = true;
      rec.failure = fitted.failure;
    } else {
      rec.test_accuracy = evaluate(net, test).accuracy;
    }
    if (trained) trained->emplace(std::move(net));
  } catch (const std::exception& err) {
    rec.failed = true;
    rec.failure = err.what();
  }
  if (rec.failed) rec.test_accuracy = std::numeric_limits<double>::quiet_NaN();
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

SeedSummary summarize(const std::vector<RunRecord>& records) {
  SeedSummary s;
  std::vector<double> acc;
  for (const auto& r : records) {
    if (r.failed)
      ++s.failed;
    else
      acc.push_back(r.test_accuracy);
  }
  if (acc.empty()) {
    s.best = s.mean = s.median = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.best = *std::max_element(acc.begin(), acc.end());
  s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  std::sort(acc.begin(), acc.end());
  const auto n = acc.size();
  s.median = n % 2 ? acc[n / 2] : 0.5 * (acc[n / 2 - 1] + acc[n / 2]);
  return s;
}

}  // namespace convtran
