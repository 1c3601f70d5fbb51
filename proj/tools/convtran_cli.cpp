#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "convtran/checkpoint.hpp"
#include "convtran/data.hpp"
#include "convtran/encodings_absolute.hpp"
#include "convtran/encodings_relative.hpp"
#include "convtran/model.hpp"
#include "convtran/ranking.hpp"
#include "convtran/train.hpp"

namespace fs = std::filesystem;
using namespace convtran;

namespace {

struct DataOptions {
  std::string data_dir = "data";
  Index synth_n = 600;
  Index synth_length = 64;
  std::uint64_t data_seed = 0;
};

struct ModelOptions {
  std::string abs = "tape";
  std::string rel = "erpe";
  Index filters = 64;
  Index kernel = 8;
  Index d_model = 64;
  Index heads = 8;
  Index blocks = 1;
  double dropout = 0.1;
  std::string pooling = "gap_only";
  std::string activation = "elu";
  Index shaw_clip = -1;
  bool shaw_values = false;
};

const CLI::Validator NonEmpty(
    [](std::string& s) { return s.empty() ? std::string("path must not be empty") : std::string(); }, "PATH");

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--abs", m.abs, "Absolute encoding")
      ->check(CLI::IsMember({"none", "vanilla", "learned", "tape"}))
      ->capture_default_str();
  cmd->add_option("--rel", m.rel, "Relative encoding")
      ->check(CLI::IsMember({"none", "shaw", "vector", "erpe"}))
      ->capture_default_str();
  cmd->add_option("--filters", m.filters, "Temporal filters M")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--kernel", m.kernel, "Temporal kernel length")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--d-model", m.d_model, "Embedding width (also d_z)")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--heads", m.heads, "Attention heads")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--blocks", m.blocks, "Transformer blocks")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--dropout", m.dropout, "Dropout rate")->check(CLI::Range(0.0, 0.99))->capture_default_str();
  cmd->add_option("--pooling", m.pooling, "Pooling head")
      ->check(CLI::IsMember({"gap_only", "max_plus_gap"}))
      ->capture_default_str();
  cmd->add_option("--activation", m.activation, "Activation after each convolution")
      ->check(CLI::IsMember({"elu", "gelu", "none"}))
      ->capture_default_str();
  cmd->add_option("--shaw-clip", m.shaw_clip, "Shaw clipping distance (negative: L-1)")->capture_default_str();
  cmd->add_flag("--shaw-values", m.shaw_values, "Also learn the Shaw value table");
}

void add_train_options(CLI::App* cmd, TrainOptions& t) {
  cmd->add_option("--epochs", t.epochs, "Maximum epochs")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--patience", t.patience, "Early-stopping patience")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--batch", t.batch, "Mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--lr", t.lr, "Adam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--val-fraction", t.val_fraction, "Validation share of the train file")
      ->check(CLI::Range(0.0, 0.9))
      ->capture_default_str();
  cmd->add_flag("!--no-znorm", t.znorm, "Disable per-sample z-normalization");
}

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data-dir", d.data_dir, "Root holding <name>/<name>_TRAIN.ts")->capture_default_str();
  cmd->add_option("--synth-n", d.synth_n, "synth_order samples per split")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--synth-length", d.synth_length, "synth_order series length")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--data-seed", d.data_seed, "synth_order generator seed")->capture_default_str();
}

ModelConfig to_config(const ModelOptions& m) {
  ModelConfig c;
  c.abs_encoding = parse_absolute_encoding(m.abs);
  c.rel_encoding = parse_relative_kind(m.rel);
  c.temporal_filters = m.filters;
  c.kernel_len = m.kernel;
  c.d_model = m.d_model;
  c.d_z = m.d_model;
  c.heads = m.heads;
  c.blocks = m.blocks;
  c.dropout = m.dropout;
  c.pooling = parse_pooling_mode(m.pooling);
  c.conv_activation = parse_activation(m.activation);
  c.shaw_clip = m.shaw_clip;
  c.shaw_values = m.shaw_values;
  return c;
}

struct LoadedPair {
  std::string name;
  TimeSeriesDataset train;
  TimeSeriesDataset test;
};

// "synth_order", a *_TRAIN.ts path, a directory, or a name under data_dir.
LoadedPair load_dataset(const std::string& spec, const DataOptions& d) {
  if (spec == "synth_order") {
    return {spec, synth_order_task(d.synth_n, d.synth_length, d.data_seed),
            synth_order_task(d.synth_n, d.synth_length, d.data_seed + 1000003)};
  }
  fs::path train_path;
  fs::path p(spec);
  if (p.extension() == ".ts") {
    train_path = p;
  } else if (fs::is_directory(p)) {
    train_path = p / (p.filename().string() + "_TRAIN.ts");
  } else {
    train_path = fs::path(d.data_dir) / spec / (spec + "_TRAIN.ts");
  }
  std::string test_name = train_path.filename().string();
  const auto pos = test_name.rfind("_TRAIN");
  if (pos == std::string::npos) throw std::runtime_error("cannot infer the test file for " + train_path.string());
  test_name.replace(pos, 6, "_TEST");
  const fs::path test_path = train_path.parent_path() / test_name;
  auto train = parse_ts(train_path);
  auto test = parse_ts(test_path);
  std::string name = train.meta.problem_name.empty() ? train_path.stem().string() : train.meta.problem_name;
  return {name, std::move(train), std::move(test)};
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_train(const std::string& dataset, const DataOptions& d, const ModelOptions& m, TrainOptions t,
              const std::vector<std::uint64_t>& seeds, const std::string& out_dir, bool verbose) {
  auto data = load_dataset(dataset, d);
  const auto base = to_config(m);
  if (verbose) t.log = &std::cerr;
  std::vector<RunRecord> records;
  nlohmann::json runs = nlohmann::json::array();
  std::optional<ConvTranNet<double>> best_net;
  double best_acc = -1.0;
  for (auto seed : seeds) {
    t.seed = seed;
    std::optional<ConvTranNet<double>> net;
    auto rec = run_experiment(data.name, data.train, data.test, base, t, &net);
    std::cerr << data.name << " seed " << seed << ": "
              << (rec.failed ? "failed (" + rec.failure + ")" : "test accuracy " + std::to_string(rec.test_accuracy))
              << " in " << rec.wall_time_s << " s, " << rec.epochs_run << " epochs\n";
    if (!rec.failed && rec.test_accuracy > best_acc && net) {
      best_acc = rec.test_accuracy;
      best_net = std::move(net);
    }
    runs.push_back(to_json(rec));
    records.push_back(std::move(rec));
  }
  const auto s = summarize(records);
  nlohmann::json report = records.size() == 1 ? runs.front() : nlohmann::json{{"runs", runs},
                                                                              {"best_accuracy", s.best},
                                                                              {"mean_accuracy", s.mean},
                                                                              {"median_accuracy", s.median},
                                                                              {"failed_runs", s.failed}};
  std::cout << report.dump(2) << '\n';
  if (!out_dir.empty()) {
    save_json(fs::path(out_dir) / "run.json", report);
    if (best_net) save_json(fs::path(out_dir) / "model.json", model_to_json(*best_net));
  }
  return s.failed == records.size() ? 1 : 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const DataOptions& d, bool znorm) {
  auto net = model_from_json(load_json(checkpoint));
  auto data = load_dataset(dataset, d);
  TimeSeriesDataset test = data.test;
  if (test.length() < net.config().length) test = pad_to_length(std::move(test), net.config().length);
  if (test.length() > net.config().length)
    throw std::runtime_error("test series are longer than the model length " + std::to_string(net.config().length));
  if (znorm) test = znormalize(std::move(test));
  const auto ev = evaluate(net, test);
  std::cout << nlohmann::json{{"dataset", data.name}, {"test_accuracy", ev.accuracy}, {"test_loss", ev.loss}}.dump(2)
            << '\n';
  return 0;
}

int cmd_ablate(const std::vector<std::string>& datasets, const DataOptions& d, const ModelOptions& m,
               const TrainOptions& t, const std::vector<std::string>& abs_grid, const std::vector<std::string>& rel_grid,
               const std::vector<std::uint64_t>& seeds, const std::string& report, const std::string& out_dir) {
  std::vector<std::string> methods;
  for (const auto& a : abs_grid)
    for (const auto& r : rel_grid) methods.push_back(a + "+" + r);
  if (methods.size() < 2) throw CLI::ValidationError("ablate", "the grid needs at least two configurations");
  MatrixXd acc(static_cast<Index>(datasets.size()), static_cast<Index>(methods.size()));
  nlohmann::json runs = nlohmann::json::array();
  std::vector<std::string> names;
  for (std::size_t di = 0; di < datasets.size(); ++di) {
    std::optional<LoadedPair> data;
    std::string load_error;
    try {
      data = load_dataset(datasets[di], d);
    } catch (const std::exception& e) {
      load_error = e.what();
      std::cerr << "warning: " << datasets[di] << ": " << load_error << '\n';
    }
    names.push_back(data ? data->name : datasets[di]);
    Index col = 0;
    for (const auto& a : abs_grid) {
      for (const auto& r : rel_grid) {
        std::vector<RunRecord> records;
        if (data) {
          auto opts = m;
          opts.abs = a;
          opts.rel = r;
          for (auto seed : seeds) {
            auto to = t;
            to.seed = seed;
            records.push_back(run_experiment(data->name, data->train, data->test, to_config(opts), to));
            const auto& rec = records.back();
            std::cerr << data->name << " " << a << "+" << r << " seed " << seed << ": "
                      << (rec.failed ? "failed" : std::to_string(rec.test_accuracy)) << '\n';
            auto j = to_json(rec);
            j["method"] = a + "+" + r;
            runs.push_back(j);
          }
        }
        const auto s = summarize(records);
        // Any failed seed marks the whole cell as failed.
        double value = std::numeric_limits<double>::quiet_NaN();
        if (!records.empty() && s.failed == 0) value = report == "best" ? s.best : report == "median" ? s.median : s.mean;
        acc(static_cast<Index>(di), col++) = value;
      }
    }
  }
  std::vector<std::string> warnings;
  const auto table = average_ranks(methods, names, acc, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  std::ostringstream csv;
  write_rank_csv(csv, table);
  std::cout << csv.str();
  if (!out_dir.empty()) {
    write_file(fs::path(out_dir) / "ranks.csv", csv.str());
    save_json(fs::path(out_dir) / "runs.json", runs);
  }
  return 0;
}

void write_panels(const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  out << "panel,length,d_model,offset,vanilla,tape\n";
  for (Index length : {Index(1000), Index(30)}) {
    const auto vanilla = similarity_curve(build_vanilla_ape(length, 128));
    const auto tape = similarity_curve(build_tape(length, 128));
    const char* panel = length == 1000 ? "a" : "b";
    for (std::size_t i = 0; i < vanilla.size(); ++i)
      out << panel << ',' << length << ",128," << vanilla[i].offset << ',' << vanilla[i].dot_product << ','
          << tape[i].dot_product << '\n';
  }
  write_file(path, out.str());
}

int cmd_curves(const std::string& kind, Index length, Index d_model, const std::string& out_path,
               const std::string& panels_path) {
  PositionTable table = kind == "tape" ? build_tape(length, d_model) : build_vanilla_ape(length, d_model);
  std::ostringstream csv;
  write_curve_csv(csv, similarity_curve(table));
  write_file(out_path, csv.str());
  if (!panels_path.empty()) write_panels(panels_path);
  std::cout << nlohmann::json{{"kind", kind},
                              {"length", length},
                              {"d_model", d_model},
                              {"rows", 2 * length - 1},
                              {"mean_offdiagonal_cosine", mean_offdiagonal_cosine(table)},
                              {"out", out_path}}
                   .dump(2)
            << '\n';
  return 0;
}

Index live_delta(EncodingMethod method, Index length, Index d_z, const ComplexityOptions& opts) {
  ModelConfig base;
  base.d_x = 1;
  base.length = length;
  base.temporal_filters = 2;
  base.kernel_len = std::min<Index>(8, length);
  base.d_model = d_z;
  base.d_z = d_z;
  base.heads = opts.heads;
  base.abs_encoding = AbsoluteEncoding::None;
  base.rel_encoding = RelativeKind::None;
  base.shaw_values = opts.shaw_values;
  ModelConfig with = base;
  switch (method) {
    case EncodingMethod::TAPE: with.abs_encoding = AbsoluteEncoding::TAPE; break;
    case EncodingMethod::VanillaAPE: with.abs_encoding = AbsoluteEncoding::VanillaAPE; break;
    case EncodingMethod::Learned: with.abs_encoding = AbsoluteEncoding::Learned; break;
    case EncodingMethod::Shaw: with.rel_encoding = RelativeKind::Shaw; break;
    case EncodingMethod::Vector: with.rel_encoding = RelativeKind::Vector; break;
    case EncodingMethod::ERPE: with.rel_encoding = RelativeKind::ERPE; break;
  }
  return ConvTranNet<double>(with).count_parameters() - ConvTranNet<double>(base).count_parameters();
}

int cmd_complexity(const std::vector<std::string>& methods, const std::vector<Index>& lengths,
                   const std::vector<Index>& dims, const ComplexityOptions& opts, bool live, const std::string& out) {
  if (std::all_of(methods.begin(), methods.end(), [](const std::string& m) { return m.empty(); }))
    throw CLI::ValidationError("--methods", "the method list is empty");
  nlohmann::json reports = nlohmann::json::array();
  bool consistent = true;
  for (const auto& name : methods) {
    const auto method = parse_encoding_method(name);
    for (Index length : lengths) {
      for (Index d : dims) {
        const auto rep = complexity_report(method, length, d, opts);
        auto j = to_json(rep);
        if (live) {
          const Index delta = live_delta(method, length, d, opts);
          j["live_param_delta"] = delta;
          j["live_matches"] = delta == rep.params;
          consistent = consistent && delta == rep.params;
        }
        reports.push_back(j);
      }
    }
  }
  std::cout << reports.dump(2) << '\n';
  if (!out.empty()) save_json(out, reports);
  return consistent ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional transformer for multivariate time series classification"};
  app.set_config("--config", "", "Key-value config file (key = value, [section] per subcommand)");
  app.require_subcommand(1);
  app.fallthrough();

  DataOptions data;
  ModelOptions model;
  TrainOptions train;
  std::vector<std::uint64_t> seeds{0};
  std::string dataset;
  std::string out_dir;
  bool verbose = false;

  auto* train_cmd = app.add_subcommand("train", "Train on a dataset and evaluate on its test split")->configurable();
  train_cmd->add_option("--dataset", dataset, "synth_order, a *_TRAIN.ts file, a directory or a name under --data-dir")
      ->required();
  train_cmd->add_option("--seed", seeds, "Seed(s); several seeds report best and mean")->expected(1, -1);
  train_cmd->add_option("--out", out_dir, "Directory for run.json and model.json")->check(NonEmpty);
  train_cmd->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");
  add_model_options(train_cmd, model);
  add_train_options(train_cmd, train);
  add_data_options(train_cmd, data);

  std::string checkpoint;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a saved model on a dataset's test split")->configurable();
  eval_cmd->add_option("--checkpoint", checkpoint, "model.json written by train")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dataset", dataset, "Dataset spec as for train")->required();
  eval_cmd->add_flag("!--no-znorm", train.znorm, "Disable per-sample z-normalization");
  add_data_options(eval_cmd, data);

  std::vector<std::string> datasets;
  std::vector<std::string> abs_grid{"none", "vanilla", "learned", "tape"};
  std::vector<std::string> rel_grid{"none", "shaw", "vector", "erpe"};
  std::string report = "mean";
  auto* ablate_cmd = app.add_subcommand("ablate", "Run an absolute x relative encoding grid and rank it")->configurable();
  ablate_cmd->add_option("--dataset", datasets, "Datasets")->required()->expected(1, -1);
  ablate_cmd->add_option("--abs-grid", abs_grid, "Absolute encodings in the grid")
      ->check(CLI::IsMember({"none", "vanilla", "learned", "tape"}))
      ->capture_default_str();
  ablate_cmd->add_option("--rel-grid", rel_grid, "Relative encodings in the grid")
      ->check(CLI::IsMember({"none", "shaw", "vector", "erpe"}))
      ->capture_default_str();
  ablate_cmd->add_option("--seed", seeds, "Seeds per cell")->expected(1, -1);
  ablate_cmd->add_option("--report", report, "Per-cell statistic over seeds")
      ->check(CLI::IsMember({"mean", "best", "median"}))
      ->capture_default_str();
  ablate_cmd->add_option("--out", out_dir, "Directory for ranks.csv and runs.json")->check(NonEmpty);
  add_model_options(ablate_cmd, model);
  add_train_options(ablate_cmd, train);
  add_data_options(ablate_cmd, data);

  std::string kind = "tape";
  Index length = 1000;
  Index d_model = 128;
  std::string curve_out;
  std::string panels_out;
  auto* curves_cmd = app.add_subcommand("curves", "Dot product of position embeddings against offset")->configurable();
  curves_cmd->add_option("--kind", kind, "Table to use")->check(CLI::IsMember({"tape", "vanilla"}))->capture_default_str();
  curves_cmd->add_option("--length", length, "Series length L")->check(CLI::PositiveNumber)->capture_default_str();
  curves_cmd->add_option("--d-model", d_model, "Embedding width")->check(CLI::PositiveNumber)->capture_default_str();
  curves_cmd->add_option("--out", curve_out, "Curve CSV path")->required()->check(NonEmpty);
  curves_cmd->add_option("--panels", panels_out, "Also write tAPE vs vanilla for L=1000 and L=30 at d=128")
      ->check(NonEmpty);

  std::vector<std::string> methods;
  std::vector<Index> lengths{30};
  std::vector<Index> dims{64};
  ComplexityOptions copts;
  bool live = false;
  std::string complexity_out;
  auto* complexity_cmd =
      app.add_subcommand("complexity", "Parameter, memory and compute accounting per encoding")->configurable();
  complexity_cmd->add_option("--methods", methods, "tape vanilla learned shaw vector erpe")->required()->expected(0, -1);
  complexity_cmd->add_option("--length", lengths, "Series lengths")->check(CLI::PositiveNumber)->expected(1, -1);
  complexity_cmd->add_option("--d-z", dims, "Attention widths")->check(CLI::PositiveNumber)->expected(1, -1);
  complexity_cmd->add_option("--heads", copts.heads, "eRPE heads")->check(CLI::PositiveNumber)->capture_default_str();
  complexity_cmd->add_flag("--shaw-values", copts.shaw_values, "Count the Shaw value table");
  complexity_cmd->add_flag("--live", live, "Cross-check against parameter counts of constructed models");
  complexity_cmd->add_option("--out", complexity_out, "JSON report path")->check(NonEmpty);

  try {
    app.parse(argc, argv);
    if (*train_cmd) return cmd_train(dataset, data, model, train, seeds, out_dir, verbose);
    if (*eval_cmd) return cmd_eval(checkpoint, dataset, data, train.znorm);
    if (*ablate_cmd) return cmd_ablate(datasets, data, model, train, abs_grid, rel_grid, seeds, report, out_dir);
    if (*curves_cmd) return cmd_curves(kind, length, d_model, curve_out, panels_out);
    if (*complexity_cmd) return cmd_complexity(methods, lengths, dims, copts, live, complexity_out);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
