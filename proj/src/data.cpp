#include "convtran/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "convtran/checkpoint.hpp"

namespace convtran {

TimeSeriesDataset TimeSeriesDataset::subset(const std::vector<std::size_t>& indices) const {
  TimeSeriesDataset out;
  out.class_names = class_names;
  out.meta.problem_name = meta.problem_name;
  out.meta.equal_length = meta.equal_length;
  for (std::size_t i : indices) {
    out.samples.push_back(samples.at(i));
    out.labels.push_back(labels.at(i));
    if (i < meta.original_lengths.size()) out.meta.original_lengths.push_back(meta.original_lengths[i]);
  }
  return out;
}

bool operator==(const TimeSeriesDataset& a, const TimeSeriesDataset& b) {
  if (a.labels != b.labels || a.class_names != b.class_names || a.meta.problem_name != b.meta.problem_name ||
      a.meta.equal_length != b.meta.equal_length || a.meta.original_lengths != b.meta.original_lengths ||
      a.samples.size() != b.samples.size())
    return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    if (a.samples[i].rows() != b.samples[i].rows() || a.samples[i].cols() != b.samples[i].cols()) return false;
    if (a.samples[i] != b.samples[i]) return false;
  }
  return true;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

struct Header {
  std::string problem_name;
  bool has_labels = false;
  std::vector<std::string> labels;
  long dimensions = -1;
  bool univariate_declared = false;
  bool univariate = false;
  std::optional<bool> equal_length;
  long series_length = -1;
};

bool parse_bool(const std::string& v, const std::string& source, std::size_t line, const std::string& key) {
  const auto l = lower(v);
  if (l == "true") return true;
  if (l == "false") return false;
  throw ParseError(source, line, "directive @" + key + " expects true or false, got '" + v + "'");
}

long parse_positive(const std::string& v, const std::string& source, std::size_t line, const std::string& key) {
  long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || out < 1)
    throw ParseError(source, line, "directive @" + key + " expects a positive integer, got '" + v + "'");
  return out;
}

void parse_directive(const std::string& text, Header& h, const std::string& source, std::size_t line) {
  auto tokens = words(text.substr(1));
  if (tokens.empty()) throw ParseError(source, line, "empty directive");
  const std::string key = lower(tokens.front());
  auto value = [&](std::size_t i = 1) -> const std::string& {
    if (tokens.size() <= i) throw ParseError(source, line, "directive @" + tokens.front() + " is missing its value");
    return tokens[i];
  };
  if (key == "problemname") {
    h.problem_name = value();
  } else if (key == "timestamps") {
    if (parse_bool(value(), source, line, key))
      throw ParseError(source, line, "timestamped series are not supported");
  } else if (key == "missing") {
    parse_bool(value(), source, line, key);
  } else if (key == "univariate") {
    h.univariate_declared = true;
    h.univariate = parse_bool(value(), source, line, key);
  } else if (key == "dimension" || key == "dimensions") {
    h.dimensions = parse_positive(value(), source, line, key);
  } else if (key == "equallength") {
    h.equal_length = parse_bool(value(), source, line, key);
  } else if (key == "serieslength") {
    h.series_length = parse_positive(value(), source, line, key);
  } else if (key == "classlabel") {
    h.has_labels = parse_bool(value(), source, line, key);
    if (h.has_labels) {
      h.labels.assign(tokens.begin() + 2, tokens.end());
      if (h.labels.empty()) throw ParseError(source, line, "@classLabel true declares no labels");
      std::vector<std::string> sorted = h.labels;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ParseError(source, line, "@classLabel declares a label twice");
    }
  } else if (key == "targetlabel") {
    throw ParseError(source, line, "regression targets are not supported");
  } else {
    throw ParseError(source, line, "unknown directive @" + tokens.front());
  }
}

std::vector<double> parse_values(const std::string& field, const std::string& source, std::size_t line) {
  std::vector<double> out;
  for (const auto& raw : split(field, ',')) {
    const std::string tok = trim(raw);
    if (tok.empty()) throw ParseError(source, line, "empty value in record");
    if (tok == "?") throw ParseError(source, line, "missing values are not supported");
    double v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size())
      throw ParseError(source, line, "malformed number '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

TimeSeriesDataset parse_ts(std::istream& in, const std::string& source) {
  Header header;
  bool in_data = false;
  std::map<std::string, int> label_index;
  std::vector<std::vector<std::vector<double>>> records;
  std::vector<int> labels;
  std::size_t line_no = 0;
  std::size_t data_line = 0;

  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (!in_data) {
      if (line.front() != '@') throw ParseError(source, line_no, "expected a directive before @data");
      if (lower(words(line).front()) == "@data") {
        if (!header.has_labels) throw ParseError(source, line_no, "@classLabel true <labels...> is required");
        for (std::size_t i = 0; i < header.labels.size(); ++i) label_index[header.labels[i]] = static_cast<int>(i);
        if (header.univariate_declared && header.univariate) {
          if (header.dimensions > 1) throw ParseError(source, line_no, "@univariate true conflicts with @dimensions");
          header.dimensions = 1;
        }
        in_data = true;
        data_line = line_no;
        continue;
      }
      parse_directive(line, header, source, line_no);
      continue;
    }

    auto fields = split(line, ':');
    if (fields.size() < 2) throw ParseError(source, line_no, "record has no class label field");
    const std::string label = trim(fields.back());
    fields.pop_back();
    if (header.dimensions < 0) header.dimensions = static_cast<long>(fields.size());
    if (static_cast<long>(fields.size()) != header.dimensions)
      throw ParseError(source, line_no,
                       "record has " + std::to_string(fields.size()) + " dimensions, expected " +
                           std::to_string(header.dimensions));
    auto it = label_index.find(label);
    if (it == label_index.end()) throw ParseError(source, line_no, "class label '" + label + "' was not declared");
    std::vector<std::vector<double>> dims;
    for (const auto& f : fields) {
      dims.push_back(parse_values(f, source, line_no));
      if (dims.back().size() != dims.front().size())
        throw ParseError(source, line_no, "dimensions of one record differ in length");
    }
    if (header.series_length > 0 && header.equal_length.value_or(false) &&
        static_cast<long>(dims.front().size()) != header.series_length)
      throw ParseError(source, line_no,
                       "series length " + std::to_string(dims.front().size()) + " differs from @seriesLength " +
                           std::to_string(header.series_length));
    records.push_back(std::move(dims));
    labels.push_back(it->second);
  }
  if (!in_data) throw ParseError(source, line_no, "no @data section");
  if (records.empty()) throw ParseError(source, data_line, "empty @data section");

  TimeSeriesDataset ds;
  ds.class_names = header.labels;
  ds.labels = std::move(labels);
  ds.meta.problem_name = header.problem_name;
  std::size_t max_len = 0;
  for (const auto& r : records) max_len = std::max(max_len, r.front().size());
  bool equal = true;
  for (const auto& r : records) {
    const auto len = r.front().size();
    equal = equal && len == max_len;
    MatrixXd sample = MatrixXd::Zero(static_cast<Index>(r.size()), static_cast<Index>(max_len));
    for (std::size_t d = 0; d < r.size(); ++d)
      for (std::size_t t = 0; t < len; ++t) sample(static_cast<Index>(d), static_cast<Index>(t)) = r[d][t];
    ds.samples.push_back(std::move(sample));
    ds.meta.original_lengths.push_back(static_cast<Index>(len));
  }
  ds.meta.equal_length = equal;
  return ds;
}

TimeSeriesDataset parse_ts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_ts(in, path.string());
}

void write_ts(std::ostream& out, const TimeSeriesDataset& ds) {
  if (ds.samples.empty()) throw std::invalid_argument("write_ts: empty dataset");
  out << "@problemName " << (ds.meta.problem_name.empty() ? "unnamed" : ds.meta.problem_name) << '\n'
      << "@timeStamps false\n@missing false\n"
      << "@univariate " << (ds.channels() == 1 ? "true" : "false") << '\n'
      << "@dimensions " << ds.channels() << '\n'
      << "@equalLength " << (ds.meta.equal_length ? "true" : "false") << '\n';
  if (ds.meta.equal_length) out << "@seriesLength " << ds.length() << '\n';
  out << "@classLabel true";
  for (const auto& name : ds.class_names) out << ' ' << name;
  out << "\n@data\n";
  char buf[64];
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const Index len = i < ds.meta.original_lengths.size() ? ds.meta.original_lengths[i] : s.cols();
    for (Index d = 0; d < s.rows(); ++d) {
      for (Index t = 0; t < len; ++t) {
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), s(d, t));
        if (t > 0) out << ',';
        out.write(buf, ptr - buf);
      }
      out << ':';
    }
    out << ds.class_names.at(static_cast<std::size_t>(ds.labels[i])) << '\n';
  }
}

TimeSeriesDataset pad_to_length(TimeSeriesDataset ds, Index length) {
  if (length < 1) throw std::invalid_argument("pad_to_length: length must be positive");
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto& s = ds.samples[i];
    MatrixXd resized = MatrixXd::Zero(s.rows(), length);
    const Index keep = std::min(length, s.cols());
    resized.leftCols(keep) = s.leftCols(keep);
    s = std::move(resized);
    if (i < ds.meta.original_lengths.size())
      ds.meta.original_lengths[i] = std::min(ds.meta.original_lengths[i], length);
  }
  return ds;
}

TimeSeriesDataset znormalize(TimeSeriesDataset ds) {
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto& s = ds.samples[i];
    const Index len = i < ds.meta.original_lengths.size() ? ds.meta.original_lengths[i] : s.cols();
    if (len == 0) continue;
    for (Index d = 0; d < s.rows(); ++d) {
      auto seg = s.row(d).head(len);
      const double mu = seg.mean();
      const double sd = std::sqrt((seg.array() - mu).square().mean());
      if (sd < 1e-8)
        seg.setZero();
      else
        seg = ((seg.array() - mu) / sd).matrix();
    }
  }
  return ds;
}

SplitIndices stratified_split_indices(const TimeSeriesDataset& ds, double fraction, std::uint64_t seed,
                                      std::vector<std::string>* warnings) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("stratified_split: fraction must lie in (0, 1)");
  std::mt19937_64 rng(seed);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) by_class[ds.labels[i]].push_back(i);
  SplitIndices out;
  for (auto& [label, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<long>(idx.size());
    long n_train = std::lround(fraction * static_cast<double>(n));
    if (n == 1) {
      n_train = 1;
      if (warnings) {
        const std::string name =
            label >= 0 && label < ds.classes() ? ds.class_names[static_cast<std::size_t>(label)] : std::to_string(label);
        warnings->push_back("class '" + name + "' has a single sample; it is kept in the training split");
      }
    } else {
      n_train = std::clamp(n_train, 1L, n - 1);
    }
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + n_train);
    out.validation.insert(out.validation.end(), idx.begin() + n_train, idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  return out;
}

std::pair<TimeSeriesDataset, TimeSeriesDataset> stratified_split(const TimeSeriesDataset& ds, double fraction,
                                                                 std::uint64_t seed,
                                                                 std::vector<std::string>* warnings) {
  const auto idx = stratified_split_indices(ds, fraction, seed, warnings);
  return {ds.subset(idx.train), ds.subset(idx.validation)};
}

TimeSeriesDataset synth_order_task(Index n, Index length, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synth_order_task: n must be positive");
  if (length < 2 || length % 2 != 0) throw std::invalid_argument("synth_order_task: length must be even and >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::uniform_int_distribution<Index> half(0, length / 2 - 1);
  TimeSeriesDataset ds;
  ds.class_names = {"first_half", "second_half"};
  ds.meta.problem_name = "SynthOrder";
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    MatrixXd s(1, length);
    for (Index t = 0; t < length; ++t) s(0, t) = noise(rng);
    const Index pulse = half(rng) + (label == 1 ? length / 2 : 0);
    s(0, pulse) += 1.0;
    ds.samples.push_back(std::move(s));
    ds.labels.push_back(label);
    ds.meta.original_lengths.push_back(length);
  }
  return ds;
}

nlohmann::json dataset_to_json(const TimeSeriesDataset& ds) {
  nlohmann::json tensors = nlohmann::json::object();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) tensors["sample." + std::to_string(i)] = tensor_to_json(ds.samples[i]);
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"kind", "dataset"},
          {"problem_name", ds.meta.problem_name},
          {"equal_length", ds.meta.equal_length},
          {"original_lengths", ds.meta.original_lengths},
          {"class_names", ds.class_names},
          {"labels", ds.labels},
          {"tensors", tensors}};
}

TimeSeriesDataset dataset_from_json(const nlohmann::json& j) {
  check_container(j, "dataset");
  TimeSeriesDataset ds;
  ds.meta.problem_name = j.at("problem_name").get<std::string>();
  ds.meta.equal_length = j.at("equal_length").get<bool>();
  ds.meta.original_lengths = j.at("original_lengths").get<std::vector<Index>>();
  ds.class_names = j.at("class_names").get<std::vector<std::string>>();
  ds.labels = j.at("labels").get<std::vector<int>>();
  const auto& tensors = j.at("tensors");
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    ds.samples.push_back(tensor_from_json(tensors.at("sample." + std::to_string(i))));
  return ds;
}

}  // namespace convtran
