#include "convtran/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace convtran {

nlohmann::json tensor_to_json(const MatrixXd& m) {
  std::vector<double> data(m.data(), m.data() + m.size());
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

MatrixXd tensor_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols)
    throw std::runtime_error("checkpoint: tensor data does not match its shape");
  MatrixXd m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

void check_container(const nlohmann::json& j, const std::string& kind) {
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat)
    throw std::runtime_error("checkpoint: not a " + std::string(kCheckpointFormat) + " file");
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  if (j.value("kind", "") != kind)
    throw std::runtime_error("checkpoint: expected kind '" + kind + "', found '" + j.value("kind", "") + "'");
}

nlohmann::json model_to_json(ConvTranNet<double>& net) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, value] : net.snapshot()) tensors[name] = tensor_to_json(value);
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"kind", "model"},
          {"config", to_json(net.config())},
          {"tensors", tensors}};
}

ConvTranNet<double> model_from_json(const nlohmann::json& j) {
  check_container(j, "model");
  ConvTranNet<double> net(model_config_from_json(j.at("config")));
  ConvTranNet<double>::Snapshot snap;
  for (const auto& [name, t] : j.at("tensors").items()) snap.emplace(name, tensor_from_json(t));
  net.restore(snap);
  return net;
}

void save_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace convtran
