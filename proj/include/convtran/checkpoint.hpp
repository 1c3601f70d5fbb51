#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "convtran/model.hpp"
#include "convtran/types.hpp"

namespace convtran {

inline constexpr const char* kCheckpointFormat = "convtran-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// {"rows", "cols", "data"} with row-major data; doubles round-trip exactly.
nlohmann::json tensor_to_json(const MatrixXd& m);
MatrixXd tensor_from_json(const nlohmann::json& j);

/// Throws std::runtime_error unless `j` is a container of the given kind
/// with a supported version.
void check_container(const nlohmann::json& j, const std::string& kind);

nlohmann::json model_to_json(ConvTranNet<double>& net);
ConvTranNet<double> model_from_json(const nlohmann::json& j);

void save_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json load_json(const std::filesystem::path& path);

}  // namespace convtran
