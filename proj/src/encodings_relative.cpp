#include "convtran/encodings_relative.hpp"

namespace convtran {

IndexMap erpe_index_map(Index length) {
  if (length < 1) throw std::invalid_argument("erpe_index_map: length must be at least 1");
  IndexMap idx(length, length);
  for (Index i = 0; i < length; ++i)
    for (Index j = 0; j < length; ++j) idx(i, j) = static_cast<std::int32_t>(i - j + length - 1);
  return idx;
}

IndexMap shaw_index_map(Index length, Index clip) {
  if (clip < 0) throw std::invalid_argument("shaw_index_map: clip distance must be non-negative");
  IndexMap idx(length, length);
  for (Index i = 0; i < length; ++i)
    for (Index j = 0; j < length; ++j) idx(i, j) = static_cast<std::int32_t>(clip_distance(i - j, clip) + clip);
  return idx;
}

IndexMap vector_index_map(Index length) {
  IndexMap idx(length, length);
  for (Index i = 0; i < length; ++i)
    for (Index j = 0; j < length; ++j) idx(i, j) = j <= i ? static_cast<std::int32_t>(length - 1 - (i - j)) : -1;
  return idx;
}

EncodingMethod parse_encoding_method(std::string_view name) {
  if (name == "tape" || name == "tAPE") return EncodingMethod::TAPE;
  if (name == "vanilla" || name == "VanillaAPE") return EncodingMethod::VanillaAPE;
  if (name == "learned" || name == "Learned" || name == "learn") return EncodingMethod::Learned;
  if (name == "shaw" || name == "Shaw") return EncodingMethod::Shaw;
  if (name == "vector" || name == "Vector") return EncodingMethod::Vector;
  if (name == "erpe" || name == "eRPE") return EncodingMethod::ERPE;
  throw std::invalid_argument("unknown encoding method '" + std::string(name) + "'");
}

std::string_view to_string(EncodingMethod method) {
  switch (method) {
    case EncodingMethod::TAPE: return "tAPE";
    case EncodingMethod::VanillaAPE: return "VanillaAPE";
    case EncodingMethod::Learned: return "Learned";
    case EncodingMethod::Shaw: return "Shaw";
    case EncodingMethod::Vector: return "Vector";
    case EncodingMethod::ERPE: return "eRPE";
  }
  return "unknown";
}

ComplexityReport complexity_report(EncodingMethod method, Index length, Index d_z, const ComplexityOptions& opts) {
  if (length < 1 || d_z < 1) throw std::invalid_argument("complexity_report: L and d_z must be positive");
  const long long L = length;
  const long long d = d_z;
  ComplexityReport r{method, length, d_z};
  switch (method) {
    case EncodingMethod::TAPE:
    case EncodingMethod::VanillaAPE:
      r.params = 0;
      r.encoding_cells = L * d;
      r.mult_adds = L * d;
      break;
    case EncodingMethod::Learned:
      r.params = L * d;
      r.encoding_cells = L * d;
      r.mult_adds = L * d;
      break;
    case EncodingMethod::Shaw:
      r.params = (2 * L - 1) * d * (opts.shaw_values ? 2 : 1);
      r.encoding_cells = L * L * d;
      r.pairwise_cells = L * L;
      r.mult_adds = L * L * d;
      break;
    case EncodingMethod::Vector:
      r.params = L * d;
      r.encoding_cells = L * d;
      r.pairwise_cells = L * L;
      r.mult_adds = L * L * d;
      break;
    case EncodingMethod::ERPE:
      r.params = (2 * L - 1) * opts.heads;
      r.encoding_cells = L;
      r.pairwise_cells = L * L;
      r.mult_adds = L * L;
      break;
  }
  r.memory_cells = r.encoding_cells + r.pairwise_cells;
  return r;
}

nlohmann::json to_json(const ComplexityReport& r) {
  return {{"method", std::string(to_string(r.method))},
          {"L", r.length},
          {"d_z", r.d_z},
          {"params", r.params},
          {"memory_cells", r.memory_cells},
          {"mult_adds", r.mult_adds},
          {"memory_breakdown", {{"encoding", r.encoding_cells}, {"pairwise", r.pairwise_cells}}}};
}

}  // namespace convtran
