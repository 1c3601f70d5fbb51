#include "convtran/attention.hpp"

namespace convtran {

std::string_view to_string(RelativeKind kind) {
  switch (kind) {
    case RelativeKind::None: return "none";
    case RelativeKind::Shaw: return "shaw";
    case RelativeKind::Vector: return "vector";
    case RelativeKind::ERPE: return "erpe";
  }
  return "unknown";
}

RelativeKind parse_relative_kind(std::string_view name) {
  if (name == "none") return RelativeKind::None;
  if (name == "shaw") return RelativeKind::Shaw;
  if (name == "vector") return RelativeKind::Vector;
  if (name == "erpe") return RelativeKind::ERPE;
  throw std::invalid_argument("unknown relative encoding '" + std::string(name) + "' (none|shaw|vector|erpe)");
}

}  // namespace convtran
