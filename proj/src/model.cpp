#include "eamser/model.hpp"

namespace eamser {

const char* to_string(Aggregation a) noexcept {
  switch (a) {
    case Aggregation::flam: return "flam";
    case Aggregation::maxpool: return "maxpool";
    case Aggregation::meanpool: return "meanpool";
  }
  return "flam";
}

Aggregation parse_aggregation(const std::string& s) {
  if (s == "flam") return Aggregation::flam;
  if (s == "maxpool") return Aggregation::maxpool;
  if (s == "meanpool") return Aggregation::meanpool;
  throw Error(Errc::invalid_argument, "unknown aggregation '" + s + "'");
}

void ModelConfig::validate() const {
  if (feature_dim < 1 || n_classes < 1 || proj_dim < 1 || heads < 1)
    throw Error(Errc::invalid_argument, "model dimensions must be positive");
  if (feature_dim % heads != 0)
    throw Error(Errc::shape_mismatch, "feature dimension " + std::to_string(feature_dim) +
                                          " not divisible by " + std::to_string(heads) + " heads");
}

}  // namespace eamser
