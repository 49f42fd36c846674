// SPDX-License-Identifier: Apache-2.0
#include "umseg/model.hpp"

namespace umseg {

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::encoder_decoder ? "encoder-decoder" : "dilated";
}

BackboneKind parse_backbone_kind(const std::string& text) {
  if (text == "encoder-decoder") return BackboneKind::encoder_decoder;
  if (text == "dilated") return BackboneKind::dilated;
  throw ValidationError("unknown backbone kind '" + text + "' (expected encoder-decoder or dilated)");
}

std::string to_string(Activation act) { return act == Activation::relu ? "relu" : "none"; }

Activation parse_activation(const std::string& text) {
  if (text == "relu") return Activation::relu;
  if (text == "none") return Activation::none;
  throw ValidationError("unknown head activation '" + text + "' (expected relu or none)");
}

std::vector<Index> tile_starts(Index extent, Index patch, double overlap) {
  if (patch < 1 || extent < patch)
    throw ValidationError("tile_starts: patch " + std::to_string(patch) + " does not fit extent " +
                          std::to_string(extent));
  const Index stride = std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
  std::vector<Index> starts;
  for (Index s = 0;; s += stride) {
    if (s + patch >= extent) {
      starts.push_back(extent - patch);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

}  // namespace umseg
