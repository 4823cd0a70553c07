#pragma once

#include "gprune/toymodel.hpp"

#include <map>
#include <string>
#include <vector>

namespace gprune {

// Model weights plus the tokenizer vocabulary and any extra named tensors
// (learned thresholds, for example) carried in the same container.
struct ModelBundle {
  ModelWeights weights;
  std::vector<std::string> vocab;
  std::map<std::string, Mat> extras;
};

inline constexpr int kCheckpointVersion = 1;

// Container layout: a text header ("key = value" lines and "tensor name rows cols offset"
// entries, terminated by "end\n") followed by raw little-endian float64 payloads, row-major.
// The header carries FNV-1a checksums of itself and of the payload.
void checkpoint_save(const ModelBundle& bundle, const std::string& path);
ModelBundle checkpoint_load(const std::string& path);

std::string checkpoint_serialize(const ModelBundle& bundle);
ModelBundle checkpoint_deserialize(const std::string& bytes);

std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t v);

}  // namespace gprune
