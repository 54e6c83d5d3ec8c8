#pragma once

#include <string>
#include <utility>
#include <vector>

#include "apforge/dataset.hpp"
#include "apforge/tensor.hpp"

namespace apf {

/// Named-tensor container file, "APBT" format:
///   magic "APBT", version u16, entry count u32;
///   per entry: name length u16, name bytes, rank u8, dims u32 each,
///   CRC32 of payload u32, payload as little-endian f32.
/// All integers little-endian.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void archive_save(const NamedTensors& tensors, const std::string& path);
NamedTensors archive_load(const std::string& path);

/// PerturbationSet persistence: archive holding "deltas" plus a
/// key=value sidecar at path + ".meta".
void save_perturbations(const PerturbationSet& pert, const std::string& path);
PerturbationSet load_perturbations(const std::string& path);

}  // namespace apf
