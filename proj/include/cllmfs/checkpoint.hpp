// SPDX-License-Identifier: Apache-2.0
//
// On-disk layout: a directory holding manifest.json and tensors.bin. The blob
// is the concatenation of every tensor as little-endian float64; the manifest
// lists {name, shape, offset} per tensor next to free-form metadata.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cllmfs/lora.hpp"
#include "cllmfs/sft.hpp"

namespace cllmfs {

inline constexpr int kCheckpointFormatVersion = 1;

struct TensorBundle {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void save_bundle(const std::filesystem::path& dir, const TensorBundle& bundle);
TensorBundle load_bundle(const std::filesystem::path& dir);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LoraSpec& spec);
LoraSpec lora_spec_from_json(const nlohmann::json& j);

// Copies values from `bundle` into same-named tensors of `into`; shape
// mismatches and missing names are data errors.
void restore_tensors(const TensorBundle& bundle, const std::vector<std::pair<std::string, Tensor>>& into);

}  // namespace cllmfs
