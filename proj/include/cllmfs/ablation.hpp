// SPDX-License-Identifier: Apache-2.0
//
// Ablation sweeps over training components and LoRA target sets. Each row is
// a full protocol run; the published reference F1 is carried alongside.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cllmfs/episodes.hpp"

namespace cllmfs {

enum class AblationAxis { modules, lora_targets };
AblationAxis parse_ablation_axis(std::string_view text);
const char* to_string(AblationAxis axis);

struct AblationRow {
  std::string label;
  double reference_f1 = 0.0;
  RunSettings settings;
  ProtocolResult result;
};

// Rows in the published order, settings derived from `base`. The modules axis
// toggles the contrastive term (λ) and embedding noise; the target axis swaps
// the LoRA target set and keeps everything else.
std::vector<AblationRow> ablation_rows(AblationAxis axis, const RunSettings& base);

std::vector<AblationRow> run_ablation(AblationAxis axis, const ProtocolSpec& spec, const RunSettings& base,
                                      const std::function<void(const AblationRow&)>& on_row = {});

std::string ablation_table(const std::vector<AblationRow>& rows);
nlohmann::json ablation_json(AblationAxis axis, const std::vector<AblationRow>& rows);

}  // namespace cllmfs
