// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/ablation.hpp"

#include <iomanip>
#include <sstream>

#include "cllmfs/error.hpp"

namespace cllmfs {

AblationAxis parse_ablation_axis(std::string_view text) {
  if (text == "modules") return AblationAxis::modules;
  if (text == "lora-targets") return AblationAxis::lora_targets;
  throw Error(ErrorKind::config, "unknown ablation axis '" + std::string(text) + "' (modules, lora-targets)");
}

const char* to_string(AblationAxis axis) { return axis == AblationAxis::modules ? "modules" : "lora-targets"; }

std::vector<AblationRow> ablation_rows(AblationAxis axis, const RunSettings& base) {
  std::vector<AblationRow> rows;
  if (axis == AblationAxis::modules) {
    const double lambda = base.train.lambda > 0.0 ? base.train.lambda : TrainConfig{}.lambda;
    auto row = [&](std::string label, double ref, double lam, bool noise) {
      AblationRow r{std::move(label), ref, base, {}};
      r.settings.train.lambda = lam;
      r.settings.train.noise.enabled = noise;
      rows.push_back(std::move(r));
    };
    row("LoRA", 0.375, 0.0, false);
    row("LoRA + CL", 0.377, lambda, false);
    row("LoRA + CL + Noise", 0.384, lambda, true);
    return rows;
  }
  const std::vector<std::pair<const char*, double>> table = {
      {"q", 0.281},          {"k", 0.283},           {"v", 0.350},
      {"q,k", 0.329},        {"q,v", 0.370},         {"q,k,v", 0.367},
      {"q,k,v,o", 0.360},    {"q,k,v,o,in", 0.368},  {"q,k,v,in", 0.375},
      {"q,k,v,in,out", 0.372}, {"q,k,v,in,out,wte", 0.373}, {"q,k,v,o,in,out,wte", 0.352},
  };
  for (const auto& [targets, ref] : table) {
    AblationRow r{targets, ref, base, {}};
    r.settings.lora.targets = parse_lora_targets(targets);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<AblationRow> run_ablation(AblationAxis axis, const ProtocolSpec& spec, const RunSettings& base,
                                      const std::function<void(const AblationRow&)>& on_row) {
  auto rows = ablation_rows(axis, base);
  for (auto& r : rows) {
    try {
      r.result = run_protocol(spec, r.settings);
    } catch (const Error& e) {
      throw Error(e.kind(), "ablation row '" + r.label + "': " + e.what());
    }
    if (on_row) on_row(r);
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::size_t width = 12;
  for (const auto& r : rows) width = std::max(width, r.label.size() + 2);
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << std::left << std::setw(static_cast<int>(width)) << "config"
     << std::setw(10) << "published" << std::setw(10) << "toy F1" << std::setw(10) << "± std" << "runs\n";
  for (const auto& r : rows) {
    os << std::setw(static_cast<int>(width)) << r.label << std::setw(10) << r.reference_f1 << std::setw(10)
       << r.result.mean_f1 << std::setw(10) << r.result.std_f1 << r.result.runs.size() << '\n';
  }
  return os.str();
}

nlohmann::json ablation_json(AblationAxis axis, const std::vector<AblationRow>& rows) {
  nlohmann::json out = {{"axis", to_string(axis)}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows) {
    out["rows"].push_back({{"config", r.label},
                           {"published_f1", r.reference_f1},
                           {"mean_f1", r.result.mean_f1},
                           {"std_f1", r.result.std_f1},
                           {"runs", r.result.to_json()["runs"]}});
  }
  return out;
}

}  // namespace cllmfs
