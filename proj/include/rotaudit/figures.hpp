#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rotaudit/bars.hpp"
#include "rotaudit/steering.hpp"

// Figure data: plain CSVs derived from report JSONs, byte-stable for a fixed
// report set.
namespace rotaudit::figures {

/// Report wrappers for the non-audit figure inputs.
nlohmann::json effects_report(std::uint64_t seed, const bars::ComponentEffects& e);
nlohmann::json steering_report(const std::vector<steering::TransferCurve>& curves,
                               const std::vector<steering::RegimeResult>& regimes);

struct FigureOptions {
  int frob_bins = 40;
  int angle_bins = 36;
};

/// Writes ev.csv, frob_hist.csv, eigen_angles.csv (from "audit" reports),
/// steering.csv (from "steering") and ig_ap.csv (from "component_effects").
/// A file is written only when its inputs are present. Returns the paths written.
std::vector<std::filesystem::path> emit_figures(const std::vector<nlohmann::json>& reports,
                                                const std::filesystem::path& out_dir,
                                                const FigureOptions& options = {});

/// Every *.json under `dir` (sorted by name) that carries a "kind" field;
/// empty when `dir` does not exist.
std::vector<nlohmann::json> load_reports(const std::filesystem::path& dir);

}  // namespace rotaudit::figures
