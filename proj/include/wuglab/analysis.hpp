#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wuglab/battery.hpp"
#include "wuglab/eval.hpp"

namespace wuglab::stats {

inline constexpr double kChance = 0.5;
inline constexpr double kH1AboveChance = 0.15;
inline constexpr double kH1AboveScrambled = 0.10;
inline constexpr double kH2Ratio = 0.75;
inline constexpr double kChanceBandLow = 0.40;
inline constexpr double kChanceBandHigh = 0.60;
inline constexpr double kLabelAlpha = 0.025;
inline constexpr double kTrendAlpha = 0.05;
inline constexpr double kKlCriterion = 0.1;
inline constexpr double kTostBoundPp = 10.0;
inline constexpr double kSwapCuedMin = 0.90;
inline constexpr double kSwapNounMax = 0.35;
inline constexpr double kSwapAlpha = 0.001;

struct Tally {
  int n = 0;
  int correct = 0;
  double accuracy() const { return n > 0 ? static_cast<double>(correct) / n : 0.0; }
};

// One evaluated run reduced to what the hypothesis tests consume.
struct RunSummary {
  std::string condition;
  std::string size_tag;
  std::uint64_t seed = 0;
  double fraction = 1.0;
  std::string results_md5;
  std::map<battery::ItemType, Tally> tallies;
  std::vector<double> so_outcomes;  // 0/1 per SO item, in item order
  std::optional<double> kl_nats;

  std::optional<double> accuracy(battery::ItemType t) const;
};

RunSummary summarize_run(const std::vector<eval::RunResultRow>& rows, double fraction, const std::string& results_md5);

// Run ids are "<condition>/<size>/<seed>" with an optional "/f<fraction>".
struct RunKey {
  std::string condition;
  std::string size_tag;
  std::uint64_t seed = 0;
  double fraction = 1.0;

  std::string id() const;
  static RunKey parse(const std::string& id);
  auto operator<=>(const RunKey&) const = default;
};

// Verdicts for every hypothesis with enough data, per size tag. Cells
// without data are reported as "insufficient-data", never imputed.
nlohmann::json analyze(const std::vector<RunSummary>& runs);

}  // namespace wuglab::stats
