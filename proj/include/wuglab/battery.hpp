#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wuglab/corpus.hpp"

namespace wuglab::battery {

enum class ItemType {
  FirstOrder,
  SecondOrder,
  FrameVariant,
  SwapFrameCued,
  SwapNounOnly,
  SlotShuffle,
  HardDistractor,
  FreqMatchedFoil,
  NoLabelMatched,
  AmbiguousExemplar,
  CountShape,
  MassTexture,
  OneShotInContext,
  OneShotControl,
};
inline constexpr int kNumItemTypes = 14;
inline constexpr std::array<ItemType, kNumItemTypes> kAllItemTypes = {
    ItemType::FirstOrder,      ItemType::SecondOrder,     ItemType::FrameVariant,
    ItemType::SwapFrameCued,   ItemType::SwapNounOnly,    ItemType::SlotShuffle,
    ItemType::HardDistractor,  ItemType::FreqMatchedFoil, ItemType::NoLabelMatched,
    ItemType::AmbiguousExemplar, ItemType::CountShape,    ItemType::MassTexture,
    ItemType::OneShotInContext, ItemType::OneShotControl};
inline constexpr int kBatterySize = 1040;

std::string_view to_string(ItemType t);
// Short prefix used in item ids ("FO", "SO", ...).
std::string_view id_prefix(ItemType t);
ItemType parse_item_type(std::string_view s);
bool is_one_shot(ItemType t);

struct WugItem {
  std::string item_id;
  ItemType item_type = ItemType::FirstOrder;
  std::string prompt;  // sentence prefix ending just before the target slot
  std::string target_completion;
  std::string foil_completion;
  int kind_id = -1;
  int frame_id = -1;
  std::optional<std::string> context_prefix;
  std::string noun;  // word in the noun slot (noun or marker)
  corpus::FeatureDim target_dim = corpus::FeatureDim::Shape;
  corpus::FeatureDim foil_dim = corpus::FeatureDim::Shape;

  nlohmann::json to_json() const;
  static WugItem from_json(const nlohmann::json& j);
};

struct Battery {
  std::vector<WugItem> items;
  std::map<ItemType, int> counts;
  std::string corpus_md5;
  corpus::Condition condition = corpus::Condition::Regular;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
  static Battery from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Battery load(const std::filesystem::path& path);
};

// Items per type for a corpus condition. Non-FeatureSwap corpora have no
// domain-B kinds, so the 160 swap items move to the control types.
std::map<ItemType, int> allocation(corpus::Condition condition);

Battery build_battery(const corpus::Corpus& corpus, std::uint64_t seed);

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

ValidationReport validate_battery(const Battery& battery, const corpus::Corpus& corpus);

}  // namespace wuglab::battery
