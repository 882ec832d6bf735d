#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "wuglab/battery.hpp"
#include "wuglab/corpus.hpp"

using namespace wuglab;
using battery::ItemType;
using corpus::Condition;

namespace {

struct Fixture {
  corpus::Corpus corpus;
  battery::Battery battery;
};

const Fixture& fixture(Condition c) {
  static std::map<Condition, Fixture> cache;
  auto it = cache.find(c);
  if (it == cache.end()) {
    auto corp = corpus::generate_corpus(corpus::make_spec(c, 42));
    auto b = battery::build_battery(corp, 1042);
    it = cache.emplace(c, Fixture{std::move(corp), std::move(b)}).first;
  }
  return it->second;
}

bool in_dim(const corpus::NonceLexicon& lex, corpus::FeatureDim d, const std::string& w) {
  const auto& t = lex.tokens(d);
  return std::find(t.begin(), t.end(), w) != t.end();
}

std::string trim(const std::string& s) { return s.substr(s.find_first_not_of(' ')); }

}  // namespace

TEST(Allocation, SumsToBatterySizeForEveryCondition) {
  for (auto c : corpus::kAllConditions) {
    int total = 0;
    for (const auto& [t, n] : battery::allocation(c)) total += n;
    EXPECT_EQ(total, battery::kBatterySize) << corpus::to_string(c);
    const auto a = battery::allocation(c);
    EXPECT_EQ(a.at(ItemType::FirstOrder), 80);
    EXPECT_EQ(a.at(ItemType::SecondOrder), 200);
    EXPECT_EQ(a.at(ItemType::FrameVariant), 80);
  }
}

TEST(Battery, CountsMatchItemsAndValidate) {
  for (auto c : {Condition::Regular, Condition::Scrambled, Condition::FeatureSwap, Condition::BareNoLabel}) {
    const auto& f = fixture(c);
    EXPECT_EQ(f.battery.items.size(), static_cast<std::size_t>(battery::kBatterySize));
    std::map<ItemType, int> counted;
    for (const auto& it : f.battery.items) counted[it.item_type]++;
    for (const auto& [t, n] : f.battery.counts) EXPECT_EQ(counted[t], n) << battery::to_string(t);
    const auto v = battery::validate_battery(f.battery, f.corpus);
    EXPECT_TRUE(v.ok()) << (v.ok() ? "" : v.violations.front());
  }
}

TEST(Battery, ItemIdsAreUnique) {
  std::set<std::string> ids;
  for (const auto& it : fixture(Condition::Regular).battery.items) EXPECT_TRUE(ids.insert(it.item_id).second);
}

TEST(Battery, TargetDiffersFromFoil) {
  for (const auto& it : fixture(Condition::FeatureSwap).battery.items)
    EXPECT_NE(it.target_completion, it.foil_completion) << it.item_id;
}

TEST(Battery, SecondOrderCoversNovelKindsEvenlyWithShapeOptions) {
  const auto& f = fixture(Condition::Regular);
  const auto& lex = f.corpus.spec.lexicon;
  std::map<int, int> per_kind;
  for (const auto& it : f.battery.items) {
    if (it.item_type != ItemType::SecondOrder) continue;
    per_kind[it.kind_id]++;
    EXPECT_TRUE(f.corpus.spec.kind(it.kind_id).is_novel);
    EXPECT_TRUE(in_dim(lex, corpus::FeatureDim::Shape, trim(it.target_completion))) << it.item_id;
    EXPECT_TRUE(in_dim(lex, corpus::FeatureDim::Shape, trim(it.foil_completion))) << it.item_id;
    EXPECT_EQ(trim(it.target_completion), f.corpus.spec.kind(it.kind_id).stable_token);
  }
  EXPECT_EQ(per_kind.size(), static_cast<std::size_t>(corpus::kNovelKinds));
  for (const auto& [k, n] : per_kind) EXPECT_EQ(n, 25);
}

TEST(Battery, FirstOrderUsesTheCorpusKeyAndSameDimensionFoils) {
  for (auto c : {Condition::Regular, Condition::Scrambled}) {
    const auto& f = fixture(c);
    const auto& lex = f.corpus.spec.lexicon;
    for (const auto& it : f.battery.items) {
      if (it.item_type != ItemType::FirstOrder) continue;
      const auto& k = f.corpus.spec.kind(it.kind_id);
      EXPECT_FALSE(k.is_novel);
      EXPECT_EQ(trim(it.target_completion), k.stable_token);
      EXPECT_TRUE(in_dim(lex, k.stable_dim, trim(it.foil_completion))) << it.item_id;
    }
  }
}

TEST(Battery, NovelNounsAreAbsentFromTrainingText) {
  for (auto c : {Condition::Regular, Condition::FeatureSwap}) {
    const auto& f = fixture(c);
    const auto freq = f.corpus.token_frequencies();
    for (const auto& it : f.battery.items)
      if (it.item_type == ItemType::SecondOrder || it.item_type == ItemType::FrameVariant)
        EXPECT_EQ(freq.count(it.noun), 0u) << it.item_id;
  }
}

TEST(Battery, FrameVariantsUseHeldOutFramesOnly) {
  const auto held = corpus::held_out_frames();
  for (const auto& it : fixture(Condition::Regular).battery.items)
    if (it.item_type == ItemType::FrameVariant)
      EXPECT_NE(std::find(held.begin(), held.end(), it.frame_id), held.end()) << it.item_id;
}

TEST(Battery, HardDistractorFoilIsAnotherTrainedKindsStableToken) {
  const auto& f = fixture(Condition::Regular);
  std::set<std::string> stable;
  for (const auto& k : f.corpus.spec.kinds)
    if (!k.is_novel) stable.insert(k.stable_token);
  int n = 0;
  for (const auto& it : f.battery.items) {
    if (it.item_type != ItemType::HardDistractor) continue;
    ++n;
    EXPECT_TRUE(stable.count(trim(it.foil_completion))) << it.item_id;
  }
  EXPECT_GT(n, 0);
}

TEST(Battery, FeatureSwapItemsOnlyInFeatureSwapCorpora) {
  auto count = [](const battery::Battery& b, ItemType t) {
    return std::count_if(b.items.begin(), b.items.end(), [&](const auto& it) { return it.item_type == t; });
  };
  const auto& fs = fixture(Condition::FeatureSwap).battery;
  EXPECT_GT(count(fs, ItemType::SwapFrameCued), 0);
  EXPECT_GT(count(fs, ItemType::SwapNounOnly), 0);
  EXPECT_EQ(count(fixture(Condition::Regular).battery, ItemType::SwapFrameCued), 0);
  for (const auto& it : fs.items) {
    if (it.item_type == ItemType::SwapNounOnly) EXPECT_EQ(it.prompt, "A " + it.noun + " is a") << it.item_id;
    if (it.item_type == ItemType::SwapFrameCued) EXPECT_NE(it.prompt, "A " + it.noun + " is a") << it.item_id;
  }
}

TEST(Battery, OneShotItemsCarryContext) {
  for (const auto& it : fixture(Condition::Regular).battery.items)
    if (battery::is_one_shot(it.item_type)) EXPECT_TRUE(it.context_prefix.has_value()) << it.item_id;
}

TEST(Battery, BuildIsDeterministicAndSaveLoadRoundTrips) {
  const auto& f = fixture(Condition::Regular);
  const auto again = battery::build_battery(f.corpus, 1042);
  EXPECT_EQ(again.to_json(), f.battery.to_json());
  const auto path = std::filesystem::temp_directory_path() / "wuglab_test_battery.json";
  f.battery.save(path);
  EXPECT_EQ(battery::Battery::load(path).to_json(), f.battery.to_json());
  std::filesystem::remove(path);
}

TEST(Battery, ValidationCatchesLeakedNovelNoun) {
  const auto& f = fixture(Condition::Regular);
  auto corp = f.corpus;
  const auto& novel = *std::find_if(corp.spec.kinds.begin(), corp.spec.kinds.end(),
                                    [](const auto& k) { return k.is_novel; });
  corp.sentences.push_back("A " + novel.noun + " is here");
  EXPECT_FALSE(battery::validate_battery(f.battery, corp).ok());
}

TEST(Battery, ValidationCatchesWrongTarget) {
  const auto& f = fixture(Condition::Regular);
  auto b = f.battery;
  for (auto& it : b.items)
    if (it.item_type == ItemType::FirstOrder) {
      std::swap(it.target_completion, it.foil_completion);
      break;
    }
  EXPECT_FALSE(battery::validate_battery(b, f.corpus).ok());
}

TEST(ItemType, NamesRoundTrip) {
  for (auto t : battery::kAllItemTypes) EXPECT_EQ(battery::parse_item_type(battery::to_string(t)), t);
}
