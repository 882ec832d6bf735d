#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "wuglab/battery.hpp"
#include "wuglab/corpus.hpp"
#include "wuglab/eval.hpp"
#include "wuglab/lm.hpp"
#include "wuglab/tokenizer.hpp"

using namespace wuglab;
using battery::ItemType;

namespace {

struct Fixture {
  corpus::Corpus corpus;
  tok::BpeModel bpe;
  battery::Battery battery;
  lm::LanguageModel model;
  std::vector<eval::RunResultRow> rows;
};

// An untrained model over the real tokenizer and battery.
const Fixture& fixture() {
  static const Fixture f = [] {
    auto corp = corpus::generate_corpus(corpus::make_spec(corpus::Condition::Regular, 42));
    auto bpe = tok::fit_bpe(corp);
    auto bat = battery::build_battery(corp, 1042);
    lm::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.vocab_size = bpe.vocab_size();
    cfg.dropout = 0;
    lm::Transformer<float> net(cfg);
    net.init(9);
    lm::LanguageModel model(std::move(net));
    const eval::RunInfo info{"regular/test/0", "regular", "test", 0};
    auto rows = eval::run_forced_choice(model, bpe, bat, corp.spec.lexicon, info);
    return Fixture{std::move(corp), std::move(bpe), std::move(bat), std::move(model), std::move(rows)};
  }();
  return f;
}

}  // namespace

TEST(EncodeItem, CriticalPositionIsTheLastPromptToken) {
  const auto& f = fixture();
  for (const auto& it : f.battery.items) {
    const auto e = eval::encode_item(f.bpe, it);
    ASSERT_FALSE(e.target.empty());
    EXPECT_EQ(e.critical_position, static_cast<int>(e.prompt.size()) - 1);
    EXPECT_EQ(e.prompt.front(), tok::kBos);
    if (it.context_prefix) {
      const auto bare = eval::encode_item(f.bpe, it, false);
      EXPECT_GT(e.prompt.size(), bare.prompt.size());
    }
    if (e.noun_final_position >= 0) {
      EXPECT_LE(e.noun_final_position, e.critical_position);
      EXPECT_EQ(f.bpe.piece(e.prompt[static_cast<std::size_t>(e.noun_final_position)]), " " + it.noun);
    }
  }
}

TEST(ForcedChoice, OneRowPerItemWithConsistentFlags) {
  const auto& f = fixture();
  ASSERT_EQ(f.rows.size(), f.battery.items.size());
  for (const auto& r : f.rows) {
    const double d = r.logp_target - r.logp_foil;
    EXPECT_EQ(r.tie, std::abs(d) <= eval::kTieTolerance) << r.item_id;
    if (!r.tie) EXPECT_EQ(r.correct, d > 0 ? 1 : 0) << r.item_id;
    else EXPECT_EQ(r.correct, 0);
    EXPECT_GE(r.rank_target, 1);
    EXPECT_LE(r.rank_target, f.bpe.vocab_size());
    EXPECT_GE(r.rank_in_dim, 1);
    EXPECT_LE(r.rank_in_dim, corpus::kTokensPerDim);
  }
}

TEST(ForcedChoice, UntrainedModelIsNearChance) {
  // Pooled over the two-alternative types; 99% binomial interval around 0.5.
  const auto& f = fixture();
  int n = 0, k = 0;
  for (const auto& r : f.rows) n++, k += r.correct;
  const double half_width = 2.576 * std::sqrt(0.25 / n);
  EXPECT_NEAR(static_cast<double>(k) / n, 0.5, half_width);
}

TEST(Aggregate, CountsMatchBatteryManifest) {
  const auto& f = fixture();
  const auto cells = eval::aggregate(f.rows);
  std::map<ItemType, int> counted;
  for (const auto& c : cells) {
    counted[c.item_type] += c.n;
    int correct = 0, n = 0;
    for (const auto& r : f.rows)
      if (r.item_type == c.item_type) n++, correct += r.correct;
    EXPECT_DOUBLE_EQ(c.accuracy, static_cast<double>(correct) / n);
  }
  for (const auto& [t, n] : f.battery.counts) EXPECT_EQ(counted[t], n) << battery::to_string(t);
}

TEST(ResultsCsv, RoundTrips) {
  const auto& f = fixture();
  const auto text = eval::results_csv(f.rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), eval::kResultColumns);
  const auto back = eval::parse_results_csv(text);
  ASSERT_EQ(back.size(), f.rows.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].item_id, f.rows[i].item_id);
    EXPECT_EQ(back[i].item_type, f.rows[i].item_type);
    EXPECT_EQ(back[i].logp_target, f.rows[i].logp_target);
    EXPECT_EQ(back[i].correct, f.rows[i].correct);
    EXPECT_EQ(back[i].greedy_token, f.rows[i].greedy_token);
  }
  EXPECT_EQ(eval::results_csv(back), text);
}

TEST(Greedy, DiagnosticsCountTargetsAndShapeTokens) {
  const auto& lex = corpus::NonceLexicon::standard();
  const auto& shapes = lex.tokens(corpus::FeatureDim::Shape);
  const auto& colours = lex.tokens(corpus::FeatureDim::Colour);
  std::vector<eval::RunResultRow> rows(4);
  for (auto& r : rows) r.item_type = ItemType::SecondOrder;
  rows[0].item_id = "SO-0", rows[0].greedy_token = shapes[0];
  rows[1].item_id = "SO-1", rows[1].greedy_token = shapes[1];
  rows[2].item_id = "SO-2", rows[2].greedy_token = colours[0];
  rows[3].item_id = "SO-3", rows[3].greedy_token = "the";
  // Correctness of the greedy token is judged against the target, which the
  // row carries through rank_target == 1.
  rows[0].rank_target = 1;
  rows[1].rank_target = 2;
  const auto g = eval::greedy_diagnostics(rows, ItemType::SecondOrder, lex);
  EXPECT_EQ(g.n, 4);
  EXPECT_DOUBLE_EQ(g.correct_specific_rate, 0.25);
  EXPECT_DOUBLE_EQ(g.shape_class_rate, 0.5);
}

TEST(HiddenExport, SaveLoadRoundTrip) {
  const auto& f = fixture();
  std::vector<battery::WugItem> items(f.battery.items.begin(), f.battery.items.begin() + 5);
  const auto h = eval::export_hidden_states(f.model, f.bpe, items, eval::Position::NounFinal);
  EXPECT_EQ(h.item_ids.size(), 5u);
  EXPECT_EQ(h.n_layers, 2);
  EXPECT_EQ(h.data.size(), 5u * 3u * 32u);
  const auto stem = std::filesystem::temp_directory_path() / "wuglab_test_hidden";
  h.save(stem);
  const auto back = eval::HiddenExport::load(stem);
  EXPECT_EQ(back.item_ids, h.item_ids);
  EXPECT_EQ(back.positions, h.positions);
  EXPECT_EQ(back.data, h.data);
  std::filesystem::remove(stem.string() + ".f32");
  std::filesystem::remove(stem.string() + ".json");
}

TEST(Position, NamesRoundTrip) {
  for (auto p : {eval::Position::NounFinal, eval::Position::CriticalPrediction})
    EXPECT_EQ(eval::parse_position(eval::to_string(p)), p);
}
