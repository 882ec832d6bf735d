#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "wuglab/battery.hpp"
#include "wuglab/lm.hpp"
#include "wuglab/tokenizer.hpp"

namespace wuglab::eval {

inline constexpr double kTieTolerance = 1e-9;

struct RunInfo {
  std::string run_id;
  std::string condition;
  std::string size_tag;
  std::uint64_t seed = 0;
};

// Column order of the results CSV.
inline constexpr const char* kResultColumns =
    "run_id,condition,size_tag,seed,item_id,item_type,logp_target,logp_foil,correct,tie,"
    "rank_target,rank_in_dim,multi_subword,greedy_token";

struct RunResultRow {
  std::string run_id;
  std::string condition;
  std::string size_tag;
  std::uint64_t seed = 0;
  std::string item_id;
  battery::ItemType item_type = battery::ItemType::FirstOrder;
  double logp_target = 0;
  double logp_foil = 0;
  int correct = 0;  // 1 iff logp_target > logp_foil beyond the tie tolerance
  bool tie = false;
  int rank_target = 0;  // 1-based, over the full vocabulary, first subword
  int rank_in_dim = 0;  // 1-based, among the 10 tokens of the target's dimension
  bool multi_subword = false;
  std::string greedy_token;
};

// Token ids fed to the model for an item: [BOS] prompt, or
// [BOS] context [EOS] [BOS] prompt when a context prefix is present.
struct EncodedItem {
  std::vector<int> prompt;
  std::vector<int> target;
  std::vector<int> foil;
  int critical_position = 0;  // index whose next-token distribution yields target[0]
  int noun_final_position = -1;
};

EncodedItem encode_item(const tok::BpeModel& bpe, const battery::WugItem& item, bool with_context = true);

std::vector<RunResultRow> run_forced_choice(const lm::LanguageModel& model, const tok::BpeModel& bpe,
                                            const battery::Battery& battery,
                                            const corpus::NonceLexicon& lexicon, const RunInfo& run);

std::string results_csv(const std::vector<RunResultRow>& rows);
std::vector<RunResultRow> parse_results_csv(std::string_view text);

struct AggregateCell {
  std::string condition;
  std::string size_tag;
  std::uint64_t seed = 0;
  battery::ItemType item_type = battery::ItemType::FirstOrder;
  int n = 0;
  int ties = 0;
  double accuracy = 0;
  double mean_delta_logp = 0;
  double mean_rank = 0;
};

std::vector<AggregateCell> aggregate(const std::vector<RunResultRow>& rows);
std::string aggregates_csv(const std::vector<AggregateCell>& cells);

struct OneShotRow {
  std::string item_id;
  battery::ItemType item_type = battery::ItemType::OneShotInContext;
  int rank_without = 0;
  int rank_with = 0;
  int rank_in_dim_without = 0;
  int rank_in_dim_with = 0;
};

struct OneShotSummary {
  std::vector<OneShotRow> rows;
  double mean_rank_baseline = 0;  // same-noun items without the prefix
  double mean_rank_same = 0;      // same-noun items with the prefix
  double mean_rank_control = 0;   // control items with the prefix
};

OneShotSummary run_one_shot(const lm::LanguageModel& model, const tok::BpeModel& bpe,
                            const battery::Battery& battery, const corpus::NonceLexicon& lexicon);

struct GreedyDiagnostics {
  int n = 0;
  double correct_specific_rate = 0;
  double shape_class_rate = 0;
};

// Computed from result rows: whether the greedy token is the target, and
// whether it is any of the shape tokens.
GreedyDiagnostics greedy_diagnostics(const std::vector<RunResultRow>& rows, battery::ItemType type,
                                     const corpus::NonceLexicon& lexicon);

enum class Position { NounFinal, CriticalPrediction };
std::string_view to_string(Position p);
Position parse_position(std::string_view s);

// Activations per item per layer at one position.
struct HiddenExport {
  std::vector<std::string> item_ids;
  std::vector<int> positions;
  int n_layers = 0;  // stored layers = n_layers + 1
  int d_model = 0;
  std::vector<float> data;  // [item][layer][d_model]

  const float* vec(std::size_t item, int layer) const {
    return data.data() + (item * static_cast<std::size_t>(n_layers + 1) + static_cast<std::size_t>(layer)) *
                             static_cast<std::size_t>(d_model);
  }
  // <stem>.f32 holds the raw little-endian floats; <stem>.json the index.
  void save(const std::filesystem::path& stem) const;
  static HiddenExport load(const std::filesystem::path& stem);
};

HiddenExport export_hidden_states(const lm::LanguageModel& model, const tok::BpeModel& bpe,
                                  const std::vector<battery::WugItem>& items, Position position);

}  // namespace wuglab::eval
