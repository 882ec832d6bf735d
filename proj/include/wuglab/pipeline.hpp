#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "wuglab/corpus.hpp"
#include "wuglab/eval.hpp"
#include "wuglab/hbm.hpp"
#include "wuglab/lm.hpp"
#include "wuglab/probe.hpp"

namespace wuglab::pipeline {

inline constexpr const char* kConfigSchema = "wuglab-config/1";
inline constexpr const char* kRegistrySchema = "wuglab-registry/1";
inline constexpr const char* kBundleSchema = "wuglab-bundle/1";
inline constexpr const char* kDataDirEnv = "WUGLAB_DATA_DIR";
// Part of every stage's input hash; bump when a stage's output format or
// semantics change so stale artifacts are rebuilt.
inline constexpr int kStageVersion = 2;

enum class Stage { Gen, Bpe, Train, Battery, Eval, Hbm, Probe, Stats };
inline constexpr std::array<Stage, 8> kAllStages = {Stage::Gen,     Stage::Bpe,  Stage::Train, Stage::Battery,
                                                    Stage::Eval,    Stage::Hbm,  Stage::Probe, Stage::Stats};
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);
// Stages whose outputs the given stage reads.
std::vector<Stage> dependencies(Stage s);

inline constexpr std::array<double, 3> kFractions = {0.25, 0.5, 1.0};

struct RunSpec {
  corpus::Condition condition = corpus::Condition::Regular;
  lm::SizeTag size = lm::SizeTag::Tiny;
  std::uint64_t seed = 42;
  double fraction = 1.0;
  std::set<Stage> stages{kAllStages.begin(), kAllStages.end()};

  // "<condition>/<size>/<seed>", with "/f<fraction>" for partial corpora.
  std::string id() const;
  // <root>/runs/<condition>/<size>/<seed>[_f<fraction>]
  std::filesystem::path dir(const std::filesystem::path& root) const;
  // Partial corpora are Regular only and use one of the dose fractions.
  void validate() const;
  // Adds every stage the selected ones depend on.
  void close_stages();
};

// Settings shared by every run of a matrix. Model and step overrides exist
// for smoke tests; they enter the train stage's input hash.
struct Overrides {
  std::optional<int> steps;
  std::optional<int> batch_size;
  std::optional<int> n_layers;
  std::optional<int> n_heads;
  std::optional<int> d_model;
  std::optional<int> d_ff;
  int probe_shuffles = probe::kShuffles;
  eval::Position cosine_position = probe::kCosinePosition;

  lm::ModelConfig model_config(lm::SizeTag size, int vocab_size) const;
  lm::TrainConfig train_config(lm::SizeTag size, std::uint64_t seed) const;
  nlohmann::json to_json() const;
  static Overrides from_json(const nlohmann::json& j);
};

struct MatrixConfig {
  std::vector<RunSpec> runs;
  Overrides overrides;
  std::filesystem::path data_dir = "wuglab-data";
  int jobs = 1;

  // Schema:
  //   {"schema": "wuglab-config/1", "data_dir": "...", "jobs": 1,
  //    "conditions": [...], "sizes": [...], "seeds": [...], "fractions": [...],
  //    "stages": [...], "overrides": {...}, "runs": [{condition, size, seed, fraction}]}
  // The cross product of conditions x sizes x seeds x fractions (partial
  // fractions only for Regular) is joined with the explicit "runs" list.
  static MatrixConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static MatrixConfig load(const std::filesystem::path& path);
};

// Tiny Regular, Scrambled and FeatureSwap at seeds 42 and 123.
std::vector<RunSpec> acceptance_matrix();
// 8 conditions x 3 sizes x 5 seeds, plus Regular at 25% and 50% for every
// size and seed: 150 runs.
std::vector<RunSpec> full_matrix();

// WUGLAB_DATA_DIR, when set and non-empty, replaces the configured root.
std::filesystem::path resolve_data_dir(const std::filesystem::path& configured);

struct StageRecord {
  std::string run_id;
  Stage stage = Stage::Gen;
  bool ok = false;
  std::string input_hash;
  std::map<std::string, std::string> outputs;  // path relative to the root -> md5
  double seconds = 0;
  std::string finished_at;  // UTC, ISO 8601
  std::string error;

  nlohmann::json to_json() const;
  static StageRecord from_json(const nlohmann::json& j);
};

// Append-only ledger of stage executions at <root>/registry/registry.json.
// Every append rewrites the file by atomic replacement.
class Registry {
 public:
  explicit Registry(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path() const { return root_ / "registry" / "registry.json"; }
  std::vector<StageRecord> records() const;
  // Most recent record for the run and stage, successful or not.
  std::optional<StageRecord> latest(const std::string& run_id, Stage stage) const;
  void append(StageRecord record);
  // True when every output recorded for a successful stage still exists
  // with the recorded hash.
  bool outputs_intact(const StageRecord& record) const;

 private:
  std::filesystem::path root_;
  mutable std::mutex mu_;
  std::vector<StageRecord> records_;
};

struct MatrixReport {
  int executed = 0;
  int skipped = 0;
  int failed = 0;
  std::vector<std::string> failed_runs;
};

using Logger = std::function<void(const std::string&)>;

// Runs every selected stage of every run in dependency order. A stage is
// skipped when its last successful record has the same input hash and
// intact outputs and no stage it depends on executed in this invocation.
// A failing stage is recorded and ends that run; other runs continue.
// Runs are spread over `jobs` worker threads; each run is single-threaded
// and deterministic, so results do not depend on the job count.
MatrixReport run_matrix(const MatrixConfig& config, Registry& registry, const Logger& log = {});

// Artifact writers shared by the stages and the CLI. Each creates `dir` and
// returns the names of the files it wrote there.
std::vector<std::string> write_corpus(const std::filesystem::path& dir, const corpus::Corpus& corpus);
std::vector<std::string> write_eval(const std::filesystem::path& dir, const lm::LanguageModel& model,
                                    const tok::BpeModel& bpe, const battery::Battery& battery,
                                    const corpus::Corpus& corpus, const eval::RunInfo& info);
// Probe by layer at the critical prediction position, permutation control
// at the best layer, then the representation analysis below.
std::vector<std::string> write_probe(const std::filesystem::path& dir, const lm::Checkpoint& ckpt,
                                     const tok::BpeModel& bpe, const battery::Battery& battery,
                                     const corpus::Corpus& corpus, int shuffles, eval::Position cosine_position);
// Noun cosines by layer before and after the embedding swap.
std::vector<std::string> write_reprs(const std::filesystem::path& dir, const lm::Checkpoint& ckpt,
                                     const tok::BpeModel& bpe, const corpus::Corpus& corpus,
                                     eval::Position position);
std::vector<std::string> write_kl(const std::filesystem::path& dir, const std::vector<eval::RunResultRow>& rows,
                                  const battery::Battery& battery, const corpus::Corpus& corpus,
                                  const hbm::HbmPosterior& posterior);

struct BundleReport {
  std::filesystem::path dir;
  std::vector<std::string> files;
  std::vector<std::string> errors;
};

// Writes the report bundle from the registry's successful, intact stages.
// Missing cells are left out, never imputed. Output bytes depend only on
// the artifacts, so identical registries give identical bundles.
BundleReport emit_reports(const Registry& registry, const std::filesystem::path& out_dir);

}  // namespace wuglab::pipeline
