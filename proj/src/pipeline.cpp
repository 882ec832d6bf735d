#include "wuglab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <sstream>
#include <thread>

#include "wuglab/analysis.hpp"
#include "wuglab/battery.hpp"
#include "wuglab/error.hpp"
#include "wuglab/hbm.hpp"
#include "wuglab/io.hpp"
#include "wuglab/stats.hpp"
#include "wuglab/tokenizer.hpp"

namespace wuglab::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Gen: return "gen";
    case Stage::Bpe: return "bpe";
    case Stage::Train: return "train";
    case Stage::Battery: return "battery";
    case Stage::Eval: return "eval";
    case Stage::Hbm: return "hbm";
    case Stage::Probe: return "probe";
    case Stage::Stats: return "stats";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (auto st : kAllStages)
    if (to_string(st) == s) return st;
  throw InvalidArgument("unknown stage: " + std::string(s));
}

std::vector<Stage> dependencies(Stage s) {
  switch (s) {
    case Stage::Gen:
    case Stage::Bpe: return {};
    case Stage::Train: return {Stage::Gen, Stage::Bpe};
    case Stage::Battery: return {Stage::Gen};
    case Stage::Eval:
    case Stage::Probe: return {Stage::Gen, Stage::Bpe, Stage::Train, Stage::Battery};
    case Stage::Hbm: return {Stage::Gen};
    case Stage::Stats: return {Stage::Gen, Stage::Battery, Stage::Eval, Stage::Hbm};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Run specs and configuration

namespace {

std::string fraction_tag(double f) { return "f" + io::fmt_double(f); }

bool is_dose_fraction(double f) { return std::find(kFractions.begin(), kFractions.end(), f) != kFractions.end(); }

}  // namespace

std::string RunSpec::id() const {
  return stats::RunKey{std::string(corpus::to_string(condition)), std::string(lm::to_string(size)), seed, fraction}.id();
}

fs::path RunSpec::dir(const fs::path& root) const {
  std::string leaf = std::to_string(seed);
  if (fraction != 1.0) leaf += "_" + fraction_tag(fraction);
  return root / "runs" / std::string(corpus::to_string(condition)) / std::string(lm::to_string(size)) / leaf;
}

void RunSpec::validate() const {
  if (!is_dose_fraction(fraction)) throw InvalidArgument("run " + id() + ": fraction must be 0.25, 0.5 or 1");
  if (fraction != 1.0 && condition != corpus::Condition::Regular)
    throw InvalidArgument("run " + id() + ": partial corpora are Regular only");
  if (stages.empty()) throw InvalidArgument("run " + id() + ": no stages selected");
}

void RunSpec::close_stages() {
  for (bool grew = true; grew;) {
    grew = false;
    for (auto s : std::vector<Stage>(stages.begin(), stages.end()))
      for (auto d : dependencies(s)) grew |= stages.insert(d).second;
  }
}

lm::ModelConfig Overrides::model_config(lm::SizeTag size, int vocab_size) const {
  auto c = lm::ModelConfig::for_size(size, vocab_size);
  if (n_layers) c.n_layers = *n_layers;
  if (n_heads) c.n_heads = *n_heads;
  if (d_model) c.d_model = *d_model;
  if (d_ff) c.d_ff = *d_ff;
  c.validate();
  return c;
}

lm::TrainConfig Overrides::train_config(lm::SizeTag size, std::uint64_t seed) const {
  auto t = lm::TrainConfig::for_size(size, seed);
  if (steps) t.steps = *steps;
  if (batch_size) t.batch_size = *batch_size;
  if (t.steps < 1 || t.batch_size < 1) throw InvalidArgument("train steps and batch size must be positive");
  return t;
}

json Overrides::to_json() const {
  json j = json::object();
  auto put = [&](const char* k, const std::optional<int>& v) {
    if (v) j[k] = *v;
  };
  put("steps", steps);
  put("batch_size", batch_size);
  put("n_layers", n_layers);
  put("n_heads", n_heads);
  put("d_model", d_model);
  put("d_ff", d_ff);
  j["probe_shuffles"] = probe_shuffles;
  j["cosine_position"] = eval::to_string(cosine_position);
  return j;
}

Overrides Overrides::from_json(const json& j) {
  static const std::set<std::string> known = {"steps",   "batch_size", "n_layers",       "n_heads",
                                              "d_model", "d_ff",       "probe_shuffles", "cosine_position"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw InvalidArgument("unknown override: " + k);
  Overrides o;
  auto get = [&](const char* k, std::optional<int>& v) {
    if (j.contains(k)) v = j.at(k).get<int>();
  };
  get("steps", o.steps);
  get("batch_size", o.batch_size);
  get("n_layers", o.n_layers);
  get("n_heads", o.n_heads);
  get("d_model", o.d_model);
  get("d_ff", o.d_ff);
  o.probe_shuffles = j.value("probe_shuffles", probe::kShuffles);
  if (o.probe_shuffles < 0) throw InvalidArgument("probe_shuffles must be >= 0");
  if (j.contains("cosine_position")) o.cosine_position = eval::parse_position(j.at("cosine_position").get<std::string>());
  return o;
}

MatrixConfig MatrixConfig::from_json(const json& j) {
  if (j.value("schema", std::string()) != kConfigSchema)
    throw InvalidArgument(std::string("config schema must be ") + kConfigSchema);
  static const std::set<std::string> known = {"schema",    "data_dir", "jobs",   "conditions", "sizes",
                                              "seeds",     "fractions", "stages", "overrides", "runs"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw InvalidArgument("unknown config key: " + k);
  MatrixConfig c;
  if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
  c.jobs = j.value("jobs", 1);
  if (c.jobs < 1) throw InvalidArgument("jobs must be >= 1");
  if (j.contains("overrides")) c.overrides = Overrides::from_json(j.at("overrides"));
  std::set<Stage> stages(kAllStages.begin(), kAllStages.end());
  if (j.contains("stages")) {
    stages.clear();
    for (const auto& s : j.at("stages")) stages.insert(parse_stage(s.get<std::string>()));
  }
  std::vector<double> fractions = {1.0};
  if (j.contains("fractions")) fractions = j.at("fractions").get<std::vector<double>>();
  if (j.contains("conditions") || j.contains("sizes") || j.contains("seeds")) {
    for (const auto& cn : j.at("conditions"))
      for (const auto& sz : j.at("sizes"))
        for (const auto& sd : j.at("seeds"))
          for (double f : fractions) {
            RunSpec r;
            r.condition = corpus::parse_condition(cn.get<std::string>());
            r.size = lm::parse_size(sz.get<std::string>());
            r.seed = sd.get<std::uint64_t>();
            r.fraction = f;
            if (f != 1.0 && r.condition != corpus::Condition::Regular) continue;
            r.stages = stages;
            c.runs.push_back(r);
          }
  }
  if (j.contains("runs"))
    for (const auto& e : j.at("runs")) {
      RunSpec r;
      r.condition = corpus::parse_condition(e.at("condition").get<std::string>());
      r.size = lm::parse_size(e.at("size").get<std::string>());
      r.seed = e.at("seed").get<std::uint64_t>();
      r.fraction = e.value("fraction", 1.0);
      r.stages = stages;
      c.runs.push_back(r);
    }
  return c;
}

json MatrixConfig::to_json() const {
  json j;
  j["schema"] = kConfigSchema;
  j["data_dir"] = data_dir.string();
  j["jobs"] = jobs;
  j["overrides"] = overrides.to_json();
  j["runs"] = json::array();
  for (const auto& r : runs) {
    json e = {{"condition", corpus::to_string(r.condition)},
              {"size", lm::to_string(r.size)},
              {"seed", r.seed},
              {"fraction", r.fraction}};
    for (auto s : r.stages) e["stages"].push_back(to_string(s));
    j["runs"].push_back(e);
  }
  return j;
}

MatrixConfig MatrixConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw InvalidArgument("cannot parse config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::vector<RunSpec> acceptance_matrix() {
  std::vector<RunSpec> runs;
  for (auto c : {corpus::Condition::Regular, corpus::Condition::Scrambled, corpus::Condition::FeatureSwap})
    for (std::uint64_t seed : {42u, 123u}) {
      RunSpec r;
      r.condition = c;
      r.seed = seed;
      runs.push_back(r);
    }
  return runs;
}

std::vector<RunSpec> full_matrix() {
  static constexpr std::uint64_t kSeeds[] = {42, 123, 456, 789, 1001};
  std::vector<RunSpec> runs;
  for (auto c : corpus::kAllConditions)
    for (auto size : {lm::SizeTag::Tiny, lm::SizeTag::Small, lm::SizeTag::Medium})
      for (auto seed : kSeeds) {
        RunSpec r;
        r.condition = c;
        r.size = size;
        r.seed = seed;
        runs.push_back(r);
      }
  for (double f : {0.25, 0.5})
    for (auto size : {lm::SizeTag::Tiny, lm::SizeTag::Small, lm::SizeTag::Medium})
      for (auto seed : kSeeds) {
        RunSpec r;
        r.size = size;
        r.seed = seed;
        r.fraction = f;
        runs.push_back(r);
      }
  return runs;
}

fs::path resolve_data_dir(const fs::path& configured) {
  if (const char* env = std::getenv(kDataDirEnv); env && *env) return fs::path(env);
  return configured;
}

// ---------------------------------------------------------------------------
// Registry

json StageRecord::to_json() const {
  return {{"run_id", run_id}, {"stage", to_string(stage)}, {"ok", ok},
          {"input_hash", input_hash}, {"outputs", outputs}, {"seconds", seconds},
          {"finished_at", finished_at}, {"error", error}};
}

StageRecord StageRecord::from_json(const json& j) {
  StageRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.stage = parse_stage(j.at("stage").get<std::string>());
  r.ok = j.at("ok").get<bool>();
  r.input_hash = j.at("input_hash").get<std::string>();
  r.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  r.seconds = j.value("seconds", 0.0);
  r.finished_at = j.value("finished_at", std::string());
  r.error = j.value("error", std::string());
  return r;
}

Registry::Registry(fs::path root) : root_(std::move(root)) {
  if (!fs::exists(path())) return;
  const auto j = json::parse(io::read_file(path()));
  if (j.value("schema", std::string()) != kRegistrySchema)
    throw Error("registry " + path().string() + " has an unknown schema");
  for (const auto& r : j.at("records")) records_.push_back(StageRecord::from_json(r));
}

std::vector<StageRecord> Registry::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

std::optional<StageRecord> Registry::latest(const std::string& run_id, Stage stage) const {
  std::lock_guard lock(mu_);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it)
    if (it->run_id == run_id && it->stage == stage) return *it;
  return std::nullopt;
}

void Registry::append(StageRecord record) {
  std::lock_guard lock(mu_);
  records_.push_back(std::move(record));
  json j;
  j["schema"] = kRegistrySchema;
  j["records"] = json::array();
  for (const auto& r : records_) j["records"].push_back(r.to_json());
  fs::create_directories(path().parent_path());
  io::write_file_atomic(path(), j.dump(1) + "\n");
}

bool Registry::outputs_intact(const StageRecord& record) const {
  if (!record.ok) return false;
  for (const auto& [rel, md5] : record.outputs) {
    const auto p = root_ / rel;
    if (!fs::is_regular_file(p) || io::md5_file(p) != md5) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Stage execution

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string csv_line(const std::vector<std::string>& fields) { return io::csv_row(fields); }

struct RunContext {
  const RunSpec& spec;
  const MatrixConfig& config;
  Registry& registry;
  const Logger& log;
  fs::path root;
  std::map<Stage, StageRecord> done;
  std::set<Stage> executed;

  fs::path stage_dir(Stage s) const { return spec.dir(root) / std::string(to_string(s)); }
  fs::path file(Stage s, const char* name) const { return stage_dir(s) / name; }
  std::string run_id() const { return spec.id(); }

  corpus::Corpus corpus() const { return corpus::Corpus::load(stage_dir(Stage::Gen)); }
  tok::BpeModel bpe() const { return tok::BpeModel::load(file(Stage::Bpe, "bpe.json")); }
  battery::Battery battery() const { return battery::Battery::load(file(Stage::Battery, "battery.json")); }
  lm::Checkpoint checkpoint() const { return lm::Checkpoint::load(file(Stage::Train, lm::kCheckpointFile)); }
};

json stage_inputs(const RunContext& ctx, Stage stage) {
  const auto& s = ctx.spec;
  json j;
  j["stage"] = to_string(stage);
  j["stage_version"] = kStageVersion;
  j["condition"] = corpus::to_string(s.condition);
  j["seed"] = s.seed;
  j["fraction"] = s.fraction;
  for (auto d : dependencies(stage)) j["upstream"][std::string(to_string(d))] = ctx.done.at(d).outputs;
  switch (stage) {
    case Stage::Bpe:
      j["merges"] = tok::kDefaultMerges;
      j["fit_seed"] = 42;
      break;
    case Stage::Train: {
      const int vocab = ctx.bpe().vocab_size();
      j["model"] = ctx.config.overrides.model_config(s.size, vocab).to_json();
      j["train"] = ctx.config.overrides.train_config(s.size, s.seed).to_json();
      break;
    }
    case Stage::Hbm:
      j["dim_policy"] = hbm::to_string(hbm::DimPolicy::ShapeOnly);
      j["exemplars_seen"] = 1;
      break;
    case Stage::Probe:
      j["shuffles"] = ctx.config.overrides.probe_shuffles;
      j["fold_seed"] = probe::kFoldSeed;
      j["l2"] = probe::kDefaultL2;
      j["cosine_position"] = eval::to_string(ctx.config.overrides.cosine_position);
      break;
    default: break;
  }
  return j;
}

// Each stage writes into its own directory and returns the files it made.
std::vector<std::string> run_gen(const RunContext& ctx) {
  return write_corpus(ctx.stage_dir(Stage::Gen),
                      corpus::generate_corpus(corpus::make_spec(ctx.spec.condition, ctx.spec.seed, ctx.spec.fraction)));
}

}  // namespace

std::vector<std::string> write_corpus(const fs::path& dir, const corpus::Corpus& c) {
  fs::create_directories(dir);
  c.save(dir);
  const auto reloaded = corpus::Corpus::load(dir);
  if (corpus::checksum(reloaded) != reloaded.md5) throw Error("corpus checksum mismatch after save");
  json checks = corpus::manipulation_check(c).to_json();
  checks["whitespace_vocab_size"] = c.whitespace_vocab_size();
  checks["md5"] = c.md5;
  io::write_file_atomic(dir / "checks.json", checks.dump(1) + "\n");
  return {corpus::kCorpusText, corpus::kCorpusMeta, "checks.json"};
}

namespace {

std::vector<std::string> run_bpe(const RunContext& ctx) {
  const auto dir = ctx.stage_dir(Stage::Bpe);
  // One tokenizer per condition, fitted on the seed-42 full corpus.
  const auto bpe = tok::fit_bpe(corpus::generate_corpus(corpus::make_spec(ctx.spec.condition, 42)));
  bpe.save(dir / "bpe.json");
  return {"bpe.json"};
}

std::vector<std::string> run_train(const RunContext& ctx) {
  const auto dir = ctx.stage_dir(Stage::Train);
  const auto corp = ctx.corpus();
  const auto bpe = ctx.bpe();
  std::vector<std::vector<int>> seqs;
  tok::EncodeStats es;
  for (const auto& s : corp.sentences) seqs.push_back(bpe.encode_sentence(s, &es));
  const auto mc = ctx.config.overrides.model_config(ctx.spec.size, bpe.vocab_size());
  const auto tc = ctx.config.overrides.train_config(ctx.spec.size, ctx.spec.seed);
  const int every = std::max(1, tc.steps / 10);
  auto res = lm::train(seqs, mc, tc, tok::kEos, [&](const lm::TrainLogRow& r) {
    if (ctx.log && (r.step + 1) % every == 0)
      ctx.log(ctx.run_id() + " train step " + std::to_string(r.step + 1) + "/" + std::to_string(tc.steps) +
              " loss " + io::fmt_double(r.loss));
  });
  res.checkpoint.save(dir / lm::kCheckpointFile);
  io::write_file_atomic(dir / lm::kTrainLogFile, lm::train_log_csv(res.log));
  json summary = {{"initial_loss", res.initial_loss},
                  {"final_loss", res.final_loss},
                  {"parameters", mc.parameter_count()},
                  {"tokens", es.tokens},
                  {"byte_fallbacks", es.byte_fallbacks}};
  io::write_file_atomic(dir / "train.json", summary.dump(1) + "\n");
  return {lm::kCheckpointFile, lm::kTrainLogFile, "train.json"};
}

std::vector<std::string> run_battery(const RunContext& ctx) {
  const auto dir = ctx.stage_dir(Stage::Battery);
  const auto corp = ctx.corpus();
  const auto b = battery::build_battery(corp, ctx.spec.seed);
  const auto v = battery::validate_battery(b, corp);
  if (!v.ok()) throw Error("battery validation failed: " + v.violations.front());
  b.save(dir / "battery.json");
  return {"battery.json"};
}

std::vector<std::string> run_eval(const RunContext& ctx) {
  const eval::RunInfo info{ctx.run_id(), std::string(corpus::to_string(ctx.spec.condition)),
                           std::string(lm::to_string(ctx.spec.size)), ctx.spec.seed};
  return write_eval(ctx.stage_dir(Stage::Eval), lm::LanguageModel(ctx.checkpoint()), ctx.bpe(), ctx.battery(),
                    ctx.corpus(), info);
}

}  // namespace

std::vector<std::string> write_eval(const fs::path& dir, const lm::LanguageModel& model, const tok::BpeModel& bpe,
                                    const battery::Battery& b, const corpus::Corpus& corp, const eval::RunInfo& info) {
  fs::create_directories(dir);
  const auto rows = eval::run_forced_choice(model, bpe, b, corp.spec.lexicon, info);
  io::write_file_atomic(dir / "results.csv", eval::results_csv(rows));
  io::write_file_atomic(dir / "aggregates.csv", eval::aggregates_csv(eval::aggregate(rows)));
  std::string greedy = "item_type,n,correct_specific_rate,shape_class_rate\n";
  for (auto t : {battery::ItemType::FirstOrder, battery::ItemType::SecondOrder, battery::ItemType::FrameVariant}) {
    const auto g = eval::greedy_diagnostics(rows, t, corp.spec.lexicon);
    if (g.n == 0) continue;
    greedy += csv_line({std::string(battery::to_string(t)), std::to_string(g.n), io::fmt_double(g.correct_specific_rate),
                        io::fmt_double(g.shape_class_rate)});
  }
  io::write_file_atomic(dir / "greedy.csv", greedy);
  const auto os = eval::run_one_shot(model, bpe, b, corp.spec.lexicon);
  json oj = {{"mean_rank_baseline", os.mean_rank_baseline},
             {"mean_rank_same", os.mean_rank_same},
             {"mean_rank_control", os.mean_rank_control}};
  std::vector<double> without, with;
  for (const auto& r : os.rows)
    if (r.item_type == battery::ItemType::OneShotInContext) {
      without.push_back(r.rank_in_dim_without);
      with.push_back(r.rank_in_dim_with);
    }
  if (without.size() >= 2) oj["paired_t_without_vs_with"] = stats::paired_t(without, with).to_json();
  io::write_file_atomic(dir / "oneshot.json", oj.dump(1) + "\n");
  return {"results.csv", "aggregates.csv", "greedy.csv", "oneshot.json"};
}

namespace {

std::vector<std::string> run_hbm(const RunContext& ctx) {
  const auto out = hbm::run_for_corpus(ctx.corpus(), 1, hbm::DimPolicy::ShapeOnly);
  hbm::save(out, ctx.stage_dir(Stage::Hbm));
  return {"counts.csv", "posterior.json", "predictive.csv"};
}

std::vector<std::string> run_probe(const RunContext& ctx) {
  const auto& o = ctx.config.overrides;
  return write_probe(ctx.stage_dir(Stage::Probe), ctx.checkpoint(), ctx.bpe(), ctx.battery(), ctx.corpus(),
                     o.probe_shuffles, o.cosine_position);
}

}  // namespace

std::vector<std::string> write_probe(const fs::path& dir, const lm::Checkpoint& ckpt, const tok::BpeModel& bpe,
                                     const battery::Battery& b, const corpus::Corpus& corp, int shuffles,
                                     eval::Position cosine_position) {
  fs::create_directories(dir);
  const lm::LanguageModel model(ckpt);
  std::vector<battery::WugItem> fo;
  for (const auto& it : b.items)
    if (it.item_type == battery::ItemType::FirstOrder) fo.push_back(it);
  // Probes read the position that predicts the feature token.
  const auto hidden = eval::export_hidden_states(model, bpe, fo, eval::Position::CriticalPrediction);
  const auto data = probe::make_dataset(hidden, b, corp.spec.lexicon);
  const auto pr = probe::train_probe(data);
  std::optional<probe::PermutationControl> pc;
  if (shuffles > 0) pc = probe::permutation_test(data, pr.best_layer, shuffles);
  json pj = {{"layer_accuracy", pr.layer_accuracy},
             {"best_layer", pr.best_layer},
             {"nonconverged", pr.nonconverged},
             {"n_rows", data.n_rows()},
             {"permutation", pc ? pc->to_json() : json(nullptr)}};
  io::write_file_atomic(dir / "probe.json", pj.dump(1) + "\n");
  std::string csv = "layer,accuracy,baseline,p_value\n";
  for (std::size_t l = 0; l < pr.layer_accuracy.size(); ++l) {
    const bool at = pc && static_cast<int>(l) == pc->layer;
    csv += csv_line({std::to_string(l), io::fmt_double(pr.layer_accuracy[l]), at ? io::fmt_double(pc->baseline) : "",
                     at ? io::fmt_double(pc->p_value) : ""});
  }
  io::write_file_atomic(dir / "probe.csv", csv);
  auto files = write_reprs(dir, ckpt, bpe, corp, cosine_position);
  files.insert(files.begin(), {"probe.json", "probe.csv"});
  return files;
}

std::vector<std::string> write_reprs(const fs::path& dir, const lm::Checkpoint& ckpt, const tok::BpeModel& bpe,
                                     const corpus::Corpus& corp, eval::Position position) {
  fs::create_directories(dir);
  const auto pert = probe::perturbation_experiment(ckpt, bpe, corp.spec, probe::kFoldSeed, position);
  std::string cos = "phase,layer,group,mean_cosine\n", pairs = "phase,layer,group,cosine\n";
  for (const auto& [phase, rep] : {std::pair{"before", &pert.before}, std::pair{"after", &pert.after}}) {
    for (std::size_t l = 0; l < rep->layers.size(); ++l) {
      const auto& c = rep->layers[l];
      for (const auto& [g, v] : {std::pair{"within-trained", c.within_trained}, std::pair{"within-novel", c.within_novel},
                                 std::pair{"cross", c.cross}})
        cos += csv_line({phase, std::to_string(l), g, io::fmt_double(v)});
    }
    for (const auto& p : rep->pairs)
      pairs += csv_line({phase, std::to_string(rep->pair_layer), p.group, io::fmt_double(p.cosine)});
  }
  io::write_file_atomic(dir / "cosines.csv", cos);
  io::write_file_atomic(dir / "cosine_pairs.csv", pairs);
  json mj;
  mj["position"] = eval::to_string(position);
  mj["report_layer"] = probe::report_layer(ckpt.model.n_layers);
  mj["zero_vectors"] = {pert.before.zero_vectors, pert.after.zero_vectors};
  for (const auto& [a, b2] : pert.mapping) mj["mapping"].push_back({a, b2});
  io::write_file_atomic(dir / "perturbation.json", mj.dump(1) + "\n");
  return {"cosines.csv", "cosine_pairs.csv", "perturbation.json"};
}

namespace {

std::vector<std::string> run_stats(const RunContext& ctx) {
  const auto rows = eval::parse_results_csv(io::read_file(ctx.file(Stage::Eval, "results.csv")));
  const auto post = hbm::HbmPosterior::from_json(json::parse(io::read_file(ctx.file(Stage::Hbm, "posterior.json"))));
  return write_kl(ctx.stage_dir(Stage::Stats), rows, ctx.battery(), ctx.corpus(), post);
}

}  // namespace

std::vector<std::string> write_kl(const fs::path& dir, const std::vector<eval::RunResultRow>& rows,
                                  const battery::Battery& b, const corpus::Corpus& corp,
                                  const hbm::HbmPosterior& post) {
  fs::create_directories(dir);
  json j;
  if (post.degenerate) {
    // Unlabelled corpora give the ideal observer nothing to fit.
    j["kl"] = nullptr;
    j["reason"] = "degenerate posterior";
  } else {
    j["kl"] = hbm::forced_choice_kl(rows, b, corp.spec, post, 1).to_json();
  }
  io::write_file_atomic(dir / "kl.json", j.dump(1) + "\n");
  return {"kl.json"};
}

namespace {

std::vector<std::string> execute(const RunContext& ctx, Stage s) {
  switch (s) {
    case Stage::Gen: return run_gen(ctx);
    case Stage::Bpe: return run_bpe(ctx);
    case Stage::Train: return run_train(ctx);
    case Stage::Battery: return run_battery(ctx);
    case Stage::Eval: return run_eval(ctx);
    case Stage::Hbm: return run_hbm(ctx);
    case Stage::Probe: return run_probe(ctx);
    case Stage::Stats: return run_stats(ctx);
  }
  return {};
}

struct Counters {
  std::atomic<int> executed{0}, skipped{0}, failed{0};
  std::mutex mu;
  std::vector<std::string> failed_runs;
};

void run_one(const RunSpec& spec, const MatrixConfig& config, Registry& registry, const Logger& log, Counters& n) {
  RunContext ctx{spec, config, registry, log, registry.root(), {}, {}};
  for (auto stage : kAllStages) {
    if (!spec.stages.count(stage)) continue;
    const auto name = std::string(to_string(stage));
    StageRecord rec;
    rec.run_id = spec.id();
    rec.stage = stage;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      rec.input_hash = io::md5_hex(stage_inputs(ctx, stage).dump());
      const auto deps = dependencies(stage);
      const bool upstream_ran =
          std::any_of(deps.begin(), deps.end(), [&](Stage d) { return ctx.executed.count(d) > 0; });
      const auto prev = registry.latest(rec.run_id, stage);
      if (!upstream_ran && prev && prev->ok && prev->input_hash == rec.input_hash && registry.outputs_intact(*prev)) {
        ctx.done[stage] = *prev;
        ++n.skipped;
        continue;
      }
      if (log) log(rec.run_id + " " + name + " start");
      const auto dir = ctx.stage_dir(stage);
      fs::remove_all(dir);
      fs::create_directories(dir);
      for (const auto& f : execute(ctx, stage)) {
        const auto p = dir / f;
        rec.outputs[fs::relative(p, ctx.root).generic_string()] = io::md5_file(p);
      }
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.finished_at = utc_now();
    registry.append(rec);
    if (!rec.ok) {
      if (log) log(rec.run_id + " " + name + " FAILED: " + rec.error);
      ++n.failed;
      std::lock_guard lock(n.mu);
      n.failed_runs.push_back(rec.run_id);
      return;
    }
    if (log) log(rec.run_id + " " + name + " done in " + io::fmt_double(std::round(rec.seconds * 10) / 10) + " s");
    ++n.executed;
    ctx.executed.insert(stage);
    ctx.done[stage] = rec;
  }
}

void check_disk_space(const std::vector<RunSpec>& runs, const MatrixConfig& config, const fs::path& root) {
  // Checkpoints dominate: parameters plus two Adam moments in float32.
  constexpr int kVocabEstimate = 800;
  std::uintmax_t need = 0;
  for (const auto& r : runs) {
    if (!r.stages.count(Stage::Train)) continue;
    if (fs::exists(r.dir(root) / "train" / lm::kCheckpointFile)) continue;
    need += config.overrides.model_config(r.size, kVocabEstimate).parameter_count() * 12 + (8u << 20);
  }
  const auto info = fs::space(root);
  if (info.available < need)
    throw Error("not enough disk space under " + root.string() + ": need about " + std::to_string(need >> 20) +
                " MiB, have " + std::to_string(info.available >> 20) + " MiB");
}

}  // namespace

MatrixReport run_matrix(const MatrixConfig& config, Registry& registry, const Logger& log) {
  std::vector<RunSpec> runs = config.runs;
  std::set<std::string> seen;
  for (auto& r : runs) {
    r.validate();
    r.close_stages();
    if (!seen.insert(r.id()).second) throw InvalidArgument("duplicate run: " + r.id());
  }
  fs::create_directories(registry.root());
  check_disk_space(runs, config, registry.root());

  Counters n;
  std::mutex log_mu;
  Logger safe_log;
  if (log)
    safe_log = [&](const std::string& s) {
      std::lock_guard lock(log_mu);
      log(s);
    };
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < runs.size();) run_one(runs[i], config, registry, safe_log, n);
  };
  const int jobs = std::max(1, std::min<int>(config.jobs, static_cast<int>(runs.size())));
  std::vector<std::thread> pool;
  for (int i = 1; i < jobs; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  MatrixReport rep;
  rep.executed = n.executed;
  rep.skipped = n.skipped;
  rep.failed = n.failed;
  rep.failed_runs = n.failed_runs;
  std::sort(rep.failed_runs.begin(), rep.failed_runs.end());
  return rep;
}

// ---------------------------------------------------------------------------
// Report bundle

namespace {

struct RunArtifacts {
  stats::RunKey key;
  std::map<Stage, StageRecord> stages;  // successful, intact stages only

  const StageRecord* stage(Stage s) const {
    auto it = stages.find(s);
    return it == stages.end() ? nullptr : &it->second;
  }
  std::string hash(Stage s, const std::string& file) const {
    const auto* r = stage(s);
    if (!r) return "";
    for (const auto& [path, md5] : r->outputs)
      if (fs::path(path).filename() == file) return md5;
    return "";
  }
  fs::path path(const fs::path& root, Stage s, const std::string& file) const {
    for (const auto& [p, md5] : stage(s)->outputs)
      if (fs::path(p).filename() == file) return root / p;
    throw Error("run " + key.id() + " has no " + file);
  }
};

int condition_rank(const std::string& c) {
  for (std::size_t i = 0; i < corpus::kAllConditions.size(); ++i)
    if (corpus::to_string(corpus::kAllConditions[i]) == c) return static_cast<int>(i);
  return static_cast<int>(corpus::kAllConditions.size());
}

int size_rank(const std::string& s) {
  if (s == "tiny") return 0;
  if (s == "small") return 1;
  if (s == "medium") return 2;
  return 3;
}

auto sort_key(const stats::RunKey& k) {
  return std::tuple(condition_rank(k.condition), k.condition, size_rank(k.size_tag), k.size_tag, k.seed, k.fraction);
}

std::string fmt(double v) { return io::fmt_double(v); }
std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

std::string join(const std::vector<std::string>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + v[i];
  return s;
}

}  // namespace

BundleReport emit_reports(const Registry& registry, const fs::path& out_dir) {
  const auto& root = registry.root();
  BundleReport rep;
  rep.dir = out_dir;
  fs::create_directories(out_dir);

  // Latest record per run and stage decides what the bundle may use.
  std::map<std::pair<std::string, Stage>, StageRecord> latest;
  for (const auto& r : registry.records()) latest[{r.run_id, r.stage}] = r;
  std::map<std::string, RunArtifacts> by_id;
  for (const auto& [k, r] : latest) {
    auto& a = by_id[k.first];
    a.key = stats::RunKey::parse(k.first);
    const std::string where = k.first + " " + std::string(to_string(k.second));
    if (!r.ok)
      rep.errors.push_back(where + " failed: " + r.error);
    else if (!registry.outputs_intact(r))
      rep.errors.push_back(where + ": outputs changed since they were recorded");
    else
      a.stages[k.second] = r;
  }
  std::vector<const RunArtifacts*> runs;
  for (const auto& [id, a] : by_id) runs.push_back(&a);
  std::sort(runs.begin(), runs.end(), [](auto* a, auto* b) { return sort_key(a->key) < sort_key(b->key); });
  if (runs.empty()) rep.errors.push_back("registry has no runs");

  // Per-run summaries from the evaluation results.
  std::vector<stats::RunSummary> summaries;
  std::map<std::string, std::size_t> summary_of;
  for (const auto* a : runs) {
    if (!a->stage(Stage::Eval)) {
      rep.errors.push_back(a->key.id() + ": no evaluation results");
      continue;
    }
    const auto p = a->path(root, Stage::Eval, "results.csv");
    auto s = stats::summarize_run(eval::parse_results_csv(io::read_file(p)), a->key.fraction,
                                  a->hash(Stage::Eval, "results.csv"));
    if (a->stage(Stage::Stats)) {
      const auto kj = json::parse(io::read_file(a->path(root, Stage::Stats, "kl.json")));
      if (!kj.at("kl").is_null()) s.kl_nats = kj.at("kl").at("mean_kl_nats").get<double>();
    }
    summary_of[a->key.id()] = summaries.size();
    summaries.push_back(std::move(s));
  }
  auto summary = [&](const RunArtifacts* a) -> const stats::RunSummary* {
    auto it = summary_of.find(a->key.id());
    return it == summary_of.end() ? nullptr : &summaries[it->second];
  };
  using battery::ItemType;

  std::map<std::string, std::string> files;

  // table3.csv: SO accuracy (%) per condition and size on full corpora.
  {
    std::string csv = "condition,size_tag,n_runs,seeds,so_mean_pct,so_sd_pct,so_min_pct,so_max_pct,results_md5\n";
    std::map<std::pair<std::string, std::string>, std::vector<const RunArtifacts*>> cells;
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto* a : runs) {
      const auto* s = summary(a);
      if (!s || a->key.fraction != 1.0 || !s->accuracy(ItemType::SecondOrder)) continue;
      const auto k = std::pair(a->key.condition, a->key.size_tag);
      if (!cells.count(k)) order.push_back(k);
      cells[k].push_back(a);
    }
    for (const auto& k : order) {
      std::vector<double> acc;
      std::vector<std::string> seeds, hashes;
      for (const auto* a : cells[k]) {
        acc.push_back(100 * *summary(a)->accuracy(ItemType::SecondOrder));
        seeds.push_back(std::to_string(a->key.seed));
        hashes.push_back(summary(a)->results_md5);
      }
      csv += csv_line({k.first, k.second, std::to_string(acc.size()), join(seeds, ';'), fmt(stats::mean(acc)),
                       acc.size() >= 2 ? fmt(stats::sample_sd(acc)) : "",
                       fmt(*std::min_element(acc.begin(), acc.end())), fmt(*std::max_element(acc.begin(), acc.end())),
                       join(hashes, ';')});
    }
    files["table3.csv"] = csv;
  }

  // Verdicts.
  {
    json v = stats::analyze(summaries);
    v["inputs"] = json::array();
    for (const auto& s : summaries)
      v["inputs"].push_back({{"run_id", stats::RunKey{s.condition, s.size_tag, s.seed, s.fraction}.id()},
                             {"results_md5", s.results_md5}});
    files["verdicts.json"] = v.dump(1) + "\n";
  }

  // F1-F4 from evaluation summaries.
  {
    std::string f1 = "condition,size_tag,seed,so_accuracy,n_items,results_md5\n";
    std::string f2 = "size_tag,seed,fo_accuracy,so_accuracy,results_md5\n";
    std::string f3 = "condition,size_tag,seed,fo_accuracy,so_accuracy,fv_accuracy,results_md5\n";
    std::string f4 = "size_tag,seed,item_type,n,correct,accuracy,binomial_p,results_md5\n";
    for (const auto* a : runs) {
      const auto* s = summary(a);
      if (!s || a->key.fraction != 1.0) continue;
      const auto& k = a->key;
      const auto seed = std::to_string(k.seed);
      const auto so = s->accuracy(ItemType::SecondOrder), fo = s->accuracy(ItemType::FirstOrder);
      if (so) f1 += csv_line({k.condition, k.size_tag, seed, fmt(*so), std::to_string(s->tallies.at(ItemType::SecondOrder).n),
                              s->results_md5});
      if (k.condition == corpus::to_string(corpus::Condition::Regular) && so && fo)
        f2 += csv_line({k.size_tag, seed, fmt(*fo), fmt(*so), s->results_md5});
      f3 += csv_line({k.condition, k.size_tag, seed, fmt_opt(fo), fmt_opt(so), fmt_opt(s->accuracy(ItemType::FrameVariant)),
                      s->results_md5});
      if (k.condition == corpus::to_string(corpus::Condition::FeatureSwap))
        for (auto t : {ItemType::SwapFrameCued, ItemType::SwapNounOnly}) {
          auto it = s->tallies.find(t);
          if (it == s->tallies.end() || it->second.n == 0) continue;
          const auto& tl = it->second;
          f4 += csv_line({k.size_tag, seed, std::string(battery::to_string(t)), std::to_string(tl.n),
                          std::to_string(tl.correct), fmt(tl.accuracy()),
                          fmt(stats::binomial_test(tl.correct, tl.n, stats::kChance).p_value), s->results_md5});
        }
    }
    files["f1_so_accuracy.csv"] = f1;
    files["f2_fo_vs_so.csv"] = f2;
    files["f3_dissociation.csv"] = f3;
    files["f4_feature_swap.csv"] = f4;
  }

  // F5: posterior over alpha per corpus. Sizes share a corpus, so the
  // first size seen stands for all of them.
  {
    std::string f5 = "condition,seed,alpha,weight,mean_alpha,posterior_md5\n";
    std::set<std::pair<std::string, std::uint64_t>> seen;
    for (const auto* a : runs) {
      if (a->key.fraction != 1.0 || !a->stage(Stage::Hbm)) continue;
      if (!seen.insert({a->key.condition, a->key.seed}).second) continue;
      const auto post =
          hbm::HbmPosterior::from_json(json::parse(io::read_file(a->path(root, Stage::Hbm, "posterior.json"))));
      const auto md5 = a->hash(Stage::Hbm, "posterior.json");
      for (std::size_t i = 0; i < post.alpha.size(); ++i)
        f5 += csv_line({a->key.condition, std::to_string(a->key.seed), fmt(post.alpha[i]), fmt(post.weight[i]),
                        fmt(post.mean_alpha), md5});
    }
    files["f5_alpha_posterior.csv"] = f5;
  }

  // F6 and F7 from the probe stage.
  {
    std::string f6 = "condition,size_tag,seed,layer,accuracy,best_layer,baseline,p_value,probe_md5\n";
    std::string f7 = "condition,size_tag,seed,phase,layer,group,mean_cosine,cosines_md5\n";
    std::string f7p = "condition,size_tag,seed,phase,layer,group,cosine,pairs_md5\n";
    for (const auto* a : runs) {
      if (a->key.fraction != 1.0 || !a->stage(Stage::Probe)) continue;
      const auto& k = a->key;
      const auto seed = std::to_string(k.seed);
      const auto pj = json::parse(io::read_file(a->path(root, Stage::Probe, "probe.json")));
      const auto pmd5 = a->hash(Stage::Probe, "probe.json");
      const auto& perm = pj.at("permutation");
      const auto acc = pj.at("layer_accuracy").get<std::vector<double>>();
      for (std::size_t l = 0; l < acc.size(); ++l)
        f6 += csv_line({k.condition, k.size_tag, seed, std::to_string(l), fmt(acc[l]),
                        std::to_string(pj.at("best_layer").get<int>()),
                        perm.is_null() ? "" : fmt(perm.at("baseline").get<double>()),
                        perm.is_null() ? "" : fmt(perm.at("p_value").get<double>()), pmd5});
      const auto cmd5 = a->hash(Stage::Probe, "cosines.csv");
      const auto cos = io::parse_csv(io::read_file(a->path(root, Stage::Probe, "cosines.csv")));
      for (std::size_t i = 1; i < cos.size(); ++i)
        if (cos[i].size() >= 4)
        f7 += csv_line({k.condition, k.size_tag, seed, cos[i][0], cos[i][1], cos[i][2], cos[i][3], cmd5});
      const auto qmd5 = a->hash(Stage::Probe, "cosine_pairs.csv");
      const auto pairs = io::parse_csv(io::read_file(a->path(root, Stage::Probe, "cosine_pairs.csv")));
      for (std::size_t i = 1; i < pairs.size(); ++i)
        if (pairs[i].size() >= 4)
        f7p += csv_line({k.condition, k.size_tag, seed, pairs[i][0], pairs[i][1], pairs[i][2], pairs[i][3], qmd5});
    }
    files["f6_probe_by_layer.csv"] = f6;
    files["f7_cosine_by_layer.csv"] = f7;
    files["f7_cosine_pairs.csv"] = f7p;
  }

  // Greedy-generation diagnostics.
  {
    std::string d = "condition,size_tag,seed,fraction,item_type,n,correct_specific_rate,shape_class_rate,greedy_md5\n";
    for (const auto* a : runs) {
      if (!a->stage(Stage::Eval)) continue;
      const auto md5 = a->hash(Stage::Eval, "greedy.csv");
      const auto g = io::parse_csv(io::read_file(a->path(root, Stage::Eval, "greedy.csv")));
      for (std::size_t i = 1; i < g.size(); ++i)
        if (g[i].size() >= 4)
        d += csv_line({a->key.condition, a->key.size_tag, std::to_string(a->key.seed), fmt(a->key.fraction), g[i][0],
                       g[i][1], g[i][2], g[i][3], md5});
    }
    files["diagnostics.csv"] = d;
  }

  json manifest;
  manifest["schema"] = kBundleSchema;
  manifest["files"] = json::object();
  for (const auto& [name, bytes] : files) {
    io::write_file_atomic(out_dir / name, bytes);
    manifest["files"][name] = io::md5_hex(bytes);
    rep.files.push_back(name);
  }
  manifest["runs"] = json::array();
  for (const auto* a : runs) {
    json r = {{"run_id", a->key.id()}, {"stages", json::object()}};
    for (const auto& [s, rec] : a->stages)
      r["stages"][std::string(to_string(s))] = {{"input_hash", rec.input_hash}, {"outputs", rec.outputs}};
    manifest["runs"].push_back(r);
  }
  manifest["errors"] = rep.errors;
  io::write_file_atomic(out_dir / "manifest.json", manifest.dump(1) + "\n");
  rep.files.push_back("manifest.json");
  return rep;
}

}  // namespace wuglab::pipeline
