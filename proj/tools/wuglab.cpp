// Command-line front end for corpus generation, training, evaluation,
// analysis and the run matrix.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "wuglab/analysis.hpp"
#include "wuglab/battery.hpp"
#include "wuglab/corpus.hpp"
#include "wuglab/error.hpp"
#include "wuglab/eval.hpp"
#include "wuglab/hbm.hpp"
#include "wuglab/io.hpp"
#include "wuglab/lm.hpp"
#include "wuglab/pipeline.hpp"
#include "wuglab/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace wuglab;
using json = nlohmann::json;

namespace {

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// Accepts a corpus directory or the corpus text file inside one.
corpus::Corpus load_corpus(const fs::path& p) {
  return corpus::Corpus::load(fs::is_directory(p) ? p : p.parent_path());
}

// Resolves the data root from either the root itself or its registry dir.
fs::path root_from_registry(const fs::path& p) {
  if (fs::exists(p / "registry.json")) return p.parent_path();
  if (fs::exists(p / "registry" / "registry.json")) return p;
  throw InvalidArgument("no registry.json under " + p.string());
}

void print_files(const fs::path& dir, const std::vector<std::string>& files) {
  for (const auto& f : files) std::cout << (dir / f).string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wuglab: shape-bias overhypothesis experiments on small language models"};
  app.require_subcommand(1);

  // gen
  std::string condition = "regular", out;
  std::uint64_t seed = 42;
  double fraction = 1.0;
  auto* gen = app.add_subcommand("gen", "Generate a corpus with metadata and manipulation checks");
  gen->add_option("--condition", condition, "Corpus condition")->required();
  gen->add_option("--seed", seed, "Corpus seed");
  gen->add_option("--fraction", fraction, "Corpus fraction (0.25, 0.5 or 1)");
  gen->add_option("--out", out, "Output directory")->required();

  // bpe
  std::string corpus_path, bpe_path;
  int merges = tok::kDefaultMerges;
  auto* bpe = app.add_subcommand("bpe", "Fit the BPE tokenizer on a corpus");
  bpe->add_option("--corpus", corpus_path, "Corpus directory or corpus.txt")->required();
  bpe->add_option("--merges", merges, "Number of merges");
  bpe->add_option("--out", out, "Output tokenizer JSON")->required();

  // train
  std::string size = "tiny";
  int steps = 0;
  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  train->add_option("--corpus", corpus_path, "Corpus directory")->required();
  train->add_option("--bpe", bpe_path, "Tokenizer JSON")->required();
  train->add_option("--size", size, "Size tag: tiny, small or medium");
  train->add_option("--seed", seed, "Training seed");
  train->add_option("--steps", steps, "Override the step count");
  train->add_option("--out", out, "Output directory")->required();

  // battery
  auto* batt = app.add_subcommand("battery", "Build and validate the evaluation battery");
  batt->add_option("--corpus", corpus_path, "Corpus directory")->required();
  batt->add_option("--seed", seed, "Battery seed");
  batt->add_option("--out", out, "Output battery JSON")->required();

  // eval
  std::string ckpt_path, battery_path;
  auto* ev = app.add_subcommand("eval", "Forced-choice evaluation of a checkpoint");
  ev->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  ev->add_option("--bpe", bpe_path, "Tokenizer JSON")->required();
  ev->add_option("--battery", battery_path, "Battery JSON")->required();
  ev->add_option("--corpus", corpus_path, "Corpus directory")->required();
  ev->add_option("--out", out, "Output directory")->required();

  // hbm
  int exemplars = 1;
  std::string policy = "shape-only";
  auto* hb = app.add_subcommand("hbm", "Fit the ideal observer to a corpus");
  hb->add_option("--corpus", corpus_path, "Corpus directory")->required();
  hb->add_option("--exemplars", exemplars, "Exemplars of each novel kind shown to the observer (0 or 1)");
  hb->add_option("--dim-policy", policy, "shape-only or stable-dimension");
  hb->add_option("--out", out, "Output directory")->required();

  // probe
  int shuffles = probe::kShuffles;
  std::string position(eval::to_string(probe::kCosinePosition));
  auto* pr = app.add_subcommand("probe", "Linear probes by layer with a permutation control");
  pr->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  pr->add_option("--bpe", bpe_path, "Tokenizer JSON")->required();
  pr->add_option("--battery", battery_path, "Battery JSON")->required();
  pr->add_option("--corpus", corpus_path, "Corpus directory")->required();
  pr->add_option("--shuffles", shuffles, "Permutation shuffles");
  pr->add_option("--cosine-position", position, "noun-final or critical-prediction");
  pr->add_option("--out", out, "Output directory")->required();

  // reprs
  auto* rp = app.add_subcommand("reprs", "Noun cosine analysis with the embedding-swap control");
  rp->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  rp->add_option("--bpe", bpe_path, "Tokenizer JSON")->required();
  rp->add_option("--corpus", corpus_path, "Corpus directory")->required();
  rp->add_option("--position", position, "noun-final or critical-prediction");
  rp->add_option("--out", out, "Output directory")->required();

  // analyze
  std::string results_dir;
  auto* an = app.add_subcommand("analyze", "Hypothesis tests over a tree of results.csv files");
  an->add_option("--results", results_dir, "Directory searched recursively")->required();
  an->add_option("--out", out, "Output verdicts JSON")->required();

  // run-all
  std::string config_path;
  bool full = false;
  int jobs = 0;
  auto* ra = app.add_subcommand("run-all", "Run the experiment matrix and write the report bundle");
  ra->add_option("--config", config_path, "Matrix config JSON")->required();
  ra->add_flag("--full", full, "Run the full 150-run matrix");
  ra->add_option("--jobs", jobs, "Concurrent runs");

  // report
  std::string registry_dir;
  auto* rep = app.add_subcommand("report", "Write the report bundle from a registry");
  rep->add_option("--registry", registry_dir, "Data root or its registry directory")->required();
  rep->add_option("--out", out, "Bundle directory (default <root>/report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto c = corpus::generate_corpus(corpus::make_spec(corpus::parse_condition(condition), seed, fraction));
      print_files(out, pipeline::write_corpus(out, c));
      std::cout << "md5 " << c.md5 << "\n";
    } else if (*bpe) {
      const auto c = load_corpus(corpus_path);
      const auto model = tok::fit_bpe(c, merges);
      if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
      model.save(out);
      std::cout << out << "\nvocab " << model.vocab_size() << " merges " << model.num_merges() << "\n";
    } else if (*train) {
      const auto c = load_corpus(corpus_path);
      const auto tk = tok::BpeModel::load(bpe_path);
      const auto sz = lm::parse_size(size);
      const auto mc = lm::ModelConfig::for_size(sz, tk.vocab_size());
      auto tc = lm::TrainConfig::for_size(sz, seed);
      if (steps > 0) tc.steps = steps;
      std::vector<std::vector<int>> seqs;
      for (const auto& s : c.sentences) seqs.push_back(tk.encode_sentence(s));
      const int every = std::max(1, tc.steps / 20);
      auto res = lm::train(seqs, mc, tc, tok::kEos, [&](const lm::TrainLogRow& r) {
        if ((r.step + 1) % every == 0) log_line("step " + std::to_string(r.step + 1) + " loss " + io::fmt_double(r.loss));
      });
      fs::create_directories(out);
      res.checkpoint.save(fs::path(out) / lm::kCheckpointFile);
      io::write_file_atomic(fs::path(out) / lm::kTrainLogFile, lm::train_log_csv(res.log));
      std::cout << (fs::path(out) / lm::kCheckpointFile).string() << "\nfinal loss " << res.final_loss << "\n";
    } else if (*batt) {
      const auto c = load_corpus(corpus_path);
      const auto b = battery::build_battery(c, seed);
      const auto v = battery::validate_battery(b, c);
      for (const auto& s : v.violations) std::cerr << "violation: " << s << "\n";
      if (!v.ok()) return 1;
      if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
      b.save(out);
      std::cout << out << "\nitems " << b.items.size() << "\n";
    } else if (*ev) {
      const auto c = load_corpus(corpus_path);
      const auto b = battery::Battery::load(battery_path);
      const lm::LanguageModel model(lm::Checkpoint::load(ckpt_path));
      const eval::RunInfo info{fs::path(ckpt_path).parent_path().string(), std::string(corpus::to_string(b.condition)),
                               std::string(lm::to_string(model.config().size)), b.seed};
      print_files(out, pipeline::write_eval(out, model, tok::BpeModel::load(bpe_path), b, c, info));
    } else if (*hb) {
      const auto res = hbm::run_for_corpus(load_corpus(corpus_path), exemplars, hbm::parse_dim_policy(policy));
      hbm::save(res, out);
      std::cout << "mean alpha " << res.posterior.mean_alpha << "\n";
    } else if (*pr) {
      print_files(out, pipeline::write_probe(out, lm::Checkpoint::load(ckpt_path), tok::BpeModel::load(bpe_path),
                                             battery::Battery::load(battery_path), load_corpus(corpus_path), shuffles,
                                             eval::parse_position(position)));
    } else if (*rp) {
      print_files(out, pipeline::write_reprs(out, lm::Checkpoint::load(ckpt_path), tok::BpeModel::load(bpe_path),
                                             load_corpus(corpus_path), eval::parse_position(position)));
    } else if (*an) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(results_dir))
        if (e.is_regular_file() && e.path().filename() == "results.csv") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      std::vector<stats::RunSummary> runs;
      for (const auto& p : found) {
        const auto bytes = io::read_file(p);
        const auto rows = eval::parse_results_csv(bytes);
        if (rows.empty()) continue;
        // Pipeline run ids carry the corpus fraction; other ids mean 1.
        double f = 1.0;
        try {
          f = stats::RunKey::parse(rows.front().run_id).fraction;
        } catch (const InvalidArgument&) {
        }
        auto s = stats::summarize_run(rows, f, io::md5_hex(bytes));
        const auto kl = p.parent_path().parent_path() / "stats" / "kl.json";
        if (fs::exists(kl)) {
          const auto j = json::parse(io::read_file(kl));
          if (!j.at("kl").is_null()) s.kl_nats = j.at("kl").at("mean_kl_nats").get<double>();
        }
        runs.push_back(std::move(s));
      }
      const auto v = stats::analyze(runs);
      if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
      io::write_file_atomic(out, v.dump(1) + "\n");
      std::cout << out << "\nruns " << runs.size() << "\n";
    } else if (*ra) {
      auto cfg = pipeline::MatrixConfig::load(config_path);
      if (full) cfg.runs = pipeline::full_matrix();
      if (jobs > 0) cfg.jobs = jobs;
      pipeline::Registry registry(pipeline::resolve_data_dir(cfg.data_dir));
      const auto r = pipeline::run_matrix(cfg, registry, log_line);
      std::cout << "executed " << r.executed << " skipped " << r.skipped << " failed " << r.failed << "\n";
      for (const auto& id : r.failed_runs) std::cout << "failed run " << id << "\n";
      const auto b = pipeline::emit_reports(registry, registry.root() / "report");
      std::cout << "bundle " << b.dir.string() << " (" << b.files.size() << " files, " << b.errors.size()
                << " errors)\n";
      return r.failed > 0 ? 1 : 0;
    } else if (*rep) {
      pipeline::Registry registry(root_from_registry(registry_dir));
      const fs::path dir = out.empty() ? registry.root() / "report" : fs::path(out);
      const auto b = pipeline::emit_reports(registry, dir);
      for (const auto& e : b.errors) std::cerr << "error: " << e << "\n";
      std::cout << "bundle " << b.dir.string() << " (" << b.files.size() << " files)\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "wuglab: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
