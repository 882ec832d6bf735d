#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "wuglab/battery.hpp"
#include "wuglab/corpus.hpp"
#include "wuglab/eval.hpp"

namespace wuglab::hbm {

// Per-kind counts over the values of one feature dimension.
struct CountMatrix {
  int n_values = corpus::kTokensPerDim;
  std::vector<int> kind_ids;
  std::vector<std::vector<int>> rows;

  int n_kinds() const { return static_cast<int>(rows.size()); }
  long total() const;
  void validate() const;

  std::string to_csv() const;
  static CountMatrix from_csv(std::string_view text);
};

// Which slot each kind contributes. ShapeOnly counts the shape slot for every
// kind, so kinds organised by another dimension weaken the shape regularity.
// StableDimension counts the texture slot for domain-B kinds instead.
enum class DimPolicy { ShapeOnly, StableDimension };

std::string_view to_string(DimPolicy p);
DimPolicy parse_dim_policy(std::string_view s);

// Only sentences that name the kind's noun are counted, and only slot tokens
// that belong to the counted dimension.
CountMatrix counts_from_corpus(const corpus::Corpus& corpus, DimPolicy policy = DimPolicy::ShapeOnly);

struct AlphaGrid {
  std::vector<double> alpha;
  std::vector<double> weight;  // prior mass per point, sums to 1
};

// Exponential(rate) prior discretized on a log-spaced grid; each point's mass
// is the prior density times alpha (the log-spacing Jacobian), normalized.
AlphaGrid default_grid(int points = 200, double lo = 1e-3, double hi = 1e3, double rate = 1.0);

// Corpus-wide value frequencies with a pseudo-count added to every value.
std::vector<double> estimate_beta(const CountMatrix& counts, double pseudo_count = 0.5);

// Sum over kinds of the log Dirichlet-multinomial probability of the kind's
// observation sequence under Dirichlet(alpha * beta).
double log_marginal_likelihood(const CountMatrix& counts, double alpha, const std::vector<double>& beta);

struct HbmPosterior {
  std::vector<double> alpha;
  std::vector<double> weight;
  std::vector<double> beta;
  double mean_alpha = 0;
  double map_alpha = 0;
  double log_evidence = 0;
  bool degenerate = false;  // no observations: posterior equals the prior

  nlohmann::json to_json() const;
  static HbmPosterior from_json(const nlohmann::json& j);
};

HbmPosterior fit_posterior(const CountMatrix& counts, const AlphaGrid& grid, const std::vector<double>& beta);
HbmPosterior fit_posterior(const CountMatrix& counts, const AlphaGrid& grid = default_grid());

// E_alpha[(c_i + alpha beta_i) / (n + alpha)].
std::vector<double> predictive(const HbmPosterior& posterior, const std::vector<int>& observed);

// KL between two-point distributions (p, 1-p) and (q, 1-q), in nats.
double bernoulli_kl(double p, double q);

struct KlReport {
  double mean_kl = 0;
  int n_items = 0;
  int floored = 0;  // items whose HBM probability hit the epsilon floor
  int exemplars_seen = 1;
  std::vector<std::pair<std::string, double>> per_item;

  nlohmann::json to_json() const;
};

inline constexpr double kProbFloor = 1e-12;

// Both the model and the HBM are reduced to a Bernoulli over {target, foil}
// on each SO item; returns the mean KL(model || HBM). The HBM sees
// `exemplars_seen` labelled exemplars of each novel kind (0 or 1).
KlReport forced_choice_kl(const std::vector<eval::RunResultRow>& rows, const battery::Battery& battery,
                          const corpus::CorpusSpec& spec, const HbmPosterior& posterior, int exemplars_seen = 1);

struct HbmRunOutput {
  CountMatrix counts;
  HbmPosterior posterior;
  // Predictive for each novel kind after exemplars_seen exemplars.
  std::map<int, std::vector<double>> novel_predictive;
};

HbmRunOutput run_for_corpus(const corpus::Corpus& corpus, int exemplars_seen = 1,
                            DimPolicy policy = DimPolicy::ShapeOnly);
// Writes counts.csv, posterior.json and predictive.csv.
void save(const HbmRunOutput& out, const std::filesystem::path& dir);

}  // namespace wuglab::hbm
