#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "wuglab/battery.hpp"
#include "wuglab/corpus.hpp"
#include "wuglab/eval.hpp"
#include "wuglab/lm.hpp"
#include "wuglab/tokenizer.hpp"

namespace wuglab::probe {

inline constexpr double kDefaultL2 = 1e-3;
inline constexpr std::uint64_t kFoldSeed = 7;
inline constexpr int kFolds = 3;
inline constexpr int kShuffles = 100;
inline constexpr int kMaxIterations = 5000;
inline constexpr double kGradTolerance = 1e-6;

struct ProbeDataset {
  std::vector<Eigen::MatrixXd> layers;  // one [n, d] matrix per stored layer
  std::vector<int> labels;              // class of the FO target token
  std::vector<int> groups;              // kind id of each row
  std::vector<int> folds;
  int n_classes = corpus::kTokensPerDim;

  int n_rows() const { return static_cast<int>(labels.size()); }
  void validate() const;
};

// Folds hold whole kinds, so no noun is both fitted and scored; kinds are
// dealt in shape order after a seeded shuffle to spread shapes across folds.
std::vector<int> grouped_folds(const std::vector<int>& groups, const std::vector<int>& labels, int k,
                               std::uint64_t seed);

// Rows are the FO items of the export; classes are the distinct target
// tokens in lexicon order.
ProbeDataset make_dataset(const eval::HiddenExport& hidden, const battery::Battery& battery,
                          const corpus::NonceLexicon& lexicon, std::uint64_t fold_seed = kFoldSeed);

struct LogisticFit {
  Eigen::MatrixXd weights;  // [d, C]
  Eigen::VectorXd bias;     // [C]
  int iterations = 0;
  bool converged = false;
  double grad_norm = 0;

  Eigen::VectorXi predict(const Eigen::MatrixXd& x) const;
};

// Multinomial logistic regression with an L2 penalty on the weights, fit by
// accelerated full-batch gradient descent.
LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& y, int n_classes, double l2,
                         int max_iterations = kMaxIterations, double tolerance = kGradTolerance);

struct CvResult {
  double accuracy = 0;
  int nonconverged = 0;
};

// Held-out accuracy; features are standardized with training-fold statistics.
CvResult cross_validate(const Eigen::MatrixXd& x, const std::vector<int>& labels, const std::vector<int>& folds,
                        int n_classes, double l2 = kDefaultL2);

struct ProbeResult {
  std::vector<double> layer_accuracy;
  int best_layer = 0;
  int nonconverged = 0;
};

ProbeResult train_probe(const ProbeDataset& data, double l2 = kDefaultL2);

struct PermutationControl {
  int layer = 0;
  double true_accuracy = 0;
  std::vector<double> shuffled;
  double baseline = 0;
  double gap = 0;
  double p_value = 1;

  nlohmann::json to_json() const;
};

// Each shuffle permutes which shape every kind maps to and reruns the same
// cross-validation with the same folds.
PermutationControl permutation_test(const ProbeDataset& data, int layer, int n_shuffles = kShuffles,
                                    std::uint64_t seed = kFoldSeed, double l2 = kDefaultL2);
// As above with explicit kind-level permutations (perm[i] is the label taken
// from the i-th distinct kind, in ascending kind order).
PermutationControl permutation_test(const ProbeDataset& data, int layer,
                                    const std::vector<std::vector<int>>& permutations, double l2 = kDefaultL2);

struct CosineLayer {
  double within_trained = 0;
  double within_novel = 0;
  double cross = 0;
};

struct CosinePair {
  std::string group;  // within-trained, within-novel or cross
  double cosine = 0;
};

struct CosineReport {
  std::vector<CosineLayer> layers;
  int zero_vectors = 0;
  int pair_layer = -1;
  std::vector<CosinePair> pairs;  // every pairwise cosine at pair_layer

  nlohmann::json to_json() const;
};

double cosine(const float* a, const float* b, int d);

// Mean pairwise cosines per layer. Zero vectors are dropped and counted.
// Individual cosines are kept for `pair_layer` when it is a valid layer.
CosineReport cosine_analysis(const eval::HiddenExport& trained, const eval::HiddenExport& novel, int pair_layer = -1);

inline constexpr eval::Position kCosinePosition = eval::Position::NounFinal;

// One "A NOUN is a" prompt per kind.
std::vector<battery::WugItem> noun_items(const corpus::CorpusSpec& spec, bool novel);

struct PerturbationReport {
  CosineReport before;
  CosineReport after;
  std::vector<std::pair<int, int>> mapping;  // (novel token id, trained token id)
};

// Novel noun embeddings are overwritten by the embeddings of distinct,
// randomly chosen trained nouns (seeded), then the analysis is repeated.
PerturbationReport perturbation_experiment(const lm::Checkpoint& ckpt, const tok::BpeModel& bpe,
                                           const corpus::CorpusSpec& spec, std::uint64_t seed = kFoldSeed,
                                           eval::Position position = kCosinePosition);

// Cosine analysis of the noun prompts for a checkpoint; pairs are kept at
// the report layer.
CosineReport noun_cosines(const lm::LanguageModel& model, const tok::BpeModel& bpe, const corpus::CorpusSpec& spec,
                          eval::Position position = kCosinePosition);

// min(6, n_layers): the reported "deep" layer.
int report_layer(int n_layers);

}  // namespace wuglab::probe
