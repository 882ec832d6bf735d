#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "wuglab/probe.hpp"

using namespace wuglab;

namespace {

// 40 kinds with 2 rows each; kind k belongs to class k % 10. Layer 0 is
// pure noise, layer 1 carries the class as a scaled one-hot plus noise.
probe::ProbeDataset synthetic(std::uint64_t seed, double signal) {
  std::mt19937 rng(static_cast<unsigned>(seed));
  std::normal_distribution<double> noise(0.0, 1.0);
  const int kinds = 40, per = 2, d = 16, classes = 10;
  probe::ProbeDataset ds;
  ds.n_classes = classes;
  for (int k = 0; k < kinds; ++k)
    for (int r = 0; r < per; ++r) {
      ds.groups.push_back(k);
      ds.labels.push_back(k % classes);
    }
  const int n = kinds * per;
  Eigen::MatrixXd l0(n, d), l1(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      l0(i, j) = noise(rng);
      l1(i, j) = noise(rng) + (j == ds.labels[static_cast<std::size_t>(i)] ? signal : 0.0);
    }
  ds.layers = {l0, l1};
  ds.folds = probe::grouped_folds(ds.groups, ds.labels, probe::kFolds, 7);
  return ds;
}

eval::HiddenExport export_of(const std::vector<std::vector<float>>& vecs, int n_layers = 0) {
  eval::HiddenExport h;
  h.n_layers = n_layers;
  h.d_model = static_cast<int>(vecs.front().size());
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    h.item_ids.push_back("x" + std::to_string(i));
    h.positions.push_back(0);
    for (int l = 0; l <= n_layers; ++l) h.data.insert(h.data.end(), vecs[i].begin(), vecs[i].end());
  }
  return h;
}

}  // namespace

TEST(GroupedFolds, KeepKindsTogetherAndUseEveryFold) {
  const auto ds = synthetic(1, 3.0);
  std::map<int, int> fold_of;
  std::set<int> used;
  for (int i = 0; i < ds.n_rows(); ++i) {
    const auto g = ds.groups[static_cast<std::size_t>(i)], f = ds.folds[static_cast<std::size_t>(i)];
    used.insert(f);
    auto [it, fresh] = fold_of.emplace(g, f);
    EXPECT_EQ(it->second, f) << "kind " << g;
  }
  EXPECT_EQ(used.size(), static_cast<std::size_t>(probe::kFolds));
  EXPECT_NO_THROW(ds.validate());
}

TEST(GroupedFolds, AreDeterministic) {
  const auto a = synthetic(2, 1.0), b = synthetic(3, 1.0);
  EXPECT_EQ(a.folds, b.folds);
}

TEST(Logistic, SeparatesLinearlySeparableClasses) {
  Eigen::MatrixXd x(6, 2);
  x << -2, 0, -1.5, 0.5, -1, -0.5, 1, 0.2, 1.5, -0.3, 2, 0.1;
  const std::vector<int> y = {0, 0, 0, 1, 1, 1};
  const auto fit = probe::fit_logistic(x, y, 2, 1e-3);
  EXPECT_TRUE(fit.converged);
  const auto pred = fit.predict(x);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(pred(i), y[static_cast<std::size_t>(i)]);
}

TEST(Probe, DecodesSignalLayerAndNotNoiseLayer) {
  const auto ds = synthetic(4, 8.0);
  const auto res = probe::train_probe(ds);
  ASSERT_EQ(res.layer_accuracy.size(), 2u);
  EXPECT_GE(res.layer_accuracy[1], 0.95);
  EXPECT_LE(res.layer_accuracy[0], 0.3);
  EXPECT_EQ(res.best_layer, 1);
}

TEST(Permutation, NoiseFeaturesAreNotSignificant) {
  const auto ds = synthetic(5, 0.0);
  const auto pc = probe::permutation_test(ds, 1, 40);
  EXPECT_GT(pc.p_value, 0.05);
  EXPECT_EQ(pc.shuffled.size(), 40u);
}

TEST(Permutation, StrongSignalIsSignificantWithLowBaseline) {
  const auto ds = synthetic(6, 4.0);
  const auto pc = probe::permutation_test(ds, 1, probe::kShuffles);
  EXPECT_LT(pc.p_value, 0.01);
  EXPECT_GE(pc.baseline, 0.0);
  EXPECT_LE(pc.baseline, 0.25);
  EXPECT_NEAR(pc.gap, pc.true_accuracy - pc.baseline, 1e-12);
}

TEST(Permutation, IdentityShufflesReproduceTheTrueAccuracy) {
  const auto ds = synthetic(7, 2.0);
  std::vector<int> identity(40);
  std::iota(identity.begin(), identity.end(), 0);
  const auto pc = probe::permutation_test(ds, 1, {identity, identity, identity});
  for (double a : pc.shuffled) EXPECT_DOUBLE_EQ(a, pc.true_accuracy);
  EXPECT_DOUBLE_EQ(pc.baseline, pc.true_accuracy);
  EXPECT_DOUBLE_EQ(pc.p_value, 1.0);
}

TEST(Cosine, SymmetricBoundedAndScaleFree) {
  std::mt19937 rng(8);
  std::normal_distribution<float> d;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<float> a(12), b(12);
    for (auto& v : a) v = d(rng);
    for (auto& v : b) v = d(rng);
    const double ab = probe::cosine(a.data(), b.data(), 12);
    EXPECT_DOUBLE_EQ(ab, probe::cosine(b.data(), a.data(), 12));
    EXPECT_LE(std::abs(ab), 1.0);
    EXPECT_NEAR(probe::cosine(a.data(), a.data(), 12), 1.0, 1e-12);
    std::vector<float> a3 = a;
    for (auto& v : a3) v *= 3.0f;
    EXPECT_NEAR(probe::cosine(a3.data(), b.data(), 12), ab, 1e-6);
  }
}

TEST(CosineAnalysis, GroupsMeansAndPairs) {
  // Trained vectors are orthogonal, novel vectors identical.
  const auto trained = export_of({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
  const auto novel = export_of({{0, 0, 0, 1}, {0, 0, 0, 1}});
  const auto rep = probe::cosine_analysis(trained, novel, 0);
  ASSERT_EQ(rep.layers.size(), 1u);
  EXPECT_NEAR(rep.layers[0].within_trained, 0.0, 1e-12);
  EXPECT_NEAR(rep.layers[0].within_novel, 1.0, 1e-12);
  EXPECT_NEAR(rep.layers[0].cross, 0.0, 1e-12);
  std::map<std::string, int> n;
  for (const auto& p : rep.pairs) n[p.group]++;
  EXPECT_EQ(n["within-trained"], 3);
  EXPECT_EQ(n["within-novel"], 1);
  EXPECT_EQ(n["cross"], 6);
}

TEST(CosineAnalysis, ZeroVectorsAreDroppedAndCounted) {
  const auto trained = export_of({{1, 0}, {0, 0}, {1, 1}});
  const auto novel = export_of({{0, 1}, {0, 1}});
  const auto rep = probe::cosine_analysis(trained, novel);
  EXPECT_EQ(rep.zero_vectors, 1);
  EXPECT_NEAR(rep.layers[0].within_trained, 1 / std::sqrt(2.0), 1e-12);
  EXPECT_TRUE(rep.pairs.empty());
}

TEST(CosineAnalysis, SwappingGroupsSwapsWithinMeans) {
  std::mt19937 rng(9);
  std::normal_distribution<float> d;
  std::vector<std::vector<float>> a(5, std::vector<float>(6)), b(4, std::vector<float>(6));
  for (auto& v : a)
    for (auto& x : v) x = d(rng);
  for (auto& v : b)
    for (auto& x : v) x = d(rng);
  const auto ab = probe::cosine_analysis(export_of(a, 1), export_of(b, 1));
  const auto ba = probe::cosine_analysis(export_of(b, 1), export_of(a, 1));
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_DOUBLE_EQ(ab.layers[l].within_trained, ba.layers[l].within_novel);
    EXPECT_DOUBLE_EQ(ab.layers[l].within_novel, ba.layers[l].within_trained);
    EXPECT_NEAR(ab.layers[l].cross, ba.layers[l].cross, 1e-12);
  }
}

TEST(ReportLayer, CapsAtSix) {
  EXPECT_EQ(probe::report_layer(4), 4);
  EXPECT_EQ(probe::report_layer(6), 6);
  EXPECT_EQ(probe::report_layer(8), 6);
}

TEST(NounItems, OnePromptPerKind) {
  const auto spec = corpus::make_spec(corpus::Condition::Regular, 42);
  const auto novel = probe::noun_items(spec, true);
  const auto trained = probe::noun_items(spec, false);
  EXPECT_EQ(novel.size(), static_cast<std::size_t>(corpus::kNovelKinds));
  EXPECT_EQ(trained.size(), static_cast<std::size_t>(corpus::kTrainKinds));
  for (const auto& it : novel) EXPECT_EQ(it.prompt, "A " + it.noun + " is a");
}
