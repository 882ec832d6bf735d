#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "wuglab/io.hpp"
#include "wuglab/lm.hpp"

using namespace wuglab::lm;
namespace fs = std::filesystem;

namespace {

ModelConfig mini(int vocab = 40) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  c.dropout = 0.0;
  return c;
}

// Sequences over a tiny alphabet with a fixed successor rule, wrapped in
// BOS (0) and EOS (1).
std::vector<std::vector<int>> toy_sequences(int n, int vocab, std::uint64_t seed) {
  std::mt19937 rng(static_cast<unsigned>(seed));
  std::uniform_int_distribution<int> start(2, vocab - 1);
  std::vector<std::vector<int>> out;
  for (int i = 0; i < n; ++i) {
    std::vector<int> s = {0};
    int t = start(rng);
    for (int j = 0; j < 8; ++j) {
      s.push_back(t);
      t = 2 + (t - 2 + 3) % (vocab - 2);
    }
    s.push_back(1);
    out.push_back(s);
  }
  return out;
}

TrainConfig quick_train(int steps = 60) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 8;
  t.warmup_steps = 5;
  t.base_lr = 3e-3;
  t.seed = 5;
  return t;
}

}  // namespace

TEST(GradientCheck, AnalyticMatchesCentralDifferences) {
  const auto rep = gradient_check(gradcheck_config());
  EXPECT_GT(rep.checked, 0);
  EXPECT_LT(rep.max_rel_error, 1e-3) << "worst " << rep.worst_param;
}

TEST(GradientCheck, HoldsAtAnotherSeedAndWidth) {
  auto cfg = gradcheck_config();
  cfg.n_heads = 4;
  const auto rep = gradient_check(cfg, 3);
  EXPECT_LT(rep.max_rel_error, 1e-3) << "worst " << rep.worst_param;
}

TEST(ModelConfig, UntiedOutputRejected) {
  auto cfg = mini();
  cfg.weight_tying = false;
  EXPECT_ANY_THROW(Transformer<float>{cfg});
}

TEST(ModelConfig, ParameterCountsNearTargets) {
  const double want[] = {3.4e6, 10e6, 25.6e6};
  int i = 0;
  for (auto s : {SizeTag::Tiny, SizeTag::Small, SizeTag::Medium}) {
    const auto cfg = ModelConfig::for_size(s, 770);
    const double n = static_cast<double>(cfg.parameter_count());
    EXPECT_LT(std::abs(n - want[i]) / want[i], 0.15) << to_string(s) << " " << n;
    EXPECT_EQ(n, static_cast<double>(ParamLayout(cfg).total()));
    ++i;
  }
}

TEST(ModelConfig, JsonRoundTrip) {
  const auto cfg = ModelConfig::for_size(SizeTag::Small, 770);
  EXPECT_EQ(ModelConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
  const auto tc = TrainConfig::for_size(SizeTag::Medium, 9);
  EXPECT_EQ(TrainConfig::from_json(tc.to_json()).to_json(), tc.to_json());
}

TEST(ModelConfig, InvalidShapesRejected) {
  auto cfg = mini();
  cfg.n_heads = 3;
  EXPECT_ANY_THROW(cfg.validate());
}

TEST(TrainConfig, StepsFollowSize) {
  EXPECT_EQ(TrainConfig::for_size(SizeTag::Tiny, 1).steps, 5000);
  EXPECT_GT(TrainConfig::for_size(SizeTag::Small, 1).steps, 0);
  EXPECT_GT(TrainConfig::for_size(SizeTag::Medium, 1).steps, 0);
}

TEST(TrainConfig, WarmupThenMonotoneCosineDecay) {
  const auto tc = TrainConfig::for_size(SizeTag::Tiny, 1);
  EXPECT_NEAR(tc.lr_at(0), tc.base_lr / tc.warmup_steps, 1e-15);
  double peak = 0;
  for (int s = 0; s < tc.steps; ++s) peak = std::max(peak, tc.lr_at(s));
  EXPECT_NEAR(peak, tc.base_lr, 1e-12);
  for (int s = tc.warmup_steps; s + 1 < tc.steps; ++s) ASSERT_LE(tc.lr_at(s + 1), tc.lr_at(s)) << s;
  EXPECT_LE(tc.lr_at(tc.steps - 1), 0.01 * tc.base_lr + 1e-15);
}

TEST(Batch, ShiftsAndPads) {
  const std::vector<std::vector<int>> seqs = {{0, 5, 6, 1}, {0, 7, 1}};
  const auto b = make_batch(seqs, 1);
  EXPECT_EQ(b.batch, 2);
  EXPECT_EQ(b.len, 3);
  EXPECT_EQ(b.inputs, (std::vector<int>{0, 5, 6, 0, 7, 1}));
  EXPECT_EQ(b.targets, (std::vector<int>{5, 6, 1, 7, 1, -1}));
  EXPECT_EQ(b.n_targets, 5);
}

TEST(Transformer, DistributionsNormalizeAndAreCausal) {
  Transformer<float> net(mini());
  net.init(7);
  const std::vector<int> a = {0, 4, 9, 12, 3, 8};
  std::vector<int> b = a;
  b[4] = 20;
  b[5] = 21;
  Transformer<float>::Mat la, lb;
  net.forward(a, &la);
  net.forward(b, &lb);
  for (int t = 0; t < la.rows(); ++t) EXPECT_NEAR(la.row(t).array().exp().sum(), 1.0, 1e-5);
  // Positions before the first changed token see identical prefixes.
  for (int t = 0; t < 4; ++t)
    for (int v = 0; v < la.cols(); ++v) ASSERT_EQ(la(t, v), lb(t, v)) << t << " " << v;
  EXPECT_GT((la.row(4) - lb.row(4)).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Transformer, HiddenStatesHaveOneEntryPerLayerPlusEmbeddings) {
  Transformer<float> net(mini());
  net.init(2);
  const std::vector<int> ids = {0, 3, 4};
  std::vector<Transformer<float>::Mat> hidden;
  net.forward(ids, nullptr, &hidden);
  ASSERT_EQ(hidden.size(), 3u);
  for (const auto& h : hidden) {
    EXPECT_EQ(h.rows(), 3);
    EXPECT_EQ(h.cols(), 16);
  }
}

TEST(Transformer, TiedOutputProjectionSharesEmbeddingStorage) {
  auto cfg = mini();
  const auto seqs = toy_sequences(16, cfg.vocab_size, 1);
  auto res = train(seqs, cfg, quick_train(3), 1);
  Transformer<float> net(cfg);
  net.params().assign(res.checkpoint.params.begin(), res.checkpoint.params.end());
  EXPECT_EQ(net.output_embedding(), net.token_embedding());
  // Perturbing the shared rows changes the output logits.
  const std::vector<int> ids = {0, 5};
  Transformer<float>::Mat before, after;
  net.forward(ids, &before);
  const auto& wte = net.layout().get("wte");
  net.params()[wte.offset + 7 * static_cast<std::size_t>(cfg.d_model)] += 1.0f;
  net.forward(ids, &after);
  EXPECT_NE(before(1, 7), after(1, 7));
}

TEST(Training, LossDecreasesOnLearnableSequences) {
  const auto cfg = mini();
  const auto res = train(toy_sequences(64, cfg.vocab_size, 2), cfg, quick_train(150), 1);
  EXPECT_EQ(res.log.size(), 150u);
  EXPECT_LT(res.final_loss, 0.6 * res.initial_loss);
}

TEST(Training, IsDeterministicForASeed) {
  const auto cfg = mini();
  const auto seqs = toy_sequences(32, cfg.vocab_size, 3);
  const auto a = train(seqs, cfg, quick_train(20), 1);
  const auto b = train(seqs, cfg, quick_train(20), 1);
  EXPECT_EQ(a.checkpoint.params, b.checkpoint.params);
  auto other = quick_train(20);
  other.seed = 6;
  EXPECT_NE(train(seqs, cfg, other, 1).checkpoint.params, a.checkpoint.params);
}

TEST(Checkpoint, SaveLoadSaveIsByteStable) {
  const auto cfg = mini();
  const auto res = train(toy_sequences(16, cfg.vocab_size, 4), cfg, quick_train(5), 1);
  const auto dir = fs::temp_directory_path() / "wuglab_test_ckpt";
  fs::create_directories(dir);
  res.checkpoint.save(dir / "a.ckpt");
  Checkpoint::load(dir / "a.ckpt").save(dir / "b.ckpt");
  EXPECT_EQ(wuglab::io::md5_file(dir / "a.ckpt"), wuglab::io::md5_file(dir / "b.ckpt"));
  const auto back = Checkpoint::load(dir / "a.ckpt");
  EXPECT_EQ(back.params, res.checkpoint.params);
  EXPECT_EQ(back.step, 5);
  fs::remove_all(dir);
}

TEST(LanguageModel, ScoresAgreeWithNextTokenDistribution) {
  const auto cfg = mini();
  const auto res = train(toy_sequences(16, cfg.vocab_size, 5), cfg, quick_train(10), 1);
  const LanguageModel lm(res.checkpoint);
  const std::vector<int> prompt = {0, 6, 9};
  const auto lp = lm.next_log_probs(prompt);
  const std::vector<int> one = {12};
  EXPECT_NEAR(lm.score_completion(prompt, one), lp[12], 1e-5);
  const int g = lm.greedy_next(prompt);
  for (double v : lp) EXPECT_LE(v, lp[static_cast<std::size_t>(g)]);
  // Two-token completions chain the conditionals.
  const std::vector<int> two = {12, 15};
  std::vector<int> longer = prompt;
  longer.push_back(12);
  EXPECT_NEAR(lm.score_completion(prompt, two), lp[12] + lm.next_log_probs(longer)[15], 1e-4);
}

TEST(SwapEmbeddings, CopiesRowsAndLeavesOthers) {
  const auto cfg = mini();
  const auto res = train(toy_sequences(16, cfg.vocab_size, 6), cfg, quick_train(5), 1);
  const std::vector<std::pair<int, int>> mapping = {{10, 20}, {11, 21}};
  const auto sw = swap_embeddings(res.checkpoint, mapping);
  const ParamLayout layout(cfg);
  const auto off = layout.get("wte").offset;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  for (auto [dst, src] : mapping)
    for (std::size_t k = 0; k < d; ++k)
      EXPECT_EQ(sw.params[off + dst * d + k], res.checkpoint.params[off + src * d + k]);
  for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(sw.params[off + 12 * d + k], res.checkpoint.params[off + 12 * d + k]);
}
