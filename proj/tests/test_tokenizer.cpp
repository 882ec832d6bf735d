#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "wuglab/corpus.hpp"
#include "wuglab/tokenizer.hpp"

using namespace wuglab;
using tok::BpeModel;

namespace {

const corpus::Corpus& regular42() {
  static const auto c = corpus::generate_corpus(corpus::make_spec(corpus::Condition::Regular, 42));
  return c;
}

const BpeModel& regular_bpe() {
  static const auto m = tok::fit_bpe(regular42());
  return m;
}

// Random valid UTF-8 of 1-4 byte code points, excluding surrogates.
std::string random_utf8(std::mt19937& rng, int n_points) {
  std::uniform_int_distribution<int> width(1, 4);
  std::string s;
  for (int i = 0; i < n_points; ++i) {
    std::uint32_t cp = 0;
    switch (width(rng)) {
      case 1: cp = std::uniform_int_distribution<std::uint32_t>(0x01, 0x7f)(rng); break;
      case 2: cp = std::uniform_int_distribution<std::uint32_t>(0x80, 0x7ff)(rng); break;
      case 3:
        do cp = std::uniform_int_distribution<std::uint32_t>(0x800, 0xffff)(rng);
        while (cp >= 0xd800 && cp <= 0xdfff);
        break;
      default: cp = std::uniform_int_distribution<std::uint32_t>(0x10000, 0x10ffff)(rng);
    }
    if (cp < 0x80) {
      s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      s.push_back(static_cast<char>(0xc0 | (cp >> 6)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
      s.push_back(static_cast<char>(0xe0 | (cp >> 12)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
      s.push_back(static_cast<char>(0xf0 | (cp >> 18)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
  }
  return s;
}

}  // namespace

TEST(Pretokenize, SpaceAttachesToFollowingRun) {
  const auto chunks = tok::pretokenize("A blicket  is\ta dax");
  const std::vector<std::string> want = {"A", " blicket", " ", " is", "\t", "a", " dax"};
  EXPECT_EQ(chunks, want);
}

TEST(Pretokenize, ConcatenationIsIdentity) {
  std::mt19937 rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto s = random_utf8(rng, 30);
    std::string joined;
    for (const auto& c : tok::pretokenize(s)) joined += c;
    ASSERT_EQ(joined, s);
  }
}

TEST(Bpe, VocabularyLayout) {
  const auto& m = regular_bpe();
  EXPECT_EQ(m.piece(tok::kBos), "");
  EXPECT_EQ(m.piece(tok::kEos), "");
  for (int b = 0; b < 256; ++b) EXPECT_EQ(m.piece(tok::kByteBase + b), std::string(1, static_cast<char>(b)));
  EXPECT_EQ(m.vocab_size(), tok::kFirstMerge + m.num_merges());
  EXPECT_EQ(m.num_merges(), tok::kDefaultMerges);
}

TEST(Bpe, RoundTripsTrainingText) {
  const auto& m = regular_bpe();
  for (const auto& s : regular42().sentences) ASSERT_EQ(m.decode(m.encode(s)), s);
}

TEST(Bpe, RoundTripsRandomUtf8) {
  const auto& m = regular_bpe();
  std::mt19937 rng(11);
  for (int i = 0; i < 500; ++i) {
    const auto s = random_utf8(rng, 1 + i % 40);
    ASSERT_EQ(m.decode(m.encode(s)), s);
  }
}

TEST(Bpe, RoundTripsArbitraryBytes) {
  const auto& m = regular_bpe();
  std::mt19937 rng(12);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int i = 0; i < 200; ++i) {
    std::string s(static_cast<std::size_t>(1 + i % 50), '\0');
    for (auto& c : s) c = static_cast<char>(byte(rng));
    ASSERT_EQ(m.decode(m.encode(s)), s);
  }
}

TEST(Bpe, EncodeSentenceWrapsWithSpecials) {
  const auto& m = regular_bpe();
  const auto ids = m.encode_sentence("A zull is a sallo thing");
  ASSERT_GE(ids.size(), 3u);
  EXPECT_EQ(ids.front(), tok::kBos);
  EXPECT_EQ(ids.back(), tok::kEos);
  for (int id : ids) EXPECT_LT(id, m.vocab_size());
}

TEST(Bpe, ContentWordsAreSingleTokens) {
  const auto& m = regular_bpe();
  for (const auto& w : corpus::NonceLexicon::standard().content_words())
    EXPECT_EQ(m.encode(" " + w).size(), 1u) << w;
}

TEST(Bpe, CrossSeedTextHasNoByteFallbacks) {
  for (auto c : {corpus::Condition::Regular, corpus::Condition::Scrambled, corpus::Condition::FeatureSwap}) {
    const auto m = tok::fit_bpe(corpus::generate_corpus(corpus::make_spec(c, 42)));
    for (std::uint64_t seed : {123u, 456u, 789u, 1001u}) {
      const auto other = corpus::generate_corpus(corpus::make_spec(c, seed));
      tok::EncodeStats st;
      for (const auto& s : other.sentences) m.encode_sentence(s, &st);
      EXPECT_EQ(st.byte_fallbacks, 0u) << corpus::to_string(c) << " seed " << seed;
    }
  }
}

TEST(Bpe, UnseenBytesCountAsFallbacks) {
  tok::EncodeStats st;
  regular_bpe().encode("\xe2\x82\xac", &st);
  EXPECT_EQ(st.byte_fallbacks, 3u);
}

TEST(Bpe, RefitIsBitIdentical) {
  const auto again = tok::fit_bpe(regular42());
  EXPECT_EQ(again.merges(), regular_bpe().merges());
  EXPECT_EQ(again.to_json().dump(), regular_bpe().to_json().dump());
}

TEST(Bpe, SaveLoadPreservesEncoding) {
  const auto path = std::filesystem::temp_directory_path() / "wuglab_test_bpe.json";
  regular_bpe().save(path);
  const auto back = BpeModel::load(path);
  EXPECT_EQ(back.merges(), regular_bpe().merges());
  for (std::size_t i = 0; i < regular42().sentences.size(); i += 97)
    EXPECT_EQ(back.encode(regular42().sentences[i]), regular_bpe().encode(regular42().sentences[i]));
  std::filesystem::remove(path);
}

TEST(Bpe, MergesFollowCountsTieBreakAndRuleOrder) {
  // Chunks "abab", " abab", " ab". Traced by hand:
  //   1. (a,b) x5                          -> "ab"
  //   2. (ab,ab) x2 ties (" ",ab) x2; the smaller id pair wins -> " ab"
  //   3. (ab,ab) x1 ties (" ab",ab) x1     -> "abab"
  const std::vector<std::string> texts = {"abab abab ab"};
  const auto m = tok::fit_bpe(texts, {}, 3);
  ASSERT_EQ(m.num_merges(), 3);
  EXPECT_EQ(m.piece(tok::kFirstMerge), "ab");
  EXPECT_EQ(m.piece(tok::kFirstMerge + 1), " ab");
  EXPECT_EQ(m.piece(tok::kFirstMerge + 2), "abab");
  EXPECT_EQ(m.encode("abab"), std::vector<int>{tok::kFirstMerge + 2});
  // " ab" outranks "abab", so the spaced chunk never reaches the longer piece.
  EXPECT_EQ(m.encode(" abab"), (std::vector<int>{tok::kFirstMerge + 1, tok::kFirstMerge}));
}

TEST(Bpe, SmallTextRunsShortOfMerges) {
  const std::vector<std::string> texts = {"aa"};
  const auto m = tok::fit_bpe(texts, {}, 10);
  EXPECT_TRUE(m.short_of_merges());
  EXPECT_LT(m.num_merges(), 10);
  EXPECT_EQ(m.decode(m.encode("aaaa")), "aaaa");
}
