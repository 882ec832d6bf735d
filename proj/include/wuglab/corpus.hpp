#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace wuglab::corpus {

enum class FeatureDim { Shape = 0, Colour = 1, Texture = 2 };
inline constexpr int kNumDims = 3;
inline constexpr int kTokensPerDim = 10;
inline constexpr int kTrainKinds = 32;
inline constexpr int kNovelKinds = 8;
inline constexpr int kTotalKinds = kTrainKinds + kNovelKinds;
inline constexpr std::array<FeatureDim, 3> kAllDims = {FeatureDim::Shape, FeatureDim::Colour,
                                                       FeatureDim::Texture};

enum class Condition {
  Regular,
  Scrambled,
  FeatureSwap,
  WeakLabel25,
  ParaphrasedNoLabel,
  BareNoLabel,
  NoiseInjection,
  FrequencyMatched,
};
inline constexpr std::array<Condition, 8> kAllConditions = {
    Condition::Regular,          Condition::Scrambled,          Condition::FeatureSwap,
    Condition::WeakLabel25,      Condition::ParaphrasedNoLabel, Condition::BareNoLabel,
    Condition::NoiseInjection,   Condition::FrequencyMatched};

enum class Domain { A, B };

std::string_view to_string(FeatureDim d);
std::string_view to_string(Condition c);
std::string_view to_string(Domain d);
// Accepts the CLI spelling ("regular", "feature-swap", "weak-label-25", ...)
// as well as the enumerator name.
Condition parse_condition(std::string_view s);
FeatureDim parse_dim(std::string_view s);

// Fixed nonce vocabulary shared by every corpus. Kind i uses nouns[i]; the
// last kNovelKinds nouns belong to the held-out novel kinds.
struct NonceLexicon {
  std::vector<std::string> nouns;
  std::array<std::vector<std::string>, kNumDims> features;
  std::vector<std::string> markers;
  std::vector<std::string> fillers;

  const std::vector<std::string>& tokens(FeatureDim d) const {
    return features[static_cast<int>(d)];
  }
  // Every noun, feature token and marker (the words a tokenizer must keep whole).
  std::vector<std::string> content_words() const;
  // Throws InvalidArgument on duplicate or literal-colliding strings.
  void validate(std::span<const std::string> literals) const;

  static const NonceLexicon& standard();
};

enum class SlotKind { Literal, Noun, Shape, Colour, Texture, Filler };

struct SlotItem {
  SlotKind kind = SlotKind::Literal;
  std::string literal;
};

enum class FrameRole { Train, HeldOut, Count, Mass, SlotShuffle, Background };

struct FrameTemplate {
  int frame_id = 0;
  std::vector<SlotItem> pattern;
  bool labelled = false;
  Domain domain = Domain::A;
  FrameRole role = FrameRole::Train;

  // "A {NOUN} is a {SHAPE} {COLOUR} {TEXTURE} thing"
  std::string pattern_string() const;
  static std::vector<SlotItem> parse_pattern(std::string_view s);
  // Index of the slot in `pattern`, or -1.
  int slot_index(SlotKind kind) const;
  std::vector<std::string> literals() const;
};

SlotKind slot_for(FeatureDim d);

// Every frame the project knows, indexed by frame_id.
const std::vector<FrameTemplate>& frame_catalog();
const FrameTemplate& frame_by_id(int frame_id);
// The eight training frames for a domain (five labelled, three unlabelled).
std::vector<int> training_frames(Domain d);
std::vector<int> held_out_frames();

struct KindSpec {
  int kind_id = 0;
  std::string noun;
  FeatureDim stable_dim = FeatureDim::Shape;
  std::string stable_token;
  int n_exemplars = 12;
  Domain domain = Domain::A;
  bool is_novel = false;
};

struct CorpusSpec {
  Condition condition = Condition::Regular;
  std::uint64_t seed = 42;
  double fraction = 1.0;
  std::vector<KindSpec> kinds;
  std::vector<FrameTemplate> frames;
  double label_rate = 1.0;
  double noise_rate = 0.0;
  // Each kind contributes n_exemplars sentences per cycle.
  int frame_cycles = 4;
  NonceLexicon lexicon;

  const KindSpec& kind(int kind_id) const { return kinds.at(static_cast<std::size_t>(kind_id)); }
  // Internal-consistency check; throws InvalidArgument.
  void validate() const;
};

// Deterministic recipe for (condition, seed, fraction).
CorpusSpec make_spec(Condition condition, std::uint64_t seed, double fraction = 1.0);

struct Provenance {
  int kind_id = -1;  // -1 for background sentences
  int frame_id = -1;
  bool labelled = false;        // the kind's noun is present
  std::string marker;           // category marker used in place of the noun
  std::array<std::string, kNumDims> slot_tokens;  // token occupying each feature slot
  std::array<bool, kNumDims> noised{};
};

struct Corpus {
  CorpusSpec spec;
  std::vector<std::string> sentences;
  std::vector<Provenance> provenance;
  std::string md5;

  // UTF-8, one sentence per line, LF-terminated.
  std::string text() const;
  std::size_t whitespace_vocab_size() const;
  std::map<std::string, int> token_frequencies() const;

  nlohmann::json metadata_json() const;
  void save(const std::filesystem::path& dir) const;
  // Loads corpus.txt + corpus.json; throws if the stored md5 does not match.
  static Corpus load(const std::filesystem::path& dir);
};

inline constexpr const char* kCorpusText = "corpus.txt";
inline constexpr const char* kCorpusMeta = "corpus.json";

Corpus generate_corpus(const CorpusSpec& spec);

std::string checksum(const Corpus& corpus);

struct ManipulationCheckReport {
  // Absent when the corpus has no labelled sentences.
  std::optional<double> mi_noun_shape_slot;
  std::optional<double> mi_noun_all_features;
  std::map<int, std::array<double, kNumDims>> per_kind_normalized_entropy;
  int labelled_sentences = 0;

  nlohmann::json to_json() const;
};

ManipulationCheckReport manipulation_check(const Corpus& corpus);

// Mutual information (bits) of a joint count table given as (x, y) pairs.
double mutual_information_bits(std::span<const std::pair<std::string, std::string>> pairs);

// Re-deals tokens so every token's count is within one of every other's.
// `slots` holds the token in each slot; `locked` slots keep their token.
// Throws Error with the residual imbalance when locked slots make this
// impossible.
void equalize_frequencies(std::vector<std::string>& slots, const std::vector<bool>& locked,
                          std::span<const std::string> alphabet, std::uint64_t seed);

}  // namespace wuglab::corpus
