#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace wuglab::corpus {
struct Corpus;
}

namespace wuglab::tok {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kByteBase = 2;
inline constexpr int kFirstMerge = kByteBase + 256;
inline constexpr int kDefaultMerges = 512;

// Splits text into BPE chunks. A single space attaches to the following
// non-space run (" blicket"); any other whitespace byte is its own chunk.
std::vector<std::string> pretokenize(std::string_view text);

struct EncodeStats {
  std::size_t tokens = 0;
  // Bytes that never occurred in the fitting text. They still encode (every
  // byte has an id) but count as out-of-vocabulary events.
  std::size_t byte_fallbacks = 0;
};

class BpeModel {
 public:
  BpeModel();

  int vocab_size() const { return static_cast<int>(pieces_.size()); }
  int num_merges() const { return static_cast<int>(merges_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  // Raw bytes of a token (empty for BOS/EOS).
  const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  // Token id whose bytes are exactly `bytes`, if any.
  std::optional<int> find(std::string_view bytes) const;
  bool seen_byte(unsigned char b) const { return alphabet_[b]; }
  // Set when the corpus could not supply the full merge budget.
  bool short_of_merges() const { return short_of_merges_; }
  int requested_merges() const { return requested_merges_; }

  std::vector<int> encode(std::string_view text, EncodeStats* stats = nullptr) const;
  // BOS + encode(text) + EOS.
  std::vector<int> encode_sentence(std::string_view text, EncodeStats* stats = nullptr) const;
  // Specials decode to nothing.
  std::string decode(std::span<const int> ids) const;

  nlohmann::json to_json() const;
  static BpeModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

  friend BpeModel fit_bpe(std::span<const std::string> texts,
                          std::span<const std::string> whole_words, int num_merges);

 private:
  void add_merge(int a, int b);
  std::vector<int> encode_chunk(std::string_view chunk) const;

  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::uint64_t, int> rank_;  // packed pair -> merge index
  std::unordered_map<std::string, int> by_piece_;
  std::array<bool, 256> alphabet_{};
  bool short_of_merges_ = false;
  int requested_merges_ = kDefaultMerges;
};

// Learns up to `num_merges` merges from the pretokenized texts. Each entry of
// `whole_words` is added as a " word" chunk weighted above every corpus
// chunk, so those words end up as single tokens when the budget allows.
// Ties between equally frequent pairs go to the smallest (left, right) ids.
BpeModel fit_bpe(std::span<const std::string> texts, std::span<const std::string> whole_words,
                 int num_merges = kDefaultMerges);

// Fits on the corpus sentences with the lexicon's content words kept whole.
BpeModel fit_bpe(const corpus::Corpus& corpus, int num_merges = kDefaultMerges);

}  // namespace wuglab::tok
