#include "wuglab/tokenizer.hpp"

#include <algorithm>
#include <map>

#include "wuglab/corpus.hpp"
#include "wuglab/error.hpp"
#include "wuglab/io.hpp"

namespace wuglab::tok {

namespace {

std::uint64_t pack(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

}  // namespace

std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    auto c = static_cast<unsigned char>(text[i]);
    if (c == ' ' && i + 1 < n && !is_space(static_cast<unsigned char>(text[i + 1]))) {
      std::size_t j = i + 1;
      while (j < n && !is_space(static_cast<unsigned char>(text[j]))) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else if (is_space(c)) {
      out.emplace_back(text.substr(i, 1));
      ++i;
    } else {
      std::size_t j = i;
      while (j < n && !is_space(static_cast<unsigned char>(text[j]))) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

BpeModel::BpeModel() {
  pieces_.emplace_back();  // BOS
  pieces_.emplace_back();  // EOS
  for (int b = 0; b < 256; ++b) {
    pieces_.emplace_back(1, static_cast<char>(b));
    by_piece_[pieces_.back()] = kByteBase + b;
  }
}

void BpeModel::add_merge(int a, int b) {
  const int id = vocab_size();
  rank_[pack(a, b)] = static_cast<int>(merges_.size());
  merges_.emplace_back(a, b);
  pieces_.push_back(pieces_[static_cast<std::size_t>(a)] + pieces_[static_cast<std::size_t>(b)]);
  by_piece_.emplace(pieces_.back(), id);
}

std::optional<int> BpeModel::find(std::string_view bytes) const {
  auto it = by_piece_.find(std::string(bytes));
  if (it == by_piece_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> BpeModel::encode_chunk(std::string_view chunk) const {
  std::vector<int> ids;
  ids.reserve(chunk.size());
  for (char c : chunk) ids.push_back(kByteBase + static_cast<unsigned char>(c));
  for (;;) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = rank_.find(pack(ids[i], ids[i + 1]));
      if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    const auto [a, b] = merges_[static_cast<std::size_t>(best_rank)];
    const int merged = kFirstMerge + best_rank;
    std::vector<int> next;
    next.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size();) {
      if (i + 1 < ids.size() && ids[i] == a && ids[i + 1] == b) {
        next.push_back(merged);
        i += 2;
      } else {
        next.push_back(ids[i]);
        ++i;
      }
    }
    ids = std::move(next);
  }
  return ids;
}

std::vector<int> BpeModel::encode(std::string_view text, EncodeStats* stats) const {
  std::vector<int> out;
  for (const auto& chunk : pretokenize(text)) {
    auto ids = encode_chunk(chunk);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  if (stats) {
    stats->tokens += out.size();
    for (char c : text)
      if (!alphabet_[static_cast<unsigned char>(c)]) ++stats->byte_fallbacks;
  }
  return out;
}

std::vector<int> BpeModel::encode_sentence(std::string_view text, EncodeStats* stats) const {
  std::vector<int> out{kBos};
  auto body = encode(text, stats);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(kEos);
  return out;
}

std::string BpeModel::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw InvalidArgument("token id out of range: " + std::to_string(id));
    out += pieces_[static_cast<std::size_t>(id)];
  }
  return out;
}

nlohmann::json BpeModel::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : merges_) merges.push_back({a, b});
  // Display strings only; bytes are reconstructed from the merge table.
  nlohmann::json vocab = nlohmann::json::object();
  for (int id = kFirstMerge; id < vocab_size(); ++id) vocab[pieces_[static_cast<std::size_t>(id)]] = id;
  static constexpr std::string_view kHex = "0123456789abcdef";
  std::string hex;
  for (int b = 0; b < 256; ++b) {
    if (!alphabet_[static_cast<std::size_t>(b)]) continue;
    hex.push_back(kHex[static_cast<std::size_t>(b >> 4)]);
    hex.push_back(kHex[static_cast<std::size_t>(b & 15)]);
  }
  return {{"format", "wuglab-bpe"},
          {"version", 1},
          {"specials", {{"bos", kBos}, {"eos", kEos}}},
          {"byte_base", kByteBase},
          {"requested_merges", requested_merges_},
          {"short_of_merges", short_of_merges_},
          {"fit_alphabet_hex", hex},
          {"merges", merges},
          {"vocab", vocab}};
}

BpeModel BpeModel::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "wuglab-bpe") throw Error("not a wuglab BPE model file");
  BpeModel m;
  for (const auto& pr : j.at("merges")) {
    int a = pr.at(0), b = pr.at(1);
    if (a < 0 || b < 0 || a >= m.vocab_size() || b >= m.vocab_size() || a < kByteBase ||
        b < kByteBase)
      throw Error("malformed merge table");
    m.add_merge(a, b);
  }
  m.requested_merges_ = j.value("requested_merges", kDefaultMerges);
  m.short_of_merges_ = j.value("short_of_merges", false);
  const std::string hex = j.at("fit_alphabet_hex");
  auto nib = [](char c) { return c <= '9' ? c - '0' : c - 'a' + 10; };
  for (std::size_t i = 0; i + 1 < hex.size(); i += 2)
    m.alphabet_[static_cast<std::size_t>(nib(hex[i]) * 16 + nib(hex[i + 1]))] = true;
  return m;
}

void BpeModel::save(const std::filesystem::path& path) const {
  io::write_file_atomic(path, to_json().dump(1));
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  return from_json(nlohmann::json::parse(io::read_file(path)));
}

BpeModel fit_bpe(std::span<const std::string> texts, std::span<const std::string> whole_words,
                 int num_merges) {
  if (texts.empty()) throw InvalidArgument("fit_bpe needs a non-empty corpus");
  if (num_merges < 0) throw InvalidArgument("negative merge budget");
  BpeModel model;
  model.requested_merges_ = num_merges;

  std::map<std::string, long> counts;
  for (const auto& t : texts) {
    for (char c : t) model.alphabet_[static_cast<unsigned char>(c)] = true;
    for (auto& chunk : pretokenize(t)) ++counts[chunk];
  }
  long top = 0;
  for (const auto& [w, c] : counts) top = std::max(top, c);
  for (const auto& w : whole_words) {
    for (char c : w) model.alphabet_[static_cast<unsigned char>(c)] = true;
    counts[" " + w] += top + 1;
  }

  std::vector<std::vector<int>> words;
  std::vector<long> weights;
  for (const auto& [w, c] : counts) {
    std::vector<int> ids;
    for (char ch : w) ids.push_back(kByteBase + static_cast<unsigned char>(ch));
    words.push_back(std::move(ids));
    weights.push_back(c);
  }

  for (int m = 0; m < num_merges; ++m) {
    std::map<std::pair<int, int>, long> pairs;
    for (std::size_t w = 0; w < words.size(); ++w)
      for (std::size_t i = 0; i + 1 < words[w].size(); ++i)
        pairs[{words[w][i], words[w][i + 1]}] += weights[w];
    if (pairs.empty()) {
      model.short_of_merges_ = true;
      break;
    }
    // std::map iterates in ascending (a, b) order, so the first maximum wins ties.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [a, b] = best->first;
    const int id = model.vocab_size();
    model.add_merge(a, b);
    for (auto& ids : words) {
      std::vector<int> next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size();) {
        if (i + 1 < ids.size() && ids[i] == a && ids[i + 1] == b) {
          next.push_back(id);
          i += 2;
        } else {
          next.push_back(ids[i++]);
        }
      }
      ids = std::move(next);
    }
  }
  return model;
}

BpeModel fit_bpe(const corpus::Corpus& corpus, int num_merges) {
  return fit_bpe(corpus.sentences, corpus.spec.lexicon.content_words(), num_merges);
}

}  // namespace wuglab::tok
