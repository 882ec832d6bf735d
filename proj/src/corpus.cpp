#include "wuglab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "wuglab/error.hpp"
#include "wuglab/io.hpp"
#include "wuglab/rng.hpp"

namespace wuglab::corpus {

namespace {

constexpr std::uint64_t kLexiconSeed = 0x6c657869636f6eULL;
constexpr int kNumMarkers = 4;
// Background vocabulary size; puts every full-fraction condition's
// whitespace vocabulary inside [314, 351].
constexpr int kNumFillers = 267;
constexpr int kDomainATrainKinds = 24;  // FeatureSwap: domain A dominates

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<FrameTemplate> build_catalog() {
  struct Row {
    const char* pattern;
    bool labelled;
    Domain domain;
    FrameRole role;
  };
  // frame_id is the row index.
  static const Row rows[] = {
      {"A {NOUN} is a {SHAPE} {COLOUR} {TEXTURE} thing", true, Domain::A, FrameRole::Train},
      {"the {NOUN} looks {SHAPE} {COLOUR} {TEXTURE}", true, Domain::A, FrameRole::Train},
      {"that {SHAPE} {COLOUR} {TEXTURE} thing is a {NOUN}", true, Domain::A, FrameRole::Train},
      {"every {NOUN} is {SHAPE} and {COLOUR} and {TEXTURE}", true, Domain::A, FrameRole::Train},
      {"my {NOUN} seems {SHAPE} {COLOUR} {TEXTURE}", true, Domain::A, FrameRole::Train},
      {"it is a {SHAPE} {COLOUR} {TEXTURE} thing", false, Domain::A, FrameRole::Train},
      {"here is a {SHAPE} {COLOUR} {TEXTURE} one", false, Domain::A, FrameRole::Train},
      {"look a {SHAPE} {COLOUR} {TEXTURE} thing", false, Domain::A, FrameRole::Train},
      {"A {NOUN} feels {TEXTURE} and is a {SHAPE} {COLOUR} thing", true, Domain::B,
       FrameRole::Train},
      {"the {NOUN} feels {TEXTURE} and looks {SHAPE} {COLOUR}", true, Domain::B,
       FrameRole::Train},
      {"that {TEXTURE} feeling {SHAPE} {COLOUR} thing is a {NOUN}", true, Domain::B,
       FrameRole::Train},
      {"every {NOUN} feels {TEXTURE} and is {SHAPE} and {COLOUR}", true, Domain::B,
       FrameRole::Train},
      {"my {NOUN} feels {TEXTURE} and seems {SHAPE} {COLOUR}", true, Domain::B,
       FrameRole::Train},
      {"it feels {TEXTURE} and is a {SHAPE} {COLOUR} thing", false, Domain::B, FrameRole::Train},
      {"here is a {TEXTURE} feeling {SHAPE} {COLOUR} one", false, Domain::B, FrameRole::Train},
      {"look a {TEXTURE} feeling {SHAPE} {COLOUR} thing", false, Domain::B, FrameRole::Train},
      {"this {NOUN} appears {SHAPE} {COLOUR} {TEXTURE}", true, Domain::A, FrameRole::HeldOut},
      {"our {NOUN} was {SHAPE} {COLOUR} {TEXTURE}", true, Domain::A, FrameRole::HeldOut},
      {"one {NOUN} is a {SHAPE} {COLOUR} {TEXTURE} thing", true, Domain::A, FrameRole::Count},
      {"some {NOUN} is made of {TEXTURE} stuff that is {SHAPE} {COLOUR}", true, Domain::A,
       FrameRole::Mass},
      {"A {NOUN} is a {COLOUR} {SHAPE} {TEXTURE} thing", true, Domain::A,
       FrameRole::SlotShuffle},
      {"A {NOUN} is a {TEXTURE} {COLOUR} {SHAPE} thing", true, Domain::A,
       FrameRole::SlotShuffle},
      {"we saw the {FILLER} and the {FILLER}", false, Domain::A, FrameRole::Background},
  };
  std::vector<FrameTemplate> out;
  int id = 0;
  for (const auto& r : rows) {
    FrameTemplate f;
    f.frame_id = id++;
    f.pattern = FrameTemplate::parse_pattern(r.pattern);
    f.labelled = r.labelled;
    f.domain = r.domain;
    f.role = r.role;
    out.push_back(std::move(f));
  }
  return out;
}

std::string make_nonce(Pcg32& rng) {
  static constexpr std::string_view kCons = "bdfgklmnprstvz";
  static constexpr std::string_view kVow = "aeiou";
  std::string w;
  w.push_back(kCons[rng.below(kCons.size())]);
  w.push_back(kVow[rng.below(kVow.size())]);
  w.push_back(kCons[rng.below(kCons.size())]);
  w.push_back(kVow[rng.below(kVow.size())]);
  if (rng.bernoulli(0.5)) w.push_back(kCons[rng.below(kCons.size())]);
  return w;
}

NonceLexicon build_standard_lexicon() {
  std::set<std::string> taken;
  for (const auto& f : frame_catalog())
    for (const auto& lit : f.literals()) taken.insert(lower(lit));
  NonceLexicon lex;
  const std::vector<std::string> reserved = {"blicket", "zull",  "mundi", "sallo",
                                             "zeppo",   "lavo",  "frell", "glaven"};
  for (const auto& r : reserved) taken.insert(r);

  Pcg32 rng(kLexiconSeed, 7);
  auto fresh = [&]() {
    for (;;) {
      std::string w = make_nonce(rng);
      if (taken.insert(w).second) return w;
    }
  };

  lex.nouns.resize(kTotalKinds);
  for (int i = 0; i < kTotalKinds; ++i) {
    if (i == 0) lex.nouns[i] = "blicket";
    else if (i == kTrainKinds) lex.nouns[i] = "zull";
    else lex.nouns[i] = fresh();
  }
  const std::array<std::array<const char*, 2>, kNumDims> pinned = {
      {{"mundi", "sallo"}, {"zeppo", "lavo"}, {"frell", "glaven"}}};
  for (int d = 0; d < kNumDims; ++d) {
    auto& toks = lex.features[d];
    toks.push_back(pinned[d][0]);
    toks.push_back(pinned[d][1]);
    while (static_cast<int>(toks.size()) < kTokensPerDim) toks.push_back(fresh());
  }
  for (int i = 0; i < kNumMarkers; ++i) lex.markers.push_back(fresh());
  for (int i = 0; i < kNumFillers; ++i) lex.fillers.push_back(fresh());
  return lex;
}

// Assigns tokens to n_novel + n_train kinds. Novel kinds receive distinct
// tokens; train kinds then fill the deck so every token's total kind count is
// within one of every other's.
std::pair<std::vector<int>, std::vector<int>> balanced_assignment(int n_novel, int n_train,
                                                                  Pcg32& rng) {
  std::vector<int> order(kTokensPerDim);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<int>(order));
  std::vector<int> novel;
  std::array<int, kTokensPerDim> count{};
  for (int i = 0; i < n_novel; ++i) {
    int t = order[static_cast<std::size_t>(i % kTokensPerDim)];
    novel.push_back(t);
    ++count[static_cast<std::size_t>(t)];
  }
  std::vector<int> train;
  for (int i = 0; i < n_train; ++i) {
    int lo = *std::min_element(count.begin(), count.end());
    std::vector<int> cands;
    for (int t = 0; t < kTokensPerDim; ++t)
      if (count[static_cast<std::size_t>(t)] == lo) cands.push_back(t);
    int t = cands[rng.below(static_cast<std::uint32_t>(cands.size()))];
    train.push_back(t);
    ++count[static_cast<std::size_t>(t)];
  }
  rng.shuffle(std::span<int>(train));
  return {novel, train};
}

std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s.push_back(' ');
    s += words[i];
  }
  return s;
}

nlohmann::json frame_json(const FrameTemplate& f) {
  static const char* roles[] = {"train", "heldout", "count", "mass", "slot_shuffle",
                                "background"};
  return {{"frame_id", f.frame_id},
          {"pattern", f.pattern_string()},
          {"labelled", f.labelled},
          {"domain", std::string(to_string(f.domain))},
          {"role", roles[static_cast<int>(f.role)]}};
}

}  // namespace

std::string_view to_string(FeatureDim d) {
  switch (d) {
    case FeatureDim::Shape: return "shape";
    case FeatureDim::Colour: return "colour";
    case FeatureDim::Texture: return "texture";
  }
  return "?";
}

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::Regular: return "regular";
    case Condition::Scrambled: return "scrambled";
    case Condition::FeatureSwap: return "feature-swap";
    case Condition::WeakLabel25: return "weak-label-25";
    case Condition::ParaphrasedNoLabel: return "paraphrased-no-label";
    case Condition::BareNoLabel: return "bare-no-label";
    case Condition::NoiseInjection: return "noise-injection";
    case Condition::FrequencyMatched: return "frequency-matched";
  }
  return "?";
}

std::string_view to_string(Domain d) { return d == Domain::A ? "A" : "B"; }

Condition parse_condition(std::string_view s) {
  std::string key;
  for (char c : s)
    if (std::isalnum(static_cast<unsigned char>(c)))
      key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  for (Condition c : kAllConditions) {
    std::string name;
    for (char ch : to_string(c))
      if (std::isalnum(static_cast<unsigned char>(ch))) name.push_back(ch);
    if (name == key) return c;
  }
  static const std::pair<const char*, Condition> aliases[] = {
      {"weaklabel", Condition::WeakLabel25},      {"weak", Condition::WeakLabel25},
      {"paraphrased", Condition::ParaphrasedNoLabel}, {"bare", Condition::BareNoLabel},
      {"noise", Condition::NoiseInjection},       {"freqmatched", Condition::FrequencyMatched},
      {"swap", Condition::FeatureSwap},           {"featureswap", Condition::FeatureSwap}};
  for (const auto& [alias, c] : aliases)
    if (key == alias) return c;
  throw InvalidArgument("unknown condition: " + std::string(s));
}

FeatureDim parse_dim(std::string_view s) {
  std::string k = lower(s);
  if (k == "shape") return FeatureDim::Shape;
  if (k == "colour" || k == "color") return FeatureDim::Colour;
  if (k == "texture") return FeatureDim::Texture;
  throw InvalidArgument("unknown feature dimension: " + std::string(s));
}

SlotKind slot_for(FeatureDim d) {
  switch (d) {
    case FeatureDim::Shape: return SlotKind::Shape;
    case FeatureDim::Colour: return SlotKind::Colour;
    case FeatureDim::Texture: return SlotKind::Texture;
  }
  return SlotKind::Shape;
}

std::vector<std::string> NonceLexicon::content_words() const {
  std::vector<std::string> out = nouns;
  for (const auto& toks : features) out.insert(out.end(), toks.begin(), toks.end());
  out.insert(out.end(), markers.begin(), markers.end());
  return out;
}

void NonceLexicon::validate(std::span<const std::string> literals) const {
  if (nouns.size() != static_cast<std::size_t>(kTotalKinds))
    throw InvalidArgument("lexicon needs exactly 40 nouns");
  for (const auto& toks : features)
    if (toks.size() != static_cast<std::size_t>(kTokensPerDim))
      throw InvalidArgument("lexicon needs exactly 10 tokens per feature dimension");
  std::unordered_set<std::string> seen;
  for (const auto& lit : literals) seen.insert(lower(lit));
  auto check = [&](const std::string& w) {
    if (w.empty() || w.find_first_of(" \t\n\r") != std::string::npos)
      throw InvalidArgument("lexicon entry is not a single whitespace token: '" + w + "'");
    if (!seen.insert(lower(w)).second)
      throw InvalidArgument("vocabulary collision in lexicon: '" + w + "'");
  };
  for (const auto& w : nouns) check(w);
  for (const auto& toks : features)
    for (const auto& w : toks) check(w);
  for (const auto& w : markers) check(w);
  for (const auto& w : fillers) check(w);
}

const NonceLexicon& NonceLexicon::standard() {
  static const NonceLexicon lex = build_standard_lexicon();
  return lex;
}

std::string FrameTemplate::pattern_string() const {
  std::vector<std::string> words;
  for (const auto& s : pattern) {
    switch (s.kind) {
      case SlotKind::Literal: words.push_back(s.literal); break;
      case SlotKind::Noun: words.emplace_back("{NOUN}"); break;
      case SlotKind::Shape: words.emplace_back("{SHAPE}"); break;
      case SlotKind::Colour: words.emplace_back("{COLOUR}"); break;
      case SlotKind::Texture: words.emplace_back("{TEXTURE}"); break;
      case SlotKind::Filler: words.emplace_back("{FILLER}"); break;
    }
  }
  return join_words(words);
}

std::vector<SlotItem> FrameTemplate::parse_pattern(std::string_view s) {
  std::vector<SlotItem> out;
  for (const auto& w : split_ws(s)) {
    SlotItem item;
    if (w == "{NOUN}") item.kind = SlotKind::Noun;
    else if (w == "{SHAPE}") item.kind = SlotKind::Shape;
    else if (w == "{COLOUR}") item.kind = SlotKind::Colour;
    else if (w == "{TEXTURE}") item.kind = SlotKind::Texture;
    else if (w == "{FILLER}") item.kind = SlotKind::Filler;
    else if (w.front() == '{') throw InvalidArgument("unknown slot " + w);
    else item.literal = w;
    out.push_back(std::move(item));
  }
  return out;
}

int FrameTemplate::slot_index(SlotKind kind) const {
  for (std::size_t i = 0; i < pattern.size(); ++i)
    if (pattern[i].kind == kind) return static_cast<int>(i);
  return -1;
}

std::vector<std::string> FrameTemplate::literals() const {
  std::vector<std::string> out;
  for (const auto& s : pattern)
    if (s.kind == SlotKind::Literal) out.push_back(s.literal);
  return out;
}

const std::vector<FrameTemplate>& frame_catalog() {
  static const std::vector<FrameTemplate> catalog = build_catalog();
  return catalog;
}

const FrameTemplate& frame_by_id(int frame_id) {
  const auto& cat = frame_catalog();
  if (frame_id < 0 || frame_id >= static_cast<int>(cat.size()))
    throw InvalidArgument("unknown frame id " + std::to_string(frame_id));
  return cat[static_cast<std::size_t>(frame_id)];
}

std::vector<int> training_frames(Domain d) {
  std::vector<int> out;
  for (const auto& f : frame_catalog())
    if (f.role == FrameRole::Train && f.domain == d) out.push_back(f.frame_id);
  return out;
}

std::vector<int> held_out_frames() {
  std::vector<int> out;
  for (const auto& f : frame_catalog())
    if (f.role == FrameRole::HeldOut) out.push_back(f.frame_id);
  return out;
}

void CorpusSpec::validate() const {
  int train = 0, novel = 0;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const auto& k = kinds[i];
    if (k.kind_id != static_cast<int>(i)) throw InvalidArgument("kind ids must be 0..K-1");
    (k.is_novel ? novel : train)++;
    const auto& toks = lexicon.tokens(k.stable_dim);
    if (std::find(toks.begin(), toks.end(), k.stable_token) == toks.end())
      throw InvalidArgument("stable token '" + k.stable_token + "' of kind " +
                            std::to_string(k.kind_id) + " is not a " +
                            std::string(to_string(k.stable_dim)) + " token");
    if (k.n_exemplars < 12 || k.n_exemplars > 16)
      throw InvalidArgument("n_exemplars must lie in [12, 16]");
  }
  if (train != kTrainKinds || novel != kNovelKinds)
    throw InvalidArgument("spec needs 32 training kinds and 8 novel kinds");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("fraction must lie in (0, 1]");
  if (label_rate < 0.0 || label_rate > 1.0 || noise_rate < 0.0 || noise_rate > 1.0)
    throw InvalidArgument("rates must be probabilities");
  if (frame_cycles < 1) throw InvalidArgument("frame_cycles must be positive");
  int labelled = 0, unlabelled = 0, held_out = 0;
  for (const auto& f : frames) {
    if (f.role == FrameRole::HeldOut) ++held_out;
    if (f.role != FrameRole::Train || f.domain != Domain::A) continue;
    (f.labelled ? labelled : unlabelled)++;
    if (f.labelled) {
      for (SlotKind s : {SlotKind::Noun, SlotKind::Shape, SlotKind::Colour, SlotKind::Texture}) {
        int n = static_cast<int>(std::count_if(f.pattern.begin(), f.pattern.end(),
                                               [s](const SlotItem& it) { return it.kind == s; }));
        if (n != 1) throw InvalidArgument("labelled frame must hold each slot exactly once");
      }
    }
  }
  if (labelled != 5 || unlabelled != 3)
    throw InvalidArgument("training frame set needs 5 labelled and 3 unlabelled frames");
  if (held_out < 2) throw InvalidArgument("need at least two held-out frames");
  std::vector<std::string> lits;
  for (const auto& f : frame_catalog())
    for (const auto& l : f.literals()) lits.push_back(l);
  lexicon.validate(lits);
}

CorpusSpec make_spec(Condition condition, std::uint64_t seed, double fraction) {
  CorpusSpec spec;
  spec.condition = condition;
  spec.seed = seed;
  spec.fraction = fraction;
  spec.lexicon = NonceLexicon::standard();
  if (condition == Condition::WeakLabel25) spec.label_rate = 0.25;
  if (condition == Condition::ParaphrasedNoLabel || condition == Condition::BareNoLabel)
    spec.label_rate = 0.0;
  if (condition == Condition::NoiseInjection) spec.noise_rate = 0.20;

  for (const auto& f : frame_catalog()) {
    if (f.role == FrameRole::Background) continue;
    if (f.role == FrameRole::Train && f.domain == Domain::B &&
        condition != Condition::FeatureSwap)
      continue;
    spec.frames.push_back(f);
  }

  Pcg32 rng(derive_seed(seed, "assign"));
  spec.kinds.resize(kTotalKinds);
  for (int i = 0; i < kTotalKinds; ++i) {
    auto& k = spec.kinds[static_cast<std::size_t>(i)];
    k.kind_id = i;
    k.noun = spec.lexicon.nouns[static_cast<std::size_t>(i)];
    k.is_novel = i >= kTrainKinds;
    k.n_exemplars = rng.uniform_int(12, 16);
  }

  // Stable dimensions. Novel kinds always carry a shape key.
  for (int i = 0; i < kTrainKinds; ++i) {
    auto& k = spec.kinds[static_cast<std::size_t>(i)];
    if (condition == Condition::Scrambled) {
      k.stable_dim = kAllDims[rng.below(kNumDims)];
    } else if (condition == Condition::FeatureSwap && i >= kDomainATrainKinds) {
      k.domain = Domain::B;
      k.stable_dim = FeatureDim::Texture;
    }
  }

  // Stable tokens: per dimension, a balanced deck over the kinds using it.
  for (FeatureDim d : kAllDims) {
    std::vector<int> train_ids, novel_ids;
    for (const auto& k : spec.kinds) {
      if (k.stable_dim != d) continue;
      (k.is_novel ? novel_ids : train_ids).push_back(k.kind_id);
    }
    if (train_ids.empty() && novel_ids.empty()) continue;
    Pcg32 deck_rng(derive_seed(seed, "deck", static_cast<std::uint64_t>(d)));
    auto [novel_tok, train_tok] = balanced_assignment(static_cast<int>(novel_ids.size()),
                                                      static_cast<int>(train_ids.size()),
                                                      deck_rng);
    const auto& toks = spec.lexicon.tokens(d);
    // Reserved examples: blicket is a mundi kind, zull a sallo kind.
    if (d == FeatureDim::Shape) {
      auto pin = [&](std::vector<int>& ids, std::vector<int>& deck, int kind_id, int tok) {
        auto it = std::find(ids.begin(), ids.end(), kind_id);
        if (it == ids.end()) return;
        auto pos = static_cast<std::size_t>(it - ids.begin());
        auto other = std::find(deck.begin(), deck.end(), tok);
        if (other != deck.end()) std::swap(*other, deck[pos]);
        else deck[pos] = tok;
      };
      pin(train_ids, train_tok, 0, 0);
      pin(novel_ids, novel_tok, kTrainKinds, 1);
    }
    for (std::size_t j = 0; j < train_ids.size(); ++j)
      spec.kinds[static_cast<std::size_t>(train_ids[j])].stable_token =
          toks[static_cast<std::size_t>(train_tok[j])];
    for (std::size_t j = 0; j < novel_ids.size(); ++j)
      spec.kinds[static_cast<std::size_t>(novel_ids[j])].stable_token =
          toks[static_cast<std::size_t>(novel_tok[j])];
  }
  spec.validate();
  return spec;
}

void equalize_frequencies(std::vector<std::string>& slots, const std::vector<bool>& locked,
                          std::span<const std::string> alphabet, std::uint64_t seed) {
  if (locked.size() != slots.size()) throw InvalidArgument("locked mask size mismatch");
  const std::size_t n = slots.size();
  const std::size_t a = alphabet.size();
  if (a == 0) throw InvalidArgument("empty alphabet");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < a; ++i) index[alphabet[i]] = i;
  std::vector<long> fixed(a, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!locked[i]) continue;
    auto it = index.find(slots[i]);
    if (it == index.end()) throw InvalidArgument("locked slot holds a token outside the alphabet");
    ++fixed[it->second];
  }
  const long base = static_cast<long>(n / a);
  long extra = static_cast<long>(n % a);
  // Tokens with the most locked occurrences take the +1 targets first.
  std::vector<std::size_t> by_fixed(a);
  std::iota(by_fixed.begin(), by_fixed.end(), 0);
  std::stable_sort(by_fixed.begin(), by_fixed.end(),
                   [&](std::size_t x, std::size_t y) { return fixed[x] > fixed[y]; });
  std::vector<long> target(a, base);
  for (std::size_t r = 0; r < a && extra > 0; ++r, --extra) target[by_fixed[r]] = base + 1;
  long residual = 0;
  for (std::size_t t = 0; t < a; ++t) residual = std::max(residual, fixed[t] - target[t]);
  if (residual > 0)
    throw Error("infeasible frequency matching: locked slots exceed the balanced target by " +
                std::to_string(residual) + " occurrence(s)");
  std::vector<std::string> deck;
  for (std::size_t t = 0; t < a; ++t)
    for (long c = fixed[t]; c < target[t]; ++c) deck.push_back(alphabet[t]);
  Pcg32 rng(seed, 11);
  rng.shuffle(std::span<std::string>(deck));
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (!locked[i]) slots[i] = deck[next++];
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  const auto& lex = spec.lexicon;

  struct Draft {
    std::string sentence;
    Provenance prov;
  };
  std::vector<std::vector<Draft>> per_kind(kTrainKinds);

  Pcg32 fill_rng(derive_seed(spec.seed, "fill"));
  Pcg32 label_rng(derive_seed(spec.seed, "label"));
  Pcg32 noise_rng(derive_seed(spec.seed, "noise"));

  const bool bare = spec.condition == Condition::BareNoLabel;
  std::vector<std::string> all_features;
  for (const auto& toks : lex.features) all_features.insert(all_features.end(), toks.begin(), toks.end());

  for (const auto& kind : spec.kinds) {
    if (kind.is_novel) continue;
    const auto frames = training_frames(kind.domain);
    const int total = kind.n_exemplars * spec.frame_cycles;
    for (int j = 0; j < total; ++j) {
      const FrameTemplate& frame =
          frame_by_id(frames[static_cast<std::size_t>((kind.kind_id + j) % frames.size())]);
      Provenance prov;
      prov.kind_id = kind.kind_id;
      prov.frame_id = frame.frame_id;
      for (FeatureDim d : kAllDims) {
        const auto& toks = lex.tokens(d);
        prov.slot_tokens[static_cast<int>(d)] =
            d == kind.stable_dim ? kind.stable_token
                                 : toks[fill_rng.below(static_cast<std::uint32_t>(toks.size()))];
      }
      if (frame.labelled) {
        if (spec.label_rate >= 1.0 || label_rng.bernoulli(spec.label_rate)) {
          prov.labelled = true;
        } else if (!bare) {
          prov.marker =
              lex.markers[label_rng.below(static_cast<std::uint32_t>(lex.markers.size()))];
        }
      }
      if (spec.noise_rate > 0.0) {
        for (int d = 0; d < kNumDims; ++d) {
          if (noise_rng.bernoulli(spec.noise_rate)) {
            prov.slot_tokens[d] =
                all_features[noise_rng.below(static_cast<std::uint32_t>(all_features.size()))];
            prov.noised[d] = true;
          }
        }
      }
      per_kind[static_cast<std::size_t>(kind.kind_id)].push_back({{}, std::move(prov)});
    }
  }

  // Dose fraction: uniform subsample within each kind.
  if (spec.fraction < 1.0) {
    Pcg32 frac_rng(derive_seed(spec.seed, "fraction"));
    for (auto& drafts : per_kind) {
      auto keep = static_cast<std::size_t>(std::lround(spec.fraction * static_cast<double>(drafts.size())));
      keep = std::max<std::size_t>(keep, 1);
      std::vector<std::size_t> idx(drafts.size());
      std::iota(idx.begin(), idx.end(), 0);
      frac_rng.shuffle(std::span<std::size_t>(idx));
      idx.resize(keep);
      std::sort(idx.begin(), idx.end());
      std::vector<Draft> kept;
      for (auto i : idx) kept.push_back(std::move(drafts[i]));
      drafts = std::move(kept);
    }
  }

  if (spec.condition == Condition::FrequencyMatched) {
    for (FeatureDim d : kAllDims) {
      std::vector<std::string> slots;
      for (const auto& drafts : per_kind)
        for (const auto& dr : drafts) slots.push_back(dr.prov.slot_tokens[static_cast<int>(d)]);
      std::vector<bool> locked(slots.size(), false);
      equalize_frequencies(slots, locked, lex.tokens(d),
                           derive_seed(spec.seed, "freqmatch", static_cast<std::uint64_t>(d)));
      std::size_t i = 0;
      for (auto& drafts : per_kind)
        for (auto& dr : drafts) dr.prov.slot_tokens[static_cast<int>(d)] = slots[i++];
    }
  }

  std::vector<Draft> all;
  for (auto& drafts : per_kind) {
    for (auto& dr : drafts) {
      const auto& frame = frame_by_id(dr.prov.frame_id);
      const auto& kind = spec.kind(dr.prov.kind_id);
      std::vector<std::string> words;
      for (const auto& slot : frame.pattern) {
        switch (slot.kind) {
          case SlotKind::Literal: words.push_back(slot.literal); break;
          case SlotKind::Noun:
            if (dr.prov.labelled) words.push_back(kind.noun);
            else if (!dr.prov.marker.empty()) words.push_back(dr.prov.marker);
            break;
          case SlotKind::Shape: words.push_back(dr.prov.slot_tokens[0]); break;
          case SlotKind::Colour: words.push_back(dr.prov.slot_tokens[1]); break;
          case SlotKind::Texture: words.push_back(dr.prov.slot_tokens[2]); break;
          case SlotKind::Filler: throw Error("filler slot in a kind frame");
        }
      }
      dr.sentence = join_words(words);
      all.push_back(std::move(dr));
    }
  }

  // Background sentences carry the filler vocabulary; each filler occurs twice.
  {
    const FrameTemplate* bg = nullptr;
    for (const auto& f : frame_catalog())
      if (f.role == FrameRole::Background) bg = &f;
    Pcg32 bg_rng(derive_seed(spec.seed, "background"));
    std::vector<std::string> a = lex.fillers, b = lex.fillers;
    bg_rng.shuffle(std::span<std::string>(a));
    bg_rng.shuffle(std::span<std::string>(b));
    std::vector<Draft> bg_drafts;
    for (std::size_t i = 0; i < a.size(); ++i) {
      std::vector<std::string> words;
      int which = 0;
      for (const auto& slot : bg->pattern) {
        if (slot.kind == SlotKind::Literal) words.push_back(slot.literal);
        else words.push_back(which++ == 0 ? a[i] : b[i]);
      }
      Draft dr;
      dr.sentence = join_words(words);
      dr.prov.frame_id = bg->frame_id;
      bg_drafts.push_back(std::move(dr));
    }
    if (spec.fraction < 1.0) {
      Pcg32 frac_rng(derive_seed(spec.seed, "fraction-bg"));
      auto keep = static_cast<std::size_t>(std::lround(spec.fraction * static_cast<double>(bg_drafts.size())));
      frac_rng.shuffle(std::span<Draft>(bg_drafts));
      bg_drafts.resize(keep);
    }
    for (auto& dr : bg_drafts) all.push_back(std::move(dr));
  }

  Pcg32 order_rng(derive_seed(spec.seed, "order"));
  order_rng.shuffle(std::span<Draft>(all));
  for (auto& dr : all) {
    corpus.sentences.push_back(std::move(dr.sentence));
    corpus.provenance.push_back(std::move(dr.prov));
  }
  corpus.md5 = checksum(corpus);
  return corpus;
}

std::string Corpus::text() const {
  std::string out;
  for (const auto& s : sentences) {
    out += s;
    out.push_back('\n');
  }
  return out;
}

std::size_t Corpus::whitespace_vocab_size() const {
  std::unordered_set<std::string> vocab;
  for (const auto& s : sentences)
    for (auto& w : split_ws(s)) vocab.insert(std::move(w));
  return vocab.size();
}

std::map<std::string, int> Corpus::token_frequencies() const {
  std::map<std::string, int> freq;
  for (const auto& s : sentences)
    for (auto& w : split_ws(s)) ++freq[w];
  return freq;
}

std::string checksum(const Corpus& corpus) { return io::md5_hex(corpus.text()); }

nlohmann::json Corpus::metadata_json() const {
  using nlohmann::json;
  json kinds = json::array();
  for (const auto& k : spec.kinds) {
    kinds.push_back({{"kind_id", k.kind_id},
                     {"noun", k.noun},
                     {"stable_dim", std::string(to_string(k.stable_dim))},
                     {"stable_token", k.stable_token},
                     {"n_exemplars", k.n_exemplars},
                     {"domain", std::string(to_string(k.domain))},
                     {"is_novel", k.is_novel}});
  }
  json frames = json::array();
  for (const auto& f : spec.frames) frames.push_back(frame_json(f));
  json prov = json::array();
  for (const auto& p : provenance) {
    json slots = json::object();
    for (FeatureDim d : kAllDims)
      if (!p.slot_tokens[static_cast<int>(d)].empty())
        slots[std::string(to_string(d))] = p.slot_tokens[static_cast<int>(d)];
    json noised = json::array();
    for (FeatureDim d : kAllDims)
      if (p.noised[static_cast<int>(d)]) noised.push_back(std::string(to_string(d)));
    json row = {{"kind_id", p.kind_id}, {"frame_id", p.frame_id}, {"labelled", p.labelled}};
    if (!p.marker.empty()) row["marker"] = p.marker;
    if (!slots.empty()) row["tokens"] = slots;
    if (!noised.empty()) row["noised"] = noised;
    prov.push_back(std::move(row));
  }
  json lexicon = {{"nouns", spec.lexicon.nouns},
                  {"shape", spec.lexicon.features[0]},
                  {"colour", spec.lexicon.features[1]},
                  {"texture", spec.lexicon.features[2]},
                  {"markers", spec.lexicon.markers},
                  {"fillers", spec.lexicon.fillers}};
  return {{"schema_version", 1},
          {"condition", std::string(to_string(spec.condition))},
          {"seed", spec.seed},
          {"fraction", spec.fraction},
          {"label_rate", spec.label_rate},
          {"noise_rate", spec.noise_rate},
          {"frame_cycles", spec.frame_cycles},
          {"kinds", kinds},
          {"frames", frames},
          {"lexicon", lexicon},
          {"n_sentences", sentences.size()},
          {"whitespace_vocab_size", whitespace_vocab_size()},
          {"provenance", prov},
          {"md5", md5}};
}

void Corpus::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir / kCorpusText, text());
  io::write_file_atomic(dir / kCorpusMeta, metadata_json().dump(1));
}

Corpus Corpus::load(const std::filesystem::path& dir) {
  using nlohmann::json;
  Corpus c;
  const std::string text = io::read_file(dir / kCorpusText);
  json meta = json::parse(io::read_file(dir / kCorpusMeta));
  auto& spec = c.spec;
  spec.condition = parse_condition(meta.at("condition").get<std::string>());
  spec.seed = meta.at("seed").get<std::uint64_t>();
  spec.fraction = meta.at("fraction").get<double>();
  spec.label_rate = meta.at("label_rate").get<double>();
  spec.noise_rate = meta.at("noise_rate").get<double>();
  spec.frame_cycles = meta.at("frame_cycles").get<int>();
  const auto& lx = meta.at("lexicon");
  spec.lexicon.nouns = lx.at("nouns").get<std::vector<std::string>>();
  spec.lexicon.features[0] = lx.at("shape").get<std::vector<std::string>>();
  spec.lexicon.features[1] = lx.at("colour").get<std::vector<std::string>>();
  spec.lexicon.features[2] = lx.at("texture").get<std::vector<std::string>>();
  spec.lexicon.markers = lx.at("markers").get<std::vector<std::string>>();
  spec.lexicon.fillers = lx.at("fillers").get<std::vector<std::string>>();
  for (const auto& k : meta.at("kinds")) {
    KindSpec ks;
    ks.kind_id = k.at("kind_id");
    ks.noun = k.at("noun");
    ks.stable_dim = parse_dim(k.at("stable_dim").get<std::string>());
    ks.stable_token = k.at("stable_token");
    ks.n_exemplars = k.at("n_exemplars");
    ks.domain = k.at("domain").get<std::string>() == "B" ? Domain::B : Domain::A;
    ks.is_novel = k.at("is_novel");
    spec.kinds.push_back(std::move(ks));
  }
  for (const auto& f : meta.at("frames")) spec.frames.push_back(frame_by_id(f.at("frame_id")));
  for (const auto& p : meta.at("provenance")) {
    Provenance pv;
    pv.kind_id = p.at("kind_id");
    pv.frame_id = p.at("frame_id");
    pv.labelled = p.at("labelled");
    if (p.contains("marker")) pv.marker = p.at("marker");
    if (p.contains("tokens"))
      for (FeatureDim d : kAllDims) {
        auto key = std::string(to_string(d));
        if (p.at("tokens").contains(key)) pv.slot_tokens[static_cast<int>(d)] = p.at("tokens").at(key);
      }
    if (p.contains("noised"))
      for (const auto& n : p.at("noised")) pv.noised[static_cast<int>(parse_dim(n.get<std::string>()))] = true;
    c.provenance.push_back(std::move(pv));
  }
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    c.sentences.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  c.md5 = meta.at("md5").get<std::string>();
  if (c.sentences.size() != c.provenance.size())
    throw Error("corpus metadata does not match sentence count in " + dir.string());
  const std::string actual = io::md5_hex(text);
  if (actual != c.md5)
    throw Error("md5 mismatch for " + (dir / kCorpusText).string() + ": stored " + c.md5 +
                ", computed " + actual);
  return c;
}

double mutual_information_bits(std::span<const std::pair<std::string, std::string>> pairs) {
  if (pairs.empty()) return 0.0;
  std::map<std::string, double> px, py;
  std::map<std::pair<std::string, std::string>, double> pxy;
  for (const auto& p : pairs) {
    px[p.first] += 1;
    py[p.second] += 1;
    pxy[p] += 1;
  }
  const double n = static_cast<double>(pairs.size());
  double mi = 0.0;
  for (const auto& [xy, c] : pxy) {
    double pj = c / n;
    mi += pj * std::log2(pj / ((px[xy.first] / n) * (py[xy.second] / n)));
  }
  return std::max(0.0, mi);
}

ManipulationCheckReport manipulation_check(const Corpus& corpus) {
  ManipulationCheckReport rep;
  std::vector<std::pair<std::string, std::string>> shape_pairs, all_pairs;
  std::map<int, std::array<std::map<std::string, int>, kNumDims>> per_kind;
  bool any_prov = false;
  for (const auto& p : corpus.provenance) {
    if (p.kind_id < 0) continue;
    any_prov = true;
    const std::string& noun = corpus.spec.kind(p.kind_id).noun;
    for (int d = 0; d < kNumDims; ++d) {
      if (p.slot_tokens[d].empty()) continue;
      ++per_kind[p.kind_id][d][p.slot_tokens[d]];
      if (p.labelled) all_pairs.emplace_back(noun, p.slot_tokens[d]);
    }
    if (p.labelled) {
      ++rep.labelled_sentences;
      shape_pairs.emplace_back(noun, p.slot_tokens[0]);
    }
  }
  if (!any_prov) throw InvalidArgument("manipulation_check needs provenance metadata");
  if (rep.labelled_sentences > 0) {
    rep.mi_noun_shape_slot = mutual_information_bits(shape_pairs);
    rep.mi_noun_all_features = mutual_information_bits(all_pairs);
  }
  const double norm = std::log2(static_cast<double>(kTokensPerDim));
  for (const auto& [kind_id, dims] : per_kind) {
    std::array<double, kNumDims> ent{};
    for (int d = 0; d < kNumDims; ++d) {
      double total = 0;
      for (const auto& [tok, c] : dims[d]) total += c;
      double h = 0;
      for (const auto& [tok, c] : dims[d]) {
        double p = c / total;
        h -= p * std::log2(p);
      }
      ent[d] = total > 0 ? std::max(0.0, h / norm) : 0.0;
    }
    rep.per_kind_normalized_entropy[kind_id] = ent;
  }
  return rep;
}

nlohmann::json ManipulationCheckReport::to_json() const {
  nlohmann::json ent = nlohmann::json::object();
  for (const auto& [k, e] : per_kind_normalized_entropy)
    ent[std::to_string(k)] = {{"shape", e[0]}, {"colour", e[1]}, {"texture", e[2]}};
  nlohmann::json j = {{"labelled_sentences", labelled_sentences},
                      {"per_kind_normalized_entropy", ent}};
  j["mi_noun_shape_slot_bits"] = mi_noun_shape_slot ? nlohmann::json(*mi_noun_shape_slot) : nlohmann::json();
  j["mi_noun_all_features_bits"] =
      mi_noun_all_features ? nlohmann::json(*mi_noun_all_features) : nlohmann::json();
  return j;
}

}  // namespace wuglab::corpus
