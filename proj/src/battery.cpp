#include "wuglab/battery.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <unordered_set>

#include "wuglab/error.hpp"
#include "wuglab/io.hpp"
#include "wuglab/rng.hpp"

namespace wuglab::battery {

using corpus::Corpus;
using corpus::FeatureDim;
using corpus::FrameTemplate;
using corpus::SlotKind;

namespace {

struct TypeName {
  ItemType type;
  const char* name;
  const char* prefix;
};

constexpr TypeName kNames[] = {
    {ItemType::FirstOrder, "first-order", "FO"},
    {ItemType::SecondOrder, "second-order", "SO"},
    {ItemType::FrameVariant, "frame-variant", "FV"},
    {ItemType::SwapFrameCued, "swap-frame-cued", "SFC"},
    {ItemType::SwapNounOnly, "swap-noun-only", "SNO"},
    {ItemType::SlotShuffle, "slot-shuffle", "SS"},
    {ItemType::HardDistractor, "hard-distractor", "HD"},
    {ItemType::FreqMatchedFoil, "freq-matched-foil", "FMF"},
    {ItemType::NoLabelMatched, "no-label-matched", "NLM"},
    {ItemType::AmbiguousExemplar, "ambiguous-exemplar", "AE"},
    {ItemType::CountShape, "count-shape", "CS"},
    {ItemType::MassTexture, "mass-texture", "MT"},
    {ItemType::OneShotInContext, "one-shot-in-context", "OSI"},
    {ItemType::OneShotControl, "one-shot-control", "OSC"},
};

int dim_index(FeatureDim d) { return static_cast<int>(d); }

// Words of `frame` up to (not including) the first slot of kind `stop`.
std::string prefix_before(const FrameTemplate& frame, SlotKind stop, const std::string& noun,
                          const std::array<std::string, corpus::kNumDims>& feats) {
  std::string out;
  for (const auto& slot : frame.pattern) {
    if (slot.kind == stop) return out;
    std::string w;
    switch (slot.kind) {
      case SlotKind::Literal: w = slot.literal; break;
      case SlotKind::Noun: w = noun; break;
      case SlotKind::Shape: w = feats[0]; break;
      case SlotKind::Colour: w = feats[1]; break;
      case SlotKind::Texture: w = feats[2]; break;
      case SlotKind::Filler: throw Error("filler slot in an item frame");
    }
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  throw Error("frame " + std::to_string(frame.frame_id) + " has no slot for the target");
}

// Labelled frames of a role/domain in which the noun precedes the slot of `dim`.
std::vector<int> noun_first_frames(corpus::FrameRole role, corpus::Domain domain, FeatureDim dim) {
  std::vector<int> out;
  for (const auto& f : corpus::frame_catalog()) {
    if (f.role != role || !f.labelled) continue;
    if (role == corpus::FrameRole::Train && f.domain != domain) continue;
    const int n = f.slot_index(SlotKind::Noun);
    const int s = f.slot_index(corpus::slot_for(dim));
    if (n >= 0 && s > n) out.push_back(f.frame_id);
  }
  return out;
}

class Builder {
 public:
  Builder(const Corpus& c, std::uint64_t seed) : corpus_(c), spec_(c.spec), lex_(c.spec.lexicon), seed_(seed) {
    for (const auto& p : c.provenance) {
      if (p.kind_id < 0) continue;
      for (int d = 0; d < corpus::kNumDims; ++d)
        if (!p.slot_tokens[d].empty()) ++kind_counts_[p.kind_id][d][p.slot_tokens[d]];
    }
    freq_ = c.token_frequencies();
    for (const auto& k : spec_.kinds) (k.is_novel ? novel_ : trained_).push_back(k.kind_id);
    for (int k : trained_)
      if (spec_.kind(k).domain == corpus::Domain::B) domain_b_.push_back(k);
  }

  Battery build() {
    Battery b;
    b.corpus_md5 = corpus_.md5;
    b.condition = spec_.condition;
    b.seed = seed_;
    const auto alloc = allocation(spec_.condition);
    if (spec_.condition != corpus::Condition::FeatureSwap)
      b.notes.emplace_back(
          "no domain-B kinds: swap-frame-cued and swap-noun-only omitted; +20 items to slot-shuffle, "
          "hard-distractor, freq-matched-foil, no-label-matched, ambiguous-exemplar; +30 to "
          "count-shape and mass-texture");
    b.notes.emplace_back("one-shot items are excluded from second-order aggregates");
    for (ItemType t : kAllItemTypes) {
      const int n = alloc.at(t);
      rng_ = Pcg32(derive_seed(seed_, "battery", static_cast<std::uint64_t>(t)));
      for (int i = 0; i < n; ++i) {
        WugItem item = make(t, i);
        char id[32];
        std::snprintf(id, sizeof(id), "%s-%03d", std::string(id_prefix(t)).c_str(), i);
        item.item_id = id;
        item.item_type = t;
        b.items.push_back(std::move(item));
      }
      if (n > 0) b.counts[t] = n;
    }
    return b;
  }

 private:
  const std::string& rand_token(FeatureDim d) {
    const auto& toks = lex_.tokens(d);
    return toks[rng_.below(static_cast<std::uint32_t>(toks.size()))];
  }

  std::array<std::string, corpus::kNumDims> rand_fill() {
    return {rand_token(FeatureDim::Shape), rand_token(FeatureDim::Colour), rand_token(FeatureDim::Texture)};
  }

  // The i-th token of dimension d other than `exclude`, cycling in lexicon order.
  const std::string& other_token(FeatureDim d, const std::string& exclude, int i) {
    const auto& toks = lex_.tokens(d);
    std::vector<const std::string*> others;
    for (const auto& t : toks)
      if (t != exclude) others.push_back(&t);
    return *others[static_cast<std::size_t>(i) % others.size()];
  }

  // Most frequent token of dimension d among the kind's sentences.
  std::string modal_token(int kind_id, FeatureDim d) const {
    const auto& k = spec_.kind(kind_id);
    if (k.stable_dim == d) return k.stable_token;
    auto it = kind_counts_.find(kind_id);
    const auto& toks = lex_.tokens(d);
    if (it == kind_counts_.end()) return toks.front();
    const auto& counts = it->second[static_cast<std::size_t>(dim_index(d))];
    std::string best = toks.front();
    int best_n = -1;
    for (const auto& t : toks) {
      auto c = counts.find(t);
      const int n = c == counts.end() ? 0 : c->second;
      if (n > best_n) best = t, best_n = n;
    }
    return best;
  }

  WugItem keyed_item(int kind_id, int frame_id, const std::string& noun, FeatureDim dim,
                     const std::string& target, const std::string& foil, FeatureDim foil_dim) {
    WugItem it;
    it.kind_id = kind_id;
    it.frame_id = frame_id;
    it.noun = noun;
    it.target_dim = dim;
    it.foil_dim = foil_dim;
    it.target_completion = target;
    it.foil_completion = foil;
    it.prompt = prefix_before(corpus::frame_by_id(frame_id), corpus::slot_for(dim), noun, rand_fill());
    return it;
  }

  // Feature prediction for kind k on a frame cycled from its domain's noun-first frames.
  WugItem trained_item(int k, int i, const std::string& foil, const std::string& noun) {
    const auto& kind = spec_.kind(k);
    auto frames = noun_first_frames(corpus::FrameRole::Train, kind.domain, kind.stable_dim);
    const int frame = frames[static_cast<std::size_t>(i / static_cast<int>(trained_.size())) % frames.size()];
    return keyed_item(k, frame, noun, kind.stable_dim, kind.stable_token, foil, kind.stable_dim);
  }

  WugItem make(ItemType t, int i) {
    const int nt = static_cast<int>(trained_.size());
    const int nn = static_cast<int>(novel_.size());
    switch (t) {
      case ItemType::FirstOrder:
      case ItemType::HardDistractor:
      case ItemType::FreqMatchedFoil:
      case ItemType::NoLabelMatched: {
        const int k = trained_[static_cast<std::size_t>(i % nt)];
        const auto& kind = spec_.kind(k);
        std::string foil;
        if (t == ItemType::HardDistractor) {
          // Stable tokens of other trained kinds keyed on the same dimension.
          std::vector<std::string> pool;
          for (int o : trained_) {
            const auto& ok = spec_.kind(o);
            if (o != k && ok.stable_dim == kind.stable_dim && ok.stable_token != kind.stable_token)
              pool.push_back(ok.stable_token);
          }
          std::sort(pool.begin(), pool.end());
          pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
          foil = pool.empty() ? other_token(kind.stable_dim, kind.stable_token, i)
                              : pool[static_cast<std::size_t>(i / nt + k) % pool.size()];
        } else if (t == ItemType::FreqMatchedFoil) {
          const int tf = freq_count(kind.stable_token);
          std::vector<std::pair<int, std::string>> ranked;
          for (const auto& tok : lex_.tokens(kind.stable_dim))
            if (tok != kind.stable_token) ranked.emplace_back(std::abs(freq_count(tok) - tf), tok);
          std::stable_sort(ranked.begin(), ranked.end(),
                           [](const auto& a, const auto& b) { return a.first < b.first; });
          // Alternate between the two closest-frequency tokens.
          foil = ranked[static_cast<std::size_t>(i / nt) % std::min<std::size_t>(2, ranked.size())].second;
        } else {
          foil = other_token(kind.stable_dim, kind.stable_token, i / nt + k);
        }
        std::string noun = kind.noun;
        if (t == ItemType::NoLabelMatched)
          noun = lex_.markers[static_cast<std::size_t>(i) % lex_.markers.size()];
        return trained_item(k, i, foil, noun);
      }
      case ItemType::SecondOrder: {
        const int per = 25;
        const int k = novel_[static_cast<std::size_t>(i / per) % novel_.size()];
        const int j = i % per;
        const auto& kind = spec_.kind(k);
        auto frames = noun_first_frames(corpus::FrameRole::Train, corpus::Domain::A, FeatureDim::Shape);
        return keyed_item(k, frames[static_cast<std::size_t>(j) % frames.size()], kind.noun,
                          FeatureDim::Shape, kind.stable_token,
                          other_token(FeatureDim::Shape, kind.stable_token, j), FeatureDim::Shape);
      }
      case ItemType::FrameVariant: {
        const int per = std::max(1, 80 / nn);
        const int k = novel_[static_cast<std::size_t>(i / per) % novel_.size()];
        const int j = i % per;
        const auto& kind = spec_.kind(k);
        auto frames = noun_first_frames(corpus::FrameRole::HeldOut, corpus::Domain::A, FeatureDim::Shape);
        return keyed_item(k, frames[static_cast<std::size_t>(j) % frames.size()], kind.noun,
                          FeatureDim::Shape, kind.stable_token,
                          other_token(FeatureDim::Shape, kind.stable_token,
                                      j / static_cast<int>(frames.size()) + k),
                          FeatureDim::Shape);
      }
      case ItemType::SwapFrameCued:
      case ItemType::SwapNounOnly: {
        if (domain_b_.empty()) throw Error("swap items need domain-B kinds");
        const int nb = static_cast<int>(domain_b_.size());
        const int k = domain_b_[static_cast<std::size_t>(i % nb)];
        const auto& kind = spec_.kind(k);
        const auto& foil = lex_.tokens(FeatureDim::Shape)[static_cast<std::size_t>(i / nb + k) % corpus::kTokensPerDim];
        if (t == ItemType::SwapFrameCued) {
          auto frames = noun_first_frames(corpus::FrameRole::Train, corpus::Domain::B, kind.stable_dim);
          return keyed_item(k, frames[static_cast<std::size_t>(i / nb) % frames.size()], kind.noun,
                            kind.stable_dim, kind.stable_token, foil, FeatureDim::Shape);
        }
        // Generic copula with no domain-identifying words.
        WugItem it = keyed_item(k, 0, kind.noun, FeatureDim::Shape, kind.stable_token, foil, FeatureDim::Shape);
        it.target_dim = kind.stable_dim;
        return it;
      }
      case ItemType::SlotShuffle: {
        const int k = trained_[static_cast<std::size_t>(i % nt)];
        const auto& kind = spec_.kind(k);
        std::vector<int> frames;
        for (const auto& f : corpus::frame_catalog())
          if (f.role == corpus::FrameRole::SlotShuffle) frames.push_back(f.frame_id);
        return keyed_item(k, frames[static_cast<std::size_t>(i / nt + k) % frames.size()], kind.noun,
                          kind.stable_dim, kind.stable_token,
                          other_token(kind.stable_dim, kind.stable_token, i / nt + k), kind.stable_dim);
      }
      case ItemType::AmbiguousExemplar: {
        const int k = trained_[static_cast<std::size_t>(i % nt)];
        const auto& kind = spec_.kind(k);
        const std::string& corrupt = other_token(kind.stable_dim, kind.stable_token, i / nt + k);
        // One in-context exemplar whose stable slot carries the foil token.
        auto fill = rand_fill();
        fill[static_cast<std::size_t>(dim_index(kind.stable_dim))] = corrupt;
        const auto& ctx_frame = corpus::frame_by_id(kind.domain == corpus::Domain::A ? 0 : 8);
        std::string ctx;
        for (const auto& slot : ctx_frame.pattern) {
          if (!ctx.empty()) ctx.push_back(' ');
          switch (slot.kind) {
            case SlotKind::Literal: ctx += slot.literal; break;
            case SlotKind::Noun: ctx += kind.noun; break;
            case SlotKind::Shape: ctx += fill[0]; break;
            case SlotKind::Colour: ctx += fill[1]; break;
            case SlotKind::Texture: ctx += fill[2]; break;
            case SlotKind::Filler: break;
          }
        }
        WugItem it = trained_item(k, i, corrupt, kind.noun);
        it.context_prefix = ctx;
        return it;
      }
      case ItemType::CountShape:
      case ItemType::MassTexture: {
        const int k = trained_[static_cast<std::size_t>(i % nt)];
        const auto& kind = spec_.kind(k);
        const std::string shape = modal_token(k, FeatureDim::Shape);
        const std::string texture = modal_token(k, FeatureDim::Texture);
        corpus::FrameRole role = t == ItemType::CountShape ? corpus::FrameRole::Count : corpus::FrameRole::Mass;
        int frame = -1;
        for (const auto& f : corpus::frame_catalog())
          if (f.role == role) frame = f.frame_id;
        if (t == ItemType::CountShape)
          return keyed_item(k, frame, kind.noun, FeatureDim::Shape, shape, texture, FeatureDim::Texture);
        WugItem it = keyed_item(k, frame, kind.noun, FeatureDim::Texture, texture, shape, FeatureDim::Shape);
        return it;
      }
      case ItemType::OneShotInContext:
      case ItemType::OneShotControl: {
        const int k = novel_[static_cast<std::size_t>(i) % novel_.size()];
        const auto& kind = spec_.kind(k);
        std::array<std::string, corpus::kNumDims> fill;
        if (k == corpus::kTrainKinds && i == 0) {
          fill = {kind.stable_token, lex_.tokens(FeatureDim::Colour)[1], lex_.tokens(FeatureDim::Texture)[1]};
        } else {
          fill = rand_fill();
          fill[0] = kind.stable_token;
        }
        const std::string ctx = kind.noun + " is a " + fill[0] + " " + fill[1] + " " + fill[2] + " thing";
        const int query_kind = t == ItemType::OneShotInContext
                                   ? k
                                   : novel_[static_cast<std::size_t>(i + 1) % novel_.size()];
        const auto& qk = spec_.kind(query_kind);
        auto frames = noun_first_frames(corpus::FrameRole::Train, corpus::Domain::A, FeatureDim::Shape);
        WugItem it = keyed_item(k, frames[static_cast<std::size_t>(i / nn + 1) % frames.size()], qk.noun,
                                FeatureDim::Shape, kind.stable_token,
                                other_token(FeatureDim::Shape, kind.stable_token, i / nn + k),
                                FeatureDim::Shape);
        it.context_prefix = "A " + ctx;
        return it;
      }
    }
    throw Error("unhandled item type");
  }

  int freq_count(const std::string& tok) const {
    auto it = freq_.find(tok);
    return it == freq_.end() ? 0 : it->second;
  }

  const Corpus& corpus_;
  const corpus::CorpusSpec& spec_;
  const corpus::NonceLexicon& lex_;
  std::uint64_t seed_;
  Pcg32 rng_;
  std::map<int, std::array<std::map<std::string, int>, corpus::kNumDims>> kind_counts_;
  std::map<std::string, int> freq_;
  std::vector<int> trained_, novel_, domain_b_;
};

}  // namespace

std::string_view to_string(ItemType t) {
  for (const auto& n : kNames)
    if (n.type == t) return n.name;
  return "?";
}

std::string_view id_prefix(ItemType t) {
  for (const auto& n : kNames)
    if (n.type == t) return n.prefix;
  return "?";
}

ItemType parse_item_type(std::string_view s) {
  for (const auto& n : kNames)
    if (s == n.name || s == n.prefix) return n.type;
  throw InvalidArgument("unknown item type: " + std::string(s));
}

bool is_one_shot(ItemType t) {
  return t == ItemType::OneShotInContext || t == ItemType::OneShotControl;
}

std::map<ItemType, int> allocation(corpus::Condition condition) {
  std::map<ItemType, int> a = {
      {ItemType::FirstOrder, 80},       {ItemType::SecondOrder, 200},
      {ItemType::FrameVariant, 80},     {ItemType::SwapFrameCued, 80},
      {ItemType::SwapNounOnly, 80},     {ItemType::SlotShuffle, 80},
      {ItemType::HardDistractor, 80},   {ItemType::FreqMatchedFoil, 80},
      {ItemType::NoLabelMatched, 80},   {ItemType::AmbiguousExemplar, 80},
      {ItemType::CountShape, 40},       {ItemType::MassTexture, 40},
      {ItemType::OneShotInContext, 20}, {ItemType::OneShotControl, 20}};
  if (condition != corpus::Condition::FeatureSwap) {
    a[ItemType::SwapFrameCued] = 0;
    a[ItemType::SwapNounOnly] = 0;
    for (ItemType t : {ItemType::SlotShuffle, ItemType::HardDistractor, ItemType::FreqMatchedFoil,
                       ItemType::NoLabelMatched, ItemType::AmbiguousExemplar})
      a[t] += 20;
    a[ItemType::CountShape] += 30;
    a[ItemType::MassTexture] += 30;
  }
  return a;
}

Battery build_battery(const corpus::Corpus& corpus, std::uint64_t seed) {
  if (corpus.spec.kinds.empty()) throw InvalidArgument("corpus metadata has no kinds");
  bool has_novel = false;
  for (const auto& k : corpus.spec.kinds) has_novel |= k.is_novel && !k.stable_token.empty();
  if (!has_novel) throw InvalidArgument("corpus metadata lacks the novel-kind key");
  return Builder(corpus, seed).build();
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json WugItem::to_json() const {
  nlohmann::json j = {{"item_id", item_id},
                      {"item_type", std::string(to_string(item_type))},
                      {"prompt", prompt},
                      {"target_completion", target_completion},
                      {"foil_completion", foil_completion},
                      {"kind_id", kind_id},
                      {"frame_id", frame_id},
                      {"noun", noun},
                      {"target_dim", std::string(corpus::to_string(target_dim))},
                      {"foil_dim", std::string(corpus::to_string(foil_dim))}};
  j["context_prefix"] = context_prefix ? nlohmann::json(*context_prefix) : nlohmann::json();
  return j;
}

WugItem WugItem::from_json(const nlohmann::json& j) {
  WugItem it;
  it.item_id = j.at("item_id");
  it.item_type = parse_item_type(j.at("item_type").get<std::string>());
  it.prompt = j.at("prompt");
  it.target_completion = j.at("target_completion");
  it.foil_completion = j.at("foil_completion");
  it.kind_id = j.at("kind_id");
  it.frame_id = j.at("frame_id");
  it.noun = j.value("noun", "");
  it.target_dim = corpus::parse_dim(j.at("target_dim").get<std::string>());
  it.foil_dim = corpus::parse_dim(j.at("foil_dim").get<std::string>());
  if (j.contains("context_prefix") && !j.at("context_prefix").is_null())
    it.context_prefix = j.at("context_prefix").get<std::string>();
  return it;
}

nlohmann::json Battery::to_json() const {
  nlohmann::json counts_j = nlohmann::json::object();
  for (const auto& [t, n] : counts) counts_j[std::string(to_string(t))] = n;
  nlohmann::json items_j = nlohmann::json::array();
  for (const auto& it : items) items_j.push_back(it.to_json());
  return {{"manifest",
           {{"schema_version", 1},
            {"total", items.size()},
            {"counts", counts_j},
            {"corpus_md5", corpus_md5},
            {"condition", std::string(corpus::to_string(condition))},
            {"seed", seed},
            {"notes", notes}}},
          {"items", items_j}};
}

Battery Battery::from_json(const nlohmann::json& j) {
  Battery b;
  const auto& m = j.at("manifest");
  b.corpus_md5 = m.at("corpus_md5");
  b.condition = corpus::parse_condition(m.at("condition").get<std::string>());
  b.seed = m.at("seed");
  b.notes = m.at("notes").get<std::vector<std::string>>();
  for (const auto& [name, n] : m.at("counts").items()) b.counts[parse_item_type(name)] = n.get<int>();
  for (const auto& it : j.at("items")) b.items.push_back(WugItem::from_json(it));
  return b;
}

void Battery::save(const std::filesystem::path& path) const {
  io::write_file_atomic(path, to_json().dump(1));
}

Battery Battery::load(const std::filesystem::path& path) {
  return from_json(nlohmann::json::parse(io::read_file(path)));
}

// ---------------------------------------------------------------------------
// Validation

ValidationReport validate_battery(const Battery& battery, const corpus::Corpus& corpus) {
  ValidationReport rep;
  auto fail = [&](const std::string& id, const std::string& what) {
    rep.violations.push_back(id.empty() ? what : id + ": " + what);
  };
  const auto& spec = corpus.spec;
  const auto& lex = spec.lexicon;

  if (battery.corpus_md5 != corpus.md5) fail("", "battery was built from a different corpus (md5 mismatch)");
  if (static_cast<int>(battery.items.size()) != kBatterySize)
    fail("", "battery holds " + std::to_string(battery.items.size()) + " items, expected 1040");
  const auto alloc = allocation(spec.condition);
  std::map<ItemType, int> seen_counts;
  for (const auto& it : battery.items) ++seen_counts[it.item_type];
  for (const auto& [t, n] : alloc) {
    const int got = seen_counts.count(t) ? seen_counts.at(t) : 0;
    if (got != n)
      fail("", std::string(to_string(t)) + " has " + std::to_string(got) + " items, expected " + std::to_string(n));
    const int declared = battery.counts.count(t) ? battery.counts.at(t) : 0;
    if (declared != got) fail("", std::string(to_string(t)) + " manifest count disagrees with items");
  }

  std::unordered_set<std::string> corpus_words;
  for (const auto& [w, c] : corpus.token_frequencies()) corpus_words.insert(w);
  auto in_dim = [&](const std::string& tok, FeatureDim d) {
    const auto& toks = lex.tokens(d);
    return std::find(toks.begin(), toks.end(), tok) != toks.end();
  };
  std::set<std::string> ids;
  for (const auto& it : battery.items) {
    const std::string& id = it.item_id;
    if (!ids.insert(id).second) fail(id, "duplicate item id");
    if (it.target_completion == it.foil_completion) fail(id, "foil equals target");
    if (!in_dim(it.target_completion, it.target_dim)) fail(id, "target is not a " + std::string(corpus::to_string(it.target_dim)) + " token");
    if (!in_dim(it.foil_completion, it.foil_dim)) fail(id, "foil is not a " + std::string(corpus::to_string(it.foil_dim)) + " token");
    if (it.kind_id < 0 || it.kind_id >= static_cast<int>(spec.kinds.size())) {
      fail(id, "unknown kind id");
      continue;
    }
    const auto& kind = spec.kind(it.kind_id);
    const bool keyed = it.item_type != ItemType::CountShape && it.item_type != ItemType::MassTexture;
    if (keyed && it.target_completion != kind.stable_token)
      fail(id, "target does not match the kind's stable token in the corpus key");
    switch (it.item_type) {
      case ItemType::SecondOrder:
      case ItemType::FrameVariant:
        if (it.target_dim != FeatureDim::Shape || it.foil_dim != FeatureDim::Shape)
          fail(id, "second-order completions must both be shape tokens");
        if (!kind.is_novel) fail(id, "item kind is not a novel kind");
        if (corpus_words.count(it.noun)) fail(id, "leakage: noun '" + it.noun + "' occurs in training text");
        if (it.item_type == ItemType::FrameVariant &&
            corpus::frame_by_id(it.frame_id).role != corpus::FrameRole::HeldOut)
          fail(id, "frame-variant item uses a training frame");
        break;
      case ItemType::FirstOrder:
        if (it.foil_dim != it.target_dim) fail(id, "first-order foil must share the target's dimension");
        if (kind.is_novel) fail(id, "first-order item on a novel kind");
        break;
      case ItemType::SwapFrameCued:
      case ItemType::SwapNounOnly:
        if (kind.domain != corpus::Domain::B) fail(id, "swap item on a domain-A kind");
        break;
      default:
        break;
    }
    if (it.item_type != ItemType::NoLabelMatched && it.noun != kind.noun &&
        it.item_type != ItemType::OneShotControl)
      fail(id, "noun slot does not hold the kind's noun");
    if (it.prompt.find(it.noun) == std::string::npos) fail(id, "prompt does not contain the noun");
  }
  return rep;
}

}  // namespace wuglab::battery
