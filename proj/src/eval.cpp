#include "wuglab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "wuglab/error.hpp"
#include "wuglab/io.hpp"

namespace wuglab::eval {

using battery::ItemType;

namespace {

std::vector<int> ids_of(const tok::BpeModel& bpe, std::string_view text) { return bpe.encode(text); }

// 1-based rank of `id` in `lp` (ties resolved in the target's favour).
int rank_of(const std::vector<double>& lp, int id) {
  const double v = lp[static_cast<std::size_t>(id)];
  int r = 1;
  for (double x : lp)
    if (x > v) ++r;
  return r;
}

int first_id(const tok::BpeModel& bpe, const std::string& word) {
  auto ids = bpe.encode(" " + word);
  if (ids.empty()) throw Error("empty encoding for '" + word + "'");
  return ids.front();
}

int rank_in_dim(const std::vector<double>& lp, const tok::BpeModel& bpe, const std::string& target,
                const std::vector<std::string>& dim_tokens) {
  const double v = lp[static_cast<std::size_t>(first_id(bpe, target))];
  int r = 1;
  for (const auto& t : dim_tokens)
    if (t != target && lp[static_cast<std::size_t>(first_id(bpe, t))] > v) ++r;
  return r;
}

std::string strip_space(std::string s) {
  if (!s.empty() && s.front() == ' ') s.erase(s.begin());
  return s;
}

}  // namespace

EncodedItem encode_item(const tok::BpeModel& bpe, const battery::WugItem& item, bool with_context) {
  EncodedItem e;
  e.prompt.push_back(tok::kBos);
  if (with_context && item.context_prefix) {
    auto ctx = ids_of(bpe, *item.context_prefix);
    e.prompt.insert(e.prompt.end(), ctx.begin(), ctx.end());
    e.prompt.push_back(tok::kEos);
    e.prompt.push_back(tok::kBos);
  }
  const std::size_t start = e.prompt.size();
  auto body = ids_of(bpe, item.prompt);
  e.prompt.insert(e.prompt.end(), body.begin(), body.end());
  e.critical_position = static_cast<int>(e.prompt.size()) - 1;
  e.target = ids_of(bpe, " " + item.target_completion);
  e.foil = ids_of(bpe, " " + item.foil_completion);
  // Whitespace pretokenization keeps word boundaries, so the encoding of the
  // prompt up to the noun is a prefix of the full prompt encoding.
  if (!item.noun.empty()) {
    std::size_t pos = std::string::npos, from = 0;
    while ((from = item.prompt.find(item.noun, from)) != std::string::npos) {
      const bool left = from == 0 || item.prompt[from - 1] == ' ';
      const std::size_t end = from + item.noun.size();
      const bool right = end == item.prompt.size() || item.prompt[end] == ' ';
      if (left && right) {
        pos = end;
        break;
      }
      from = end;
    }
    if (pos != std::string::npos)
      e.noun_final_position = static_cast<int>(start + ids_of(bpe, item.prompt.substr(0, pos)).size()) - 1;
  }
  return e;
}

std::vector<RunResultRow> run_forced_choice(const lm::LanguageModel& model, const tok::BpeModel& bpe,
                                            const battery::Battery& battery,
                                            const corpus::NonceLexicon& lexicon, const RunInfo& run) {
  std::vector<RunResultRow> rows;
  rows.reserve(battery.items.size());
  const int max_len = model.config().max_seq_len;
  for (const auto& item : battery.items) {
    const EncodedItem e = encode_item(bpe, item);
    const std::size_t longest = e.prompt.size() + std::max(e.target.size(), e.foil.size()) - 1;
    if (static_cast<int>(longest) > max_len)
      throw InvalidArgument("item " + item.item_id + " exceeds max_seq_len");
    const auto lp = model.next_log_probs(e.prompt);
    RunResultRow r;
    r.run_id = run.run_id;
    r.condition = run.condition;
    r.size_tag = run.size_tag;
    r.seed = run.seed;
    r.item_id = item.item_id;
    r.item_type = item.item_type;
    r.logp_target = e.target.size() == 1 ? lp[static_cast<std::size_t>(e.target[0])]
                                         : model.score_completion(e.prompt, e.target);
    r.logp_foil = e.foil.size() == 1 ? lp[static_cast<std::size_t>(e.foil[0])]
                                     : model.score_completion(e.prompt, e.foil);
    r.multi_subword = e.target.size() > 1 || e.foil.size() > 1;
    const double delta = r.logp_target - r.logp_foil;
    r.tie = std::abs(delta) <= kTieTolerance;
    r.correct = (!r.tie && delta > 0) ? 1 : 0;
    r.rank_target = rank_of(lp, e.target[0]);
    r.rank_in_dim = rank_in_dim(lp, bpe, item.target_completion, lexicon.tokens(item.target_dim));
    const int g = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    r.greedy_token = strip_space(bpe.piece(g));
    rows.push_back(std::move(r));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const RunResultRow& a, const RunResultRow& b) { return a.item_id < b.item_id; });
  return rows;
}

std::string results_csv(const std::vector<RunResultRow>& rows) {
  std::string out = std::string(kResultColumns) + "\n";
  for (const auto& r : rows)
    out += io::csv_row({r.run_id, r.condition, r.size_tag, std::to_string(r.seed), r.item_id,
                        std::string(battery::to_string(r.item_type)), io::fmt_double(r.logp_target),
                        io::fmt_double(r.logp_foil), std::to_string(r.correct), r.tie ? "1" : "0",
                        std::to_string(r.rank_target), std::to_string(r.rank_in_dim),
                        r.multi_subword ? "1" : "0", r.greedy_token});
  return out;
}

std::vector<RunResultRow> parse_results_csv(std::string_view text) {
  auto table = io::parse_csv(text);
  if (table.empty()) throw Error("empty results file");
  std::string header;
  for (std::size_t i = 0; i < table[0].size(); ++i) header += (i ? "," : "") + table[0][i];
  if (header != kResultColumns) throw Error("unexpected results header: " + header);
  std::vector<RunResultRow> rows;
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto& f = table[i];
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != 14) throw Error("results row " + std::to_string(i) + " has " + std::to_string(f.size()) + " fields");
    RunResultRow r;
    r.run_id = f[0];
    r.condition = f[1];
    r.size_tag = f[2];
    r.seed = std::stoull(f[3]);
    r.item_id = f[4];
    r.item_type = battery::parse_item_type(f[5]);
    r.logp_target = std::stod(f[6]);
    r.logp_foil = std::stod(f[7]);
    r.correct = std::stoi(f[8]);
    r.tie = f[9] == "1";
    r.rank_target = std::stoi(f[10]);
    r.rank_in_dim = std::stoi(f[11]);
    r.multi_subword = f[12] == "1";
    r.greedy_token = f[13];
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<AggregateCell> aggregate(const std::vector<RunResultRow>& rows) {
  using Key = std::tuple<std::string, std::string, std::uint64_t, int>;
  std::map<Key, AggregateCell> cells;
  for (const auto& r : rows) {
    Key key{r.condition, r.size_tag, r.seed, static_cast<int>(r.item_type)};
    auto& c = cells[key];
    c.condition = r.condition;
    c.size_tag = r.size_tag;
    c.seed = r.seed;
    c.item_type = r.item_type;
    ++c.n;
    c.ties += r.tie ? 1 : 0;
    c.accuracy += r.correct;
    c.mean_delta_logp += r.logp_target - r.logp_foil;
    c.mean_rank += r.rank_target;
  }
  std::vector<AggregateCell> out;
  for (auto& [k, c] : cells) {
    c.accuracy /= c.n;
    c.mean_delta_logp /= c.n;
    c.mean_rank /= c.n;
    out.push_back(c);
  }
  return out;
}

std::string aggregates_csv(const std::vector<AggregateCell>& cells) {
  std::string out = "condition,size_tag,seed,item_type,n,ties,accuracy,mean_delta_logp,mean_rank\n";
  for (const auto& c : cells)
    out += io::csv_row({c.condition, c.size_tag, std::to_string(c.seed),
                        std::string(battery::to_string(c.item_type)), std::to_string(c.n),
                        std::to_string(c.ties), io::fmt_double(c.accuracy),
                        io::fmt_double(c.mean_delta_logp), io::fmt_double(c.mean_rank)});
  return out;
}

OneShotSummary run_one_shot(const lm::LanguageModel& model, const tok::BpeModel& bpe,
                            const battery::Battery& battery, const corpus::NonceLexicon& lexicon) {
  OneShotSummary s;
  double base = 0, same = 0, ctrl = 0;
  int n_same = 0, n_ctrl = 0;
  for (const auto& item : battery.items) {
    if (!battery::is_one_shot(item.item_type)) continue;
    OneShotRow row;
    row.item_id = item.item_id;
    row.item_type = item.item_type;
    for (bool with : {false, true}) {
      const EncodedItem e = encode_item(bpe, item, with);
      const auto lp = model.next_log_probs(e.prompt);
      const int r = rank_of(lp, e.target[0]);
      const int rd = rank_in_dim(lp, bpe, item.target_completion, lexicon.tokens(item.target_dim));
      (with ? row.rank_with : row.rank_without) = r;
      (with ? row.rank_in_dim_with : row.rank_in_dim_without) = rd;
    }
    if (item.item_type == ItemType::OneShotInContext) {
      base += row.rank_in_dim_without;
      same += row.rank_in_dim_with;
      ++n_same;
    } else {
      ctrl += row.rank_in_dim_with;
      ++n_ctrl;
    }
    s.rows.push_back(row);
  }
  if (n_same) {
    s.mean_rank_baseline = base / n_same;
    s.mean_rank_same = same / n_same;
  }
  if (n_ctrl) s.mean_rank_control = ctrl / n_ctrl;
  return s;
}

GreedyDiagnostics greedy_diagnostics(const std::vector<RunResultRow>& rows, battery::ItemType type,
                                     const corpus::NonceLexicon& lexicon) {
  GreedyDiagnostics g;
  const auto& shapes = lexicon.tokens(corpus::FeatureDim::Shape);
  int specific = 0, shape_class = 0;
  for (const auto& r : rows) {
    if (r.item_type != type) continue;
    ++g.n;
    // Targets are single tokens, so the greedy piece equals the word when correct.
    if (r.rank_target == 1) ++specific;
    if (std::find(shapes.begin(), shapes.end(), r.greedy_token) != shapes.end()) ++shape_class;
  }
  if (g.n) {
    g.correct_specific_rate = static_cast<double>(specific) / g.n;
    g.shape_class_rate = static_cast<double>(shape_class) / g.n;
  }
  return g;
}

std::string_view to_string(Position p) {
  return p == Position::NounFinal ? "noun-final" : "critical-prediction";
}

Position parse_position(std::string_view s) {
  if (s == "noun-final") return Position::NounFinal;
  if (s == "critical-prediction") return Position::CriticalPrediction;
  throw InvalidArgument("unknown position: " + std::string(s));
}

HiddenExport export_hidden_states(const lm::LanguageModel& model, const tok::BpeModel& bpe,
                                  const std::vector<battery::WugItem>& items, Position position) {
  HiddenExport h;
  h.n_layers = model.config().n_layers;
  h.d_model = model.config().d_model;
  for (const auto& item : items) {
    const EncodedItem e = encode_item(bpe, item);
    const int pos = position == Position::NounFinal ? e.noun_final_position : e.critical_position;
    if (pos < 0 || pos >= static_cast<int>(e.prompt.size()))
      throw InvalidArgument("requested position is out of range for item " + item.item_id);
    const auto states = model.hidden_states(std::span<const int>(e.prompt.data(), static_cast<std::size_t>(pos) + 1));
    h.item_ids.push_back(item.item_id);
    h.positions.push_back(pos);
    for (const auto& layer : states)
      for (int j = 0; j < h.d_model; ++j) h.data.push_back(layer(pos, j));
  }
  return h;
}

void HiddenExport::save(const std::filesystem::path& stem) const {
  std::string raw(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  auto bin = stem;
  bin += ".f32";
  auto idx = stem;
  idx += ".json";
  io::write_file_atomic(bin, raw);
  nlohmann::json j = {{"item_ids", item_ids}, {"positions", positions}, {"n_layers", n_layers},
                      {"d_model", d_model},   {"layout", "item,layer,dim"}, {"dtype", "float32-le"},
                      {"md5", io::md5_hex(raw)}};
  io::write_file_atomic(idx, j.dump(1));
}

HiddenExport HiddenExport::load(const std::filesystem::path& stem) {
  auto bin = stem;
  bin += ".f32";
  auto idx = stem;
  idx += ".json";
  auto j = nlohmann::json::parse(io::read_file(idx));
  HiddenExport h;
  h.item_ids = j.at("item_ids").get<std::vector<std::string>>();
  h.positions = j.at("positions").get<std::vector<int>>();
  h.n_layers = j.at("n_layers");
  h.d_model = j.at("d_model");
  const std::string raw = io::read_file(bin);
  const std::size_t expect = h.item_ids.size() * static_cast<std::size_t>(h.n_layers + 1) *
                             static_cast<std::size_t>(h.d_model) * sizeof(float);
  if (raw.size() != expect) throw Error("hidden-state file size does not match its index");
  h.data.resize(raw.size() / sizeof(float));
  std::memcpy(h.data.data(), raw.data(), raw.size());
  return h;
}

}  // namespace wuglab::eval
