#include "wuglab/hbm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "wuglab/error.hpp"
#include "wuglab/io.hpp"

namespace wuglab::hbm {

using corpus::FeatureDim;

long CountMatrix::total() const {
  long t = 0;
  for (const auto& r : rows) t += std::accumulate(r.begin(), r.end(), 0L);
  return t;
}

void CountMatrix::validate() const {
  if (n_values < 1) throw InvalidArgument("count matrix needs at least one value");
  if (kind_ids.size() != rows.size()) throw InvalidArgument("count matrix kind ids do not match rows");
  for (const auto& r : rows) {
    if (static_cast<int>(r.size()) != n_values) throw InvalidArgument("count row has the wrong width");
    for (int c : r)
      if (c < 0) throw InvalidArgument("negative count");
  }
}

std::string CountMatrix::to_csv() const {
  std::vector<std::string> header = {"kind_id"};
  for (int v = 0; v < n_values; ++v) header.push_back("v" + std::to_string(v));
  std::string out = io::csv_row(header);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::vector<std::string> f = {std::to_string(kind_ids[k])};
    for (int c : rows[k]) f.push_back(std::to_string(c));
    out += io::csv_row(f);
  }
  return out;
}

CountMatrix CountMatrix::from_csv(std::string_view text) {
  auto table = io::parse_csv(text);
  if (table.empty() || table[0].empty() || table[0][0] != "kind_id") throw Error("count CSV lacks a header");
  CountMatrix m;
  m.n_values = static_cast<int>(table[0].size()) - 1;
  for (std::size_t i = 1; i < table.size(); ++i) {
    if (table[i].size() == 1 && table[i][0].empty()) continue;
    if (static_cast<int>(table[i].size()) != m.n_values + 1) throw Error("count CSV row has the wrong width");
    m.kind_ids.push_back(std::stoi(table[i][0]));
    std::vector<int> row;
    for (int v = 0; v < m.n_values; ++v) row.push_back(std::stoi(table[i][static_cast<std::size_t>(v) + 1]));
    m.rows.push_back(std::move(row));
  }
  m.validate();
  return m;
}

std::string_view to_string(DimPolicy p) {
  return p == DimPolicy::ShapeOnly ? "shape-only" : "stable-dimension";
}

DimPolicy parse_dim_policy(std::string_view s) {
  if (s == "shape-only") return DimPolicy::ShapeOnly;
  if (s == "stable-dimension") return DimPolicy::StableDimension;
  throw InvalidArgument("unknown dimension policy '" + std::string(s) + "'");
}

CountMatrix counts_from_corpus(const corpus::Corpus& corpus, DimPolicy policy) {
  const auto& spec = corpus.spec;
  CountMatrix m;
  std::map<int, std::size_t> row_of;
  for (const auto& k : spec.kinds) {
    if (k.is_novel) continue;
    row_of[k.kind_id] = m.rows.size();
    m.kind_ids.push_back(k.kind_id);
    m.rows.emplace_back(corpus::kTokensPerDim, 0);
  }
  for (const auto& p : corpus.provenance) {
    if (p.kind_id < 0 || !p.labelled) continue;
    auto it = row_of.find(p.kind_id);
    if (it == row_of.end()) continue;
    const auto& kind = spec.kind(p.kind_id);
    const FeatureDim d = policy == DimPolicy::StableDimension && kind.domain == corpus::Domain::B
                             ? FeatureDim::Texture
                             : FeatureDim::Shape;
    const std::string& tok = p.slot_tokens[static_cast<int>(d)];
    if (tok.empty()) continue;
    const auto& toks = spec.lexicon.tokens(d);
    auto pos = std::find(toks.begin(), toks.end(), tok);
    // Noise can put another dimension's token in the slot; that is not an
    // observation of this dimension.
    if (pos == toks.end()) continue;
    ++m.rows[it->second][static_cast<std::size_t>(pos - toks.begin())];
  }
  return m;
}

AlphaGrid default_grid(int points, double lo, double hi, double rate) {
  if (points < 2 || !(lo > 0) || !(hi > lo) || !(rate > 0)) throw InvalidArgument("bad alpha grid");
  AlphaGrid g;
  const double a = std::log(lo), b = std::log(hi);
  double sum = 0;
  for (int i = 0; i < points; ++i) {
    const double x = std::exp(a + (b - a) * i / (points - 1));
    g.alpha.push_back(x);
    g.weight.push_back(rate * std::exp(-rate * x) * x);
    sum += g.weight.back();
  }
  for (double& w : g.weight) w /= sum;
  return g;
}

std::vector<double> estimate_beta(const CountMatrix& counts, double pseudo_count) {
  counts.validate();
  std::vector<double> beta(static_cast<std::size_t>(counts.n_values), pseudo_count);
  for (const auto& r : counts.rows)
    for (std::size_t v = 0; v < r.size(); ++v) beta[v] += r[v];
  const double s = std::accumulate(beta.begin(), beta.end(), 0.0);
  if (!(s > 0)) throw InvalidArgument("beta estimate needs counts or a positive pseudo-count");
  for (double& b : beta) b /= s;
  return beta;
}

double log_marginal_likelihood(const CountMatrix& counts, double alpha, const std::vector<double>& beta) {
  if (!(alpha > 0)) throw InvalidArgument("alpha must be positive");
  if (static_cast<int>(beta.size()) != counts.n_values) throw InvalidArgument("beta has the wrong width");
  double total = 0;
  for (const auto& r : counts.rows) {
    long n = 0;
    for (std::size_t v = 0; v < r.size(); ++v) {
      if (r[v] == 0) continue;
      const double a = alpha * beta[v];
      total += std::lgamma(a + r[v]) - std::lgamma(a);
      n += r[v];
    }
    if (n > 0) total += std::lgamma(alpha) - std::lgamma(alpha + static_cast<double>(n));
  }
  return total;
}

HbmPosterior fit_posterior(const CountMatrix& counts, const AlphaGrid& grid, const std::vector<double>& beta) {
  if (counts.n_kinds() < 1) throw InvalidArgument("posterior needs at least one kind");
  if (grid.alpha.empty() || grid.alpha.size() != grid.weight.size()) throw InvalidArgument("bad alpha grid");
  HbmPosterior post;
  post.alpha = grid.alpha;
  post.beta = beta;
  post.degenerate = counts.total() == 0;
  std::vector<double> lw(grid.alpha.size());
  for (std::size_t i = 0; i < lw.size(); ++i)
    lw[i] = std::log(grid.weight[i]) + log_marginal_likelihood(counts, grid.alpha[i], beta);
  const double mx = *std::max_element(lw.begin(), lw.end());
  double z = 0;
  post.weight.resize(lw.size());
  for (std::size_t i = 0; i < lw.size(); ++i) z += post.weight[i] = std::exp(lw[i] - mx);
  post.log_evidence = mx + std::log(z);
  std::size_t best = 0;
  for (std::size_t i = 0; i < lw.size(); ++i) {
    post.weight[i] /= z;
    post.mean_alpha += post.weight[i] * post.alpha[i];
    if (post.weight[i] > post.weight[best]) best = i;
  }
  post.map_alpha = post.alpha[best];
  return post;
}

HbmPosterior fit_posterior(const CountMatrix& counts, const AlphaGrid& grid) {
  return fit_posterior(counts, grid, estimate_beta(counts));
}

std::vector<double> predictive(const HbmPosterior& posterior, const std::vector<int>& observed) {
  if (observed.size() != posterior.beta.size()) throw InvalidArgument("observation has the wrong width");
  double n = 0;
  for (int c : observed) {
    if (c < 0) throw InvalidArgument("negative count");
    n += c;
  }
  std::vector<double> p(observed.size(), 0.0);
  for (std::size_t i = 0; i < posterior.alpha.size(); ++i) {
    const double a = posterior.alpha[i], w = posterior.weight[i];
    for (std::size_t v = 0; v < p.size(); ++v) p[v] += w * (observed[v] + a * posterior.beta[v]) / (n + a);
  }
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& x : p) x /= s;
  return p;
}

double bernoulli_kl(double p, double q) {
  if (p < 0 || p > 1 || !(q > 0) || !(q < 1)) throw InvalidArgument("Bernoulli KL needs p in [0,1] and q in (0,1)");
  double kl = 0;
  if (p > 0) kl += p * std::log(p / q);
  if (p < 1) kl += (1 - p) * std::log((1 - p) / (1 - q));
  return kl;
}

nlohmann::json HbmPosterior::to_json() const {
  return {{"alpha", alpha},         {"weight", weight},       {"beta", beta},
          {"mean_alpha", mean_alpha}, {"map_alpha", map_alpha}, {"log_evidence", log_evidence},
          {"degenerate", degenerate}};
}

HbmPosterior HbmPosterior::from_json(const nlohmann::json& j) {
  HbmPosterior p;
  p.alpha = j.at("alpha").get<std::vector<double>>();
  p.weight = j.at("weight").get<std::vector<double>>();
  p.beta = j.at("beta").get<std::vector<double>>();
  p.mean_alpha = j.at("mean_alpha");
  p.map_alpha = j.at("map_alpha");
  p.log_evidence = j.at("log_evidence");
  p.degenerate = j.at("degenerate");
  return p;
}

nlohmann::json KlReport::to_json() const {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& [id, kl] : per_item) items.push_back({{"item_id", id}, {"kl", kl}});
  return {{"mean_kl_nats", mean_kl}, {"n_items", n_items}, {"floored", floored},
          {"exemplars_seen", exemplars_seen}, {"items", items}};
}

namespace {

int index_in(const std::vector<std::string>& toks, const std::string& t) {
  auto it = std::find(toks.begin(), toks.end(), t);
  if (it == toks.end()) throw Error("token '" + t + "' is not in its dimension");
  return static_cast<int>(it - toks.begin());
}

std::vector<int> novel_observation(const corpus::KindSpec& kind, const corpus::NonceLexicon& lex, int seen) {
  std::vector<int> obs(corpus::kTokensPerDim, 0);
  if (seen > 0) obs[static_cast<std::size_t>(index_in(lex.tokens(kind.stable_dim), kind.stable_token))] = seen;
  return obs;
}

}  // namespace

KlReport forced_choice_kl(const std::vector<eval::RunResultRow>& rows, const battery::Battery& battery,
                          const corpus::CorpusSpec& spec, const HbmPosterior& posterior, int exemplars_seen) {
  if (exemplars_seen < 0) throw InvalidArgument("exemplars_seen must be nonnegative");
  std::map<std::string, const battery::WugItem*> by_id;
  for (const auto& it : battery.items) by_id[it.item_id] = &it;
  std::map<int, std::vector<double>> pred;
  KlReport rep;
  rep.exemplars_seen = exemplars_seen;
  double sum = 0;
  for (const auto& r : rows) {
    if (r.item_type != battery::ItemType::SecondOrder) continue;
    auto f = by_id.find(r.item_id);
    if (f == by_id.end()) throw Error("result row " + r.item_id + " is not in the battery");
    const auto& item = *f->second;
    const auto& kind = spec.kind(item.kind_id);
    auto& p = pred[item.kind_id];
    if (p.empty()) p = predictive(posterior, novel_observation(kind, spec.lexicon, exemplars_seen));
    const auto& toks = spec.lexicon.tokens(item.target_dim);
    const double pt = p[static_cast<std::size_t>(index_in(toks, item.target_completion))];
    const double pf = p[static_cast<std::size_t>(index_in(toks, item.foil_completion))];
    double q = pt / (pt + pf);
    if (q < kProbFloor || q > 1 - kProbFloor) {
      q = std::clamp(q, kProbFloor, 1 - kProbFloor);
      ++rep.floored;
    }
    const double model_p = 1.0 / (1.0 + std::exp(r.logp_foil - r.logp_target));
    const double kl = bernoulli_kl(model_p, q);
    rep.per_item.emplace_back(r.item_id, kl);
    sum += kl;
    ++rep.n_items;
  }
  if (rep.n_items) rep.mean_kl = sum / rep.n_items;
  return rep;
}

HbmRunOutput run_for_corpus(const corpus::Corpus& corpus, int exemplars_seen, DimPolicy policy) {
  HbmRunOutput out;
  out.counts = counts_from_corpus(corpus, policy);
  out.posterior = fit_posterior(out.counts);
  for (const auto& k : corpus.spec.kinds)
    if (k.is_novel)
      out.novel_predictive[k.kind_id] =
          predictive(out.posterior, novel_observation(k, corpus.spec.lexicon, exemplars_seen));
  return out;
}

void save(const HbmRunOutput& out, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir / "counts.csv", out.counts.to_csv());
  io::write_file_atomic(dir / "posterior.json", out.posterior.to_json().dump(1));
  std::vector<std::string> header = {"kind_id"};
  for (int v = 0; v < corpus::kTokensPerDim; ++v) header.push_back("p" + std::to_string(v));
  std::string csv = io::csv_row(header);
  for (const auto& [k, p] : out.novel_predictive) {
    std::vector<std::string> f = {std::to_string(k)};
    for (double x : p) f.push_back(io::fmt_double(x));
    csv += io::csv_row(f);
  }
  io::write_file_atomic(dir / "predictive.csv", csv);
}

}  // namespace wuglab::hbm
