#include "wuglab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "wuglab/error.hpp"
#include "wuglab/rng.hpp"

namespace wuglab::probe {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void ProbeDataset::validate() const {
  const auto n = static_cast<std::size_t>(n_rows());
  if (n == 0) throw InvalidArgument("probe dataset is empty");
  if (groups.size() != n || folds.size() != n) throw InvalidArgument("probe dataset columns differ in length");
  for (const auto& m : layers)
    if (static_cast<std::size_t>(m.rows()) != n) throw InvalidArgument("probe layer has the wrong row count");
  for (int y : labels)
    if (y < 0 || y >= n_classes) throw InvalidArgument("probe label out of range");
}

std::vector<int> grouped_folds(const std::vector<int>& groups, const std::vector<int>& labels, int k,
                               std::uint64_t seed) {
  if (k < 2) throw InvalidArgument("need at least two folds");
  if (groups.size() != labels.size()) throw InvalidArgument("groups and labels differ in length");
  std::map<int, int> label_of;
  for (std::size_t i = 0; i < groups.size(); ++i) label_of.emplace(groups[i], labels[i]);
  std::vector<std::pair<int, int>> kinds(label_of.begin(), label_of.end());  // (group, label)
  if (static_cast<int>(kinds.size()) < k) throw InvalidArgument("fewer groups than folds");
  Pcg32 rng(derive_seed(seed, "folds"));
  rng.shuffle(std::span<std::pair<int, int>>(kinds));
  std::stable_sort(kinds.begin(), kinds.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  std::map<int, int> fold_of;
  for (std::size_t i = 0; i < kinds.size(); ++i) fold_of[kinds[i].first] = static_cast<int>(i % static_cast<std::size_t>(k));
  std::vector<int> folds(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) folds[i] = fold_of[groups[i]];
  return folds;
}

ProbeDataset make_dataset(const eval::HiddenExport& hidden, const battery::Battery& battery,
                          const corpus::NonceLexicon& lexicon, std::uint64_t fold_seed) {
  std::map<std::string, const battery::WugItem*> by_id;
  for (const auto& it : battery.items) by_id[it.item_id] = &it;
  ProbeDataset ds;
  std::vector<std::size_t> rows;
  std::vector<std::string> targets;
  for (std::size_t i = 0; i < hidden.item_ids.size(); ++i) {
    auto f = by_id.find(hidden.item_ids[i]);
    if (f == by_id.end()) throw Error("exported item " + hidden.item_ids[i] + " is not in the battery");
    const auto& item = *f->second;
    if (item.item_type != battery::ItemType::FirstOrder) continue;
    const bool feature = std::any_of(corpus::kAllDims.begin(), corpus::kAllDims.end(), [&](corpus::FeatureDim d) {
      const auto& ts = lexicon.tokens(d);
      return std::find(ts.begin(), ts.end(), item.target_completion) != ts.end();
    });
    if (!feature)
      throw Error("FO target '" + item.target_completion + "' is not a feature token");
    targets.push_back(item.target_completion);
    ds.groups.push_back(item.kind_id);
    rows.push_back(i);
  }
  // Classes are the distinct targets, numbered in lexicon order. Regular
  // targets are all shapes; Scrambled kinds spread over every dimension.
  std::vector<std::string> classes;
  for (auto d : corpus::kAllDims)
    for (const auto& t : lexicon.tokens(d))
      if (std::find(targets.begin(), targets.end(), t) != targets.end()) classes.push_back(t);
  for (const auto& t : targets)
    ds.labels.push_back(static_cast<int>(std::find(classes.begin(), classes.end(), t) - classes.begin()));
  ds.n_classes = static_cast<int>(classes.size());
  if (rows.empty()) throw Error("export holds no first-order items");
  for (int l = 0; l <= hidden.n_layers; ++l) {
    MatrixXd m(static_cast<Eigen::Index>(rows.size()), hidden.d_model);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const float* v = hidden.vec(rows[r], l);
      for (int j = 0; j < hidden.d_model; ++j) m(static_cast<Eigen::Index>(r), j) = v[j];
    }
    ds.layers.push_back(std::move(m));
  }
  ds.folds = grouped_folds(ds.groups, ds.labels, kFolds, fold_seed);
  ds.validate();
  return ds;
}

Eigen::VectorXi LogisticFit::predict(const MatrixXd& x) const {
  const MatrixXd logits = (x * weights).rowwise() + bias.transpose();
  Eigen::VectorXi out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) logits.row(i).maxCoeff(&out(i));
  return out;
}

namespace {

// Mean cross-entropy gradient plus the L2 term on the weights.
void gradient(const MatrixXd& x, const MatrixXd& onehot, const MatrixXd& w, const VectorXd& b, double l2,
              MatrixXd& gw, VectorXd& gb) {
  MatrixXd p = (x * w).rowwise() + b.transpose();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  p -= onehot;
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  gw = x.transpose() * p * inv_n + l2 * w;
  gb = p.colwise().sum().transpose() * inv_n;
}

// Largest eigenvalue of x^T x / n (with a bias column) by power iteration.
double curvature_bound(const MatrixXd& x) {
  MatrixXd xa(x.rows(), x.cols() + 1);
  xa << x, MatrixXd::Ones(x.rows(), 1);
  VectorXd v = VectorXd::Ones(xa.cols()).normalized();
  double lam = 0;
  for (int it = 0; it < 100; ++it) {
    VectorXd u = xa.transpose() * (xa * v);
    const double nu = u.norm();
    if (nu == 0) break;
    const double prev = lam;
    lam = nu;
    v = u / nu;
    if (std::abs(lam - prev) <= 1e-9 * lam) break;
  }
  return lam / static_cast<double>(x.rows());
}

}  // namespace

LogisticFit fit_logistic(const MatrixXd& x, const std::vector<int>& y, int n_classes, double l2, int max_iterations,
                         double tolerance) {
  if (x.rows() != static_cast<Eigen::Index>(y.size()) || x.rows() == 0) throw InvalidArgument("bad probe inputs");
  if (!(l2 > 0)) throw InvalidArgument("probe L2 must be positive");
  MatrixXd onehot = MatrixXd::Zero(x.rows(), n_classes);
  for (std::size_t i = 0; i < y.size(); ++i) onehot(static_cast<Eigen::Index>(i), y[i]) = 1;
  // The softmax Hessian is bounded by 0.5 * x^T x / n per class block.
  const double lipschitz = 0.5 * curvature_bound(x) + l2;
  const double step = 1.0 / lipschitz;

  LogisticFit fit;
  fit.weights = MatrixXd::Zero(x.cols(), n_classes);
  fit.bias = VectorXd::Zero(n_classes);
  MatrixXd w_prev = fit.weights, yw = fit.weights, gw;
  VectorXd b_prev = fit.bias, yb = fit.bias, gb;
  double t = 1;
  for (int it = 0; it < max_iterations; ++it) {
    gradient(x, onehot, fit.weights, fit.bias, l2, gw, gb);
    fit.grad_norm = std::sqrt(gw.squaredNorm() + gb.squaredNorm());
    fit.iterations = it;
    if (fit.grad_norm < tolerance) {
      fit.converged = true;
      break;
    }
    gradient(x, onehot, yw, yb, l2, gw, gb);
    w_prev = fit.weights;
    b_prev = fit.bias;
    fit.weights = yw - step * gw;
    fit.bias = yb - step * gb;
    const double t_next = 0.5 * (1 + std::sqrt(1 + 4 * t * t));
    const double mom = (t - 1) / t_next;
    // Restart momentum when the step moves against the previous direction.
    if ((gw.cwiseProduct(fit.weights - w_prev)).sum() + gb.dot(fit.bias - b_prev) > 0) {
      t = 1;
      yw = fit.weights;
      yb = fit.bias;
    } else {
      yw = fit.weights + mom * (fit.weights - w_prev);
      yb = fit.bias + mom * (fit.bias - b_prev);
      t = t_next;
    }
  }
  if (!fit.converged) fit.iterations = max_iterations;
  return fit;
}

CvResult cross_validate(const MatrixXd& x, const std::vector<int>& labels, const std::vector<int>& folds,
                        int n_classes, double l2) {
  std::set<int> fold_ids(folds.begin(), folds.end());
  CvResult res;
  int correct = 0, scored = 0;
  for (int f : fold_ids) {
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < folds.size(); ++i) (folds[i] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
    if (tr.empty()) continue;
    MatrixXd xtr = x(tr, Eigen::all), xte = x(te, Eigen::all);
    const Eigen::RowVectorXd mu = xtr.colwise().mean();
    Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(xtr.rows()))
                                .sqrt()
                                .matrix();
    for (Eigen::Index j = 0; j < sd.size(); ++j)
      if (!(sd(j) > 1e-12)) sd(j) = 1;
    xtr = ((xtr.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    xte = ((xte.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    std::vector<int> ytr;
    for (auto i : tr) ytr.push_back(labels[static_cast<std::size_t>(i)]);
    const auto fit = fit_logistic(xtr, ytr, n_classes, l2);
    if (!fit.converged) ++res.nonconverged;
    const auto pred = fit.predict(xte);
    for (std::size_t i = 0; i < te.size(); ++i)
      correct += pred(static_cast<Eigen::Index>(i)) == labels[static_cast<std::size_t>(te[i])] ? 1 : 0;
    scored += static_cast<int>(te.size());
  }
  res.accuracy = scored ? static_cast<double>(correct) / scored : 0.0;
  return res;
}

ProbeResult train_probe(const ProbeDataset& data, double l2) {
  data.validate();
  ProbeResult r;
  for (const auto& x : data.layers) {
    const auto cv = cross_validate(x, data.labels, data.folds, data.n_classes, l2);
    r.layer_accuracy.push_back(cv.accuracy);
    r.nonconverged += cv.nonconverged;
  }
  // Ties go to the deepest layer.
  for (std::size_t l = 0; l < r.layer_accuracy.size(); ++l)
    if (r.layer_accuracy[l] >= r.layer_accuracy[static_cast<std::size_t>(r.best_layer)]) r.best_layer = static_cast<int>(l);
  return r;
}

nlohmann::json PermutationControl::to_json() const {
  return {{"layer", layer},       {"true_accuracy", true_accuracy}, {"baseline", baseline},
          {"gap", gap},           {"p_value", p_value},             {"n_shuffles", shuffled.size()},
          {"shuffled", shuffled}};
}

PermutationControl permutation_test(const ProbeDataset& data, int layer,
                                    const std::vector<std::vector<int>>& permutations, double l2) {
  data.validate();
  if (layer < 0 || layer >= static_cast<int>(data.layers.size())) throw InvalidArgument("probe layer out of range");
  std::map<int, int> label_of;
  for (std::size_t i = 0; i < data.groups.size(); ++i) label_of.emplace(data.groups[i], data.labels[i]);
  std::vector<int> kinds, kind_labels;
  for (const auto& [g, y] : label_of) {
    kinds.push_back(g);
    kind_labels.push_back(y);
  }
  const auto& x = data.layers[static_cast<std::size_t>(layer)];
  PermutationControl pc;
  pc.layer = layer;
  pc.true_accuracy = cross_validate(x, data.labels, data.folds, data.n_classes, l2).accuracy;
  int at_least = 0;
  for (const auto& perm : permutations) {
    if (perm.size() != kinds.size()) throw InvalidArgument("permutation length differs from the number of kinds");
    std::map<int, int> shuffled_of;
    for (std::size_t i = 0; i < kinds.size(); ++i)
      shuffled_of[kinds[i]] = kind_labels[static_cast<std::size_t>(perm[i])];
    std::vector<int> y(data.labels.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = shuffled_of[data.groups[i]];
    const double acc = cross_validate(x, y, data.folds, data.n_classes, l2).accuracy;
    pc.shuffled.push_back(acc);
    if (acc >= pc.true_accuracy) ++at_least;
  }
  if (!pc.shuffled.empty())
    pc.baseline = std::accumulate(pc.shuffled.begin(), pc.shuffled.end(), 0.0) / static_cast<double>(pc.shuffled.size());
  pc.gap = pc.true_accuracy - pc.baseline;
  pc.p_value = (1.0 + at_least) / (static_cast<double>(pc.shuffled.size()) + 1.0);
  return pc;
}

PermutationControl permutation_test(const ProbeDataset& data, int layer, int n_shuffles, std::uint64_t seed,
                                    double l2) {
  std::set<int> kinds(data.groups.begin(), data.groups.end());
  std::vector<std::vector<int>> perms;
  for (int s = 0; s < n_shuffles; ++s) {
    std::vector<int> p(kinds.size());
    std::iota(p.begin(), p.end(), 0);
    Pcg32 rng(derive_seed(seed, "shuffle", static_cast<std::uint64_t>(s)));
    rng.shuffle(std::span<int>(p));
    perms.push_back(std::move(p));
  }
  return permutation_test(data, layer, perms, l2);
}

double cosine(const float* a, const float* b, int d) {
  double ab = 0, aa = 0, bb = 0;
  for (int i = 0; i < d; ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0 || bb == 0) return 0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

nlohmann::json CosineReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t l = 0; l < layers.size(); ++l)
    arr.push_back({{"layer", l},
                   {"within_trained", layers[l].within_trained},
                   {"within_novel", layers[l].within_novel},
                   {"cross", layers[l].cross}});
  return {{"layers", arr}, {"zero_vectors", zero_vectors}};
}

CosineReport cosine_analysis(const eval::HiddenExport& trained, const eval::HiddenExport& novel, int pair_layer) {
  if (trained.n_layers != novel.n_layers || trained.d_model != novel.d_model)
    throw InvalidArgument("hidden-state exports have different shapes");
  const int d = trained.d_model;
  CosineReport rep;
  auto nonzero = [&](const eval::HiddenExport& h, int layer) {
    std::vector<const float*> out;
    for (std::size_t i = 0; i < h.item_ids.size(); ++i) {
      const float* v = h.vec(i, layer);
      if (std::all_of(v, v + d, [](float x) { return x == 0.0f; })) {
        ++rep.zero_vectors;
        continue;
      }
      out.push_back(v);
    }
    return out;
  };
  auto within = [&](const std::vector<const float*>& vs) {
    if (vs.size() < 2) throw InvalidArgument("cosine analysis needs at least two vectors per group");
    double s = 0;
    long n = 0;
    for (std::size_t i = 0; i < vs.size(); ++i)
      for (std::size_t j = i + 1; j < vs.size(); ++j, ++n) s += cosine(vs[i], vs[j], d);
    return s / static_cast<double>(n);
  };
  if (pair_layer >= 0 && pair_layer <= trained.n_layers) rep.pair_layer = pair_layer;
  auto keep = [&](int layer, const char* group, double c) {
    if (layer == rep.pair_layer) rep.pairs.push_back({group, c});
  };
  auto within_pairs = [&](int layer, const char* group, const std::vector<const float*>& vs) {
    if (layer != rep.pair_layer) return;
    for (std::size_t i = 0; i < vs.size(); ++i)
      for (std::size_t j = i + 1; j < vs.size(); ++j) keep(layer, group, cosine(vs[i], vs[j], d));
  };
  for (int l = 0; l <= trained.n_layers; ++l) {
    const auto t = nonzero(trained, l), n = nonzero(novel, l);
    within_pairs(l, "within-trained", t);
    within_pairs(l, "within-novel", n);
    CosineLayer c;
    c.within_trained = within(t);
    c.within_novel = within(n);
    double s = 0;
    for (const float* a : t)
      for (const float* b : n) {
        const double x = cosine(a, b, d);
        s += x;
        keep(l, "cross", x);
      }
    c.cross = s / static_cast<double>(t.size() * n.size());
    rep.layers.push_back(c);
  }
  return rep;
}

std::vector<battery::WugItem> noun_items(const corpus::CorpusSpec& spec, bool novel) {
  std::vector<battery::WugItem> items;
  for (const auto& k : spec.kinds) {
    if (k.is_novel != novel) continue;
    battery::WugItem it;
    it.item_id = (novel ? "NN-" : "TN-") + std::to_string(k.kind_id);
    it.item_type = novel ? battery::ItemType::SecondOrder : battery::ItemType::FirstOrder;
    it.prompt = "A " + k.noun + " is a";
    it.noun = k.noun;
    it.kind_id = k.kind_id;
    it.frame_id = 0;
    it.target_completion = k.stable_token;
    it.foil_completion = k.stable_token;
    it.target_dim = it.foil_dim = k.stable_dim;
    items.push_back(std::move(it));
  }
  return items;
}

CosineReport noun_cosines(const lm::LanguageModel& model, const tok::BpeModel& bpe, const corpus::CorpusSpec& spec,
                          eval::Position position) {
  const auto t = eval::export_hidden_states(model, bpe, noun_items(spec, false), position);
  const auto n = eval::export_hidden_states(model, bpe, noun_items(spec, true), position);
  return cosine_analysis(t, n, report_layer(model.config().n_layers));
}

PerturbationReport perturbation_experiment(const lm::Checkpoint& ckpt, const tok::BpeModel& bpe,
                                           const corpus::CorpusSpec& spec, std::uint64_t seed,
                                           eval::Position position) {
  PerturbationReport rep;
  rep.before = noun_cosines(lm::LanguageModel(ckpt), bpe, spec, position);
  auto single = [&](const std::string& noun) {
    auto ids = bpe.encode(" " + noun);
    if (ids.size() != 1) throw Error("noun '" + noun + "' is not a single token");
    return ids[0];
  };
  std::vector<int> trained, novel;
  for (const auto& k : spec.kinds) (k.is_novel ? novel : trained).push_back(single(k.noun));
  if (trained.size() < novel.size()) throw Error("fewer trained than novel nouns");
  Pcg32 rng(derive_seed(seed, "perturb"));
  rng.shuffle(std::span<int>(trained));
  for (std::size_t i = 0; i < novel.size(); ++i) rep.mapping.emplace_back(novel[i], trained[i]);
  rep.after = noun_cosines(lm::LanguageModel(lm::swap_embeddings(ckpt, rep.mapping)), bpe, spec, position);
  return rep;
}

int report_layer(int n_layers) { return std::min(6, n_layers); }

}  // namespace wuglab::probe
