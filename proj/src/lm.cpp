#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "wuglab/error.hpp"
#include "wuglab/io.hpp"
#include "wuglab/lm.hpp"

namespace wuglab::lm {

std::string_view to_string(SizeTag s) {
  switch (s) {
    case SizeTag::Tiny: return "tiny";
    case SizeTag::Small: return "small";
    case SizeTag::Medium: return "medium";
  }
  return "?";
}

SizeTag parse_size(std::string_view s) {
  std::string k(s);
  std::transform(k.begin(), k.end(), k.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (k == "tiny") return SizeTag::Tiny;
  if (k == "small") return SizeTag::Small;
  if (k == "medium") return SizeTag::Medium;
  throw InvalidArgument("unknown model size: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Configs

ModelConfig ModelConfig::for_size(SizeTag size, int vocab_size) {
  ModelConfig c;
  c.size = size;
  c.vocab_size = vocab_size;
  switch (size) {
    case SizeTag::Tiny:
      c.n_layers = 4, c.n_heads = 4, c.d_model = 256, c.d_ff = 1024;
      break;
    case SizeTag::Small:
      c.n_layers = 6, c.n_heads = 8, c.d_model = 512, c.d_ff = 512;
      break;
    case SizeTag::Medium:
      c.n_layers = 8, c.n_heads = 8, c.d_model = 768, c.d_ff = 512;
      break;
  }
  return c;
}

std::size_t ModelConfig::parameter_count() const { return ParamLayout(*this).total(); }

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_seq_len < 2)
    throw InvalidArgument("model dimensions must be positive");
  if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
  if (!weight_tying) throw InvalidArgument("only weight-tied models are supported");
  if (dropout < 0 || dropout >= 1) throw InvalidArgument("dropout must lie in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"size", std::string(to_string(size))},
          {"n_layers", n_layers},
          {"n_heads", n_heads},
          {"d_model", d_model},
          {"d_ff", d_ff},
          {"vocab_size", vocab_size},
          {"max_seq_len", max_seq_len},
          {"weight_tying", weight_tying},
          {"dropout", dropout}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.size = parse_size(j.at("size").get<std::string>());
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.d_model = j.at("d_model");
  c.d_ff = j.at("d_ff");
  c.vocab_size = j.at("vocab_size");
  c.max_seq_len = j.at("max_seq_len");
  c.weight_tying = j.at("weight_tying");
  c.dropout = j.at("dropout");
  c.validate();
  return c;
}

TrainConfig TrainConfig::for_size(SizeTag size, std::uint64_t seed) {
  TrainConfig t;
  t.seed = seed;
  t.steps = size == SizeTag::Tiny ? 5000 : size == SizeTag::Small ? 8000 : 10000;
  return t;
}

double TrainConfig::lr_at(int step) const {
  if (step < warmup_steps) return base_lr * static_cast<double>(step + 1) / warmup_steps;
  const double min_lr = base_lr * min_lr_ratio;
  const int span = std::max(1, steps - 1 - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},         {"batch_size", batch_size},     {"base_lr", base_lr},
          {"min_lr_ratio", min_lr_ratio}, {"warmup_steps", warmup_steps}, {"beta1", beta1},
          {"beta2", beta2},         {"eps", eps},                   {"weight_decay", weight_decay},
          {"grad_clip", grad_clip}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.steps = j.at("steps");
  t.batch_size = j.at("batch_size");
  t.base_lr = j.at("base_lr");
  t.min_lr_ratio = j.at("min_lr_ratio");
  t.warmup_steps = j.at("warmup_steps");
  t.beta1 = j.at("beta1");
  t.beta2 = j.at("beta2");
  t.eps = j.at("eps");
  t.weight_decay = j.at("weight_decay");
  t.grad_clip = j.at("grad_clip");
  t.seed = j.at("seed");
  return t;
}

// ---------------------------------------------------------------------------
// Layout and batching

ParamLayout::ParamLayout(const ModelConfig& c) {
  auto add = [&](std::string name, int rows, int cols, bool decay) {
    TensorInfo t{std::move(name), total_, rows, cols, decay};
    total_ += t.size();
    tensors_.push_back(std::move(t));
  };
  const int d = c.d_model;
  add("wte", c.vocab_size, d, true);
  add("wpe", c.max_seq_len, d, true);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1_g", 1, d, false);
    add(p + "ln1_b", 1, d, false);
    add(p + "attn_w", d, 3 * d, true);
    add(p + "attn_b", 1, 3 * d, false);
    add(p + "proj_w", d, d, true);
    add(p + "proj_b", 1, d, false);
    add(p + "ln2_g", 1, d, false);
    add(p + "ln2_b", 1, d, false);
    add(p + "fc_w", d, c.d_ff, true);
    add(p + "fc_b", 1, c.d_ff, false);
    add(p + "out_w", c.d_ff, d, true);
    add(p + "out_b", 1, d, false);
  }
  add("lnf_g", 1, d, false);
  add("lnf_b", 1, d, false);
}

const TensorInfo& ParamLayout::get(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw InvalidArgument("no parameter tensor named " + std::string(name));
}

Batch make_batch(std::span<const std::vector<int>> seqs, int pad_id) {
  Batch b;
  b.batch = static_cast<int>(seqs.size());
  for (const auto& s : seqs) {
    if (s.size() < 2) throw InvalidArgument("training sequences need at least two tokens");
    b.len = std::max(b.len, static_cast<int>(s.size()) - 1);
  }
  const auto n = static_cast<std::size_t>(b.batch) * static_cast<std::size_t>(b.len);
  b.inputs.assign(n, pad_id);
  b.targets.assign(n, -1);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      b.inputs[i * static_cast<std::size_t>(b.len) + t] = s[t];
      b.targets[i * static_cast<std::size_t>(b.len) + t] = s[t + 1];
      ++b.n_targets;
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'W', 'U', 'G', 'C', 'K', 'P', 'T', '1'};

void put_floats(std::string& out, const std::vector<float>& v) {
  const auto* p = reinterpret_cast<const char*>(v.data());
  out.append(p, v.size() * sizeof(float));
}

std::vector<float> get_floats(std::string_view& in, std::size_t n) {
  if (in.size() < n * sizeof(float)) throw Error("truncated checkpoint");
  std::vector<float> v(n);
  std::memcpy(v.data(), in.data(), n * sizeof(float));
  in.remove_prefix(n * sizeof(float));
  return v;
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header = {{"model", model.to_json()},
                           {"train", train.to_json()},
                           {"step", step},
                           {"n_params", params.size()},
                           {"has_optimizer", !adam_m.empty()},
                           {"data_rng", {data_state, data_inc}},
                           {"dropout_rng", {dropout_state, dropout_inc}},
                           {"meta", meta}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = h.size();
  out.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out += h;
  put_floats(out, params);
  if (!adam_m.empty()) {
    put_floats(out, adam_m);
    put_floats(out, adam_v);
  }
  io::write_file_atomic(path, out);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  std::string_view in(bytes);
  if (in.size() < 16 || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error("not a wuglab checkpoint: " + path.string());
  in.remove_prefix(sizeof(kMagic));
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, in.data(), sizeof(hlen));
  in.remove_prefix(sizeof(hlen));
  if (in.size() < hlen) throw Error("truncated checkpoint header");
  auto header = nlohmann::json::parse(in.substr(0, hlen));
  in.remove_prefix(hlen);
  Checkpoint c;
  c.model = ModelConfig::from_json(header.at("model"));
  c.train = TrainConfig::from_json(header.at("train"));
  c.step = header.at("step");
  const std::size_t n = header.at("n_params");
  if (n != c.model.parameter_count()) throw Error("checkpoint parameter count mismatch");
  c.params = get_floats(in, n);
  if (header.at("has_optimizer").get<bool>()) {
    c.adam_m = get_floats(in, n);
    c.adam_v = get_floats(in, n);
  }
  if (!in.empty()) throw Error("trailing bytes in checkpoint");
  c.data_state = header.at("data_rng").at(0);
  c.data_inc = header.at("data_rng").at(1);
  c.dropout_state = header.at("dropout_rng").at(0);
  c.dropout_inc = header.at("dropout_rng").at(1);
  c.meta = header.at("meta");
  return c;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const std::vector<std::vector<int>>& seqs, const ModelConfig& model_cfg,
                  const TrainConfig& tc, int pad_id,
                  const std::function<void(const TrainLogRow&)>& on_step) {
  if (seqs.empty()) throw InvalidArgument("cannot train on an empty corpus");
  if (tc.steps < 1 || tc.batch_size < 1) throw InvalidArgument("steps and batch_size must be positive");
  for (const auto& s : seqs)
    if (static_cast<int>(s.size()) - 1 > model_cfg.max_seq_len)
      throw InvalidArgument("training sequence longer than max_seq_len");
  Eigen::setNbThreads(1);

  Transformer<float> net(model_cfg);
  net.init(derive_seed(tc.seed, "init"));
  const std::size_t n = net.params().size();
  std::vector<float> m(n, 0.f), v(n, 0.f);
  std::vector<char> decay(n, 0);
  for (const auto& t : net.layout().tensors())
    if (t.decay) std::fill(decay.begin() + static_cast<long>(t.offset), decay.begin() + static_cast<long>(t.offset + t.size()), 1);

  Pcg32 data_rng(derive_seed(tc.seed, "data"));
  Pcg32 drop_rng(derive_seed(tc.seed, "dropout"));
  std::vector<std::size_t> order(seqs.size());
  std::size_t cursor = order.size();

  TrainResult result;
  std::vector<std::vector<int>> picked;
  double tail_sum = 0;
  int tail_n = 0;
  for (int step = 0; step < tc.steps; ++step) {
    picked.clear();
    for (int i = 0; i < tc.batch_size; ++i) {
      if (cursor == order.size()) {
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        data_rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      picked.push_back(seqs[order[cursor++]]);
    }
    Batch batch = make_batch(picked, pad_id);
    const float loss = net.loss(batch, true, model_cfg.dropout > 0 ? &drop_rng : nullptr);
    if (!std::isfinite(loss))
      throw Error("non-finite training loss at step " + std::to_string(step) + " (lr " +
                  io::fmt_double(tc.lr_at(step)) + ")");
    if (step == 0) result.initial_loss = loss;
    if (step > tc.warmup_steps && loss > 3.0 * std::log(static_cast<double>(model_cfg.vocab_size)))
      throw Error("training diverged at step " + std::to_string(step) + ": loss " +
                  io::fmt_double(loss) + ", lr " + io::fmt_double(tc.lr_at(step)));

    const auto& g = net.grads();
    double norm2 = 0;
    for (float x : g) norm2 += static_cast<double>(x) * x;
    const double norm = std::sqrt(norm2);
    const float clip = norm > tc.grad_clip ? static_cast<float>(tc.grad_clip / norm) : 1.f;

    const double lr = tc.lr_at(step);
    const double bc1 = 1.0 - std::pow(tc.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(tc.beta2, step + 1);
    const auto b1 = static_cast<float>(tc.beta1), b2 = static_cast<float>(tc.beta2);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(tc.eps);
    const auto wd = static_cast<float>(lr * tc.weight_decay);
    auto& p = net.params();
    for (std::size_t i = 0; i < n; ++i) {
      const float gi = g[i] * clip;
      m[i] = b1 * m[i] + (1.f - b1) * gi;
      v[i] = b2 * v[i] + (1.f - b2) * gi * gi;
      if (decay[i]) p[i] -= wd * p[i];
      p[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }

    TrainLogRow row{step, loss, lr};
    result.log.push_back(row);
    if (step >= tc.steps - 50) {
      tail_sum += loss;
      ++tail_n;
    }
    if (on_step) on_step(row);
  }
  result.final_loss = tail_sum / std::max(1, tail_n);

  auto& ck = result.checkpoint;
  ck.model = model_cfg;
  ck.train = tc;
  ck.step = tc.steps;
  ck.params.assign(net.params().begin(), net.params().end());
  ck.adam_m = std::move(m);
  ck.adam_v = std::move(v);
  ck.data_state = data_rng.state();
  ck.data_inc = data_rng.increment();
  ck.dropout_state = drop_rng.state();
  ck.dropout_inc = drop_rng.increment();
  return result;
}

std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "step,loss,lr\n";
  for (const auto& r : log)
    out += std::to_string(r.step) + "," + io::fmt_double(r.loss) + "," + io::fmt_double(r.lr) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

Transformer<float> net_from(const Checkpoint& ckpt) {
  Transformer<float> net(ckpt.model);
  if (ckpt.params.size() != net.params().size()) throw Error("checkpoint does not match its config");
  net.params().assign(ckpt.params.begin(), ckpt.params.end());
  return net;
}

}  // namespace

LanguageModel::LanguageModel(const Checkpoint& ckpt) : net_(net_from(ckpt)) {}

double LanguageModel::score_completion(std::span<const int> prompt,
                                       std::span<const int> completion) const {
  if (completion.empty()) return 0.0;
  if (prompt.empty()) throw InvalidArgument("prompt must contain at least one token (BOS)");
  std::vector<int> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), completion.begin(), completion.end() - 1);
  Transformer<float>::Mat lp;
  net_.forward(ids, &lp);
  double total = 0;
  for (std::size_t i = 0; i < completion.size(); ++i)
    total += lp(static_cast<Eigen::Index>(prompt.size() - 1 + i), completion[i]);
  return total;
}

std::vector<double> LanguageModel::next_log_probs(std::span<const int> prompt) const {
  if (prompt.empty()) throw InvalidArgument("prompt must contain at least one token (BOS)");
  Transformer<float>::Mat lp;
  net_.forward(prompt, &lp);
  auto last = lp.row(lp.rows() - 1);
  std::vector<double> out(static_cast<std::size_t>(last.size()));
  for (Eigen::Index i = 0; i < last.size(); ++i) out[static_cast<std::size_t>(i)] = last(i);
  return out;
}

int LanguageModel::greedy_next(std::span<const int> prompt) const {
  auto lp = next_log_probs(prompt);
  return static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
}

std::vector<Eigen::MatrixXf> LanguageModel::hidden_states(std::span<const int> ids) const {
  std::vector<Transformer<float>::Mat> hidden;
  net_.forward(ids, nullptr, &hidden);
  return {hidden.begin(), hidden.end()};
}

Checkpoint swap_embeddings(const Checkpoint& ckpt, std::span<const std::pair<int, int>> mapping) {
  Checkpoint out = ckpt;
  const ParamLayout layout(ckpt.model);
  const auto& wte = layout.get("wte");
  const auto d = static_cast<std::size_t>(wte.cols);
  for (const auto& [dst, src] : mapping) {
    if (dst < 0 || src < 0 || dst >= wte.rows || src >= wte.rows)
      throw InvalidArgument("embedding swap id out of range");
    std::copy_n(ckpt.params.begin() + static_cast<long>(wte.offset + static_cast<std::size_t>(src) * d), d,
                out.params.begin() + static_cast<long>(wte.offset + static_cast<std::size_t>(dst) * d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.size = SizeTag::Tiny;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  c.dropout = 0.0;
  return c;
}

GradCheckReport gradient_check(const ModelConfig& cfg, std::uint64_t seed, int samples_per_tensor) {
  ModelConfig c = cfg;
  c.dropout = 0.0;
  Transformer<double> net(c);
  net.init(seed);
  // Larger than default init so every path carries gradient signal.
  Pcg32 rng(seed, 99);
  for (auto& p : net.params()) p += 0.1 * rng.normal();

  std::vector<std::vector<int>> seqs;
  for (int b = 0; b < 3; ++b) {
    std::vector<int> s;
    const int len = 3 + b * 2;
    for (int t = 0; t < std::min(len, c.max_seq_len + 1); ++t)
      s.push_back(static_cast<int>(rng.below(static_cast<std::uint32_t>(c.vocab_size))));
    seqs.push_back(std::move(s));
  }
  const Batch batch = make_batch(seqs, 0);
  net.loss(batch, true);
  const std::vector<double> analytic(net.grads().begin(), net.grads().end());

  GradCheckReport rep;
  const double h = 1e-5;
  for (const auto& t : net.layout().tensors()) {
    for (int s = 0; s < samples_per_tensor; ++s) {
      const std::size_t idx = t.offset + rng.below(static_cast<std::uint32_t>(t.size()));
      double& p = net.params()[idx];
      const double orig = p;
      p = orig + h;
      const double lp = net.loss(batch, false);
      p = orig - h;
      const double lm = net.loss(batch, false);
      p = orig;
      const double numeric = (lp - lm) / (2 * h);
      const double a = analytic[idx];
      const double denom = std::max(std::abs(a) + std::abs(numeric), 1e-7);
      const double rel = std::abs(a - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = t.name;
      }
    }
  }
  return rep;
}

}  // namespace wuglab::lm
