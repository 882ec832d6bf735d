#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "wuglab/error.hpp"
#include "wuglab/lm.hpp"

namespace wuglab::lm {

namespace {

template <typename T>
using RMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
using Buf = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
Eigen::Map<RMat<T>> mat(Buf<T>& v, const TensorInfo& t) {
  return Eigen::Map<RMat<T>>(v.data() + t.offset, t.rows, t.cols);
}
template <typename T>
Eigen::Map<const RMat<T>> mat(const Buf<T>& v, const TensorInfo& t) {
  return Eigen::Map<const RMat<T>>(v.data() + t.offset, t.rows, t.cols);
}
template <typename T>
Eigen::Map<RowVec<T>> row(Buf<T>& v, const TensorInfo& t) {
  return Eigen::Map<RowVec<T>>(v.data() + t.offset, t.size());
}
template <typename T>
Eigen::Map<const RowVec<T>> row(const Buf<T>& v, const TensorInfo& t) {
  return Eigen::Map<const RowVec<T>>(v.data() + t.offset, t.size());
}

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Layer norm over rows; keeps the normalized input and 1/std for backprop.
template <typename T>
void layer_norm(const RMat<T>& x, const Eigen::Map<const RowVec<T>>& g,
                const Eigen::Map<const RowVec<T>>& b, RMat<T>& xhat, std::vector<T>& rstd,
                RMat<T>& out) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  out.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    T mean = x.row(i).mean();
    T var = (x.row(i).array() - mean).square().mean();
    T r = T(1) / std::sqrt(var + T(kLnEps));
    rstd[static_cast<std::size_t>(i)] = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    out.row(i) = xhat.row(i).cwiseProduct(g) + b;
  }
}

template <typename T>
void layer_norm_backward(const RMat<T>& dy, const RMat<T>& xhat, const std::vector<T>& rstd,
                         const Eigen::Map<const RowVec<T>>& g, Eigen::Map<RowVec<T>> dg,
                         Eigen::Map<RowVec<T>> db, RMat<T>& dx_accum) {
  const Eigen::Index n = dy.rows();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    dg += dy.row(i).cwiseProduct(xhat.row(i));
    db += dy.row(i);
    RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
    T m1 = dxhat.sum() * inv_d;
    T m2 = dxhat.dot(xhat.row(i)) * inv_d;
    dx_accum.row(i) +=
        ((dxhat.array() - m1 - xhat.row(i).array() * m2) * rstd[static_cast<std::size_t>(i)])
            .matrix();
  }
}

// tanh-approximated GELU. Keeps tanh(u) for the backward pass.
template <typename T>
void gelu(const RMat<T>& h, RMat<T>& t, RMat<T>& g) {
  t = (T(kGeluC) * (h.array() + T(kGeluA) * h.array().cube())).tanh();
  g = (T(0.5) * h.array() * (T(1) + t.array())).matrix();
}

template <typename T>
void gelu_backward(const RMat<T>& h, const RMat<T>& t, RMat<T>& d) {
  d.array() *= T(0.5) * (T(1) + t.array()) +
               T(0.5) * h.array() * (T(1) - t.array().square()) * T(kGeluC) *
                   (T(1) + T(3 * kGeluA) * h.array().square());
}

// Inverted dropout mask (entries 0 or 1/(1-p)).
template <typename T>
void dropout_mask(RMat<T>& mask, Eigen::Index rows, Eigen::Index cols, double p, Pcg32* rng) {
  if (!rng || p <= 0) return;
  mask.resize(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  // 24-bit comparisons keep mask generation cheap and platform independent.
  const auto threshold = static_cast<std::uint32_t>(p * 16777216.0);
  T* m = mask.data();
  for (Eigen::Index i = 0; i < rows * cols; ++i) m[i] = (rng->next_u32() >> 8) < threshold ? T(0) : keep;
}

}  // namespace

template <typename T>
struct Transformer<T>::Cache {
  struct Layer {
    RMat<T> x_in, xhat1, a, qkv, y, x_mid, xhat2, m, h, tanh_h, g, drop_attn, drop_mlp;
    std::vector<T> rstd1, rstd2;
    std::vector<RMat<T>> probs;  // [batch * heads] of [len, len]
  };
  bool dropout = false;
  RMat<T> drop_emb;
  std::vector<Layer> layers;
  RMat<T> x_final, xhatf, xf, logits;
  std::vector<T> rstdf;
};

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg)
    : cfg_(cfg), layout_(cfg), params_(layout_.total(), T(0)), grads_(layout_.total(), T(0)) {
  cfg_.validate();
}

template <typename T>
const T* Transformer<T>::token_embedding() const {
  return params_.data() + layout_.get("wte").offset;
}

template <typename T>
void Transformer<T>::init(std::uint64_t seed) {
  Pcg32 rng(seed, 0x696e6974);
  const double resid_std = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
  for (const auto& t : layout_.tensors()) {
    T* p = params_.data() + t.offset;
    const bool is_gain = t.name.ends_with("_g");
    const bool is_bias = t.name.ends_with("_b");
    const bool is_resid = t.name.ends_with("proj_w") || t.name.ends_with("out_w");
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (is_gain) p[i] = T(1);
      else if (is_bias) p[i] = T(0);
      else p[i] = static_cast<T>(rng.normal() * (is_resid ? resid_std : 0.02));
    }
  }
  std::fill(grads_.begin(), grads_.end(), T(0));
}

template <typename T>
T Transformer<T>::run(const Batch& batch, Pcg32* rng, Cache& c, Mat* log_probs) const {
  const int B = batch.batch, L = batch.len, D = cfg_.d_model, H = cfg_.n_heads, V = cfg_.vocab_size;
  const int hd = D / H;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * L;
  if (L > cfg_.max_seq_len)
    throw InvalidArgument("sequence length " + std::to_string(L) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
  const double p_drop = rng ? cfg_.dropout : 0.0;
  c.dropout = p_drop > 0;

  const auto& P = params_;
  auto wte = mat(P, layout_.get("wte"));
  auto wpe = mat(P, layout_.get("wpe"));

  RMat<T> x(N, D);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < L; ++t) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * L + t;
      const int id = batch.inputs[static_cast<std::size_t>(r)];
      if (id < 0 || id >= V) throw InvalidArgument("token id out of range: " + std::to_string(id));
      x.row(r) = wte.row(id) + wpe.row(t);
    }
  dropout_mask(c.drop_emb, N, D, p_drop, rng);
  if (p_drop > 0) x.array() *= c.drop_emb.array();

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  c.layers.resize(static_cast<std::size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    auto& C = c.layers[static_cast<std::size_t>(l)];
    const std::string pre = "h" + std::to_string(l) + ".";
    C.x_in = x;
    layer_norm<T>(x, row(P, layout_.get(pre + "ln1_g")), row(P, layout_.get(pre + "ln1_b")),
                  C.xhat1, C.rstd1, C.a);
    C.qkv.noalias() = C.a * mat(P, layout_.get(pre + "attn_w"));
    C.qkv.rowwise() += row(P, layout_.get(pre + "attn_b"));

    C.y.setZero(N, D);
    C.probs.resize(static_cast<std::size_t>(B) * H);
    for (int b = 0; b < B; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
      for (int h = 0; h < H; ++h) {
        auto q = C.qkv.block(r0, h * hd, L, hd);
        auto k = C.qkv.block(r0, D + h * hd, L, hd);
        auto v = C.qkv.block(r0, 2 * D + h * hd, L, hd);
        auto& Pm = C.probs[static_cast<std::size_t>(b) * H + h];
        Pm.noalias() = q * k.transpose();
        for (int i = 0; i < L; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j <= i; ++j) mx = std::max(mx, Pm(i, j) * scale);
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            T e = std::exp(Pm(i, j) * scale - mx);
            Pm(i, j) = e;
            sum += e;
          }
          for (int j = 0; j <= i; ++j) Pm(i, j) /= sum;
          for (int j = i + 1; j < L; ++j) Pm(i, j) = T(0);
        }
        C.y.block(r0, h * hd, L, hd).noalias() = Pm * v;
      }
    }
    RMat<T> z = C.y * mat(P, layout_.get(pre + "proj_w"));
    z.rowwise() += row(P, layout_.get(pre + "proj_b"));
    dropout_mask(C.drop_attn, N, D, p_drop, rng);
    if (p_drop > 0) z.array() *= C.drop_attn.array();
    x += z;

    C.x_mid = x;
    layer_norm<T>(x, row(P, layout_.get(pre + "ln2_g")), row(P, layout_.get(pre + "ln2_b")),
                  C.xhat2, C.rstd2, C.m);
    C.h.noalias() = C.m * mat(P, layout_.get(pre + "fc_w"));
    C.h.rowwise() += row(P, layout_.get(pre + "fc_b"));
    gelu<T>(C.h, C.tanh_h, C.g);
    RMat<T> o = C.g * mat(P, layout_.get(pre + "out_w"));
    o.rowwise() += row(P, layout_.get(pre + "out_b"));
    dropout_mask(C.drop_mlp, N, D, p_drop, rng);
    if (p_drop > 0) o.array() *= C.drop_mlp.array();
    x += o;
  }
  c.x_final = x;
  layer_norm<T>(x, row(P, layout_.get("lnf_g")), row(P, layout_.get("lnf_b")), c.xhatf, c.rstdf,
                c.xf);
  c.logits.noalias() = c.xf * wte.transpose();

  // In-place log-softmax.
  double total = 0;
  for (Eigen::Index r = 0; r < N; ++r) {
    auto lr = c.logits.row(r);
    T mx = lr.maxCoeff();
    T lse = mx + std::log((lr.array() - mx).exp().sum());
    lr.array() -= lse;
    const int tgt = batch.targets.empty() ? -1 : batch.targets[static_cast<std::size_t>(r)];
    if (tgt >= 0) total -= static_cast<double>(lr(tgt));
  }
  if (log_probs) *log_probs = c.logits;
  return batch.n_targets > 0 ? static_cast<T>(total / batch.n_targets) : T(0);
}

template <typename T>
void Transformer<T>::backprop(const Batch& batch, const Cache& c) {
  const int B = batch.batch, L = batch.len, D = cfg_.d_model, H = cfg_.n_heads;
  const int hd = D / H;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * L;
  const auto& P = params_;
  auto& G = grads_;
  std::fill(G.begin(), G.end(), T(0));
  const bool dropped = c.dropout;

  // d loss / d logits = softmax - onehot, averaged over counted targets.
  RMat<T> dlogits = c.logits.array().exp().matrix();
  const T inv = batch.n_targets > 0 ? T(1) / static_cast<T>(batch.n_targets) : T(0);
  for (Eigen::Index r = 0; r < N; ++r) {
    const int tgt = batch.targets[static_cast<std::size_t>(r)];
    if (tgt < 0) {
      dlogits.row(r).setZero();
      continue;
    }
    dlogits(r, tgt) -= T(1);
    dlogits.row(r) *= inv;
  }
  auto dwte = mat(G, layout_.get("wte"));
  auto wte = mat(P, layout_.get("wte"));
  dwte.noalias() += dlogits.transpose() * c.xf;
  RMat<T> dxf = dlogits * wte;

  RMat<T> dx = RMat<T>::Zero(N, D);
  layer_norm_backward<T>(dxf, c.xhatf, c.rstdf, row(P, layout_.get("lnf_g")),
                         row(G, layout_.get("lnf_g")), row(G, layout_.get("lnf_b")), dx);

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const auto& C = c.layers[static_cast<std::size_t>(l)];
    const std::string pre = "h" + std::to_string(l) + ".";

    // Feed-forward branch.
    RMat<T> d_o = dropped ? RMat<T>(dx.cwiseProduct(C.drop_mlp)) : dx;
    mat(G, layout_.get(pre + "out_w")).noalias() += C.g.transpose() * d_o;
    row(G, layout_.get(pre + "out_b")) += d_o.colwise().sum();
    RMat<T> dh = d_o * mat(P, layout_.get(pre + "out_w")).transpose();
    gelu_backward<T>(C.h, C.tanh_h, dh);
    mat(G, layout_.get(pre + "fc_w")).noalias() += C.m.transpose() * dh;
    row(G, layout_.get(pre + "fc_b")) += dh.colwise().sum();
    RMat<T> dm = dh * mat(P, layout_.get(pre + "fc_w")).transpose();
    layer_norm_backward<T>(dm, C.xhat2, C.rstd2, row(P, layout_.get(pre + "ln2_g")),
                           row(G, layout_.get(pre + "ln2_g")), row(G, layout_.get(pre + "ln2_b")),
                           dx);

    // Attention branch.
    RMat<T> dz = dropped ? RMat<T>(dx.cwiseProduct(C.drop_attn)) : dx;
    mat(G, layout_.get(pre + "proj_w")).noalias() += C.y.transpose() * dz;
    row(G, layout_.get(pre + "proj_b")) += dz.colwise().sum();
    RMat<T> dy = dz * mat(P, layout_.get(pre + "proj_w")).transpose();
    RMat<T> dqkv = RMat<T>::Zero(N, 3 * D);
    for (int b = 0; b < B; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
      for (int h = 0; h < H; ++h) {
        const auto& Pm = C.probs[static_cast<std::size_t>(b) * H + h];
        auto q = C.qkv.block(r0, h * hd, L, hd);
        auto k = C.qkv.block(r0, D + h * hd, L, hd);
        auto v = C.qkv.block(r0, 2 * D + h * hd, L, hd);
        auto dyh = dy.block(r0, h * hd, L, hd);
        dqkv.block(r0, 2 * D + h * hd, L, hd).noalias() = Pm.transpose() * dyh;
        RMat<T> dP = dyh * v.transpose();
        RMat<T> dS(L, L);
        for (int i = 0; i < L; ++i) {
          T dot = 0;
          for (int j = 0; j <= i; ++j) dot += dP(i, j) * Pm(i, j);
          for (int j = 0; j < L; ++j) dS(i, j) = j <= i ? Pm(i, j) * (dP(i, j) - dot) * scale : T(0);
        }
        dqkv.block(r0, h * hd, L, hd).noalias() = dS * k;
        dqkv.block(r0, D + h * hd, L, hd).noalias() = dS.transpose() * q;
      }
    }
    mat(G, layout_.get(pre + "attn_w")).noalias() += C.a.transpose() * dqkv;
    row(G, layout_.get(pre + "attn_b")) += dqkv.colwise().sum();
    RMat<T> da = dqkv * mat(P, layout_.get(pre + "attn_w")).transpose();
    layer_norm_backward<T>(da, C.xhat1, C.rstd1, row(P, layout_.get(pre + "ln1_g")),
                           row(G, layout_.get(pre + "ln1_g")), row(G, layout_.get(pre + "ln1_b")),
                           dx);
  }

  if (dropped) dx.array() *= c.drop_emb.array();
  auto dwpe = mat(G, layout_.get("wpe"));
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < L; ++t) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * L + t;
      dwte.row(batch.inputs[static_cast<std::size_t>(r)]) += dx.row(r);
      dwpe.row(t) += dx.row(r);
    }
}

template <typename T>
T Transformer<T>::loss(const Batch& batch, bool backward, Pcg32* dropout_rng) {
  Cache cache;
  T value = run(batch, dropout_rng, cache, nullptr);
  if (backward) backprop(batch, cache);
  return value;
}

template <typename T>
void Transformer<T>::forward(std::span<const int> ids, Mat* log_probs,
                             std::vector<Mat>* hidden) const {
  if (ids.empty()) throw InvalidArgument("forward needs at least one token");
  Batch batch;
  batch.batch = 1;
  batch.len = static_cast<int>(ids.size());
  batch.inputs.assign(ids.begin(), ids.end());
  Cache cache;
  run(batch, nullptr, cache, log_probs);
  if (hidden) {
    hidden->clear();
    for (const auto& layer : cache.layers) hidden->push_back(layer.x_in);
    hidden->push_back(cache.x_final);
  }
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace wuglab::lm
