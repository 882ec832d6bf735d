#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "wuglab/rng.hpp"

namespace wuglab::lm {

enum class SizeTag { Tiny, Small, Medium };
std::string_view to_string(SizeTag s);
SizeTag parse_size(std::string_view s);

struct ModelConfig {
  SizeTag size = SizeTag::Tiny;
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 256;
  int d_ff = 1024;
  int vocab_size = 0;
  int max_seq_len = 32;
  bool weight_tying = true;
  double dropout = 0.1;

  // Architecture for a size tag. Feed-forward widths are chosen so parameter
  // counts land near 3.4M / 10M / 25.6M for a ~770-token vocabulary.
  static ModelConfig for_size(SizeTag size, int vocab_size);
  std::size_t parameter_count() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  int steps = 5000;
  int batch_size = 64;
  double base_lr = 3e-4;
  double min_lr_ratio = 0.01;
  int warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::uint64_t seed = 42;

  static TrainConfig for_size(SizeTag size, std::uint64_t seed);
  // Linear warmup to base_lr, then cosine decay reaching
  // min_lr_ratio * base_lr at step `steps - 1`.
  double lr_at(int step) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  bool decay = false;  // AdamW weight decay applies (matrices only)
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Named views into one flat parameter vector.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg);
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& get(std::string_view name) const;
  std::size_t total() const { return total_; }

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

// Right-padded batch of token sequences. targets[i] < 0 marks a position
// excluded from the loss.
struct Batch {
  int batch = 0;
  int len = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  int n_targets = 0;
};

// Shifts each sequence into (input, next-token target) pairs, padding with
// `pad_id` up to the longest sequence.
Batch make_batch(std::span<const std::vector<int>> seqs, int pad_id);

template <typename T>
class Transformer {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  // Aligned so vectorized reductions over mapped tensors take the same path
  // wherever the heap places the buffer; otherwise results vary in the last bit.
  using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

  explicit Transformer(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  Buffer& params() { return params_; }
  const Buffer& params() const { return params_; }
  const Buffer& grads() const { return grads_; }

  void init(std::uint64_t seed);

  // Mean masked cross-entropy (nats). With `backward`, gradients are written
  // to grads() (overwritten, not accumulated). Dropout is active only when
  // `dropout_rng` is given.
  T loss(const Batch& batch, bool backward, Pcg32* dropout_rng = nullptr);

  // Inference on one sequence: log-softmax rows [len, vocab] and, if
  // requested, residual-stream states for layers 0..n_layers.
  void forward(std::span<const int> ids, Mat* log_probs, std::vector<Mat>* hidden = nullptr) const;

  // Row views of the shared embedding. The output projection reads the same
  // storage (weight tying).
  const T* token_embedding() const;
  const T* output_embedding() const { return token_embedding(); }

 private:
  struct Cache;
  T run(const Batch& batch, Pcg32* dropout_rng, Cache& cache, Mat* log_probs) const;
  void backprop(const Batch& batch, const Cache& cache);

  ModelConfig cfg_;
  ParamLayout layout_;
  Buffer params_;
  Buffer grads_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  int step = 0;
  std::vector<float> params;
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  // Data-order and dropout generator states at `step`.
  std::uint64_t data_state = 0, data_inc = 0;
  std::uint64_t dropout_state = 0, dropout_inc = 0;
  nlohmann::json meta = nlohmann::json::object();

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kTrainLogFile = "train_log.csv";

struct TrainLogRow {
  int step;
  double loss;
  double lr;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
  double initial_loss = 0;
  double final_loss = 0;  // mean over the last 50 steps
};

// Trains from scratch on BOS/EOS-wrapped token sequences. `on_step`, if set,
// is called after each optimizer step.
TrainResult train(const std::vector<std::vector<int>>& seqs, const ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, int pad_id,
                  const std::function<void(const TrainLogRow&)>& on_step = {});

std::string train_log_csv(const std::vector<TrainLogRow>& log);

// Read-only inference wrapper around a checkpoint.
class LanguageModel {
 public:
  explicit LanguageModel(const Checkpoint& ckpt);
  explicit LanguageModel(Transformer<float> net) : net_(std::move(net)) {}

  const ModelConfig& config() const { return net_.config(); }
  const Transformer<float>& net() const { return net_; }

  // Sum of log p(completion_i | prompt, completion_<i) in nats.
  double score_completion(std::span<const int> prompt, std::span<const int> completion) const;
  // Log-softmax over the vocabulary for the token following `prompt`.
  std::vector<double> next_log_probs(std::span<const int> prompt) const;
  // Argmax of next_log_probs; ties go to the lowest id.
  int greedy_next(std::span<const int> prompt) const;
  // hidden[layer] is [len, d_model]; layer 0 is the embedding sum.
  std::vector<Eigen::MatrixXf> hidden_states(std::span<const int> ids) const;

 private:
  Transformer<float> net_;
};

// Returns a copy of `ckpt` in which embedding row dst is replaced by row src
// for every (dst, src) in `mapping`. Optimizer state is left untouched.
Checkpoint swap_embeddings(const Checkpoint& ckpt, std::span<const std::pair<int, int>> mapping);

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  int checked = 0;
};

// Analytic versus central-difference gradients in double precision on a
// miniature model (2 layers, d_model 16 unless `cfg` says otherwise).
GradCheckReport gradient_check(const ModelConfig& cfg, std::uint64_t seed = 1,
                               int samples_per_tensor = 5);
ModelConfig gradcheck_config();

}  // namespace wuglab::lm
