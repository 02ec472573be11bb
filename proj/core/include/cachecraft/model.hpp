#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cachecraft/config_file.hpp"
#include "cachecraft/types.hpp"

namespace cachecraft::model {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_head = 16;
  std::size_t vocab_size = 256;
  double rpe_base = 10000.0;
  std::uint64_t seed = 0;

  std::size_t ffn_dim() const { return 4 * d_model; }

  // Throws ConfigError on odd d_head, d_model != n_heads * d_head, or zero sizes.
  void validate() const;

  // Reads keys under the "model." prefix: layers, heads, d_model, d_head,
  // vocab, rpe_base, seed. d_head defaults to d_model / heads.
  static ModelConfig from_config(const KeyValueConfig& cfg);
};

struct LayerWeights {
  Matrix wq;  // [d_model x d_model]
  Matrix wk;
  Matrix wv;
  Matrix wo;
  Matrix w_up;  // [d_model x ffn]
  RowVector b_up;
  Matrix w_down;  // [ffn x d_model]
  RowVector b_down;
};

// Pre-norm decoder-only transformer with rotary attention and a GELU MLP.
// Weights are drawn once from a seeded stream and never change afterwards,
// so a Model can be shared read-only across threads.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Matrix& embedding() const { return embedding_; }
  const Matrix& lm_head() const { return lm_head_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }

  std::size_t n_attention_layers() const { return layers_.size(); }
  std::size_t n_ffn_blocks() const { return layers_.size(); }

  // Every weight in a fixed traversal order; used for determinism checks.
  std::vector<double> flat_weights() const;

  // Same function with attention heads relabelled: head h of the result is
  // head perm[h] of this model.
  Model with_permuted_heads(std::span<const std::size_t> perm) const;

 private:
  ModelConfig config_;
  Matrix embedding_;  // [vocab x d_model]
  std::vector<LayerWeights> layers_;
  Matrix lm_head_;  // [d_model x vocab]
};

Model build_model(const ModelConfig& config);

// Row-wise RMS normalisation with unit gain.
Matrix rms_norm(const Matrix& x);

// tanh approximation of GELU, elementwise.
Matrix gelu(const Matrix& x);

}  // namespace cachecraft::model
