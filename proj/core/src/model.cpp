#include "cachecraft/model.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "cachecraft/errors.hpp"

namespace cachecraft::model {
namespace {

Matrix gaussian(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void append(std::vector<double>& out, const auto& m) {
  out.insert(out.end(), m.data(), m.data() + m.size());
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_head == 0 || vocab_size == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_head % 2 != 0) {
    throw ConfigError("d_head must be even for rotary embeddings, got " + std::to_string(d_head));
  }
  if (d_model != n_heads * d_head) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                      std::to_string(n_heads * d_head) + ")");
  }
  if (!(rpe_base > 0.0)) throw ConfigError("rpe_base must be positive");
}

ModelConfig ModelConfig::from_config(const KeyValueConfig& cfg) {
  ModelConfig m;
  m.n_layers = cfg.get_size("model.layers", m.n_layers);
  m.n_heads = cfg.get_size("model.heads", m.n_heads);
  m.d_model = cfg.get_size("model.d_model", m.d_model);
  m.d_head = cfg.get_size("model.d_head", m.n_heads ? m.d_model / m.n_heads : 0);
  m.vocab_size = cfg.get_size("model.vocab", m.vocab_size);
  m.rpe_base = cfg.get_double("model.rpe_base", m.rpe_base);
  m.seed = static_cast<std::uint64_t>(cfg.get_int("model.seed", 0));
  m.validate();
  return m;
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto d = config_.d_model;
  const auto f = config_.ffn_dim();
  const double dd = static_cast<double>(d);

  embedding_ = gaussian(rng, config_.vocab_size, d, 1.0);
  layers_.reserve(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    LayerWeights w;
    // Query/key scale puts pre-softmax logits at a std of ~2.5 so attention
    // is peaked rather than uniform.
    const double qk_std = std::sqrt(2.5 / dd);
    w.wq = gaussian(rng, d, d, qk_std);
    w.wk = gaussian(rng, d, d, qk_std);
    w.wv = gaussian(rng, d, d, 1.0 / std::sqrt(dd));
    w.wo = gaussian(rng, d, d, 1.0 / std::sqrt(dd));
    w.w_up = gaussian(rng, d, f, 1.0 / std::sqrt(dd));
    w.b_up = gaussian(rng, 1, f, 0.02);
    w.w_down = gaussian(rng, f, d, 1.0 / std::sqrt(static_cast<double>(f)));
    w.b_down = gaussian(rng, 1, d, 0.02);
    layers_.push_back(std::move(w));
  }
  lm_head_ = gaussian(rng, d, config_.vocab_size, 1.0 / std::sqrt(dd));
}

std::vector<double> Model::flat_weights() const {
  std::vector<double> out;
  append(out, embedding_);
  for (const auto& w : layers_) {
    append(out, w.wq);
    append(out, w.wk);
    append(out, w.wv);
    append(out, w.wo);
    append(out, w.w_up);
    append(out, w.b_up);
    append(out, w.w_down);
    append(out, w.b_down);
  }
  append(out, lm_head_);
  return out;
}

Model Model::with_permuted_heads(std::span<const std::size_t> perm) const {
  const auto h = config_.n_heads;
  const auto dh = static_cast<Eigen::Index>(config_.d_head);
  if (perm.size() != h) throw ArgumentError("head permutation has wrong length");
  std::vector<bool> seen(h, false);
  for (auto p : perm) {
    if (p >= h || seen[p]) throw ArgumentError("not a permutation of heads");
    seen[p] = true;
  }
  Model out = *this;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& src = layers_[l];
    auto& dst = out.layers_[l];
    for (std::size_t i = 0; i < h; ++i) {
      const auto to = static_cast<Eigen::Index>(i) * dh;
      const auto from = static_cast<Eigen::Index>(perm[i]) * dh;
      dst.wq.middleCols(to, dh) = src.wq.middleCols(from, dh);
      dst.wk.middleCols(to, dh) = src.wk.middleCols(from, dh);
      dst.wv.middleCols(to, dh) = src.wv.middleCols(from, dh);
      dst.wo.middleRows(to, dh) = src.wo.middleRows(from, dh);
    }
  }
  return out;
}

Model build_model(const ModelConfig& config) { return Model(config); }

Matrix rms_norm(const Matrix& x) {
  constexpr double kEps = 1e-6;
  Matrix out(x.rows(), x.cols());
  const double inv_cols = 1.0 / static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double ms = x.row(r).squaredNorm() * inv_cols;
    out.row(r) = x.row(r) / std::sqrt(ms + kEps);
  }
  return out;
}

Matrix gelu(const Matrix& x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return x.unaryExpr([c](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); });
}

}  // namespace cachecraft::model
