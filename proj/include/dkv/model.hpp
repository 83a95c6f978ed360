#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dkv/common.hpp"

namespace dkv {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_head = 32;
  int d_ff = 256;
  int vocab_size = 512;
  TokenId mask_token_id = 511;
  int max_positions = 1024;
  double rope_base = 10000.0;
  std::uint64_t weight_seed = 7;
  /// AR-adapted models emit the prediction for position p at row p - 1.
  bool shifted_output = false;

  /// Throws std::invalid_argument naming the first violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Precomputed rotary angles for interleaved pairs (2i, 2i+1).
class RopeTable {
 public:
  RopeTable(int d_head, int max_positions, double base);

  int d_head() const { return d_head_; }
  int max_positions() const { return max_positions_; }

  /// Rotates every head of every row by the angle of that row's position.
  void apply(Matrix& states, std::span<const Position> position_ids) const;

 private:
  int d_head_;
  int max_positions_;
  std::vector<float> cos_;  // [max_positions x d_head/2]
  std::vector<float> sin_;
};

/// Applies rotary embedding to a copy of `states` ([n x n_heads*d_head]).
/// Throws std::out_of_range for positions >= max_positions.
Matrix rope_rotate(const Matrix& states, std::span<const Position> position_ids, int n_heads,
                   double base, int max_positions);

struct LayerWeights {
  RowVector attn_norm;
  Matrix wq, wk, wv, wo;  // [d_model x d_model], applied as x * W
  RowVector ffn_norm;
  Matrix w_up;    // [d_model x d_ff]
  Matrix w_down;  // [d_ff x d_model]
};

/// Immutable parameters of the toy bidirectional transformer.
class ModelWeights {
 public:
  ModelWeights(ModelConfig config, std::vector<LayerWeights> layers, Matrix embedding,
               RowVector final_norm, Matrix head);

  const ModelConfig& config() const { return config_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Matrix& embedding() const { return embedding_; }
  const RowVector& final_norm() const { return final_norm_; }
  const Matrix& head() const { return head_; }
  const RopeTable& rope() const { return rope_; }

  struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    const float* data;
    std::size_t size;
  };
  /// Tensors in a fixed, documented order (used by dumps and hashing).
  std::vector<NamedTensor> tensors() const;

 private:
  ModelConfig config_;
  std::vector<LayerWeights> layers_;
  Matrix embedding_;  // [vocab x d_model]
  RowVector final_norm_;
  Matrix head_;  // [d_model x vocab]
  RopeTable rope_;
};

/// Deterministic in (config, weight_seed). Projection matrices are uniform in
/// [-1/sqrt(fan_in), +1/sqrt(fan_in)]; the embedding table is a lookup with
/// fan-in 1; norm gains start at 1.
ModelWeights init_weights(const ModelConfig& config);

/// Keys and values for a set of rows of one layer. Keys carry rotary
/// rotation at their original positions. Row order is storage order.
struct KVSlab {
  int layer = 0;
  Matrix keys;
  Matrix values;
  PositionList row_positions;

  int rows() const { return static_cast<int>(row_positions.size()); }
  /// Throws std::invalid_argument if shapes or positions are inconsistent.
  void validate(int seq_len, int width) const;
};

using LayerCache = std::vector<KVSlab>;

/// How attention keys are assembled inside a partial forward pass.
enum class KeyAssembly {
  /// [cached rows ; fresh rows] in storage order, no scatter.
  Layout,
  /// Cached and fresh rows scattered into natural position order.
  Natural,
};

struct ForwardResult {
  Matrix logits;             // [|C| x vocab], rows in compute-set order
  std::vector<KVSlab> fresh_kv;  // per layer, row_positions == compute set
  std::vector<KVSlab> full_kv;   // per layer, rows attended over this pass
};

/// Multi-head bidirectional attention. queries [n x H*dh], keys/values
/// [m x H*dh]. Throws std::invalid_argument when m == 0.
Matrix attention(const Matrix& queries, const Matrix& keys, const Matrix& values, int n_heads,
                 float scale);

/// Softmax weights for one head, [n x m]. Exposed for row-sum checks.
Matrix attention_weights(const Matrix& queries, const Matrix& keys, float scale);

ForwardResult forward_full(std::span<const TokenId> tokens, const ModelWeights& weights);

/// Computes hidden states only for `compute_set` rows; attention keys and
/// values are the cached rows plus the fresh rows. `cache` is empty or has
/// one slab per layer, all over the same positions P, with P and the
/// compute set partitioning [0, tokens.size()).
ForwardResult forward_partial(std::span<const TokenId> tokens,
                              std::span<const Position> compute_set, const LayerCache& cache,
                              const ModelWeights& weights,
                              KeyAssembly assembly = KeyAssembly::Layout);

/// Number of kernel threads used for head-parallel attention (>= 1).
void set_kernel_threads(int threads);
int kernel_threads();

/// Flat little-endian float32 dump plus a JSON sidecar of names and shapes.
void save_weights(const ModelWeights& weights, const std::filesystem::path& bin_path);
ModelWeights load_weights(const std::filesystem::path& bin_path);

}  // namespace dkv
