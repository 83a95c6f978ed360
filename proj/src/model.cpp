#include "dkv/model.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "dkv/rng.hpp"

namespace dkv {

namespace {

constexpr float kNormEps = 1e-6f;

std::atomic<int> g_kernel_threads{1};

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void rms_norm(const Matrix& x, const RowVector& gain, Matrix& out) {
  out.resize(x.rows(), x.cols());
  const float inv_cols = 1.0f / static_cast<float>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float ms = x.row(r).squaredNorm() * inv_cols;
    const float inv = 1.0f / std::sqrt(ms + kNormEps);
    out.row(r) = x.row(r).cwiseProduct(gain) * inv;
  }
}

// tanh approximation of GELU
void gelu_inplace(Matrix& x) {
  constexpr float k0 = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float k1 = 0.044715f;
  auto a = x.array();
  a = 0.5f * a * (1.0f + (k0 * (a + k1 * a.cube())).tanh());
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const float m = row.maxCoeff();
    row = (row.array() - m).exp().matrix();
    row /= row.sum();
  }
}

void fill_uniform(Rng& rng, float* data, std::size_t n, double fan_in) {
  const double bound = 1.0 / std::sqrt(fan_in);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  }
}

Matrix uniform_matrix(Rng& rng, int rows, int cols, double fan_in) {
  Matrix m(rows, cols);
  fill_uniform(rng, m.data(), static_cast<std::size_t>(m.size()), fan_in);
  return m;
}

void validate_tokens(std::span<const TokenId> tokens, const ModelConfig& config) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_positions) {
    throw std::out_of_range("sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_positions " + std::to_string(config.max_positions));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      throw std::invalid_argument("invalid token id " + std::to_string(tokens[i]) +
                                  " at position " + std::to_string(i));
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  require(n_layers >= 1, "n_layers must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_head >= 1, "d_head must be >= 1");
  require(d_head % 2 == 0, "d_head must be even for rotary pairing");
  require(d_model == n_heads * d_head, "d_model must equal n_heads * d_head");
  require(d_ff >= 1, "d_ff must be >= 1");
  require(vocab_size >= 2, "vocab_size must be >= 2");
  require(mask_token_id >= 0 && mask_token_id < vocab_size, "mask_token_id must be < vocab_size");
  require(max_positions >= 1, "max_positions must be >= 1");
  require(rope_base > 0.0, "rope_base must be positive");
}

RopeTable::RopeTable(int d_head, int max_positions, double base)
    : d_head_(d_head), max_positions_(max_positions) {
  const int half = d_head / 2;
  cos_.resize(static_cast<std::size_t>(max_positions) * half);
  sin_.resize(cos_.size());
  for (int p = 0; p < max_positions; ++p) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * i / d_head);
      const double angle = p * freq;
      cos_[static_cast<std::size_t>(p) * half + i] = static_cast<float>(std::cos(angle));
      sin_[static_cast<std::size_t>(p) * half + i] = static_cast<float>(std::sin(angle));
    }
  }
}

void RopeTable::apply(Matrix& states, std::span<const Position> position_ids) const {
  if (static_cast<Eigen::Index>(position_ids.size()) != states.rows()) {
    throw std::invalid_argument("rope: position_ids length does not match row count");
  }
  if (states.cols() % d_head_ != 0) {
    throw std::invalid_argument("rope: width is not a multiple of d_head");
  }
  const int half = d_head_ / 2;
  const Eigen::Index heads = states.cols() / d_head_;
  for (Eigen::Index r = 0; r < states.rows(); ++r) {
    const Position pos = position_ids[static_cast<std::size_t>(r)];
    if (pos < 0 || pos >= max_positions_) {
      throw std::out_of_range("rope: position " + std::to_string(pos) + " out of range");
    }
    const float* c = cos_.data() + static_cast<std::size_t>(pos) * half;
    const float* s = sin_.data() + static_cast<std::size_t>(pos) * half;
    float* row = states.row(r).data();
    for (Eigen::Index h = 0; h < heads; ++h) {
      float* x = row + h * d_head_;
      for (int i = 0; i < half; ++i) {
        const float a = x[2 * i];
        const float b = x[2 * i + 1];
        x[2 * i] = a * c[i] - b * s[i];
        x[2 * i + 1] = a * s[i] + b * c[i];
      }
    }
  }
}

Matrix rope_rotate(const Matrix& states, std::span<const Position> position_ids, int n_heads,
                   double base, int max_positions) {
  if (n_heads < 1 || states.cols() % n_heads != 0) {
    throw std::invalid_argument("rope: width is not divisible by n_heads");
  }
  const int d_head = static_cast<int>(states.cols() / n_heads);
  if (d_head % 2 != 0) throw std::invalid_argument("rope: d_head must be even");
  RopeTable table(d_head, max_positions, base);
  Matrix out = states;
  table.apply(out, position_ids);
  return out;
}

ModelWeights::ModelWeights(ModelConfig config, std::vector<LayerWeights> layers, Matrix embedding,
                           RowVector final_norm, Matrix head)
    : config_((config.validate(), std::move(config))),
      layers_(std::move(layers)),
      embedding_(std::move(embedding)),
      final_norm_(std::move(final_norm)),
      head_(std::move(head)),
      rope_(config_.d_head, config_.max_positions, config_.rope_base) {
  const int d = config_.d_model;
  require(static_cast<int>(layers_.size()) == config_.n_layers, "layer count mismatch");
  require(embedding_.rows() == config_.vocab_size && embedding_.cols() == d,
          "embedding shape mismatch");
  require(head_.rows() == d && head_.cols() == config_.vocab_size, "head shape mismatch");
  require(final_norm_.size() == d, "final_norm shape mismatch");
  for (const auto& l : layers_) {
    require(l.wq.rows() == d && l.wq.cols() == d && l.wk.rows() == d && l.wk.cols() == d &&
                l.wv.rows() == d && l.wv.cols() == d && l.wo.rows() == d && l.wo.cols() == d,
            "attention projection shape mismatch");
    require(l.w_up.rows() == d && l.w_up.cols() == config_.d_ff, "w_up shape mismatch");
    require(l.w_down.rows() == config_.d_ff && l.w_down.cols() == d, "w_down shape mismatch");
    require(l.attn_norm.size() == d && l.ffn_norm.size() == d, "norm shape mismatch");
  }
}

std::vector<ModelWeights::NamedTensor> ModelWeights::tensors() const {
  std::vector<NamedTensor> out;
  auto add = [&](std::string name, const auto& m) {
    out.push_back({std::move(name),
                   {static_cast<int>(m.rows()), static_cast<int>(m.cols())},
                   m.data(),
                   static_cast<std::size_t>(m.size())});
  };
  add("embedding", embedding_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& w = layers_[l];
    add(p + "attn_norm", w.attn_norm);
    add(p + "wq", w.wq);
    add(p + "wk", w.wk);
    add(p + "wv", w.wv);
    add(p + "wo", w.wo);
    add(p + "ffn_norm", w.ffn_norm);
    add(p + "w_up", w.w_up);
    add(p + "w_down", w.w_down);
  }
  add("final_norm", final_norm_);
  add("head", head_);
  return out;
}

ModelWeights init_weights(const ModelConfig& config) {
  config.validate();
  Rng rng(Rng::derive(config.weight_seed, 0));
  const int d = config.d_model;

  Matrix embedding = uniform_matrix(rng, config.vocab_size, d, 1.0);
  std::vector<LayerWeights> layers;
  layers.reserve(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm = RowVector::Ones(d);
    w.wq = uniform_matrix(rng, d, d, d);
    w.wk = uniform_matrix(rng, d, d, d);
    w.wv = uniform_matrix(rng, d, d, d);
    w.wo = uniform_matrix(rng, d, d, d);
    w.ffn_norm = RowVector::Ones(d);
    w.w_up = uniform_matrix(rng, d, config.d_ff, d);
    w.w_down = uniform_matrix(rng, config.d_ff, d, config.d_ff);
    layers.push_back(std::move(w));
  }
  RowVector final_norm = RowVector::Ones(d);
  Matrix head = uniform_matrix(rng, d, config.vocab_size, d);
  return ModelWeights(config, std::move(layers), std::move(embedding), std::move(final_norm),
                      std::move(head));
}

void KVSlab::validate(int seq_len, int width) const {
  const auto n = static_cast<Eigen::Index>(row_positions.size());
  if (keys.rows() != n || values.rows() != n) {
    throw std::invalid_argument("kv slab: row count does not match row_positions");
  }
  if (n > 0 && (keys.cols() != width || values.cols() != width)) {
    throw std::invalid_argument("kv slab: width mismatch");
  }
  std::vector<bool> seen(static_cast<std::size_t>(seq_len), false);
  for (Position p : row_positions) {
    if (p < 0 || p >= seq_len) {
      throw std::invalid_argument("kv slab: position " + std::to_string(p) + " out of range");
    }
    if (seen[static_cast<std::size_t>(p)]) {
      throw std::invalid_argument("kv slab: duplicate position " + std::to_string(p));
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
}

void set_kernel_threads(int threads) {
  if (threads < 1) throw std::invalid_argument("kernel threads must be >= 1");
  g_kernel_threads.store(threads);
}

int kernel_threads() { return g_kernel_threads.load(); }

Matrix attention_weights(const Matrix& queries, const Matrix& keys, float scale) {
  if (keys.rows() == 0) throw std::invalid_argument("attention: empty key set");
  if (queries.cols() != keys.cols()) throw std::invalid_argument("attention: width mismatch");
  Matrix s(queries.rows(), keys.rows());
  s.noalias() = queries * keys.transpose();
  s *= scale;
  softmax_rows(s);
  return s;
}

Matrix attention(const Matrix& queries, const Matrix& keys, const Matrix& values, int n_heads,
                 float scale) {
  if (keys.rows() == 0) throw std::invalid_argument("attention: empty key set");
  if (keys.rows() != values.rows()) {
    throw std::invalid_argument("attention: keys and values row counts differ");
  }
  if (queries.cols() != keys.cols() || keys.cols() != values.cols()) {
    throw std::invalid_argument("attention: width mismatch");
  }
  if (n_heads < 1 || queries.cols() % n_heads != 0) {
    throw std::invalid_argument("attention: width not divisible by n_heads");
  }
  const Eigen::Index dh = queries.cols() / n_heads;
  Matrix out(queries.rows(), queries.cols());

  auto run_head = [&](int h) {
    Matrix s(queries.rows(), keys.rows());
    s.noalias() = queries.middleCols(h * dh, dh) * keys.middleCols(h * dh, dh).transpose();
    s *= scale;
    softmax_rows(s);
    out.middleCols(h * dh, dh).noalias() = s * values.middleCols(h * dh, dh);
  };

  const int threads = std::min(kernel_threads(), n_heads);
  if (threads <= 1) {
    for (int h = 0; h < n_heads; ++h) run_head(h);
  } else {
    // Heads write disjoint column blocks, so results do not depend on threads.
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (int h = t; h < n_heads; h += threads) run_head(h);
      });
    }
  }
  return out;
}

ForwardResult forward_full(std::span<const TokenId> tokens, const ModelWeights& weights) {
  const PositionList all = positions::range(0, static_cast<Position>(tokens.size()));
  return forward_partial(tokens, all, LayerCache{}, weights, KeyAssembly::Layout);
}

ForwardResult forward_partial(std::span<const TokenId> tokens,
                              std::span<const Position> compute_set, const LayerCache& cache,
                              const ModelWeights& weights, KeyAssembly assembly) {
  const ModelConfig& cfg = weights.config();
  validate_tokens(tokens, cfg);
  const int seq_len = static_cast<int>(tokens.size());
  const int d = cfg.d_model;
  const auto n_fresh = static_cast<Eigen::Index>(compute_set.size());
  if (n_fresh == 0) throw std::invalid_argument("forward_partial: empty compute set");

  std::vector<bool> covered(static_cast<std::size_t>(seq_len), false);
  for (Position p : compute_set) {
    if (p < 0 || p >= seq_len) {
      throw std::invalid_argument("forward_partial: compute position " + std::to_string(p) +
                                  " out of range");
    }
    if (covered[static_cast<std::size_t>(p)]) {
      throw std::invalid_argument("forward_partial: duplicate compute position " +
                                  std::to_string(p));
    }
    covered[static_cast<std::size_t>(p)] = true;
  }

  const bool has_cache = !cache.empty();
  if (has_cache) {
    if (static_cast<int>(cache.size()) != cfg.n_layers) {
      throw std::invalid_argument("forward_partial: cache layer count mismatch");
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
      const KVSlab& slab = cache[static_cast<std::size_t>(l)];
      slab.validate(seq_len, d);
      if (slab.layer != l) throw std::invalid_argument("forward_partial: cache layer index mismatch");
      if (slab.row_positions != cache.front().row_positions) {
        throw std::invalid_argument("forward_partial: cache row positions differ across layers");
      }
    }
    for (Position p : cache.front().row_positions) {
      if (covered[static_cast<std::size_t>(p)]) {
        throw std::invalid_argument("forward_partial: position " + std::to_string(p) +
                                    " is both cached and computed");
      }
      covered[static_cast<std::size_t>(p)] = true;
    }
  }
  if (std::find(covered.begin(), covered.end(), false) != covered.end()) {
    throw std::invalid_argument("forward_partial: cached and compute sets do not cover the sequence");
  }

  const PositionList& cached_positions =
      has_cache ? cache.front().row_positions : PositionList{};
  const auto n_cached = static_cast<Eigen::Index>(cached_positions.size());

  PositionList attended_positions;
  if (assembly == KeyAssembly::Layout) {
    attended_positions.reserve(static_cast<std::size_t>(seq_len));
    attended_positions.insert(attended_positions.end(), cached_positions.begin(),
                              cached_positions.end());
    attended_positions.insert(attended_positions.end(), compute_set.begin(), compute_set.end());
  } else {
    attended_positions = positions::range(0, seq_len);
  }

  Matrix h(n_fresh, d);
  for (Eigen::Index i = 0; i < n_fresh; ++i) {
    h.row(i) = weights.embedding().row(tokens[compute_set[static_cast<std::size_t>(i)]]);
  }

  ForwardResult result;
  result.fresh_kv.reserve(static_cast<std::size_t>(cfg.n_layers));
  result.full_kv.reserve(static_cast<std::size_t>(cfg.n_layers));
  const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.d_head));

  Matrix x, q, k, v, attn, up;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& w = weights.layers()[static_cast<std::size_t>(l)];
    rms_norm(h, w.attn_norm, x);
    q.noalias() = x * w.wq;
    k.noalias() = x * w.wk;
    v.noalias() = x * w.wv;
    weights.rope().apply(q, compute_set);
    weights.rope().apply(k, compute_set);

    KVSlab full{l, Matrix(seq_len, d), Matrix(seq_len, d), attended_positions};
    if (assembly == KeyAssembly::Layout) {
      if (has_cache) {
        const KVSlab& c = cache[static_cast<std::size_t>(l)];
        full.keys.topRows(n_cached) = c.keys;
        full.values.topRows(n_cached) = c.values;
      }
      full.keys.bottomRows(n_fresh) = k;
      full.values.bottomRows(n_fresh) = v;
    } else {
      if (has_cache) {
        const KVSlab& c = cache[static_cast<std::size_t>(l)];
        for (Eigen::Index i = 0; i < n_cached; ++i) {
          const Position p = c.row_positions[static_cast<std::size_t>(i)];
          full.keys.row(p) = c.keys.row(i);
          full.values.row(p) = c.values.row(i);
        }
      }
      for (Eigen::Index i = 0; i < n_fresh; ++i) {
        const Position p = compute_set[static_cast<std::size_t>(i)];
        full.keys.row(p) = k.row(i);
        full.values.row(p) = v.row(i);
      }
    }

    attn = attention(q, full.keys, full.values, cfg.n_heads, scale);
    h.noalias() += attn * w.wo;

    rms_norm(h, w.ffn_norm, x);
    up.noalias() = x * w.w_up;
    gelu_inplace(up);
    h.noalias() += up * w.w_down;

    result.fresh_kv.push_back(
        KVSlab{l, k, v, PositionList(compute_set.begin(), compute_set.end())});
    result.full_kv.push_back(std::move(full));
  }

  rms_norm(h, weights.final_norm(), x);
  result.logits.noalias() = x * weights.head();
  return result;
}

namespace {

void write_le_floats(std::ofstream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      char b[4] = {static_cast<char>(bits), static_cast<char>(bits >> 8),
                   static_cast<char>(bits >> 16), static_cast<char>(bits >> 24)};
      out.write(b, 4);
    }
  }
}

void read_le_floats(std::ifstream& in, float* data, std::size_t n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw std::runtime_error("weights: truncated binary");
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) |
             (bits >> 24);
      data[i] = std::bit_cast<float>(bits);
    }
  }
}

std::filesystem::path sidecar_path(const std::filesystem::path& bin_path) {
  auto p = bin_path;
  p += ".json";
  return p;
}

}  // namespace

void save_weights(const ModelWeights& weights, const std::filesystem::path& bin_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw std::runtime_error("weights: cannot open " + bin_path.string());
  const ModelConfig& c = weights.config();
  nlohmann::json meta;
  meta["format"] = "f32-le";
  meta["config"] = {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                    {"d_model", c.d_model},         {"d_head", c.d_head},
                    {"d_ff", c.d_ff},               {"vocab_size", c.vocab_size},
                    {"mask_token_id", c.mask_token_id}, {"max_positions", c.max_positions},
                    {"rope_base", c.rope_base},     {"weight_seed", c.weight_seed},
                    {"shifted_output", c.shifted_output}};
  std::size_t offset = 0;
  for (const auto& t : weights.tensors()) {
    write_le_floats(out, t.data, t.size);
    meta["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.size;
  }
  if (!out) throw std::runtime_error("weights: write failed for " + bin_path.string());
  std::ofstream side(sidecar_path(bin_path));
  side << meta.dump(2) << '\n';
}

ModelWeights load_weights(const std::filesystem::path& bin_path) {
  std::ifstream side(sidecar_path(bin_path));
  if (!side) throw std::runtime_error("weights: missing sidecar for " + bin_path.string());
  const nlohmann::json meta = nlohmann::json::parse(side);
  if (meta.at("format") != "f32-le") throw std::runtime_error("weights: unknown format");
  const auto& j = meta.at("config");
  ModelConfig c;
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.d_model = j.at("d_model");
  c.d_head = j.at("d_head");
  c.d_ff = j.at("d_ff");
  c.vocab_size = j.at("vocab_size");
  c.mask_token_id = j.at("mask_token_id");
  c.max_positions = j.at("max_positions");
  c.rope_base = j.at("rope_base");
  c.weight_seed = j.at("weight_seed");
  c.shifted_output = j.at("shifted_output");
  c.validate();

  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw std::runtime_error("weights: cannot open " + bin_path.string());
  const auto& listed = meta.at("tensors");
  std::size_t next = 0;
  auto read = [&](const std::string& name, int rows, int cols) {
    if (next >= listed.size()) throw std::runtime_error("weights: missing tensor " + name);
    const auto& entry = listed[next++];
    if (entry.at("name") != name ||
        entry.at("shape").get<std::vector<int>>() != std::vector<int>{rows, cols}) {
      throw std::runtime_error("weights: tensor " + name + " does not match sidecar");
    }
    Matrix m(rows, cols);
    read_le_floats(in, m.data(), static_cast<std::size_t>(m.size()));
    return m;
  };
  auto read_row = [&](const std::string& name, int cols) -> RowVector {
    return read(name, 1, cols).row(0);
  };

  const int d = c.d_model;
  Matrix embedding = read("embedding", c.vocab_size, d);
  std::vector<LayerWeights> layers(static_cast<std::size_t>(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& w = layers[static_cast<std::size_t>(l)];
    w.attn_norm = read_row(p + "attn_norm", d);
    w.wq = read(p + "wq", d, d);
    w.wk = read(p + "wk", d, d);
    w.wv = read(p + "wv", d, d);
    w.wo = read(p + "wo", d, d);
    w.ffn_norm = read_row(p + "ffn_norm", d);
    w.w_up = read(p + "w_up", d, c.d_ff);
    w.w_down = read(p + "w_down", c.d_ff, d);
  }
  RowVector final_norm = read_row("final_norm", d);
  Matrix head = read("head", d, c.vocab_size);
  if (next != listed.size()) throw std::runtime_error("weights: unexpected extra tensors");
  return ModelWeights(c, std::move(layers), std::move(embedding), std::move(final_norm),
                      std::move(head));
}

}  // namespace dkv
