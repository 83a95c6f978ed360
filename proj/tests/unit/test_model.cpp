#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "dkv/model.hpp"
#include "dkv/rng.hpp"

using namespace dkv;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_model = 16;
  c.d_ff = 24;
  c.vocab_size = 40;
  c.mask_token_id = 39;
  c.max_positions = 64;
  c.weight_seed = 3;
  return c;
}

std::vector<TokenId> tokens_for(int n, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> t;
  for (int i = 0; i < n; ++i) t.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(c.vocab_size))));
  return t;
}

using Mat = std::vector<std::vector<double>>;

Mat matmul(const Mat& a, const Matrix& w) {
  Mat out(a.size(), std::vector<double>(static_cast<std::size_t>(w.cols()), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Eigen::Index k = 0; k < w.rows(); ++k)
      for (Eigen::Index j = 0; j < w.cols(); ++j) out[i][j] += a[i][k] * w(k, j);
  return out;
}

Mat norm(const Mat& h, const RowVector& gain) {
  Mat out = h;
  for (auto& row : out) {
    double ms = 0;
    for (double v : row) ms += v * v;
    ms /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * gain(j) / std::sqrt(ms + 1e-6);
  }
  return out;
}

void rope(Mat& x, const ModelConfig& c) {
  for (std::size_t p = 0; p < x.size(); ++p)
    for (int h = 0; h < c.n_heads; ++h)
      for (int i = 0; i < c.d_head / 2; ++i) {
        const double angle = p * std::pow(c.rope_base, -2.0 * i / c.d_head);
        double& a = x[p][h * c.d_head + 2 * i];
        double& b = x[p][h * c.d_head + 2 * i + 1];
        const double na = a * std::cos(angle) - b * std::sin(angle);
        const double nb = a * std::sin(angle) + b * std::cos(angle);
        a = na;
        b = nb;
      }
}

/// Scalar double-precision forward pass written from the model definition.
Mat reference_logits(const std::vector<TokenId>& tokens, const ModelWeights& w) {
  const ModelConfig& c = w.config();
  const std::size_t n = tokens.size();
  Mat h(n, std::vector<double>(static_cast<std::size_t>(c.d_model)));
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < c.d_model; ++j) h[i][j] = w.embedding()(tokens[i], j);
  for (const LayerWeights& L : w.layers()) {
    Mat x = norm(h, L.attn_norm);
    Mat q = matmul(x, L.wq), k = matmul(x, L.wk), v = matmul(x, L.wv);
    rope(q, c);
    rope(k, c);
    Mat attn(n, std::vector<double>(static_cast<std::size_t>(c.d_model), 0.0));
    for (int hd = 0; hd < c.n_heads; ++hd) {
      const int off = hd * c.d_head;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double m = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0;
          for (int e = 0; e < c.d_head; ++e) dot += q[i][off + e] * k[j][off + e];
          s[j] = dot / std::sqrt(static_cast<double>(c.d_head));
          m = std::max(m, s[j]);
        }
        double z = 0;
        for (double& e : s) z += (e = std::exp(e - m));
        for (std::size_t j = 0; j < n; ++j)
          for (int e = 0; e < c.d_head; ++e) attn[i][off + e] += s[j] / z * v[j][off + e];
      }
    }
    Mat o = matmul(attn, L.wo);
    for (std::size_t i = 0; i < n; ++i)
      for (int j = 0; j < c.d_model; ++j) h[i][j] += o[i][j];
    Mat up = matmul(norm(h, L.ffn_norm), L.w_up);
    for (auto& row : up)
      for (double& u : row) u = 0.5 * u * (1 + std::tanh(std::sqrt(2 / M_PI) * (u + 0.044715 * u * u * u)));
    Mat down = matmul(up, L.w_down);
    for (std::size_t i = 0; i < n; ++i)
      for (int j = 0; j < c.d_model; ++j) h[i][j] += down[i][j];
  }
  return matmul(norm(h, w.final_norm()), w.head());
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.d_model = 17;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.d_head = 7;
  c.d_model = 14;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.mask_token_id = c.vocab_size;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("init is deterministic in the seed and respects the fan-in bound") {
  const ModelConfig c = small_config();
  const ModelWeights a = init_weights(c), b = init_weights(c);
  CHECK(a.layers()[1].wq == b.layers()[1].wq);
  CHECK(a.head() == b.head());
  ModelConfig c2 = c;
  c2.weight_seed = 4;
  CHECK_FALSE(init_weights(c2).head() == a.head());
  const float bound = 1.0f / std::sqrt(static_cast<float>(c.d_model));
  CHECK(a.layers()[0].wq.cwiseAbs().maxCoeff() <= bound);
  CHECK(a.layers()[0].w_down.cwiseAbs().maxCoeff() <= 1.0f / std::sqrt(static_cast<float>(c.d_ff)));
  CHECK(a.embedding().cwiseAbs().maxCoeff() <= 1.0f);
  CHECK(a.final_norm().isOnes());
}

TEST_CASE("rotary embedding") {
  const RopeTable table(4, 16, 10000.0);
  SUBCASE("position 0 is the identity") {
    Matrix x = Matrix::Random(1, 8);
    const Matrix before = x;
    const Position p0[] = {0};
    table.apply(x, p0);
    CHECK(x == before);
  }
  SUBCASE("first pair at position 1 rotates by one radian") {
    Matrix x(1, 4);
    x << 1, 0, 1, 0;
    const Position p1[] = {1};
    table.apply(x, p1);
    CHECK(x(0, 0) == doctest::Approx(std::cos(1.0)));
    CHECK(x(0, 1) == doctest::Approx(std::sin(1.0)));
    CHECK(x(0, 2) == doctest::Approx(std::cos(0.01)));
    CHECK(x(0, 3) == doctest::Approx(std::sin(0.01)));
  }
  SUBCASE("norm preserving and relative") {
    Rng rng(1);
    Matrix q = Matrix::Random(1, 4), k = Matrix::Random(1, 4);
    auto score = [&](Position m, Position n) {
      Matrix a = q, b = k;
      const Position pm[] = {m}, pn[] = {n};
      table.apply(a, pm);
      table.apply(b, pn);
      CHECK(a.norm() == doctest::Approx(q.norm()).epsilon(1e-5));
      return a.row(0).dot(b.row(0));
    };
    CHECK(score(5, 2) == doctest::Approx(score(12, 9)).epsilon(1e-4));
    CHECK(score(0, 7) == doctest::Approx(score(3, 10)).epsilon(1e-4));
  }
  SUBCASE("out of range position throws") {
    Matrix x = Matrix::Zero(1, 4);
    const Position bad[] = {16};
    CHECK_THROWS_AS(table.apply(x, bad), std::out_of_range);
  }
}

TEST_CASE("attention matches a two-loop reference and rows sum to one") {
  Rng rng(11);
  const int n = 5, m = 7, heads = 2, dh = 3;
  Matrix q = Matrix::Random(n, heads * dh), k = Matrix::Random(m, heads * dh),
         v = Matrix::Random(m, heads * dh);
  const float scale = 0.7f;
  const Matrix out = attention(q, k, v, heads, scale);
  for (int h = 0; h < heads; ++h) {
    const Matrix w = attention_weights(q.middleCols(h * dh, dh), k.middleCols(h * dh, dh), scale);
    for (int i = 0; i < n; ++i) {
      CHECK(w.row(i).sum() == doctest::Approx(1.0f).epsilon(1e-6));
      for (int e = 0; e < dh; ++e) {
        double num = 0, den = 0;
        for (int j = 0; j < m; ++j) {
          double s = 0;
          for (int f = 0; f < dh; ++f) s += q(i, h * dh + f) * k(j, h * dh + f);
          const double ew = std::exp(scale * s);
          num += ew * v(j, h * dh + e);
          den += ew;
        }
        CHECK(out(i, h * dh + e) == doctest::Approx(num / den).epsilon(1e-5));
      }
    }
  }
  CHECK_THROWS_AS(attention(q, Matrix(0, 6), Matrix(0, 6), heads, scale), std::invalid_argument);
}

TEST_CASE("forward_full matches the scalar reference") {
  const ModelWeights w = init_weights(small_config());
  const auto tokens = tokens_for(13, w.config(), 5);
  const Matrix logits = forward_full(tokens, w).logits;
  const Mat ref = reference_logits(tokens, w);
  double worst = 0;
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t j = 0; j < ref[i].size(); ++j)
      worst = std::max(worst, std::abs(logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - ref[i][j]));
  CHECK(worst < 1e-4);
}

TEST_CASE("forward_partial with exact cached rows reproduces full logits") {
  const ModelWeights w = init_weights(small_config());
  const auto tokens = tokens_for(20, w.config(), 8);
  const ForwardResult full = forward_full(tokens, w);
  const PositionList cached{0, 3, 4, 9, 15};
  PositionList compute;
  for (Position p = 0; p < 20; ++p)
    if (!positions::contains(cached, p)) compute.push_back(p);
  LayerCache cache;
  for (const KVSlab& s : full.full_kv) {
    KVSlab c{s.layer, Matrix(5, 16), Matrix(5, 16), cached};
    for (int i = 0; i < 5; ++i) {
      c.keys.row(i) = s.keys.row(cached[static_cast<std::size_t>(i)]);
      c.values.row(i) = s.values.row(cached[static_cast<std::size_t>(i)]);
    }
    cache.push_back(c);
  }
  for (KeyAssembly a : {KeyAssembly::Layout, KeyAssembly::Natural}) {
    const ForwardResult part = forward_partial(tokens, compute, cache, w, a);
    REQUIRE(part.logits.rows() == static_cast<Eigen::Index>(compute.size()));
    for (std::size_t i = 0; i < compute.size(); ++i) {
      const float diff = (part.logits.row(static_cast<Eigen::Index>(i)) - full.logits.row(compute[i])).cwiseAbs().maxCoeff();
      CHECK(diff < 1e-5f);
    }
    CHECK(part.fresh_kv[0].row_positions == compute);
  }
}

TEST_CASE("forward_partial rejects inconsistent inputs") {
  const ModelWeights w = init_weights(small_config());
  const auto tokens = tokens_for(6, w.config(), 2);
  const PositionList none;
  CHECK_THROWS_AS(forward_partial(tokens, none, {}, w), std::invalid_argument);
  CHECK_THROWS_AS(forward_partial(tokens, PositionList{0, 1, 2}, {}, w), std::invalid_argument);
  CHECK_THROWS_AS(forward_partial(tokens, PositionList{0, 0, 1, 2, 3, 4, 5}, {}, w), std::invalid_argument);
  const ForwardResult full = forward_full(tokens, w);
  LayerCache overlap;
  for (const KVSlab& s : full.full_kv) overlap.push_back(KVSlab{s.layer, s.keys.topRows(1), s.values.topRows(1), {0}});
  CHECK_THROWS_AS(forward_partial(tokens, positions::range(0, 6), overlap, w), std::invalid_argument);
  std::vector<TokenId> bad = tokens;
  bad[2] = 99;
  CHECK_THROWS(forward_full(bad, w));
}

TEST_CASE("threaded attention is bit-identical to single-threaded") {
  const ModelWeights w = init_weights(small_config());
  const auto tokens = tokens_for(17, w.config(), 4);
  set_kernel_threads(1);
  const Matrix one = forward_full(tokens, w).logits;
  set_kernel_threads(2);
  const Matrix two = forward_full(tokens, w).logits;
  set_kernel_threads(1);
  CHECK(one == two);
  CHECK_THROWS_AS(set_kernel_threads(0), std::invalid_argument);
}

TEST_CASE("weights round-trip through save and load") {
  const ModelWeights w = init_weights(small_config());
  const auto path = std::filesystem::temp_directory_path() / "dkv_test_weights.bin";
  save_weights(w, path);
  const ModelWeights back = load_weights(path);
  CHECK(back.config() == w.config());
  CHECK(back.layers()[1].w_up == w.layers()[1].w_up);
  CHECK(back.head() == w.head());
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
  CHECK_THROWS(load_weights(path));
}
