#pragma once

// A small pre-norm decoder-only transformer with hand-written backward pass.
// Fixed sinusoidal positions, multi-head causal attention, tanh-approximated
// GELU feed-forward, output head tied to the token embedding. Weights are
// stored out x in and applied as y = W x.

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gems/error.hpp"
#include "gems/linalg.hpp"
#include "gems/model_api.hpp"
#include "gems/rng.hpp"

namespace gems {

struct ModelConfig {
  std::size_t vocab = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t ffn = 128;
  std::size_t blocks = 2;
  std::size_t context = 64;
};

inline void validate(const ModelConfig& c) {
  auto bad = [](const std::string& msg) { fail(ErrorKind::config, "model: " + msg); };
  if (c.vocab < 2) bad("vocab must be >= 2");
  if (c.d_model == 0 || c.n_heads == 0 || c.d_model % c.n_heads != 0) bad("d_model must be a positive multiple of n_heads");
  if (c.ffn == 0) bad("ffn must be positive");
  if (c.blocks == 0) bad("blocks must be positive");
  if (c.context < 2) bad("context must be >= 2");
}

namespace detail {

inline double gelu(double u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * u * u);
}

inline constexpr double ln_eps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

inline Matrix layer_norm(const Matrix& x, std::span<const double> g, std::span<const double> b, LayerNormCache* cache) {
  const std::size_t n = x.cols();
  Matrix y(x.rows(), n);
  if (cache) {
    cache->xhat = Matrix(x.rows(), n);
    cache->rstd.assign(x.rows(), 0.0);
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + ln_eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mu) * rstd;
      y(i, j) = g[j] * xh + b[j];
      if (cache) cache->xhat(i, j) = xh;
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

// Returns dx; accumulates into dg and db.
inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& c, std::span<const double> g,
                                  std::span<double> dg, std::span<double> db) {
  const std::size_t n = dy.cols();
  Matrix dx(dy.rows(), n);
  std::vector<double> dxhat(n);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dy(i, j);
      dg[j] += d * c.xhat(i, j);
      db[j] += d;
      dxhat[j] = d * g[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * c.xhat(i, j);
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) dx(i, j) = c.rstd[i] * (dxhat[j] - mean_d - c.xhat(i, j) * mean_dx);
  }
  return dx;
}

inline void add_row_bias(Matrix& y, std::span<const double> b) {
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b[j];
}

inline void add_column_sums(const Matrix& d, std::span<double> out) {
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = 0; j < d.cols(); ++j) out[j] += d(i, j);
}

inline std::vector<double> log_softmax(std::span<const double> z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] - lse;
  return out;
}

}  // namespace detail

class TinyTransformer {
 public:
  struct Sample {
    std::vector<int> prompt;
    std::vector<int> target;  // token ids of the item code
    Task task = Task::src;
  };

  // Parameter slots inside one block.
  enum BlockSlot : std::size_t { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, up, up_b, down, down_b, block_slots };

  TinyTransformer(const ModelConfig& config, Rng& rng) : cfg_(config) {
    validate(cfg_);
    const std::size_t d = cfg_.d_model, f = cfg_.ffn;
    auto normal = [&](std::size_t rows, std::size_t cols, double sd) {
      Matrix m(rows, cols);
      for (double& v : m.data()) v = sd * rng.normal();
      return m;
    };
    auto ones = [](std::size_t n) {
      Matrix m(1, n);
      for (double& v : m.data()) v = 1.0;
      return m;
    };
    const double sd_in = 1.0 / std::sqrt(static_cast<double>(d));
    const double sd_res = sd_in / std::sqrt(2.0 * static_cast<double>(cfg_.blocks));
    params_.push_back({"tok_emb", normal(cfg_.vocab, d, 0.3), true});
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      params_.push_back({p + "ln1.g", ones(d), false});
      params_.push_back({p + "ln1.b", Matrix(1, d), false});
      params_.push_back({p + "attn.wq", normal(d, d, sd_in), true});
      params_.push_back({p + "attn.wk", normal(d, d, sd_in), true});
      params_.push_back({p + "attn.wv", normal(d, d, sd_in), true});
      params_.push_back({p + "attn.wo", normal(d, d, sd_res), true});
      params_.push_back({p + "ln2.g", ones(d), false});
      params_.push_back({p + "ln2.b", Matrix(1, d), false});
      params_.push_back({p + "ffn.up", normal(f, d, sd_in), true});
      params_.push_back({p + "ffn.up_b", Matrix(1, f), false});
      params_.push_back({p + "ffn.down", normal(d, f, 1.0 / std::sqrt(static_cast<double>(f)) / std::sqrt(2.0 * cfg_.blocks)), true});
      params_.push_back({p + "ffn.down_b", Matrix(1, d), false});
    }
    params_.push_back({"lnf.g", ones(d), false});
    params_.push_back({"lnf.b", Matrix(1, d), false});
    build_positions();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Task task_of(const Sample& s) const { return s.task; }

  static std::size_t block_param(std::size_t block, BlockSlot slot) { return 1 + block * block_slots + slot; }
  std::size_t lnf_g_index() const { return 1 + cfg_.blocks * block_slots; }

  // ---- full-sequence pass -------------------------------------------------

  double sample_loss(const Sample& s) const {
    Cache c;
    const auto tokens = teacher_forced_tokens(s);
    forward(tokens, c);
    return loss_and_head_grad(s, c, nullptr, nullptr, 0.0);
  }

  /// Teacher-forced negative log-likelihood of the target code; adds
  /// w * gradient into g.
  double accumulate_gradient(const Sample& s, Gradients& g, double w) const {
    Cache c;
    const auto tokens = teacher_forced_tokens(s);
    forward(tokens, c);
    Matrix dhf(tokens.size(), cfg_.d_model);
    const double loss = loss_and_head_grad(s, c, &g[0], &dhf, w);
    backward(tokens, c, dhf, g);
    return loss;
  }

  /// Log-probabilities over the vocabulary at every position.
  std::vector<std::vector<double>> position_log_probs(std::span<const int> tokens) const {
    Cache c;
    forward(tokens, c);
    std::vector<std::vector<double>> out;
    for (std::size_t t = 0; t < tokens.size(); ++t) out.push_back(detail::log_softmax(logits(c.hf.row(t))));
    return out;
  }

  // ---- incremental decoding --------------------------------------------

  struct DecodeState {
    std::size_t len = 0;
    std::vector<std::vector<double>> k, v;  // per block, len x d flattened
    std::vector<double> hidden;              // final normalized hidden of the last position
    std::vector<std::vector<double>> layer_inputs;  // per parameter, at the last position
  };

  DecodeState start(std::span<const int> prompt) const {
    DecodeState s;
    s.k.resize(cfg_.blocks);
    s.v.resize(cfg_.blocks);
    for (int t : prompt) s = extend(std::move(s), t);
    return s;
  }

  DecodeState extend(DecodeState s, int token) const {
    check_token(token);
    if (s.len >= cfg_.context) fail(ErrorKind::invalid_argument, "sequence exceeds the model context");
    const std::size_t d = cfg_.d_model, f = cfg_.ffn, H = cfg_.n_heads, dh = d / H;
    const std::size_t pos = s.len;
    s.layer_inputs.assign(params_.size(), {});
    std::vector<double> x(d);
    for (std::size_t j = 0; j < d; ++j) x[j] = params_[0].value(static_cast<std::size_t>(token), j) + pe_(pos, j);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const auto a = norm_row(x, block_param(b, ln1_g));
      const auto q = apply(block_param(b, wq), a);
      const auto kk = apply(block_param(b, wk), a);
      const auto vv = apply(block_param(b, wv), a);
      s.k[b].insert(s.k[b].end(), kk.begin(), kk.end());
      s.v[b].insert(s.v[b].end(), vv.begin(), vv.end());
      std::vector<double> ctx(d, 0.0);
      std::vector<double> p(pos + 1);
      for (std::size_t h = 0; h < H; ++h) {
        double m = -INFINITY;
        for (std::size_t j = 0; j <= pos; ++j) {
          double sc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) sc += q[h * dh + e] * s.k[b][j * d + h * dh + e];
          p[j] = sc * scale;
          m = std::max(m, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= pos; ++j) z += (p[j] = std::exp(p[j] - m));
        for (std::size_t j = 0; j <= pos; ++j)
          for (std::size_t e = 0; e < dh; ++e) ctx[h * dh + e] += p[j] / z * s.v[b][j * d + h * dh + e];
      }
      const auto o = apply(block_param(b, wo), ctx);
      for (std::size_t j = 0; j < d; ++j) x[j] += o[j];
      const auto a2 = norm_row(x, block_param(b, ln2_g));
      auto u = apply(block_param(b, up), a2);
      const auto& ub = params_[block_param(b, up_b)].value.data();
      std::vector<double> gl(f);
      for (std::size_t j = 0; j < f; ++j) gl[j] = detail::gelu(u[j] + ub[j]);
      const auto dn = apply(block_param(b, down), gl);
      const auto& db = params_[block_param(b, down_b)].value.data();
      for (std::size_t j = 0; j < d; ++j) x[j] += dn[j] + db[j];
      s.layer_inputs[block_param(b, wq)] = a;
      s.layer_inputs[block_param(b, wk)] = a;
      s.layer_inputs[block_param(b, wv)] = a;
      s.layer_inputs[block_param(b, wo)] = ctx;
      s.layer_inputs[block_param(b, up)] = a2;
      s.layer_inputs[block_param(b, down)] = gl;
    }
    s.hidden = norm_row(x, lnf_g_index());
    s.layer_inputs[0] = s.hidden;
    ++s.len;
    return s;
  }

  std::vector<double> log_probs(const DecodeState& s) const {
    if (s.len == 0) fail(ErrorKind::invalid_argument, "log_probs: empty decode state");
    return detail::log_softmax(logits(s.hidden));
  }

  /// Input vector each matrix layer sees at the final position of `tokens`.
  /// The tied embedding is indexed by its output-head role.
  std::vector<std::vector<double>> final_layer_inputs(std::span<const int> tokens) const {
    if (tokens.empty()) fail(ErrorKind::invalid_argument, "final_layer_inputs: empty sequence");
    return start(tokens).layer_inputs;
  }

 private:
  struct BlockCache {
    Matrix x_in;
    detail::LayerNormCache ln1, ln2;
    Matrix a1, q, k, v, ctx, x_mid, a2, u, gl;
    std::vector<Matrix> probs;  // per head, T x T (causal)
  };
  struct Cache {
    std::vector<BlockCache> blocks;
    detail::LayerNormCache lnf;
    Matrix hf;
  };

  void build_positions() {
    pe_ = Matrix(cfg_.context, cfg_.d_model);
    for (std::size_t p = 0; p < cfg_.context; ++p)
      for (std::size_t j = 0; j < cfg_.d_model; ++j) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(cfg_.d_model));
        pe_(p, j) = j % 2 == 0 ? std::sin(static_cast<double>(p) * freq) : std::cos(static_cast<double>(p) * freq);
      }
  }

  void check_token(int t) const {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) fail(ErrorKind::invalid_argument, "token id out of range");
  }

  std::vector<int> teacher_forced_tokens(const Sample& s) const {
    if (s.prompt.empty() || s.target.empty()) fail(ErrorKind::invalid_argument, "sample needs a prompt and a target");
    std::vector<int> t = s.prompt;
    t.insert(t.end(), s.target.begin(), s.target.end() - 1);
    if (t.size() > cfg_.context)
      fail(ErrorKind::invalid_argument, "sequence of " + std::to_string(t.size()) + " tokens exceeds context " +
                                            std::to_string(cfg_.context));
    return t;
  }

  std::vector<double> apply(std::size_t param, std::span<const double> x) const {
    const Matrix& w = params_[param].value;
    std::vector<double> y(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) y[i] = dot(w.row(i), x);
    return y;
  }

  std::vector<double> norm_row(std::span<const double> x, std::size_t gain_param) const {
    Matrix m(1, x.size(), std::vector<double>(x.begin(), x.end()));
    const Matrix y = detail::layer_norm(m, params_[gain_param].value.data(), params_[gain_param + 1].value.data(), nullptr);
    return {y.data().begin(), y.data().end()};
  }

  std::vector<double> logits(std::span<const double> h) const { return apply(0, h); }

  void forward(std::span<const int> tokens, Cache& c) const {
    const std::size_t T = tokens.size(), d = cfg_.d_model, H = cfg_.n_heads, dh = d / H;
    if (T == 0 || T > cfg_.context) fail(ErrorKind::invalid_argument, "sequence length outside the model context");
    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      check_token(tokens[t]);
      for (std::size_t j = 0; j < d; ++j) x(t, j) = params_[0].value(static_cast<std::size_t>(tokens[t]), j) + pe_(t, j);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.blocks.resize(cfg_.blocks);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      BlockCache& bc = c.blocks[b];
      bc.x_in = x;
      bc.a1 = detail::layer_norm(x, params_[block_param(b, ln1_g)].value.data(), params_[block_param(b, ln1_b)].value.data(), &bc.ln1);
      bc.q = matmul_nt(bc.a1, params_[block_param(b, wq)].value);
      bc.k = matmul_nt(bc.a1, params_[block_param(b, wk)].value);
      bc.v = matmul_nt(bc.a1, params_[block_param(b, wv)].value);
      bc.ctx = Matrix(T, d);
      bc.probs.assign(H, Matrix(T, T));
      for (std::size_t h = 0; h < H; ++h) {
        Matrix& P = bc.probs[h];
        for (std::size_t i = 0; i < T; ++i) {
          double m = -INFINITY;
          for (std::size_t j = 0; j <= i; ++j) {
            double sc = 0.0;
            for (std::size_t e = 0; e < dh; ++e) sc += bc.q(i, h * dh + e) * bc.k(j, h * dh + e);
            P(i, j) = sc * scale;
            m = std::max(m, P(i, j));
          }
          double z = 0.0;
          for (std::size_t j = 0; j <= i; ++j) z += (P(i, j) = std::exp(P(i, j) - m));
          for (std::size_t j = 0; j <= i; ++j) {
            P(i, j) /= z;
            for (std::size_t e = 0; e < dh; ++e) bc.ctx(i, h * dh + e) += P(i, j) * bc.v(j, h * dh + e);
          }
        }
      }
      bc.x_mid = x;
      bc.x_mid += matmul_nt(bc.ctx, params_[block_param(b, wo)].value);
      bc.a2 = detail::layer_norm(bc.x_mid, params_[block_param(b, ln2_g)].value.data(), params_[block_param(b, ln2_b)].value.data(), &bc.ln2);
      bc.u = matmul_nt(bc.a2, params_[block_param(b, up)].value);
      detail::add_row_bias(bc.u, params_[block_param(b, up_b)].value.data());
      bc.gl = bc.u;
      for (double& v : bc.gl.data()) v = detail::gelu(v);
      x = bc.x_mid;
      Matrix dn = matmul_nt(bc.gl, params_[block_param(b, down)].value);
      detail::add_row_bias(dn, params_[block_param(b, down_b)].value.data());
      x += dn;
    }
    c.hf = detail::layer_norm(x, params_[lnf_g_index()].value.data(), params_[lnf_g_index() + 1].value.data(), &c.lnf);
  }

  // Loss over the target positions. With grad outputs set, adds w times the
  // head's contribution to the embedding gradient and fills dhf (also scaled
  // by w, so everything downstream inherits the weight).
  double loss_and_head_grad(const Sample& s, const Cache& c, Matrix* d_emb, Matrix* dhf, double w) const {
    const std::size_t first = s.prompt.size() - 1;
    double loss = 0.0;
    for (std::size_t t = 0; t < s.target.size(); ++t) {
      const auto h = c.hf.row(first + t);
      const auto lp = detail::log_softmax(logits(h));
      const auto y = static_cast<std::size_t>(s.target[t]);
      if (s.target[t] < 0 || y >= cfg_.vocab) fail(ErrorKind::invalid_argument, "target token out of range");
      loss -= lp[y];
      if (!d_emb) continue;
      for (std::size_t v = 0; v < cfg_.vocab; ++v) {
        const double dz = w * (std::exp(lp[v]) - (v == y ? 1.0 : 0.0));
        auto erow = params_[0].value.row(v);
        auto grow = d_emb->row(v);
        auto drow = dhf->row(first + t);
        for (std::size_t j = 0; j < cfg_.d_model; ++j) {
          grow[j] += dz * h[j];
          drow[j] += dz * erow[j];
        }
      }
    }
    return loss;
  }

  void backward(std::span<const int> tokens, const Cache& c, const Matrix& dhf, Gradients& g) const {
    const std::size_t T = tokens.size(), d = cfg_.d_model, H = cfg_.n_heads, dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t lf = lnf_g_index();
    Matrix dx = detail::layer_norm_backward(dhf, c.lnf, params_[lf].value.data(), g[lf].data(), g[lf + 1].data());
    for (std::size_t bi = cfg_.blocks; bi-- > 0;) {
      const BlockCache& bc = c.blocks[bi];
      auto P = [&](BlockSlot slot) -> const Matrix& { return params_[block_param(bi, slot)].value; };
      auto G = [&](BlockSlot slot) -> Matrix& { return g[block_param(bi, slot)]; };
      // feed-forward
      Matrix dgl = matmul(dx, P(down));
      G(down).axpy(1.0, matmul_tn(dx, bc.gl));
      detail::add_column_sums(dx, G(down_b).data());
      Matrix du = dgl;
      for (std::size_t k = 0; k < du.size(); ++k) du.data()[k] *= detail::gelu_grad(bc.u.data()[k]);
      G(up).axpy(1.0, matmul_tn(du, bc.a2));
      detail::add_column_sums(du, G(up_b).data());
      Matrix da2 = matmul(du, P(up));
      Matrix dx_mid = dx;
      dx_mid += detail::layer_norm_backward(da2, bc.ln2, P(ln2_g).data(), G(ln2_g).data(), G(ln2_b).data());
      // attention
      Matrix dctx = matmul(dx_mid, P(wo));
      G(wo).axpy(1.0, matmul_tn(dx_mid, bc.ctx));
      Matrix dq(T, d), dk(T, d), dv(T, d);
      std::vector<double> dp(T);
      for (std::size_t h = 0; h < H; ++h) {
        const Matrix& Pr = bc.probs[h];
        for (std::size_t i = 0; i < T; ++i) {
          double sum = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) {
              s += dctx(i, h * dh + e) * bc.v(j, h * dh + e);
              dv(j, h * dh + e) += Pr(i, j) * dctx(i, h * dh + e);
            }
            dp[j] = s;
            sum += Pr(i, j) * s;
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = Pr(i, j) * (dp[j] - sum) * scale;
            if (ds == 0.0) continue;
            for (std::size_t e = 0; e < dh; ++e) {
              dq(i, h * dh + e) += ds * bc.k(j, h * dh + e);
              dk(j, h * dh + e) += ds * bc.q(i, h * dh + e);
            }
          }
        }
      }
      G(wq).axpy(1.0, matmul_tn(dq, bc.a1));
      G(wk).axpy(1.0, matmul_tn(dk, bc.a1));
      G(wv).axpy(1.0, matmul_tn(dv, bc.a1));
      Matrix da1 = matmul(dq, P(wq));
      da1 += matmul(dk, P(wk));
      da1 += matmul(dv, P(wv));
      dx = dx_mid;
      dx += detail::layer_norm_backward(da1, bc.ln1, P(ln1_g).data(), G(ln1_g).data(), G(ln1_b).data());
    }
    for (std::size_t t = 0; t < T; ++t) {
      auto row = g[0].row(static_cast<std::size_t>(tokens[t]));
      for (std::size_t j = 0; j < d; ++j) row[j] += dx(t, j);
    }
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  Matrix pe_;
};

}  // namespace gems
