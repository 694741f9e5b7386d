#ifndef STEERLAB_MODEL_HPP
#define STEERLAB_MODEL_HPP

// Toy decoder-only transformer with frozen input/output embeddings and
// trainable pre-norm blocks. Forward caches everything needed for manual
// reverse-mode; backward produces gradients for trainable parameters only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "steerlab/numerics.hpp"

namespace steerlab {

struct ModelConfig {
    std::size_t vocab_size = 128;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 2;
    std::size_t max_seq_len = 16;
    bool tie_embeddings = true;

    std::size_t d_ff() const { return 4 * d_model; }
    std::size_t d_head() const { return d_model / n_heads; }

    void validate() const {
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model not divisible by n_heads");
        if (vocab_size < 4) throw std::invalid_argument("ModelConfig: vocab_size < 4");
        if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers < 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
    Vector ln1_g, ln1_b;
    Matrix wq, wk, wv, wo;  // d x d, applied as row-vector * matrix
    Vector ln2_g, ln2_b;
    Matrix w1;  // d x d_ff
    Vector b1;
    Matrix w2;  // d_ff x d
    Vector b2;

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        fn("ln1_g", ln1_g.data(), ln1_g.size());
        fn("ln1_b", ln1_b.data(), ln1_b.size());
        fn("wq", wq.data.data(), wq.data.size());
        fn("wk", wk.data.data(), wk.data.size());
        fn("wv", wv.data.data(), wv.data.size());
        fn("wo", wo.data.data(), wo.data.size());
        fn("ln2_g", ln2_g.data(), ln2_g.size());
        fn("ln2_b", ln2_b.data(), ln2_b.size());
        fn("w1", w1.data.data(), w1.data.size());
        fn("b1", b1.data(), b1.size());
        fn("w2", w2.data.data(), w2.data.size());
        fn("b2", b2.data(), b2.size());
    }

    static BlockParams zeros_like(const ModelConfig& cfg) {
        BlockParams b;
        const std::size_t d = cfg.d_model, f = cfg.d_ff();
        b.ln1_g.assign(d, 0.0);
        b.ln1_b.assign(d, 0.0);
        b.wq = Matrix(d, d);
        b.wk = Matrix(d, d);
        b.wv = Matrix(d, d);
        b.wo = Matrix(d, d);
        b.ln2_g.assign(d, 0.0);
        b.ln2_b.assign(d, 0.0);
        b.w1 = Matrix(d, f);
        b.b1.assign(f, 0.0);
        b.w2 = Matrix(f, d);
        b.b2.assign(d, 0.0);
        return b;
    }
};

struct ModelParams {
    ModelConfig config;
    Matrix token_embedding;       // vocab x d, FROZEN
    Matrix positional_embedding;  // max_seq_len x d, FROZEN
    Matrix output_head_untied;    // vocab x d, FROZEN; empty when tied
    std::vector<BlockParams> blocks;
    Vector final_bias;  // d, additive bias on the final hidden states

    const Matrix& output_head() const {
        return config.tie_embeddings ? token_embedding : output_head_untied;
    }
};

// Gradients mirror the trainable parameters (blocks + final_bias).
struct Gradients {
    std::vector<BlockParams> blocks;
    Vector final_bias;

    static Gradients zeros_like(const ModelParams& p) {
        Gradients g;
        g.blocks.assign(p.config.n_layers, BlockParams::zeros_like(p.config));
        g.final_bias.assign(p.config.d_model, 0.0);
        return g;
    }

    void accumulate(const Gradients& other, double scale = 1.0) {
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            auto& dst = blocks[l];
            auto& src = const_cast<Gradients&>(other).blocks[l];
            std::vector<std::pair<double*, std::size_t>> d, s;
            dst.for_each_tensor([&](const char*, double* p, std::size_t n) { d.push_back({p, n}); });
            src.for_each_tensor([&](const char*, double* p, std::size_t n) { s.push_back({p, n}); });
            for (std::size_t t = 0; t < d.size(); ++t)
                for (std::size_t i = 0; i < d[t].second; ++i) d[t].first[i] += scale * s[t].first[i];
        }
        for (std::size_t i = 0; i < final_bias.size(); ++i)
            final_bias[i] += scale * other.final_bias[i];
    }
};

inline Matrix gaussian_matrix(std::size_t r, std::size_t c, double stddev, std::mt19937_64& rng) {
    Matrix m(r, c);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : m.data) x = dist(rng);
    return m;
}

// Deterministic per seed. Embeddings are scaled Gaussians, frozen afterwards;
// blocks start near identity (zero output projections) so the residual stream
// passes through untouched at step 0.
inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.d_model;
    const double emb_scale = 1.0 / std::sqrt(static_cast<double>(d));

    ModelParams p;
    p.config = cfg;
    p.token_embedding = gaussian_matrix(cfg.vocab_size, d, emb_scale, rng);
    p.positional_embedding = gaussian_matrix(cfg.max_seq_len, d, emb_scale, rng);
    if (!cfg.tie_embeddings)
        p.output_head_untied = gaussian_matrix(cfg.vocab_size, d, emb_scale, rng);

    const double w_scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        BlockParams b = BlockParams::zeros_like(cfg);
        b.ln1_g.assign(d, 1.0);
        b.ln2_g.assign(d, 1.0);
        b.wq = gaussian_matrix(d, d, w_scale, rng);
        b.wk = gaussian_matrix(d, d, w_scale, rng);
        b.wv = gaussian_matrix(d, d, w_scale, rng);
        b.w1 = gaussian_matrix(d, cfg.d_ff(), w_scale, rng);
        // wo, w2 stay zero: identity block at init
        p.blocks.push_back(std::move(b));
    }
    p.final_bias.assign(d, 0.0);
    return p;
}

namespace detail {

constexpr double kLnEps = 1e-5;

struct LayerNormCache {
    Matrix xhat;  // T x d
    Vector rstd;  // per row
};

inline Matrix layernorm(const Matrix& x, const Vector& g, const Vector& b, LayerNormCache& c) {
    const std::size_t t_len = x.rows, d = x.cols;
    Matrix y(t_len, d);
    c.xhat = Matrix(t_len, d);
    c.rstd.assign(t_len, 0.0);
    for (std::size_t t = 0; t < t_len; ++t) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x(t, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double dx = x(t, j) - mu;
            var += dx * dx;
        }
        var /= static_cast<double>(d);
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        c.rstd[t] = rstd;
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (x(t, j) - mu) * rstd;
            c.xhat(t, j) = xh;
            y(t, j) = g[j] * xh + b[j];
        }
    }
    return y;
}

inline Matrix layernorm_backward(const Matrix& dy, const Vector& g, const LayerNormCache& c,
                                 Vector& dg, Vector& db) {
    const std::size_t t_len = dy.rows, d = dy.cols;
    Matrix dx(t_len, d);
    for (std::size_t t = 0; t < t_len; ++t) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double dxh = dy(t, j) * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * c.xhat(t, j);
            dg[j] += dy(t, j) * c.xhat(t, j);
            db[j] += dy(t, j);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            double dxh = dy(t, j) * g[j];
            dx(t, j) = c.rstd[t] * (dxh - mean_dxhat - c.xhat(t, j) * mean_dxhat_xhat);
        }
    }
    return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    const double inv_sqrt2pi = 0.3989422804014326779;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

struct BlockCache {
    Matrix x_in;   // input to the block
    LayerNormCache ln1;
    Matrix n1;     // post-ln1
    Matrix q, k, v;
    std::vector<Matrix> attn;  // per-head T x T softmax weights
    Matrix attn_concat;        // heads merged, before wo
    Matrix x_mid;              // after attention residual
    LayerNormCache ln2;
    Matrix n2;
    Matrix u;  // pre-gelu
    Matrix gact;  // post-gelu
};

}  // namespace detail

struct LayerActivations {
    std::vector<Matrix> hidden;  // n_layers + 1 matrices, each T x d
    Vector h;                    // last position, last layer
    Vector logits;               // output_head * h
};

struct ForwardCache {
    std::vector<detail::BlockCache> blocks;
    std::vector<std::uint32_t> tokens;
    bool valid = false;
};

struct ForwardResult {
    LayerActivations act;
    ForwardCache cache;
};

inline ForwardResult forward(const ModelParams& params, const std::vector<std::uint32_t>& tokens) {
    const ModelConfig& cfg = params.config;
    const std::size_t t_len = tokens.size();
    if (t_len == 0 || t_len > cfg.max_seq_len)
        throw std::invalid_argument("forward: sequence length out of range");
    for (auto tok : tokens)
        if (tok >= cfg.vocab_size) throw std::invalid_argument("forward: token id out of range");

    const std::size_t d = cfg.d_model, nh = cfg.n_heads, dh = cfg.d_head(), f = cfg.d_ff();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult res;
    res.cache.tokens = tokens;
    res.act.hidden.reserve(cfg.n_layers + 1);

    Matrix x(t_len, d);
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t j = 0; j < d; ++j)
            x(t, j) = params.token_embedding(tokens[t], j) + params.positional_embedding(t, j);
    res.act.hidden.push_back(x);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const BlockParams& b = params.blocks[l];
        detail::BlockCache c;
        c.x_in = x;
        c.n1 = detail::layernorm(x, b.ln1_g, b.ln1_b, c.ln1);
        c.q = matmul(c.n1, b.wq);
        c.k = matmul(c.n1, b.wk);
        c.v = matmul(c.n1, b.wv);

        c.attn_concat = Matrix(t_len, d);
        c.attn.resize(nh);
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * dh;
            Matrix p(t_len, t_len);
            for (std::size_t t = 0; t < t_len; ++t) {
                // causal: attend to positions <= t
                Vector scores(t + 1);
                for (std::size_t s = 0; s <= t; ++s) {
                    double sc = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) sc += c.q(t, off + j) * c.k(s, off + j);
                    scores[s] = sc * inv_sqrt_dh;
                }
                Vector w = softmax(scores);
                for (std::size_t s = 0; s <= t; ++s) p(t, s) = w[s];
            }
            c.attn[h] = p;
            for (std::size_t t = 0; t < t_len; ++t)
                for (std::size_t j = 0; j < dh; ++j) {
                    double o = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) o += p(t, s) * c.v(s, off + j);
                    c.attn_concat(t, off + j) = o;
                }
        }
        Matrix attn_out = matmul(c.attn_concat, b.wo);
        c.x_mid = x;
        for (std::size_t i = 0; i < x.data.size(); ++i) c.x_mid.data[i] += attn_out.data[i];

        c.n2 = detail::layernorm(c.x_mid, b.ln2_g, b.ln2_b, c.ln2);
        c.u = matmul(c.n2, b.w1);
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t j = 0; j < f; ++j) c.u(t, j) += b.b1[j];
        c.gact = c.u;
        for (double& val : c.gact.data) val = detail::gelu(val);
        Matrix mlp_out = matmul(c.gact, b.w2);
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t j = 0; j < d; ++j) mlp_out(t, j) += b.b2[j];

        x = c.x_mid;
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += mlp_out.data[i];

        res.cache.blocks.push_back(std::move(c));
        if (l + 1 == cfg.n_layers) {
            // final additive bias, broadcast over positions
            for (std::size_t t = 0; t < t_len; ++t)
                for (std::size_t j = 0; j < d; ++j) x(t, j) += params.final_bias[j];
        }
        res.act.hidden.push_back(x);
    }

    res.act.h = res.act.hidden.back().row(t_len - 1);
    res.act.logits = matvec(params.output_head(), res.act.h);
    res.cache.valid = true;
    return res;
}

// Reverse-mode through the trainable blocks. grad_final is dLoss/dH for the
// final hidden-state matrix (T x d); frozen embeddings receive no gradient.
inline Gradients backward(const ModelParams& params, const ForwardCache& cache,
                          const Matrix& grad_final) {
    if (!cache.valid) throw std::logic_error("backward: no cached forward pass");
    const ModelConfig& cfg = params.config;
    const std::size_t t_len = cache.tokens.size();
    if (grad_final.rows != t_len || grad_final.cols != cfg.d_model)
        throw std::invalid_argument("backward: upstream gradient shape mismatch");

    const std::size_t d = cfg.d_model, nh = cfg.n_heads, dh = cfg.d_head(), f = cfg.d_ff();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Gradients g = Gradients::zeros_like(params);
    Matrix dx = grad_final;

    // bias sits after the last block, broadcast over rows
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t j = 0; j < d; ++j) g.final_bias[j] += dx(t, j);

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const BlockParams& b = params.blocks[li];
        const detail::BlockCache& c = cache.blocks[li];
        BlockParams& gb = g.blocks[li];

        // MLP branch: x_out = x_mid + gelu(n2 w1 + b1) w2 + b2
        Matrix d_mlp_out = dx;  // residual passes dx through unchanged
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t j = 0; j < d; ++j) gb.b2[j] += d_mlp_out(t, j);
        Matrix dgact = matmul(d_mlp_out, transpose(b.w2));
        Matrix gw2 = matmul(transpose(c.gact), d_mlp_out);
        for (std::size_t i = 0; i < gw2.data.size(); ++i) gb.w2.data[i] += gw2.data[i];
        Matrix du = dgact;
        for (std::size_t i = 0; i < du.data.size(); ++i)
            du.data[i] *= detail::gelu_grad(c.u.data[i]);
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t j = 0; j < f; ++j) gb.b1[j] += du(t, j);
        Matrix dn2 = matmul(du, transpose(b.w1));
        Matrix gw1 = matmul(transpose(c.n2), du);
        for (std::size_t i = 0; i < gw1.data.size(); ++i) gb.w1.data[i] += gw1.data[i];
        Matrix dx_mid = detail::layernorm_backward(dn2, b.ln2_g, c.ln2, gb.ln2_g, gb.ln2_b);
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx_mid.data[i] += dx.data[i];

        // attention branch: x_mid = x_in + concat(heads) wo
        Matrix d_attn_out = dx_mid;
        Matrix d_concat = matmul(d_attn_out, transpose(b.wo));
        Matrix gwo = matmul(transpose(c.attn_concat), d_attn_out);
        for (std::size_t i = 0; i < gwo.data.size(); ++i) gb.wo.data[i] += gwo.data[i];

        Matrix dq(t_len, d), dk(t_len, d), dv(t_len, d);
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * dh;
            const Matrix& p = c.attn[h];
            for (std::size_t t = 0; t < t_len; ++t) {
                // dP and softmax backward over the causal row
                Vector dp(t + 1, 0.0);
                for (std::size_t s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dh; ++j)
                        acc += d_concat(t, off + j) * c.v(s, off + j);
                    dp[s] = acc;
                    for (std::size_t j = 0; j < dh; ++j)
                        dv(s, off + j) += p(t, s) * d_concat(t, off + j);
                }
                double dot_pd = 0.0;
                for (std::size_t s = 0; s <= t; ++s) dot_pd += dp[s] * p(t, s);
                for (std::size_t s = 0; s <= t; ++s) {
                    double ds = p(t, s) * (dp[s] - dot_pd) * inv_sqrt_dh;
                    for (std::size_t j = 0; j < dh; ++j) {
                        dq(t, off + j) += ds * c.k(s, off + j);
                        dk(s, off + j) += ds * c.q(t, off + j);
                    }
                }
            }
        }

        Matrix dn1 = matmul(dq, transpose(b.wq));
        {
            Matrix tmp = matmul(dk, transpose(b.wk));
            for (std::size_t i = 0; i < dn1.data.size(); ++i) dn1.data[i] += tmp.data[i];
            tmp = matmul(dv, transpose(b.wv));
            for (std::size_t i = 0; i < dn1.data.size(); ++i) dn1.data[i] += tmp.data[i];
        }
        Matrix gwq = matmul(transpose(c.n1), dq);
        Matrix gwk = matmul(transpose(c.n1), dk);
        Matrix gwv = matmul(transpose(c.n1), dv);
        for (std::size_t i = 0; i < gwq.data.size(); ++i) {
            gb.wq.data[i] += gwq.data[i];
            gb.wk.data[i] += gwk.data[i];
            gb.wv.data[i] += gwv.data[i];
        }

        Matrix dx_in = detail::layernorm_backward(dn1, b.ln1_g, c.ln1, gb.ln1_g, gb.ln1_b);
        for (std::size_t i = 0; i < dx_in.data.size(); ++i) dx_in.data[i] += dx_mid.data[i];
        dx = std::move(dx_in);
    }
    return g;
}

// Seeds the upstream gradient at the final hidden state of the last position.
inline Gradients backward_at_h(const ModelParams& params, const ForwardCache& cache,
                               const Vector& grad_h) {
    if (!cache.valid) throw std::logic_error("backward_at_h: no cached forward pass");
    if (grad_h.size() != params.config.d_model)
        throw std::invalid_argument("backward_at_h: gradient dimension mismatch");
    Matrix grad_final(cache.tokens.size(), params.config.d_model);
    const std::size_t last = cache.tokens.size() - 1;
    for (std::size_t j = 0; j < grad_h.size(); ++j) grad_final(last, j) = grad_h[j];
    return backward(params, cache, grad_final);
}

inline double next_token_logprob(const ModelParams& params, const std::vector<std::uint32_t>& x,
                                 std::uint32_t y) {
    if (y >= params.config.vocab_size)
        throw std::invalid_argument("next_token_logprob: token id out of range");
    ForwardResult r = forward(params, x);
    return log_softmax(r.act.logits)[y];
}

// softmax(output_head * h): decode a (possibly modified) hidden state through
// the frozen head without re-running the network.
inline Vector decode_from_state(const ModelParams& params, const Vector& h) {
    if (h.size() != params.config.d_model)
        throw std::invalid_argument("decode_from_state: dimension mismatch");
    return softmax(matvec(params.output_head(), h));
}

// Logits at an arbitrary position of a cached forward pass.
inline Vector position_logits(const ModelParams& params, const LayerActivations& act,
                              std::size_t t) {
    return matvec(params.output_head(), act.hidden.back().row(t));
}

enum class TrainScope { all_blocks, last_block, final_bias_only };

// Gradient-descent update restricted to the given scope.
inline void apply_update(ModelParams& params, const Gradients& g, double lr, TrainScope scope) {
    auto update_block = [&](std::size_t l) {
        std::vector<std::pair<double*, std::size_t>> dst, src;
        params.blocks[l].for_each_tensor(
            [&](const char*, double* p, std::size_t n) { dst.push_back({p, n}); });
        const_cast<Gradients&>(g).blocks[l].for_each_tensor(
            [&](const char*, double* p, std::size_t n) { src.push_back({p, n}); });
        for (std::size_t t = 0; t < dst.size(); ++t)
            for (std::size_t i = 0; i < dst[t].second; ++i)
                dst[t].first[i] -= lr * src[t].first[i];
    };
    switch (scope) {
        case TrainScope::all_blocks:
            for (std::size_t l = 0; l < params.blocks.size(); ++l) update_block(l);
            break;
        case TrainScope::last_block:
            update_block(params.blocks.size() - 1);
            break;
        case TrainScope::final_bias_only:
            for (std::size_t j = 0; j < params.final_bias.size(); ++j)
                params.final_bias[j] -= lr * g.final_bias[j];
            break;
    }
}

}  // namespace steerlab

#endif  // STEERLAB_MODEL_HPP
