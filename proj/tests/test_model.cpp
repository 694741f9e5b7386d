#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "steerlab/checkpoint.hpp"
#include "steerlab/model.hpp"

using namespace steerlab;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_seq_len = 6;
    return cfg;
}

std::vector<std::uint32_t> tiny_tokens() { return {1, 4, 7, 2}; }

// Scalar loss <h(x), w> for the finite-difference check.
double probe_loss(const ModelParams& p, const std::vector<std::uint32_t>& toks,
                  const Vector& w) {
    return dot(forward(p, toks).act.h, w);
}

}  // namespace

TEST_CASE("init determinism and tying") {
    ModelConfig cfg = tiny_config();
    ModelParams a = init_model(cfg, 42);
    ModelParams b = init_model(cfg, 42);
    CHECK(a.token_embedding.data == b.token_embedding.data);
    CHECK(a.blocks[0].wq.data == b.blocks[0].wq.data);

    // tied head is the token embedding content
    CHECK(&a.output_head() == &a.token_embedding);

    ModelParams c = init_model(cfg, 43);
    CHECK(a.blocks[0].wq.data != c.blocks[0].wq.data);

    cfg.tie_embeddings = false;
    ModelParams d = init_model(cfg, 42);
    CHECK(d.output_head_untied.data.size() == cfg.vocab_size * cfg.d_model);
    CHECK(&d.output_head() == &d.output_head_untied);
}

TEST_CASE("forward shapes and activation invariants") {
    ModelParams p = init_model(tiny_config(), 1);
    auto toks = tiny_tokens();
    ForwardResult r = forward(p, toks);

    REQUIRE(r.act.hidden.size() == p.config.n_layers + 1);
    for (const auto& h : r.act.hidden) {
        CHECK(h.rows == toks.size());
        CHECK(h.cols == p.config.d_model);
    }
    CHECK(r.act.h == r.act.hidden.back().row(toks.size() - 1));
    CHECK(r.act.logits.size() == p.config.vocab_size);

    CHECK_THROWS_AS(forward(p, {}), std::invalid_argument);
    CHECK_THROWS_AS(forward(p, {99}), std::invalid_argument);
    CHECK_THROWS_AS(forward(p, std::vector<std::uint32_t>(7, 1)), std::invalid_argument);
}

TEST_CASE("logit gap identity") {
    ModelParams p = init_model(tiny_config(), 5);
    ForwardResult r = forward(p, tiny_tokens());
    const Matrix& head = p.output_head();
    for (std::uint32_t a = 0; a < p.config.vocab_size; ++a)
        for (std::uint32_t b = 0; b < p.config.vocab_size; ++b) {
            double gap = r.act.logits[a] - r.act.logits[b];
            double inner = dot(r.act.h, vsub(head.row(a), head.row(b)));
            CHECK(gap == Catch::Approx(inner).margin(1e-10));
        }
}

TEST_CASE("causality: future tokens do not affect earlier positions") {
    ModelParams p = init_model(tiny_config(), 9);
    std::vector<std::uint32_t> a = {3, 6, 1, 8};
    std::vector<std::uint32_t> b = {3, 6, 9, 2};  // same first two tokens
    ForwardResult ra = forward(p, a);
    ForwardResult rb = forward(p, b);
    for (std::size_t l = 0; l <= p.config.n_layers; ++l)
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t j = 0; j < p.config.d_model; ++j)
                CHECK(ra.act.hidden[l](t, j) == Catch::Approx(rb.act.hidden[l](t, j)).margin(1e-14));
}

TEST_CASE("next_token_logprob matches softmax composition and the gap identity") {
    ModelParams p = init_model(tiny_config(), 2);
    auto toks = tiny_tokens();
    ForwardResult r = forward(p, toks);
    Vector lp = log_softmax(r.act.logits);

    double total = 0.0;
    for (std::uint32_t y = 0; y < p.config.vocab_size; ++y) {
        double v = next_token_logprob(p, toks, y);
        CHECK(v <= 0.0);
        CHECK(v == Catch::Approx(lp[y]).margin(1e-12));
        total += std::exp(v);
    }
    CHECK(total == Catch::Approx(1.0).margin(1e-12));

    const Matrix& head = p.output_head();
    double gap = next_token_logprob(p, toks, 3) - next_token_logprob(p, toks, 8);
    CHECK(gap == Catch::Approx(dot(r.act.h, vsub(head.row(3), head.row(8)))).margin(1e-10));
}

TEST_CASE("decode_from_state") {
    ModelParams p = init_model(tiny_config(), 4);
    // zero state -> uniform
    Vector uniform = decode_from_state(p, Vector(p.config.d_model, 0.0));
    for (double pr : uniform)
        CHECK(pr == Catch::Approx(1.0 / p.config.vocab_size).margin(1e-14));

    // actual final state -> identical to forward softmax
    ForwardResult r = forward(p, tiny_tokens());
    Vector via_decode = decode_from_state(p, r.act.h);
    Vector via_forward = softmax(r.act.logits);
    for (std::size_t y = 0; y < via_decode.size(); ++y)
        CHECK(via_decode[y] == Catch::Approx(via_forward[y]).margin(1e-14));

    // pairwise ratio is the logistic of the margin; partition cancels
    std::mt19937_64 rng(6);
    std::normal_distribution<double> d(0.0, 1.0);
    const Matrix& head = p.output_head();
    for (int trial = 0; trial < 20; ++trial) {
        Vector h(p.config.d_model);
        for (double& x : h) x = d(rng);
        Vector probs = decode_from_state(p, h);
        std::uint32_t yw = 2, yl = 9;
        double ratio = probs[yw] / (probs[yw] + probs[yl]);
        double margin = dot(h, vsub(head.row(yw), head.row(yl)));
        CHECK(ratio == Catch::Approx(logistic(margin)).margin(1e-10));
    }

    CHECK_THROWS_AS(decode_from_state(p, Vector(3, 0.0)), std::invalid_argument);
}

TEST_CASE("backward matches central finite differences") {
    ModelParams p = init_model(tiny_config(), 77);
    // perturb away from the identity init so wo/w2 gradients flow
    std::mt19937_64 rng(78);
    std::normal_distribution<double> d(0.0, 0.1);
    for (auto& blk : p.blocks)
        blk.for_each_tensor([&](const char*, double* data, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) data[i] += d(rng);
        });

    auto toks = tiny_tokens();
    Vector w(p.config.d_model);
    for (double& x : w) x = d(rng);

    ForwardResult r = forward(p, toks);
    Gradients g = backward_at_h(p, r.cache, w);

    const double step = 1e-5;
    double max_rel = 0.0;
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        std::vector<std::pair<double*, std::size_t>> ptensors, gtensors;
        p.blocks[l].for_each_tensor(
            [&](const char*, double* data, std::size_t n) { ptensors.push_back({data, n}); });
        g.blocks[l].for_each_tensor(
            [&](const char*, double* data, std::size_t n) { gtensors.push_back({data, n}); });
        for (std::size_t t = 0; t < ptensors.size(); ++t) {
            // probe a deterministic subset of each tensor
            std::size_t n = ptensors[t].second;
            for (std::size_t i = 0; i < n; i += std::max<std::size_t>(1, n / 7)) {
                double saved = ptensors[t].first[i];
                ptensors[t].first[i] = saved + step;
                double lp = probe_loss(p, toks, w);
                ptensors[t].first[i] = saved - step;
                double lm = probe_loss(p, toks, w);
                ptensors[t].first[i] = saved;
                double fd = (lp - lm) / (2.0 * step);
                double an = gtensors[t].first[i];
                double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
                max_rel = std::max(max_rel, std::abs(fd - an) / denom);
            }
        }
    }
    // final bias too
    for (std::size_t i = 0; i < p.final_bias.size(); i += 5) {
        double saved = p.final_bias[i];
        p.final_bias[i] = saved + step;
        double lp = probe_loss(p, toks, w);
        p.final_bias[i] = saved - step;
        double lm = probe_loss(p, toks, w);
        p.final_bias[i] = saved;
        double fd = (lp - lm) / (2.0 * step);
        double denom = std::max({std::abs(fd), std::abs(g.final_bias[i]), 1e-6});
        max_rel = std::max(max_rel, std::abs(fd - g.final_bias[i]) / denom);
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("backward edge cases") {
    ModelParams p = init_model(tiny_config(), 3);
    auto toks = tiny_tokens();
    ForwardResult r = forward(p, toks);

    // zero upstream -> all zero gradients
    Gradients g = backward_at_h(p, r.cache, Vector(p.config.d_model, 0.0));
    for (auto& blk : g.blocks)
        blk.for_each_tensor([&](const char*, double* data, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) CHECK(data[i] == 0.0);
        });
    for (double x : g.final_bias) CHECK(x == 0.0);

    // no cached forward -> state error
    ForwardCache empty;
    CHECK_THROWS_AS(backward_at_h(p, empty, Vector(p.config.d_model, 1.0)), std::logic_error);
}

TEST_CASE("frozen embeddings have no gradient slots and survive updates") {
    ModelParams p = init_model(tiny_config(), 21);
    Matrix tok_before = p.token_embedding;
    Matrix pos_before = p.positional_embedding;

    auto toks = tiny_tokens();
    ForwardResult r = forward(p, toks);
    Vector w(p.config.d_model, 0.3);
    Gradients g = backward_at_h(p, r.cache, w);
    for (TrainScope scope :
         {TrainScope::all_blocks, TrainScope::last_block, TrainScope::final_bias_only})
        apply_update(p, g, 0.1, scope);

    CHECK(p.token_embedding.data == tok_before.data);
    CHECK(p.positional_embedding.data == pos_before.data);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    ModelConfig cfg = tiny_config();
    cfg.tie_embeddings = false;
    ModelParams p = init_model(cfg, 99);
    p.final_bias[3] = 0.125;

    auto path = std::filesystem::temp_directory_path() / "steerlab_ckpt_test.bin";
    save_checkpoint(path.string(), p);
    ModelParams q = load_checkpoint(path.string());
    std::filesystem::remove(path);

    CHECK(q.config == p.config);
    CHECK(q.token_embedding.data == p.token_embedding.data);
    CHECK(q.positional_embedding.data == p.positional_embedding.data);
    CHECK(q.output_head_untied.data == p.output_head_untied.data);
    CHECK(q.final_bias == p.final_bias);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        std::vector<std::vector<double>> a, b;
        p.blocks[l].for_each_tensor([&](const char*, double* data, std::size_t n) {
            a.emplace_back(data, data + n);
        });
        q.blocks[l].for_each_tensor([&](const char*, double* data, std::size_t n) {
            b.emplace_back(data, data + n);
        });
        CHECK(a == b);
    }
}
