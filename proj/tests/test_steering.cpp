#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "steerlab/steering.hpp"

using namespace steerlab;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_seq_len = 8;
    return cfg;
}

std::vector<Vector> random_states(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<Vector> out(n, Vector(d));
    for (auto& v : out)
        for (double& x : v) x = dist(rng);
    return out;
}

}  // namespace

TEST_CASE("preference_vector") {
    ModelParams p = init_model(small_config(), 1);
    SteeringVector v = preference_vector(p, 3, 9);
    CHECK(v.provenance == SteeringProvenance::pair);
    // tied embeddings: the head rows are the token embedding rows
    Vector expected = vsub(p.token_embedding.row(3), p.token_embedding.row(9));
    CHECK(v.direction == expected);

    // antisymmetry
    SteeringVector w = preference_vector(p, 9, 3);
    for (std::size_t i = 0; i < v.direction.size(); ++i)
        CHECK(w.direction[i] == Catch::Approx(-v.direction[i]).margin(1e-15));

    // <h, v> equals the logit gap on any forward pass
    ForwardResult r = forward(p, {1, 5, 2});
    CHECK(dot(r.act.h, v.direction) ==
          Catch::Approx(r.act.logits[3] - r.act.logits[9]).margin(1e-10));

    CHECK_THROWS_AS(preference_vector(p, 4, 4), std::invalid_argument);
}

TEST_CASE("empirical_steering_vector") {
    auto h0 = random_states(6, 8, 2);

    SteeringVector zero = empirical_steering_vector(h0, h0);
    for (double x : zero.direction) CHECK(x == 0.0);
    CHECK(zero.provenance == SteeringProvenance::empirical);
    CHECK(zero.sample_count == 6);

    // N = 1: exactly the single displacement
    std::vector<Vector> one0 = {h0[0]}, one1 = {h0[1]};
    SteeringVector single = empirical_steering_vector(one0, one1);
    Vector expected = vsub(h0[1], h0[0]);
    for (std::size_t i = 0; i < expected.size(); ++i)
        CHECK(single.direction[i] == Catch::Approx(expected[i]).margin(1e-15));

    // bias-steered construction: add a fixed c to every state, recover it
    Vector c = {0.5, -1.0, 0.25, 0.0, 2.0, -0.125, 0.75, 1.5};
    std::vector<Vector> shifted;
    for (const auto& h : h0) shifted.push_back(vadd(h, c));
    SteeringVector rec = empirical_steering_vector(h0, shifted);
    for (std::size_t i = 0; i < c.size(); ++i)
        CHECK(rec.direction[i] == Catch::Approx(c[i]).margin(1e-12));

    std::vector<Vector> wrong(3, Vector(8, 0.0));
    CHECK_THROWS_AS(empirical_steering_vector(h0, wrong), std::invalid_argument);
}

TEST_CASE("cosine_distribution") {
    auto h0 = random_states(10, 8, 3);
    Vector c = {1.0, 0.5, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0};
    SteeringVector vstar;
    vstar.direction = c;

    // all shifts equal to vstar -> all cosines 1
    std::vector<Vector> shifted;
    for (const auto& h : h0) shifted.push_back(vadd(h, c));
    CosineHistogram hist = cosine_distribution(h0, shifted, vstar, 20);
    CHECK(hist.cosines.size() == 10);
    CHECK(hist.zero_shift_count == 0);
    for (double cs : hist.cosines) CHECK(cs == Catch::Approx(1.0).margin(1e-12));
    CHECK(hist.mean == Catch::Approx(1.0).margin(1e-12));
    CHECK(hist.median == Catch::Approx(1.0).margin(1e-12));
    CHECK(hist.counts.back() == 10);

    // orthogonal shifts -> cosine 0
    Vector orth = {0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0};
    std::vector<Vector> orth_shifted;
    for (const auto& h : h0) orth_shifted.push_back(vadd(h, orth));
    CosineHistogram zero_hist = cosine_distribution(h0, orth_shifted, vstar, 20);
    for (double cs : zero_hist.cosines) CHECK(cs == Catch::Approx(0.0).margin(1e-12));

    // zero-norm shifts counted separately, not binned
    std::vector<Vector> mixed = shifted;
    mixed[4] = h0[4];
    CosineHistogram counted = cosine_distribution(h0, mixed, vstar, 20);
    CHECK(counted.zero_shift_count == 1);
    CHECK(counted.cosines.size() == 9);

    SteeringVector null_v;
    null_v.direction.assign(8, 0.0);
    CHECK_THROWS_AS(cosine_distribution(h0, shifted, null_v, 20), std::invalid_argument);
}

TEST_CASE("interpolate and invert are exact affine inverses") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> d(0.0, 1.0);
    Vector h(12), vdir(12);
    for (double& x : h) x = d(rng);
    for (double& x : vdir) x = d(rng);
    SteeringVector v;
    v.direction = vdir;

    CHECK(interpolate(h, v, 0.0) == h);
    CHECK(invert(h, v, 0.0) == h);

    for (double lambda : {-1.0, -0.3, 0.7, 1.0, 2.5}) {
        Vector hat = interpolate(h, v, lambda);
        // margin linearity: <hat, v> = <h, v> + lambda ||v||^2
        CHECK(dot(hat, vdir) ==
              Catch::Approx(dot(h, vdir) + lambda * dot(vdir, vdir)).margin(1e-10));
        Vector back = invert(hat, v, lambda);
        for (std::size_t i = 0; i < h.size(); ++i)
            CHECK(back[i] == Catch::Approx(h[i]).margin(1e-12));
    }

    // orthogonal-complement preservation
    Vector w(12);
    for (double& x : w) x = d(rng);
    axpy(-dot(w, vdir) / dot(vdir, vdir), vdir, w);  // project out v
    Vector moved = interpolate(h, v, 1.7);
    CHECK(std::abs(dot(vsub(moved, h), w)) < 1e-12);
}

TEST_CASE("pairwise preference probability is the logistic of the margin along lambda") {
    ModelParams p = init_model(small_config(), 12);
    ForwardResult r = forward(p, {2, 7, 1});
    SteeringVector v = preference_vector(p, 5, 13);

    double prev = -1.0;
    for (double lambda = -1.0; lambda <= 1.0 + 1e-9; lambda += 0.25) {
        Vector h = interpolate(r.act.h, v, lambda);
        Vector probs = decode_from_state(p, h);
        double ratio = probs[5] / (probs[5] + probs[13]);
        double margin = dot(r.act.h, v.direction) + lambda * dot(v.direction, v.direction);
        CHECK(ratio == Catch::Approx(logistic(margin)).margin(1e-10));
        CHECK(ratio > prev);  // strictly increasing in lambda
        prev = ratio;
    }
}

TEST_CASE("hyperplane_side") {
    SteeringVector v;
    v.direction = {2.0, 0.0, -1.0};
    Vector h = {1.0, 5.0, 2.0};  // <h, v> = 0
    CHECK(hyperplane_side(h, v, 0.0) == 0.0);

    // large enough lambda always lands positive
    double delta_ref = 7.0;
    double vv = dot(v.direction, v.direction);
    double lambda = (delta_ref - dot(h, v.direction)) / vv + 0.5;
    CHECK(hyperplane_side(interpolate(h, v, lambda), v, delta_ref) > 0.0);

    // sign flips under v negation at delta_ref = 0
    Vector g = {0.4, 0.0, 1.0};
    SteeringVector nv;
    nv.direction = scaled(v.direction, -1.0);
    CHECK(hyperplane_side(g, v, 0.0) == Catch::Approx(-hyperplane_side(g, nv, 0.0)).margin(1e-15));
}

TEST_CASE("steering_field") {
    ModelParams p = init_model(small_config(), 20);
    ForwardResult r = forward(p, {3, 1, 6});
    SteeringVector v = preference_vector(p, 2, 10);
    double delta_ref = 0.3;

    auto samples = steering_field(r.act.h, v, delta_ref, 1.0, GridSpec{3, 0.5});
    CHECK(samples.size() == 27);
    Vector minus_v = scaled(v.direction, -1.0);
    for (const auto& s : samples)
        CHECK(cosine(s.gradient, minus_v) == Catch::Approx(1.0).margin(1e-12));

    // magnitude decreases as <h, v> grows (logistic saturation)
    std::sort(samples.begin(), samples.end(), [&](const FieldSample& a, const FieldSample& b) {
        return dot(a.grid_point, v.direction) < dot(b.grid_point, v.direction);
    });
    for (std::size_t i = 1; i < samples.size(); ++i) {
        double prev = norm(samples[i - 1].gradient), cur = norm(samples[i].gradient);
        CHECK(cur <= prev + 1e-12);
    }

    // single-point grid projects to the origin
    auto single = steering_field(r.act.h, v, delta_ref, 1.0, GridSpec{1, 0.5});
    REQUIRE(single.size() == 1);
    CHECK(single[0].projected_point == Vector{0.0, 0.0});
    CHECK(single[0].projected_gradient == Vector{0.0, 0.0});
}

TEST_CASE("run_sweep endpoints and validation") {
    ModelParams base = init_model(small_config(), 30);
    ModelParams aligned = base;
    // bias shift along the preference direction of the tuples below, the
    // regime where inversion provably walks the margin back down
    aligned.final_bias = scaled(preference_direction(base, 5, 13), 0.8);

    std::vector<PreferenceTuple> tuples;
    for (std::uint32_t i = 0; i < 4; ++i) tuples.push_back({{i, i + 1, i + 2}, 5, 13});

    std::vector<Vector> h0, h1;
    for (const auto& t : tuples) {
        h0.push_back(forward(base, t.x).act.h);
        h1.push_back(forward(aligned, t.x).act.h);
    }
    SteeringVector vstar = empirical_steering_vector(h0, h1);

    std::vector<double> lambdas = {-1.0, -0.5, 0.0, 0.5, 1.0};
    InterpolationSweep sweep = run_sweep(base, aligned, vstar, tuples, lambdas);

    // interpolation arm at lambda = 0 reproduces the base model
    const SweepRecord& i0 = sweep.interp[2];
    CHECK(i0.kl_base == Catch::Approx(0.0).margin(1e-12));
    // inversion arm at lambda = 0 reproduces the aligned model
    const SweepRecord& v0 = sweep.invert[2];
    CHECK(v0.kl_dpo == Catch::Approx(0.0).margin(1e-12));

    // bias-steered regime: inversion at lambda = 1 recovers the base exactly
    const SweepRecord& v1 = sweep.invert.back();
    CHECK(v1.kl_base == Catch::Approx(0.0).margin(1e-10));

    // inversion-arm match rate nonincreasing in lambda in this controlled regime
    for (std::size_t i = 1; i < sweep.invert.size(); ++i)
        CHECK(sweep.invert[i].match_rate <= sweep.invert[i - 1].match_rate + 1e-12);

    CHECK_THROWS_AS(run_sweep(base, aligned, vstar, {}, lambdas), std::invalid_argument);
    CHECK_THROWS_AS(run_sweep(base, aligned, vstar, tuples, {0.5, 0.5}), std::invalid_argument);
    CHECK(default_lambda_grid().size() == 21);
    CHECK(default_lambda_grid().front() == Catch::Approx(-1.0));
    CHECK(default_lambda_grid().back() == Catch::Approx(1.0).margin(1e-12));
}
