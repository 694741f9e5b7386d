#ifndef STEERLAB_STEERING_HPP
#define STEERLAB_STEERING_HPP

// Steering-vector extraction, cosine-concentration analysis, latent
// interpolation/inversion interventions, hyperplane tests, and gradient
// vector-field sampling.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "steerlab/dpo.hpp"
#include "steerlab/model.hpp"
#include "steerlab/numerics.hpp"

namespace steerlab {

enum class SteeringProvenance { pair, empirical };

struct SteeringVector {
    Vector direction;
    SteeringProvenance provenance = SteeringProvenance::pair;
    std::size_t sample_count = 0;  // for the empirical variant
};

// v = e_{y_w} - e_{y_l}, rows of the frozen output head.
inline SteeringVector preference_vector(const ModelParams& params, std::uint32_t y_w,
                                        std::uint32_t y_l) {
    if (y_w == y_l) throw std::invalid_argument("preference_vector: y_w == y_l");
    SteeringVector v;
    v.direction = preference_direction(params, y_w, y_l);
    v.provenance = SteeringProvenance::pair;
    return v;
}

// v* = mean of per-prompt hidden-state displacements between aligned and base.
inline SteeringVector empirical_steering_vector(const std::vector<Vector>& h0,
                                                const std::vector<Vector>& h_dpo) {
    if (h0.empty() || h0.size() != h_dpo.size())
        throw std::invalid_argument("empirical_steering_vector: list size mismatch");
    const std::size_t d = h0[0].size();
    Vector mean(d, 0.0);
    for (std::size_t i = 0; i < h0.size(); ++i) {
        if (h0[i].size() != d || h_dpo[i].size() != d)
            throw std::invalid_argument("empirical_steering_vector: dimension mismatch");
        for (std::size_t j = 0; j < d; ++j) mean[j] += h_dpo[i][j] - h0[i][j];
    }
    for (double& x : mean) x /= static_cast<double>(h0.size());
    SteeringVector v;
    v.direction = std::move(mean);
    v.provenance = SteeringProvenance::empirical;
    v.sample_count = h0.size();
    return v;
}

struct CosineHistogram {
    std::vector<double> bin_edges;  // bins + 1 edges over [-1, 1]
    std::vector<std::size_t> counts;
    std::vector<double> cosines;  // per-example, binned order
    std::size_t zero_shift_count = 0;
    double mean = 0.0;
    double median = 0.0;
    double stdev = 0.0;
};

// cos(theta_i) between each per-example shift and v*. Zero-norm shifts are
// counted separately, not binned.
inline CosineHistogram cosine_distribution(const std::vector<Vector>& h0,
                                           const std::vector<Vector>& h_dpo,
                                           const SteeringVector& vstar, std::size_t bins) {
    if (norm(vstar.direction) == 0.0)
        throw std::invalid_argument("cosine_distribution: zero steering vector");
    if (h0.size() != h_dpo.size())
        throw std::invalid_argument("cosine_distribution: list size mismatch");
    if (bins == 0) throw std::invalid_argument("cosine_distribution: zero bins");

    CosineHistogram hist;
    hist.bin_edges.resize(bins + 1);
    for (std::size_t b = 0; b <= bins; ++b)
        hist.bin_edges[b] = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins);
    hist.counts.assign(bins, 0);

    for (std::size_t i = 0; i < h0.size(); ++i) {
        Vector shift = vsub(h_dpo[i], h0[i]);
        if (norm(shift) == 0.0) {
            ++hist.zero_shift_count;
            continue;
        }
        double c = cosine(shift, vstar.direction);
        hist.cosines.push_back(c);
        auto b = static_cast<std::size_t>((c + 1.0) / 2.0 * static_cast<double>(bins));
        if (b >= bins) b = bins - 1;
        ++hist.counts[b];
    }
    if (!hist.cosines.empty()) {
        Vector sorted = hist.cosines;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        hist.median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        double sum = 0.0;
        for (double c : hist.cosines) sum += c;
        hist.mean = sum / static_cast<double>(n);
        double var = 0.0;
        for (double c : hist.cosines) var += (c - hist.mean) * (c - hist.mean);
        hist.stdev = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
    }
    return hist;
}

// h0 + lambda * v
inline Vector interpolate(const Vector& h0, const SteeringVector& v, double lambda) {
    if (h0.size() != v.direction.size()) throw std::invalid_argument("interpolate: dim mismatch");
    Vector out = h0;
    axpy(lambda, v.direction, out);
    return out;
}

// h_dpo - lambda * v; exact inverse of interpolate at the same lambda.
inline Vector invert(const Vector& h_dpo, const SteeringVector& v, double lambda) {
    if (h_dpo.size() != v.direction.size()) throw std::invalid_argument("invert: dim mismatch");
    Vector out = h_dpo;
    axpy(-lambda, v.direction, out);
    return out;
}

// <h, v> - delta_ref; positive means the preferred side of the hyperplane.
inline double hyperplane_side(const Vector& h, const SteeringVector& v, double delta_ref) {
    if (h.size() != v.direction.size())
        throw std::invalid_argument("hyperplane_side: dim mismatch");
    return dot(h, v.direction) - delta_ref;
}

struct SweepRecord {
    double lambda = 0.0;
    double margin = 0.0;     // mean <h, v_pair> over tuples
    double pref_prob = 0.0;  // mean P(y_w) / (P(y_w) + P(y_l)) from the decoded state
    double match_rate = 0.0;
    double kl_base = 0.0;  // mean KL(decoded || pi_base(.|x))
    double kl_dpo = 0.0;   // mean KL(decoded || pi_dpo(.|x))
};

struct InterpolationSweep {
    std::vector<double> lambdas;
    std::vector<SweepRecord> interp;  // from base states, h0 + lambda v
    std::vector<SweepRecord> invert;  // from aligned states, h_dpo - lambda v
};

inline std::vector<double> default_lambda_grid() {
    // 21 points over [-1, 1]
    std::vector<double> l(21);
    for (int i = 0; i < 21; ++i) l[i] = -1.0 + 0.1 * i;
    return l;
}

inline InterpolationSweep run_sweep(const ModelParams& base, const ModelParams& aligned,
                                    const SteeringVector& v,
                                    const std::vector<PreferenceTuple>& tuples,
                                    const std::vector<double>& lambdas) {
    if (tuples.empty()) throw std::invalid_argument("run_sweep: empty prompt list");
    if (lambdas.empty()) throw std::invalid_argument("run_sweep: empty lambda grid");
    for (std::size_t i = 1; i < lambdas.size(); ++i)
        if (lambdas[i] <= lambdas[i - 1])
            throw std::invalid_argument("run_sweep: lambdas must be strictly increasing");

    const std::size_t n = tuples.size();
    std::vector<Vector> h0(n), hdpo(n), vpair(n), base_logits(n), dpo_logits(n);
    for (std::size_t i = 0; i < n; ++i) {
        ForwardResult rb = forward(base, tuples[i].x);
        ForwardResult ra = forward(aligned, tuples[i].x);
        h0[i] = rb.act.h;
        hdpo[i] = ra.act.h;
        base_logits[i] = rb.act.logits;
        dpo_logits[i] = ra.act.logits;
        vpair[i] = preference_direction(base, tuples[i].y_w, tuples[i].y_l);
    }

    auto eval_arm = [&](double lambda, bool inversion) {
        SweepRecord rec;
        rec.lambda = lambda;
        for (std::size_t i = 0; i < n; ++i) {
            Vector h = inversion ? invert(hdpo[i], v, lambda) : interpolate(h0[i], v, lambda);
            double m = dot(h, vpair[i]);
            rec.margin += m;
            Vector p = decode_from_state(base, h);
            double pw = p[tuples[i].y_w], pl = p[tuples[i].y_l];
            rec.pref_prob += pw / (pw + pl);
            if (m > 0.0) rec.match_rate += 1.0;
            Vector logits = matvec(base.output_head(), h);
            rec.kl_base += kl_between_logits(logits, base_logits[i]);
            rec.kl_dpo += kl_between_logits(logits, dpo_logits[i]);
        }
        double dn = static_cast<double>(n);
        rec.margin /= dn;
        rec.pref_prob /= dn;
        rec.match_rate /= dn;
        rec.kl_base /= dn;
        rec.kl_dpo /= dn;
        return rec;
    };

    InterpolationSweep sweep;
    sweep.lambdas = lambdas;
    for (double lambda : lambdas) {
        sweep.interp.push_back(eval_arm(lambda, false));
        sweep.invert.push_back(eval_arm(lambda, true));
    }
    return sweep;
}

struct FieldSample {
    Vector grid_point;
    Vector gradient;
    Vector projected_point;     // dim 2
    Vector projected_gradient;  // dim 2
};

struct GridSpec {
    std::size_t points_per_axis = 5;  // per axis of the 3D lattice
    double extent = 1.0;              // half-width along each axis
};

namespace detail {

// Orthonormal triple whose first axis is v-hat.
inline std::vector<Vector> lattice_axes(const Vector& v) {
    const std::size_t d = v.size();
    std::vector<Vector> axes;
    double nv = norm(v);
    if (nv > 0.0)
        axes.push_back(scaled(v, 1.0 / nv));
    std::size_t canon = 0;
    while (axes.size() < 3 && canon < d) {
        Vector c(d, 0.0);
        c[canon++] = 1.0;
        for (const auto& a : axes) axpy(-dot(c, a), a, c);
        double n = norm(c);
        if (n > 1e-10) axes.push_back(scaled(c, 1.0 / n));
    }
    if (axes.size() < 3) throw std::invalid_argument("steering_field: dimension below 3");
    return axes;
}

}  // namespace detail

// DPO gradient sampled over a 3D lattice around h_center, projected (points
// and gradients) into the PCA basis of the sampled gradients.
inline std::vector<FieldSample> steering_field(const Vector& h_center, const SteeringVector& v,
                                               double delta_ref, double beta,
                                               const GridSpec& grid) {
    if (grid.points_per_axis == 0) throw std::invalid_argument("steering_field: empty grid");
    auto axes = detail::lattice_axes(v.direction);

    std::vector<FieldSample> samples;
    const std::size_t npa = grid.points_per_axis;
    auto offset = [&](std::size_t i) {
        if (npa == 1) return 0.0;
        return -grid.extent +
               2.0 * grid.extent * static_cast<double>(i) / static_cast<double>(npa - 1);
    };
    for (std::size_t a = 0; a < npa; ++a)
        for (std::size_t b = 0; b < npa; ++b)
            for (std::size_t c = 0; c < npa; ++c) {
                FieldSample s;
                s.grid_point = h_center;
                axpy(offset(a), axes[0], s.grid_point);
                axpy(offset(b), axes[1], s.grid_point);
                axpy(offset(c), axes[2], s.grid_point);
                s.gradient = dpo_grad_h(s.grid_point, v.direction, delta_ref, beta);
                samples.push_back(std::move(s));
            }

    if (samples.size() < 2) {
        samples[0].projected_point = {0.0, 0.0};
        samples[0].projected_gradient = {0.0, 0.0};
        return samples;
    }
    std::vector<Vector> grads;
    grads.reserve(samples.size());
    for (const auto& s : samples) grads.push_back(s.gradient);
    PcaResult pca = pca_project(grads, 2);
    Vector mean_point(h_center.size(), 0.0);
    for (const auto& s : samples) axpy(1.0, s.grid_point, mean_point);
    for (double& x : mean_point) x /= static_cast<double>(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        samples[i].projected_gradient = pca.projections[i];
        Vector centered = vsub(samples[i].grid_point, mean_point);
        samples[i].projected_point = {dot(centered, pca.basis.col(0)),
                                      dot(centered, pca.basis.col(1))};
    }
    return samples;
}

}  // namespace steerlab

#endif  // STEERLAB_STEERING_HPP
