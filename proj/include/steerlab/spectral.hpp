#ifndef STEERLAB_SPECTRAL_HPP
#define STEERLAB_SPECTRAL_HPP

// Update-matrix construction, layerwise SVD spectra, entropy profiles,
// rank-eps statistics, and rank-1 steering fits.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/numerics.hpp"
#include "steerlab/steering.hpp"

namespace steerlab {

// Column i = h_dpo[i] - h_base[i]; a d x N matrix of per-prompt displacements.
inline Matrix delta_matrix(const std::vector<Vector>& h_base, const std::vector<Vector>& h_dpo) {
    if (h_base.empty() || h_base.size() != h_dpo.size())
        throw std::invalid_argument("delta_matrix: list size mismatch");
    const std::size_t d = h_base[0].size();
    Matrix delta(d, h_base.size());
    for (std::size_t i = 0; i < h_base.size(); ++i) {
        if (h_base[i].size() != d || h_dpo[i].size() != d)
            throw std::invalid_argument("delta_matrix: dimension mismatch");
        for (std::size_t j = 0; j < d; ++j) delta(j, i) = h_dpo[i][j] - h_base[i][j];
    }
    return delta;
}

struct LayerSpectrum {
    std::size_t layer = 0;
    Vector sigma;             // top-k, descending
    Vector sigma_full;        // complete spectrum (for energy checks)
    double entropy = 0.0;
    std::size_t rank_eps = 0;
    double sigma_ratio = 0.0;  // sigma2 / sigma1
    bool degenerate = false;   // all-zero update matrix (no change at this layer)
};

struct Rank1Fit {
    std::vector<double> alphas;  // per-example coefficients <dh_i, v*> / ||v*||^2
    double residual = 0.0;       // relative Frobenius error of the alpha v*^T fit
    double u1_cos = 0.0;         // |cos(u1, v*)|
};

struct SpectrumReport {
    std::vector<LayerSpectrum> layers;  // 0 .. n_layers
    Rank1Fit final_fit;                 // fit of the final-layer delta against v*
    double u1_residual = 0.0;           // residual of the optimal rank-1 (u1) fit
};

// alpha_i = <dh_i, v*> / ||v*||^2; residual is the relative Frobenius error of
// reconstructing delta by alpha v*^T; u1_cos compares v* to the top left
// singular vector.
inline Rank1Fit rank1_fit(const Matrix& delta, const SteeringVector& vstar) {
    double nv = norm(vstar.direction);
    if (nv == 0.0) throw std::invalid_argument("rank1_fit: zero steering vector");
    if (delta.rows != vstar.direction.size())
        throw std::invalid_argument("rank1_fit: dimension mismatch");

    Rank1Fit fit;
    const std::size_t n = delta.cols;
    fit.alphas.resize(n);
    double err2 = 0.0, total2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Vector dh = delta.col(i);
        double alpha = dot(dh, vstar.direction) / (nv * nv);
        fit.alphas[i] = alpha;
        for (std::size_t j = 0; j < delta.rows; ++j) {
            double r = dh[j] - alpha * vstar.direction[j];
            err2 += r * r;
            total2 += dh[j] * dh[j];
        }
    }
    fit.residual = total2 > 0.0 ? std::sqrt(err2 / total2) : 0.0;

    if (frobenius_norm(delta) > 0.0) {
        SvdResult s = svd(delta);
        fit.u1_cos = std::abs(cosine(s.u.col(0), vstar.direction));
    }
    return fit;
}

inline LayerSpectrum analyze_layer(const Matrix& delta, std::size_t layer, std::size_t top_k) {
    LayerSpectrum spec;
    spec.layer = layer;
    if (frobenius_norm(delta) == 0.0) {
        spec.degenerate = true;
        spec.sigma.assign(top_k, 0.0);
        spec.sigma_full.assign(std::min(delta.rows, delta.cols), 0.0);
        return spec;
    }
    SvdResult s = svd(delta);
    spec.sigma_full = s.sigma;
    spec.sigma.assign(s.sigma.begin(),
                      s.sigma.begin() + static_cast<std::ptrdiff_t>(
                                            std::min<std::size_t>(top_k, s.sigma.size())));
    spec.entropy = spectral_entropy(s.sigma);
    spec.rank_eps = rank_eps(s.sigma, 0.1);
    spec.sigma_ratio = s.sigma.size() > 1 && s.sigma[0] > 0.0 ? s.sigma[1] / s.sigma[0] : 0.0;
    return spec;
}

// Last-position activations of every layer over a prompt set, for both models;
// per-layer delta matrices are decomposed and the final layer additionally gets
// a rank-1 fit against the empirical steering vector.
inline SpectrumReport layerwise_spectra(const ModelParams& base, const ModelParams& dpo,
                                        const std::vector<std::vector<std::uint32_t>>& prompts,
                                        std::size_t top_k = 5) {
    if (!(base.config == dpo.config))
        throw std::invalid_argument("layerwise_spectra: config mismatch");
    if (prompts.empty()) throw std::invalid_argument("layerwise_spectra: empty prompt list");
    if (top_k < 1) throw std::invalid_argument("layerwise_spectra: top_k < 1");

    const std::size_t n_layers = base.config.n_layers;
    std::vector<std::vector<Vector>> acts_base(n_layers + 1), acts_dpo(n_layers + 1);
    for (const auto& x : prompts) {
        ForwardResult rb = forward(base, x);
        ForwardResult rd = forward(dpo, x);
        const std::size_t last = x.size() - 1;
        for (std::size_t l = 0; l <= n_layers; ++l) {
            acts_base[l].push_back(rb.act.hidden[l].row(last));
            acts_dpo[l].push_back(rd.act.hidden[l].row(last));
        }
    }

    SpectrumReport report;
    Matrix final_delta;
    for (std::size_t l = 0; l <= n_layers; ++l) {
        Matrix delta = delta_matrix(acts_base[l], acts_dpo[l]);
        report.layers.push_back(analyze_layer(delta, l, top_k));
        if (l == n_layers) final_delta = std::move(delta);
    }

    if (frobenius_norm(final_delta) > 0.0) {
        SteeringVector vstar =
            empirical_steering_vector(acts_base[n_layers], acts_dpo[n_layers]);
        if (norm(vstar.direction) > 0.0) {
            report.final_fit = rank1_fit(final_delta, vstar);
            // Eckart-Young reference: residual of the optimal rank-1 fit via u1
            SvdResult s = svd(final_delta);
            double energy = 0.0;
            for (double sv : s.sigma) energy += sv * sv;
            double tail = energy - s.sigma[0] * s.sigma[0];
            report.u1_residual = energy > 0.0 ? std::sqrt(std::max(0.0, tail) / energy) : 0.0;
        }
    }
    return report;
}

inline std::vector<std::pair<std::size_t, double>> entropy_profile(const SpectrumReport& report) {
    std::vector<std::pair<std::size_t, double>> profile;
    for (const auto& l : report.layers) profile.emplace_back(l.layer, l.entropy);
    return profile;
}

}  // namespace steerlab

#endif  // STEERLAB_SPECTRAL_HPP
