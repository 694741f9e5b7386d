#ifndef STEERLAB_DPO_HPP
#define STEERLAB_DPO_HPP

// DPO objective, its closed-form hidden-state gradient, and the fine-tuning
// loop. The reference model is a frozen copy of the base model; plain gradient
// descent keeps single steps exactly analyzable.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/numerics.hpp"

namespace steerlab {

struct PreferenceTuple {
    std::vector<std::uint32_t> x;
    std::uint32_t y_w = 0;
    std::uint32_t y_l = 0;
};

struct DpoConfig {
    double beta = 1.0;
    double learning_rate = 0.05;
    std::size_t steps = 200;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    TrainScope trainable_scope = TrainScope::all_blocks;
};

struct Margin {
    double m = 0.0;          // <h(x), v>, the policy logit gap
    double delta_ref = 0.0;  // the same gap under the frozen reference model
};

struct TrainStepLog {
    std::size_t step = 0;
    double loss = 0.0;
    double mean_margin = 0.0;
    double match_rate = 0.0;  // fraction of tuples with pi(y_w|x) > pi(y_l|x)
};

using TrainLog = std::vector<TrainStepLog>;

class TrainingError : public std::runtime_error {
  public:
    TrainingError(const std::string& what, std::size_t step)
        : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
    std::size_t step() const { return step_; }

  private:
    std::size_t step_;
};

// -log sigma(beta * (m - delta_ref)), in softplus form.
inline double dpo_loss(double m, double delta_ref, double beta) {
    return softplus(-beta * (m - delta_ref));
}

// Closed form: dL/dh = -beta * sigma(-beta * (<h,v> - delta_ref)) * v.
// A zero preference vector yields a zero gradient.
inline Vector dpo_grad_h(const Vector& h, const Vector& v, double delta_ref, double beta) {
    if (h.size() != v.size()) throw std::invalid_argument("dpo_grad_h: dimension mismatch");
    double coeff = -beta * logistic(-beta * (dot(h, v) - delta_ref));
    return scaled(v, coeff);
}

inline Vector preference_direction(const ModelParams& params, std::uint32_t y_w,
                                   std::uint32_t y_l) {
    const Matrix& head = params.output_head();
    if (y_w >= head.rows || y_l >= head.rows)
        throw std::invalid_argument("preference_direction: token out of range");
    return vsub(head.row(y_w), head.row(y_l));
}

// Logit gap <h(x), v> for a tuple under the given parameters.
inline double margin_of(const ModelParams& params, const PreferenceTuple& t) {
    ForwardResult r = forward(params, t.x);
    return dot(r.act.h, preference_direction(params, t.y_w, t.y_l));
}

struct DpoTrainResult {
    ModelParams aligned;
    TrainLog log;
};

inline DpoTrainResult train_dpo(const ModelParams& base, const std::vector<PreferenceTuple>& data,
                                const DpoConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train_dpo: empty dataset");
    for (const auto& t : data)
        if (t.y_w == t.y_l) throw std::invalid_argument("train_dpo: y_w == y_l in tuple");

    // delta_ref per tuple from the frozen reference (= base) model
    std::vector<double> delta_ref(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) delta_ref[i] = margin_of(base, data[i]);

    DpoTrainResult res;
    res.aligned = base;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);

    // With every block frozen, h(x) is the cached pre-bias state plus the
    // current bias, and the bias gradient is exactly the hidden-state
    // gradient; steps then cost O(batch * d) instead of a forward+backward.
    std::vector<Vector> pre_bias, vpair_cache;
    const bool bias_only = cfg.trainable_scope == TrainScope::final_bias_only;
    if (bias_only) {
        for (const auto& t : data) {
            ForwardResult r = forward(base, t.x);
            pre_bias.push_back(vsub(r.act.h, base.final_bias));
            vpair_cache.push_back(preference_direction(base, t.y_w, t.y_l));
        }
    }

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> batch;
        if (cfg.batch_size >= data.size()) {
            batch.resize(data.size());
            for (std::size_t i = 0; i < data.size(); ++i) batch[i] = i;
        } else {
            batch.resize(cfg.batch_size);
            for (auto& i : batch) i = pick(rng);
        }

        Gradients total = Gradients::zeros_like(res.aligned);
        double loss_sum = 0.0, margin_sum = 0.0;
        std::size_t matches = 0;
        const double inv_batch = 1.0 / static_cast<double>(batch.size());
        for (std::size_t i : batch) {
            const PreferenceTuple& t = data[i];
            Vector h, v;
            ForwardResult r;
            if (bias_only) {
                h = vadd(pre_bias[i], res.aligned.final_bias);
                v = vpair_cache[i];
            } else {
                r = forward(res.aligned, t.x);
                h = r.act.h;
                v = preference_direction(res.aligned, t.y_w, t.y_l);
            }
            double m = dot(h, v);
            loss_sum += dpo_loss(m, delta_ref[i], cfg.beta);
            margin_sum += m;
            if (m > 0.0) ++matches;
            Vector gh = dpo_grad_h(h, v, delta_ref[i], cfg.beta);
            if (bias_only)
                axpy(inv_batch, gh, total.final_bias);
            else
                total.accumulate(backward_at_h(res.aligned, r.cache, gh), inv_batch);
        }
        double loss = loss_sum / static_cast<double>(batch.size());
        if (!std::isfinite(loss)) throw TrainingError("train_dpo: loss diverged", step);

        apply_update(res.aligned, total, cfg.learning_rate, cfg.trainable_scope);
        res.log.push_back({step, loss, margin_sum / static_cast<double>(batch.size()),
                           static_cast<double>(matches) / static_cast<double>(batch.size())});
    }
    return res;
}

// Mean over prompts of KL(pi_other(.|x) || pi_base(.|x)) on next-token
// distributions.
inline double kl_to_base(const ModelParams& base, const ModelParams& other,
                         const std::vector<std::vector<std::uint32_t>>& prompts) {
    if (!(base.config == other.config))
        throw std::invalid_argument("kl_to_base: config mismatch");
    if (prompts.empty()) throw std::invalid_argument("kl_to_base: empty prompt list");
    double total = 0.0;
    for (const auto& x : prompts) {
        Vector lp_other = log_softmax(forward(other, x).act.logits);
        Vector lp_base = log_softmax(forward(base, x).act.logits);
        double kl = 0.0;
        for (std::size_t y = 0; y < lp_other.size(); ++y)
            kl += std::exp(lp_other[y]) * (lp_other[y] - lp_base[y]);
        total += kl;
    }
    return total / static_cast<double>(prompts.size());
}

// KL between two explicit next-token distributions given as logits.
inline double kl_between_logits(const Vector& logits_p, const Vector& logits_q) {
    Vector lp = log_softmax(logits_p), lq = log_softmax(logits_q);
    double kl = 0.0;
    for (std::size_t y = 0; y < lp.size(); ++y) kl += std::exp(lp[y]) * (lp[y] - lq[y]);
    return kl;
}

}  // namespace steerlab

#endif  // STEERLAB_DPO_HPP
