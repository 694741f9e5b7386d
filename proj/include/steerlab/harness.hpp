#ifndef STEERLAB_HARNESS_HPP
#define STEERLAB_HARNESS_HPP

// Synthetic preference-data generation, base-model pretraining, experiment
// configuration, and the end-to-end pipeline that emits every report file.
// Stage outputs are files, so each diagnostic can be re-run independently.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/checkpoint.hpp"
#include "steerlab/dpo.hpp"
#include "steerlab/io.hpp"
#include "steerlab/model.hpp"
#include "steerlab/spectral.hpp"
#include "steerlab/steering.hpp"

namespace steerlab {

// ---------------------------------------------------------------------------
// Dataset generation

struct DatasetSpec {
    std::size_t vocab_size = 128;
    std::size_t n_prompts = 256;
    std::size_t prompt_len = 8;
    std::vector<std::uint32_t> preferred_class;     // default 96..111
    std::vector<std::uint32_t> dispreferred_class;  // default 112..127
    std::uint64_t seed = 1;

    static DatasetSpec defaults() {
        DatasetSpec s;
        for (std::uint32_t t = 96; t < 112; ++t) s.preferred_class.push_back(t);
        for (std::uint32_t t = 112; t < 128; ++t) s.dispreferred_class.push_back(t);
        return s;
    }

    void validate() const {
        if (preferred_class.empty() || dispreferred_class.empty())
            throw std::invalid_argument("DatasetSpec: empty preference class");
        std::set<std::uint32_t> pref(preferred_class.begin(), preferred_class.end());
        for (auto t : dispreferred_class)
            if (pref.count(t)) throw std::invalid_argument("DatasetSpec: classes overlap");
        for (auto t : preferred_class)
            if (t >= vocab_size) throw std::invalid_argument("DatasetSpec: class token >= vocab");
        for (auto t : dispreferred_class)
            if (t >= vocab_size) throw std::invalid_argument("DatasetSpec: class token >= vocab");
        if (n_prompts < 5) throw std::invalid_argument("DatasetSpec: need at least 5 prompts");
        if (prompt_len < 1) throw std::invalid_argument("DatasetSpec: prompt_len < 1");
    }
};

struct Dataset {
    std::vector<PreferenceTuple> train;
    std::vector<PreferenceTuple> heldout;
};

namespace detail {

// Non-class tokens, i.e. the grammar alphabet.
inline std::vector<std::uint32_t> grammar_alphabet(const DatasetSpec& spec) {
    std::set<std::uint32_t> cls(spec.preferred_class.begin(), spec.preferred_class.end());
    cls.insert(spec.dispreferred_class.begin(), spec.dispreferred_class.end());
    std::vector<std::uint32_t> alpha;
    for (std::uint32_t t = 0; t < spec.vocab_size; ++t)
        if (!cls.count(t)) alpha.push_back(t);
    if (alpha.size() < 2)
        throw std::invalid_argument("DatasetSpec: classes leave no grammar tokens");
    return alpha;
}

}  // namespace detail

// Prompts follow a seeded first-order stochastic grammar over non-class
// tokens: each token moves to a fixed successor with probability 0.8 and to a
// uniform alternative otherwise. Winners/losers are drawn round-robin from the
// preference classes (balanced counts), shuffled per seed. 80/20 split.
inline Dataset gen_dataset(const DatasetSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    auto alpha = detail::grammar_alphabet(spec);
    std::uniform_int_distribution<std::size_t> start(0, alpha.size() - 1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    auto winners = [&](const std::vector<std::uint32_t>& cls) {
        std::vector<std::uint32_t> order = cls;
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<std::uint32_t> out(spec.n_prompts);
        for (std::size_t i = 0; i < spec.n_prompts; ++i) out[i] = order[i % order.size()];
        std::shuffle(out.begin(), out.end(), rng);
        return out;
    };
    std::vector<std::uint32_t> yw = winners(spec.preferred_class);
    std::vector<std::uint32_t> yl = winners(spec.dispreferred_class);

    std::vector<PreferenceTuple> all(spec.n_prompts);
    for (std::size_t i = 0; i < spec.n_prompts; ++i) {
        PreferenceTuple& t = all[i];
        std::size_t idx = start(rng);
        t.x.push_back(alpha[idx]);
        for (std::size_t p = 1; p < spec.prompt_len; ++p) {
            if (coin(rng) < 0.8)
                idx = (idx * 7 + 3) % alpha.size();
            else
                idx = start(rng);
            t.x.push_back(alpha[idx]);
        }
        t.y_w = yw[i];
        t.y_l = yl[i];
    }

    Dataset ds;
    std::size_t n_train = spec.n_prompts - spec.n_prompts / 5;
    ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.heldout.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
    return ds;
}

inline std::string dataset_to_csv(const std::vector<PreferenceTuple>& tuples) {
    CsvWriter csv({"prompt", "y_w", "y_l"});
    for (const auto& t : tuples) {
        std::ostringstream prompt;
        for (std::size_t i = 0; i < t.x.size(); ++i) {
            if (i) prompt << ' ';
            prompt << t.x[i];
        }
        csv.row({prompt.str(), std::to_string(t.y_w), std::to_string(t.y_l)});
    }
    return csv.str();
}

inline std::vector<PreferenceTuple> dataset_from_csv(const std::string& content) {
    std::vector<PreferenceTuple> tuples;
    std::istringstream is(content);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        PreferenceTuple t;
        std::size_t c1 = line.find(','), c2 = line.rfind(',');
        if (c1 == std::string::npos || c2 == c1)
            throw std::runtime_error("dataset csv: malformed line");
        std::istringstream ps(line.substr(0, c1));
        std::uint32_t tok;
        while (ps >> tok) t.x.push_back(tok);
        t.y_w = static_cast<std::uint32_t>(std::stoul(line.substr(c1 + 1, c2 - c1 - 1)));
        t.y_l = static_cast<std::uint32_t>(std::stoul(line.substr(c2 + 1)));
        tuples.push_back(std::move(t));
    }
    return tuples;
}

// ---------------------------------------------------------------------------
// Pretraining on the synthetic grammar

struct PretrainConfig {
    double learning_rate = 0.2;
    std::size_t steps = 250;
    std::size_t batch_size = 16;
    std::uint64_t seed = 2;
};

struct PretrainLog {
    double initial_ce = 0.0;
    double final_ce = 0.0;
    double heldout_ppl_initial = 0.0;
    double heldout_ppl_final = 0.0;
};

// Mean next-token cross-entropy over all predictable positions.
inline double sequence_cross_entropy(const ModelParams& params,
                                     const std::vector<std::vector<std::uint32_t>>& prompts) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& x : prompts) {
        if (x.size() < 2) continue;
        ForwardResult r = forward(params, x);
        for (std::size_t t = 0; t + 1 < x.size(); ++t) {
            Vector lp = log_softmax(position_logits(params, r.act, t));
            total -= lp[x[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("sequence_cross_entropy: no predictable tokens");
    return total / static_cast<double>(count);
}

struct PretrainResult {
    ModelParams params;
    PretrainLog log;
};

// Next-token training on the grammar corpus; blocks only, embeddings frozen by
// construction. The cross-entropy must come down by >= 30% from init.
inline PretrainResult pretrain_base(const ModelParams& init,
                                    const std::vector<std::vector<std::uint32_t>>& corpus,
                                    const std::vector<std::vector<std::uint32_t>>& heldout,
                                    const PretrainConfig& cfg) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_base: empty corpus");
    PretrainResult res;
    res.params = init;
    res.log.initial_ce = sequence_cross_entropy(init, corpus);
    res.log.heldout_ppl_initial =
        heldout.empty() ? 0.0 : std::exp(sequence_cross_entropy(init, heldout));
    if (cfg.steps == 0) {
        res.log.final_ce = res.log.initial_ce;
        res.log.heldout_ppl_final = res.log.heldout_ppl_initial;
        return res;
    }

    const Matrix& head = res.params.output_head();
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Gradients total = Gradients::zeros_like(res.params);
        double loss_sum = 0.0;
        std::size_t positions = 0;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto& x = corpus[pick(rng)];
            if (x.size() < 2) continue;
            ForwardResult r = forward(res.params, x);
            Matrix grad_h(x.size(), res.params.config.d_model);
            for (std::size_t t = 0; t + 1 < x.size(); ++t) {
                Vector logits = position_logits(res.params, r.act, t);
                Vector p = softmax(logits);
                loss_sum -= log_softmax(logits)[x[t + 1]];
                p[x[t + 1]] -= 1.0;
                Vector gh = matvec_t(head, p);
                for (std::size_t j = 0; j < gh.size(); ++j) grad_h(t, j) = gh[j];
                ++positions;
            }
            total.accumulate(backward(res.params, r.cache, grad_h), 1.0);
        }
        if (positions == 0) continue;
        double inv = 1.0 / static_cast<double>(positions);
        Gradients scaledg = Gradients::zeros_like(res.params);
        scaledg.accumulate(total, inv);
        double loss = loss_sum * inv;
        if (!std::isfinite(loss)) throw TrainingError("pretrain_base: loss diverged", step);
        apply_update(res.params, scaledg, cfg.learning_rate, TrainScope::all_blocks);
    }

    res.log.final_ce = sequence_cross_entropy(res.params, corpus);
    res.log.heldout_ppl_final =
        heldout.empty() ? 0.0 : std::exp(sequence_cross_entropy(res.params, heldout));
    if (!std::isfinite(res.log.final_ce))
        throw TrainingError("pretrain_base: non-finite final loss", cfg.steps);
    return res;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
    ModelConfig model;
    DpoConfig dpo;
    PretrainConfig pretrain;
    DatasetSpec dataset = DatasetSpec::defaults();
    std::vector<double> lambdas = default_lambda_grid();
    std::size_t top_k = 5;
    std::string out_dir = "out";

    void validate() const {
        model.validate();
        dataset.validate();
        if (dataset.vocab_size != model.vocab_size)
            throw std::invalid_argument("ExperimentConfig: vocab sizes differ");
        if (dataset.prompt_len > model.max_seq_len)
            throw std::invalid_argument("ExperimentConfig: prompt_len exceeds max_seq_len");
        if (lambdas.empty()) throw std::invalid_argument("ExperimentConfig: empty lambda grid");
        if (top_k < 1) throw std::invalid_argument("ExperimentConfig: top_k < 1");
    }
};

inline std::string scope_name(TrainScope s) {
    switch (s) {
        case TrainScope::all_blocks: return "all_blocks";
        case TrainScope::last_block: return "last_block";
        case TrainScope::final_bias_only: return "final_bias_only";
    }
    throw std::logic_error("scope_name: bad enum");
}

inline TrainScope scope_from_name(const std::string& s) {
    if (s == "all_blocks") return TrainScope::all_blocks;
    if (s == "last_block") return TrainScope::last_block;
    if (s == "final_bias_only") return TrainScope::final_bias_only;
    throw std::invalid_argument("unknown trainable_scope: " + s);
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["model"] = {{"vocab_size", cfg.model.vocab_size},
                  {"d_model", cfg.model.d_model},
                  {"n_layers", cfg.model.n_layers},
                  {"n_heads", cfg.model.n_heads},
                  {"max_seq_len", cfg.model.max_seq_len},
                  {"tie_embeddings", cfg.model.tie_embeddings}};
    j["dpo"] = {{"beta", cfg.dpo.beta},
                {"learning_rate", cfg.dpo.learning_rate},
                {"steps", cfg.dpo.steps},
                {"batch_size", cfg.dpo.batch_size},
                {"seed", cfg.dpo.seed},
                {"trainable_scope", scope_name(cfg.dpo.trainable_scope)}};
    j["pretrain"] = {{"learning_rate", cfg.pretrain.learning_rate},
                     {"steps", cfg.pretrain.steps},
                     {"batch_size", cfg.pretrain.batch_size},
                     {"seed", cfg.pretrain.seed}};
    j["dataset"] = {{"vocab_size", cfg.dataset.vocab_size},
                    {"n_prompts", cfg.dataset.n_prompts},
                    {"prompt_len", cfg.dataset.prompt_len},
                    {"preferred_class", cfg.dataset.preferred_class},
                    {"dispreferred_class", cfg.dataset.dispreferred_class},
                    {"seed", cfg.dataset.seed}};
    j["lambdas"] = cfg.lambdas;
    j["top_k"] = cfg.top_k;
    // out_dir is a runtime location, not an experiment parameter; leaving it
    // out keeps bundles byte-identical across output directories
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfg.model.vocab_size = m.value("vocab_size", cfg.model.vocab_size);
        cfg.model.d_model = m.value("d_model", cfg.model.d_model);
        cfg.model.n_layers = m.value("n_layers", cfg.model.n_layers);
        cfg.model.n_heads = m.value("n_heads", cfg.model.n_heads);
        cfg.model.max_seq_len = m.value("max_seq_len", cfg.model.max_seq_len);
        cfg.model.tie_embeddings = m.value("tie_embeddings", cfg.model.tie_embeddings);
    }
    if (j.contains("dpo")) {
        const auto& d = j.at("dpo");
        cfg.dpo.beta = d.value("beta", cfg.dpo.beta);
        cfg.dpo.learning_rate = d.value("learning_rate", cfg.dpo.learning_rate);
        cfg.dpo.steps = d.value("steps", cfg.dpo.steps);
        cfg.dpo.batch_size = d.value("batch_size", cfg.dpo.batch_size);
        cfg.dpo.seed = d.value("seed", cfg.dpo.seed);
        if (d.contains("trainable_scope"))
            cfg.dpo.trainable_scope = scope_from_name(d.at("trainable_scope"));
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        cfg.pretrain.learning_rate = p.value("learning_rate", cfg.pretrain.learning_rate);
        cfg.pretrain.steps = p.value("steps", cfg.pretrain.steps);
        cfg.pretrain.batch_size = p.value("batch_size", cfg.pretrain.batch_size);
        cfg.pretrain.seed = p.value("seed", cfg.pretrain.seed);
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        cfg.dataset.vocab_size = d.value("vocab_size", cfg.dataset.vocab_size);
        cfg.dataset.n_prompts = d.value("n_prompts", cfg.dataset.n_prompts);
        cfg.dataset.prompt_len = d.value("prompt_len", cfg.dataset.prompt_len);
        if (d.contains("preferred_class"))
            cfg.dataset.preferred_class = d.at("preferred_class").get<std::vector<std::uint32_t>>();
        if (d.contains("dispreferred_class"))
            cfg.dataset.dispreferred_class =
                d.at("dispreferred_class").get<std::vector<std::uint32_t>>();
        cfg.dataset.seed = d.value("seed", cfg.dataset.seed);
    }
    if (j.contains("lambdas")) cfg.lambdas = j.at("lambdas").get<std::vector<double>>();
    cfg.top_k = j.value("top_k", cfg.top_k);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Pipeline stages; each stage reads its inputs from the output directory and
// writes its products there, so diagnostics can be re-run independently.

class StageError : public std::runtime_error {
  public:
    StageError(const std::string& stage, const std::string& what, bool numerical = false)
        : std::runtime_error("stage '" + stage + "' failed: " + what),
          stage_(stage),
          numerical_(numerical) {}
    const std::string& stage() const { return stage_; }
    bool numerical() const { return numerical_; }  // training/numerics rather than input

  private:
    std::string stage_;
    bool numerical_;
};

namespace paths {
using std::filesystem::path;
inline path config(const path& out) { return out / "config.json"; }
inline path train_csv(const path& out) { return out / "dataset_train.csv"; }
inline path heldout_csv(const path& out) { return out / "dataset_heldout.csv"; }
inline path base_ckpt(const path& out) { return out / "base.ckpt"; }
inline path dpo_ckpt(const path& out) { return out / "dpo.ckpt"; }
inline path pretrain_log(const path& out) { return out / "pretrain_log.json"; }
inline path train_log(const path& out) { return out / "train_log.csv"; }
inline path activations(const path& out) { return out / "activations.tensors"; }
inline path cosine_hist(const path& out) { return out / "cosine_hist.csv"; }
inline path sweep(const path& out) { return out / "sweep.csv"; }
inline path field(const path& out) { return out / "field.csv"; }
inline path spectra(const path& out) { return out / "spectra.json"; }
inline path heatmap(const path& out) { return out / "heatmap.csv"; }
inline path summary(const path& out) { return out / "summary.json"; }
inline path manifest(const path& out) { return out / "manifest.json"; }
}  // namespace paths

// Final-layer hidden states for both models over a prompt set.
struct ExtractedStates {
    std::vector<Vector> h_base;
    std::vector<Vector> h_dpo;
};

inline ExtractedStates extract_states(const ModelParams& base, const ModelParams& dpo,
                                      const std::vector<PreferenceTuple>& tuples) {
    ExtractedStates s;
    for (const auto& t : tuples) {
        s.h_base.push_back(forward(base, t.x).act.h);
        s.h_dpo.push_back(forward(dpo, t.x).act.h);
    }
    return s;
}

inline std::vector<std::vector<std::uint32_t>> prompts_of(
    const std::vector<PreferenceTuple>& tuples) {
    std::vector<std::vector<std::uint32_t>> out;
    out.reserve(tuples.size());
    for (const auto& t : tuples) out.push_back(t.x);
    return out;
}

inline std::string train_log_to_csv(const TrainLog& log) {
    CsvWriter csv({"step", "loss", "mean_margin", "match_rate"});
    for (const auto& s : log)
        csv.row({std::to_string(s.step), format_double(s.loss), format_double(s.mean_margin),
                 format_double(s.match_rate)});
    return csv.str();
}

inline std::string cosine_hist_to_csv(const CosineHistogram& h) {
    CsvWriter csv({"bin_lo", "bin_hi", "count"});
    for (std::size_t b = 0; b < h.counts.size(); ++b)
        csv.row({format_double(h.bin_edges[b]), format_double(h.bin_edges[b + 1]),
                 std::to_string(h.counts[b])});
    return csv.str();
}

inline std::string sweep_to_csv(const InterpolationSweep& sweep) {
    CsvWriter csv({"lambda", "arm", "margin", "pref_prob", "match_rate", "kl_base", "kl_dpo"});
    auto emit = [&](const std::vector<SweepRecord>& arm, const std::string& name) {
        for (const auto& r : arm)
            csv.row({format_double(r.lambda), name, format_double(r.margin),
                     format_double(r.pref_prob), format_double(r.match_rate),
                     format_double(r.kl_base), format_double(r.kl_dpo)});
    };
    emit(sweep.interp, "interp");
    emit(sweep.invert, "invert");
    return csv.str();
}

inline std::string field_to_csv(const std::vector<FieldSample>& samples) {
    CsvWriter csv({"x0", "x1", "g0", "g1"});
    for (const auto& s : samples)
        csv.row({format_double(s.projected_point[0]), format_double(s.projected_point[1]),
                 format_double(s.projected_gradient[0]), format_double(s.projected_gradient[1])});
    return csv.str();
}

inline nlohmann::ordered_json spectra_to_json(const SpectrumReport& report) {
    nlohmann::ordered_json j;
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : report.layers) {
        nlohmann::ordered_json lj;
        lj["layer"] = l.layer;
        lj["sigma"] = l.sigma;
        lj["entropy"] = l.entropy;
        lj["rank_eps"] = l.rank_eps;
        lj["sigma_ratio"] = l.sigma_ratio;
        lj["degenerate"] = l.degenerate;
        j["layers"].push_back(lj);
    }
    j["final"] = {{"u1_vstar_cosine", report.final_fit.u1_cos},
                  {"rank1_residual", report.final_fit.residual},
                  {"u1_residual", report.u1_residual},
                  {"alphas", report.final_fit.alphas}};
    return j;
}

// Raw and per-layer-normalized singular values for the heatmap.
inline std::string heatmap_to_csv(const SpectrumReport& report) {
    CsvWriter csv({"layer", "mode_index", "sigma", "sigma_norm"});
    for (const auto& l : report.layers) {
        double s1 = l.sigma.empty() ? 0.0 : l.sigma[0];
        for (std::size_t m = 0; m < l.sigma.size(); ++m)
            csv.row({std::to_string(l.layer), std::to_string(m + 1), format_double(l.sigma[m]),
                     format_double(s1 > 0.0 ? l.sigma[m] / s1 : 0.0)});
    }
    return csv.str();
}

namespace detail {

inline std::filesystem::path out_of(const ExperimentConfig& cfg) {
    std::filesystem::path out(cfg.out_dir);
    std::filesystem::create_directories(out);
    return out;
}

inline Dataset load_dataset(const std::filesystem::path& out) {
    Dataset ds;
    ds.train = dataset_from_csv(read_text_file(paths::train_csv(out)));
    ds.heldout = dataset_from_csv(read_text_file(paths::heldout_csv(out)));
    return ds;
}

}  // namespace detail

inline void stage_gen_data(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    write_text_file(paths::config(out), config_to_json(cfg).dump(2) + "\n");
    Dataset ds = gen_dataset(cfg.dataset);
    write_text_file(paths::train_csv(out), dataset_to_csv(ds.train));
    write_text_file(paths::heldout_csv(out), dataset_to_csv(ds.heldout));
}

inline void stage_pretrain(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams init = init_model(cfg.model, cfg.pretrain.seed);
    PretrainResult pre =
        pretrain_base(init, prompts_of(ds.train), prompts_of(ds.heldout), cfg.pretrain);
    save_checkpoint(paths::base_ckpt(out).string(), pre.params);
    nlohmann::ordered_json j = {{"initial_ce", pre.log.initial_ce},
                                {"final_ce", pre.log.final_ce},
                                {"heldout_ppl_initial", pre.log.heldout_ppl_initial},
                                {"heldout_ppl_final", pre.log.heldout_ppl_final}};
    write_text_file(paths::pretrain_log(out), j.dump(2) + "\n");
}

inline void stage_dpo_train(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams base = load_checkpoint(paths::base_ckpt(out).string());
    DpoTrainResult r = train_dpo(base, ds.train, cfg.dpo);
    save_checkpoint(paths::dpo_ckpt(out).string(), r.aligned);
    write_text_file(paths::train_log(out), train_log_to_csv(r.log));
}

// Per-layer last-position activations for both models over the held-out
// prompts, in the checkpoint tensor container.
inline void stage_extract(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams base = load_checkpoint(paths::base_ckpt(out).string());
    ModelParams aligned = load_checkpoint(paths::dpo_ckpt(out).string());

    std::vector<NamedTensor> tensors;
    auto dump = [&](const ModelParams& p, const std::string& prefix) {
        std::vector<std::vector<Vector>> acts(cfg.model.n_layers + 1);
        for (const auto& t : ds.heldout) {
            ForwardResult r = forward(p, t.x);
            for (std::size_t l = 0; l <= cfg.model.n_layers; ++l)
                acts[l].push_back(r.act.hidden[l].row(t.x.size() - 1));
        }
        for (std::size_t l = 0; l <= cfg.model.n_layers; ++l) {
            NamedTensor nt;
            nt.name = prefix + ".layer" + std::to_string(l);
            nt.shape = {acts[l].size(), cfg.model.d_model};
            for (const auto& v : acts[l]) nt.data.insert(nt.data.end(), v.begin(), v.end());
            tensors.push_back(std::move(nt));
        }
    };
    dump(base, "base");
    dump(aligned, "dpo");
    write_tensor_file(paths::activations(out).string(), cfg.model, tensors);
}

// v* is computed on the training prompts, evaluated on held-out prompts.
inline SteeringVector vstar_of(const ModelParams& base, const ModelParams& aligned,
                               const Dataset& ds) {
    ExtractedStates train_states = extract_states(base, aligned, ds.train);
    return empirical_steering_vector(train_states.h_base, train_states.h_dpo);
}

inline void stage_cosine(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams base = load_checkpoint(paths::base_ckpt(out).string());
    ModelParams aligned = load_checkpoint(paths::dpo_ckpt(out).string());
    SteeringVector vstar = vstar_of(base, aligned, ds);
    if (norm(vstar.direction) == 0.0)
        throw std::runtime_error("stage_cosine: models are identical, no steering direction");
    ExtractedStates held = extract_states(base, aligned, ds.heldout);
    CosineHistogram hist = cosine_distribution(held.h_base, held.h_dpo, vstar, 40);
    write_text_file(paths::cosine_hist(out), cosine_hist_to_csv(hist));
}

inline void stage_steer(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams base = load_checkpoint(paths::base_ckpt(out).string());
    ModelParams aligned = load_checkpoint(paths::dpo_ckpt(out).string());
    SteeringVector vstar = vstar_of(base, aligned, ds);
    if (norm(vstar.direction) == 0.0)
        throw std::runtime_error("stage_steer: models are identical, no steering direction");
    InterpolationSweep sweep = run_sweep(base, aligned, vstar, ds.heldout, cfg.lambdas);
    write_text_file(paths::sweep(out), sweep_to_csv(sweep));
}

inline void stage_field(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams base = load_checkpoint(paths::base_ckpt(out).string());
    const PreferenceTuple& t0 = ds.train.front();
    Vector h_center = forward(base, t0.x).act.h;
    SteeringVector vpair = preference_vector(base, t0.y_w, t0.y_l);
    double delta_ref = margin_of(base, t0);
    auto samples = steering_field(h_center, vpair, delta_ref, cfg.dpo.beta, GridSpec{5, 1.0});
    write_text_file(paths::field(out), field_to_csv(samples));
}

inline void stage_spectra(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams base = load_checkpoint(paths::base_ckpt(out).string());
    ModelParams aligned = load_checkpoint(paths::dpo_ckpt(out).string());
    SpectrumReport report = layerwise_spectra(base, aligned, prompts_of(ds.heldout), cfg.top_k);
    write_text_file(paths::spectra(out), spectra_to_json(report).dump(2) + "\n");
    write_text_file(paths::heatmap(out), heatmap_to_csv(report));
}

// Assembles summary.json (every acceptance metric) from the stage outputs.
inline nlohmann::ordered_json stage_report(const ExperimentConfig& cfg) {
    auto out = detail::out_of(cfg);
    Dataset ds = detail::load_dataset(out);
    ModelParams base = load_checkpoint(paths::base_ckpt(out).string());
    ModelParams aligned = load_checkpoint(paths::dpo_ckpt(out).string());
    nlohmann::ordered_json summary;

    summary["pretrain"] = nlohmann::json::parse(read_text_file(paths::pretrain_log(out)));
    {
        double init_ce = summary["pretrain"]["initial_ce"].get<double>();
        double final_ce = summary["pretrain"]["final_ce"].get<double>();
        summary["pretrain"]["ce_drop_fraction"] =
            init_ce > 0.0 ? 1.0 - final_ce / init_ce : 0.0;
    }

    double held_match = 0.0;
    for (const auto& t : ds.heldout)
        if (margin_of(aligned, t) > 0.0) held_match += 1.0;
    held_match /= static_cast<double>(ds.heldout.size());
    summary["dpo"] = {{"heldout_match_rate", held_match},
                      {"trainable_scope", scope_name(cfg.dpo.trainable_scope)}};

    SteeringVector vstar = vstar_of(base, aligned, ds);
    bool have_shift = norm(vstar.direction) > 0.0;
    if (have_shift) {
        ExtractedStates held = extract_states(base, aligned, ds.heldout);
        CosineHistogram hist = cosine_distribution(held.h_base, held.h_dpo, vstar, 40);
        double min_cos = 1.0;
        for (double c : hist.cosines) min_cos = std::min(min_cos, c);
        summary["cosine"] = {{"mean", hist.mean},
                             {"median", hist.median},
                             {"stdev", hist.stdev},
                             {"min", hist.cosines.empty() ? 0.0 : min_cos},
                             {"zero_shift_count", hist.zero_shift_count},
                             {"samples", hist.cosines.size()}};

        InterpolationSweep sweep = run_sweep(base, aligned, vstar, ds.heldout, cfg.lambdas);
        bool interp_monotone = true;
        for (std::size_t i = 1; i < sweep.interp.size(); ++i)
            if (sweep.interp[i].pref_prob <= sweep.interp[i - 1].pref_prob)
                interp_monotone = false;
        bool invert_match_nonincreasing = true;
        for (std::size_t i = 1; i < sweep.invert.size(); ++i)
            if (sweep.invert[i].match_rate > sweep.invert[i - 1].match_rate + 1e-12)
                invert_match_nonincreasing = false;
        double match_at_1 = 0.0, kl_undo_at_1 = 0.0;
        for (const auto& r : sweep.interp)
            if (std::abs(r.lambda - 1.0) < 1e-12) match_at_1 = r.match_rate;
        for (const auto& r : sweep.invert)
            if (std::abs(r.lambda - 1.0) < 1e-12) kl_undo_at_1 = r.kl_base;
        double kl_dpo_base = kl_to_base(base, aligned, prompts_of(ds.heldout));
        summary["sweep"] = {{"interp_pref_prob_strictly_increasing", interp_monotone},
                            {"invert_match_rate_nonincreasing", invert_match_nonincreasing},
                            {"interp_match_rate_at_lambda_1", match_at_1},
                            {"kl_undo_base_at_lambda_1", kl_undo_at_1},
                            {"kl_dpo_base", kl_dpo_base},
                            {"kl_reduction",
                             kl_dpo_base > 0.0 ? 1.0 - kl_undo_at_1 / kl_dpo_base : 0.0}};
    }

    {
        const PreferenceTuple& t0 = ds.train.front();
        Vector h_center = forward(base, t0.x).act.h;
        SteeringVector vpair = preference_vector(base, t0.y_w, t0.y_l);
        double delta_ref = margin_of(base, t0);
        auto samples =
            steering_field(h_center, vpair, delta_ref, cfg.dpo.beta, GridSpec{5, 1.0});
        double min_anti = 1.0;
        for (const auto& s : samples)
            min_anti = std::min(min_anti, cosine(s.gradient, scaled(vpair.direction, -1.0)));
        summary["field"] = {{"min_cosine_grad_minus_v", min_anti}, {"samples", samples.size()}};
    }

    {
        SpectrumReport report =
            layerwise_spectra(base, aligned, prompts_of(ds.heldout), cfg.top_k);
        nlohmann::ordered_json layers = nlohmann::ordered_json::array();
        for (const auto& l : report.layers)
            layers.push_back({{"layer", l.layer},
                              {"sigma_ratio", l.sigma_ratio},
                              {"entropy", l.entropy},
                              {"rank_eps", l.rank_eps},
                              {"degenerate", l.degenerate}});
        double res = report.final_fit.residual;
        summary["spectra"] = {{"layers", layers},
                              {"final_sigma_ratio", report.layers.back().sigma_ratio},
                              {"rank1_residual", res},
                              {"u1_vstar_cosine", report.final_fit.u1_cos},
                              {"rank1_energy_fraction", 1.0 - res * res}};
    }

    write_text_file(paths::summary(out), summary.dump(2) + "\n");
    return summary;
}

// ---------------------------------------------------------------------------
// run_experiment: the full pretrain -> DPO -> diagnostics pipeline. Any stage
// failure leaves completed outputs in place and a manifest naming the stage.

inline nlohmann::ordered_json run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    auto out = detail::out_of(cfg);
    Manifest manifest;
    std::string stage = "gen-data";
    nlohmann::ordered_json summary;

    try {
        stage_gen_data(cfg);
        manifest.record(stage, paths::config(out));
        manifest.record(stage, paths::train_csv(out));
        manifest.record(stage, paths::heldout_csv(out));
        manifest.mark_complete(stage);

        stage = "pretrain";
        stage_pretrain(cfg);
        manifest.record(stage, paths::base_ckpt(out));
        manifest.record(stage, paths::pretrain_log(out));
        manifest.mark_complete(stage);

        stage = "dpo-train";
        stage_dpo_train(cfg);
        manifest.record(stage, paths::dpo_ckpt(out));
        manifest.record(stage, paths::train_log(out));
        manifest.mark_complete(stage);

        stage = "extract";
        stage_extract(cfg);
        manifest.record(stage, paths::activations(out));
        manifest.mark_complete(stage);

        stage = "cosine";
        stage_cosine(cfg);
        manifest.record(stage, paths::cosine_hist(out));
        manifest.mark_complete(stage);

        stage = "steer";
        stage_steer(cfg);
        manifest.record(stage, paths::sweep(out));
        manifest.mark_complete(stage);

        stage = "field";
        stage_field(cfg);
        manifest.record(stage, paths::field(out));
        manifest.mark_complete(stage);

        stage = "spectra";
        stage_spectra(cfg);
        manifest.record(stage, paths::spectra(out));
        manifest.record(stage, paths::heatmap(out));
        manifest.mark_complete(stage);

        stage = "report";
        summary = stage_report(cfg);
        manifest.record(stage, paths::summary(out));
        manifest.mark_complete(stage);

        manifest.write(paths::manifest(out));
        return summary;
    } catch (const TrainingError& e) {
        manifest.mark_failed(stage, e.what());
        manifest.write(paths::manifest(out));
        throw StageError(stage, e.what(), true);
    } catch (const std::exception& e) {
        manifest.mark_failed(stage, e.what());
        manifest.write(paths::manifest(out));
        throw StageError(stage, e.what());
    }
}

}  // namespace steerlab

#endif  // STEERLAB_HARNESS_HPP
