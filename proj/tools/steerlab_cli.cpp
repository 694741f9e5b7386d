// Command-line driver for the experiment pipeline. Every subcommand reads its
// inputs from --out and writes its products there, so stages can be re-run
// independently after a single `run-all` (or in order by hand).

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "steerlab/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInputError = 1;
constexpr int kExitNumericalError = 2;

struct GlobalOptions {
    std::string config_path;
    std::string out_dir;
    long long seed = -1;
    bool has_seed = false;
};

steerlab::ExperimentConfig resolve_config(const GlobalOptions& opt) {
    steerlab::ExperimentConfig cfg;
    if (!opt.config_path.empty())
        cfg = steerlab::config_from_json(
            nlohmann::json::parse(steerlab::read_text_file(opt.config_path)));
    if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
    if (opt.has_seed) {
        // one flag reseeds every stage, with distinct per-stage streams
        auto s = static_cast<std::uint64_t>(opt.seed);
        cfg.dataset.seed = s;
        cfg.pretrain.seed = s + 1;
        cfg.dpo.seed = s + 2;
    }
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"steerlab: DPO-as-steering laboratory"};
    app.require_subcommand(1);

    GlobalOptions opt;
    app.add_option("--config", opt.config_path, "experiment config JSON");
    app.add_option("--out", opt.out_dir, "output directory (overrides config)");
    auto* seed_opt = app.add_option("--seed", opt.seed, "reseed all stages");

    struct Sub {
        const char* name;
        const char* help;
        void (*run)(const steerlab::ExperimentConfig&);
    };
    const Sub subs[] = {
        {"gen-data", "generate the preference dataset", steerlab::stage_gen_data},
        {"pretrain", "pretrain the base model on the grammar", steerlab::stage_pretrain},
        {"dpo-train", "DPO fine-tune from the base checkpoint", steerlab::stage_dpo_train},
        {"extract", "dump per-layer activations and the cosine histogram",
         [](const steerlab::ExperimentConfig& cfg) {
             steerlab::stage_extract(cfg);
             steerlab::stage_cosine(cfg);
         }},
        {"steer", "interpolation/inversion sweep", steerlab::stage_steer},
        {"field", "gradient vector-field lattice", steerlab::stage_field},
        {"spectra", "layerwise SVD spectra and heatmap", steerlab::stage_spectra},
        {"report", "assemble summary.json from stage outputs",
         [](const steerlab::ExperimentConfig& cfg) { steerlab::stage_report(cfg); }},
        {"run-all", "full pipeline with manifest",
         [](const steerlab::ExperimentConfig& cfg) { steerlab::run_experiment(cfg); }},
    };
    const Sub* chosen = nullptr;
    for (const auto& s : subs) {
        CLI::App* sub = app.add_subcommand(s.name, s.help);
        sub->fallthrough();  // global flags may follow the subcommand
        sub->callback([&chosen, &s] { chosen = &s; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInputError;
    }
    opt.has_seed = seed_opt->count() > 0;

    try {
        const steerlab::ExperimentConfig cfg = resolve_config(opt);
        chosen->run(cfg);
        return kExitOk;
    } catch (const steerlab::StageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.numerical() ? kExitNumericalError : kExitInputError;
    } catch (const steerlab::TrainingError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumericalError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInputError;
    }
}
