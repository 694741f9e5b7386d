#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "steerlab/harness.hpp"

using namespace steerlab;

namespace {

DatasetSpec small_spec() {
    DatasetSpec s;
    s.vocab_size = 32;
    s.n_prompts = 40;
    s.prompt_len = 5;
    s.preferred_class = {24, 25, 26, 27};
    s.dispreferred_class = {28, 29, 30, 31};
    s.seed = 11;
    return s;
}

ExperimentConfig smoke_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.model.vocab_size = 32;
    cfg.model.d_model = 16;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.max_seq_len = 8;
    cfg.dataset = small_spec();
    cfg.pretrain.steps = 5;
    cfg.pretrain.batch_size = 8;
    cfg.dpo.steps = 40;
    cfg.dpo.batch_size = 16;
    cfg.dpo.learning_rate = 0.5;
    cfg.dpo.trainable_scope = TrainScope::final_bias_only;
    cfg.out_dir = out_dir;
    return cfg;
}

}  // namespace

TEST_CASE("gen_dataset determinism and class membership") {
    DatasetSpec spec = small_spec();
    Dataset a = gen_dataset(spec);
    Dataset b = gen_dataset(spec);

    REQUIRE(a.train.size() == 32);
    REQUIRE(a.heldout.size() == 8);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].x == b.train[i].x);
        CHECK(a.train[i].y_w == b.train[i].y_w);
        CHECK(a.train[i].y_l == b.train[i].y_l);
    }

    std::set<std::uint32_t> pref(spec.preferred_class.begin(), spec.preferred_class.end());
    std::set<std::uint32_t> disp(spec.dispreferred_class.begin(), spec.dispreferred_class.end());
    auto check_tuples = [&](const std::vector<PreferenceTuple>& ts) {
        for (const auto& t : ts) {
            CHECK(pref.count(t.y_w) == 1);
            CHECK(disp.count(t.y_l) == 1);
            CHECK(t.x.size() == spec.prompt_len);
            for (auto tok : t.x) {
                CHECK(tok < spec.vocab_size);
                CHECK(pref.count(tok) == 0);
                CHECK(disp.count(tok) == 0);
            }
        }
    };
    check_tuples(a.train);
    check_tuples(a.heldout);

    DatasetSpec overlapping = spec;
    overlapping.dispreferred_class = {27, 28};
    CHECK_THROWS_AS(gen_dataset(overlapping), std::invalid_argument);
}

TEST_CASE("dataset mean pair direction matches the class-mean difference") {
    // balanced counts: n_prompts divisible by both class sizes
    DatasetSpec spec = small_spec();
    REQUIRE(spec.n_prompts % spec.preferred_class.size() == 0);
    REQUIRE(spec.n_prompts % spec.dispreferred_class.size() == 0);
    Dataset ds = gen_dataset(spec);

    ModelConfig mcfg;
    mcfg.vocab_size = 32;
    mcfg.d_model = 16;
    mcfg.n_layers = 1;
    mcfg.n_heads = 2;
    mcfg.max_seq_len = 8;
    ModelParams p = init_model(mcfg, 1);
    const Matrix& head = p.output_head();

    std::vector<PreferenceTuple> all = ds.train;
    all.insert(all.end(), ds.heldout.begin(), ds.heldout.end());
    Vector mean_pair(mcfg.d_model, 0.0);
    for (const auto& t : all) axpy(1.0, vsub(head.row(t.y_w), head.row(t.y_l)), mean_pair);
    for (double& x : mean_pair) x /= static_cast<double>(all.size());

    Vector class_diff(mcfg.d_model, 0.0);
    for (auto t : spec.preferred_class)
        axpy(1.0 / static_cast<double>(spec.preferred_class.size()), head.row(t), class_diff);
    for (auto t : spec.dispreferred_class)
        axpy(-1.0 / static_cast<double>(spec.dispreferred_class.size()), head.row(t), class_diff);

    for (std::size_t j = 0; j < mean_pair.size(); ++j)
        CHECK(mean_pair[j] == Catch::Approx(class_diff[j]).margin(1e-10));
}

TEST_CASE("dataset csv round trip") {
    Dataset ds = gen_dataset(small_spec());
    std::string csv = dataset_to_csv(ds.train);
    auto parsed = dataset_from_csv(csv);
    REQUIRE(parsed.size() == ds.train.size());
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        CHECK(parsed[i].x == ds.train[i].x);
        CHECK(parsed[i].y_w == ds.train[i].y_w);
        CHECK(parsed[i].y_l == ds.train[i].y_l);
    }
}

TEST_CASE("pretrain_base reduces cross-entropy") {
    DatasetSpec spec = small_spec();
    spec.n_prompts = 80;
    Dataset ds = gen_dataset(spec);

    ModelConfig mcfg;
    mcfg.vocab_size = 32;
    mcfg.d_model = 16;
    mcfg.n_layers = 2;
    mcfg.n_heads = 2;
    mcfg.max_seq_len = 8;
    ModelParams init = init_model(mcfg, 3);
    Matrix tok_before = init.token_embedding;

    PretrainConfig pcfg;
    pcfg.steps = 120;
    pcfg.batch_size = 16;
    pcfg.learning_rate = 0.3;

    // zero steps returns the initialization
    PretrainConfig none = pcfg;
    none.steps = 0;
    PretrainResult untouched = pretrain_base(init, prompts_of(ds.train), {}, none);
    CHECK(untouched.params.blocks[0].wq.data == init.blocks[0].wq.data);
    CHECK(untouched.log.final_ce == untouched.log.initial_ce);

    PretrainResult r =
        pretrain_base(init, prompts_of(ds.train), prompts_of(ds.heldout), pcfg);
    CHECK(r.log.final_ce <= 0.7 * r.log.initial_ce);
    CHECK(r.log.heldout_ppl_final < r.log.heldout_ppl_initial);
    CHECK(r.params.token_embedding.data == tok_before.data);

    // deterministic per seed
    PretrainResult r2 =
        pretrain_base(init, prompts_of(ds.train), prompts_of(ds.heldout), pcfg);
    CHECK(r.params.blocks[0].wq.data == r2.params.blocks[0].wq.data);
}

TEST_CASE("experiment config json round trip") {
    ExperimentConfig cfg = smoke_config("some/dir");
    cfg.dpo.trainable_scope = TrainScope::last_block;
    cfg.lambdas = {-0.5, 0.0, 0.5};
    cfg.top_k = 3;

    nlohmann::ordered_json j = config_to_json(cfg);
    ExperimentConfig back = config_from_json(nlohmann::json::parse(j.dump()));
    CHECK(config_to_json(back).dump() == j.dump());

    nlohmann::json bad = nlohmann::json::parse(j.dump());
    bad["dataset"]["prompt_len"] = 99;
    CHECK_THROWS_AS(config_from_json(bad), std::invalid_argument);
    bad = nlohmann::json::parse(j.dump());
    bad["dpo"]["trainable_scope"] = "everything";
    CHECK_THROWS_AS(config_from_json(bad), std::invalid_argument);
}

TEST_CASE("run_experiment produces the full deterministic bundle") {
    namespace fs = std::filesystem;
    fs::path out1 = fs::temp_directory_path() / "steerlab_exp1";
    fs::path out2 = fs::temp_directory_path() / "steerlab_exp2";
    fs::remove_all(out1);
    fs::remove_all(out2);

    ExperimentConfig cfg1 = smoke_config(out1.string());
    nlohmann::ordered_json summary = run_experiment(cfg1);
    ExperimentConfig cfg2 = smoke_config(out2.string());
    run_experiment(cfg2);

    const char* files[] = {"dataset_train.csv", "dataset_heldout.csv", "base.ckpt",
                           "dpo.ckpt",          "train_log.csv",       "activations.tensors",
                           "cosine_hist.csv",   "sweep.csv",           "field.csv",
                           "spectra.json",      "heatmap.csv",         "summary.json"};
    for (const char* f : files) {
        CAPTURE(f);
        REQUIRE(fs::exists(out1 / f));
        CHECK(read_text_file(out1 / f) == read_text_file(out2 / f));
    }

    // summary carries every acceptance metric family
    for (const char* key : {"pretrain", "dpo", "cosine", "sweep", "spectra", "field"}) {
        CAPTURE(key);
        CHECK(summary.contains(key));
    }

    // manifest lists all emitted files with sizes and hashes
    auto manifest = nlohmann::json::parse(read_text_file(out1 / "manifest.json"));
    CHECK(manifest.at("completed_stages").size() >= 8);
    std::set<std::string> listed;
    for (const auto& f : manifest.at("files")) {
        listed.insert(f.at("file").get<std::string>());
        CHECK(f.at("size").get<std::uint64_t>() > 0);
        CHECK(f.at("fnv1a64").get<std::string>().size() == 16);
    }
    for (const char* f : files) CHECK(listed.count(f) == 1);

    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("run_experiment reports the failing stage") {
    namespace fs = std::filesystem;
    fs::path out = fs::temp_directory_path() / "steerlab_exp_fail";
    fs::remove_all(out);

    ExperimentConfig cfg = smoke_config(out.string());
    cfg.dpo.learning_rate = 1e9;  // force divergence
    cfg.dpo.trainable_scope = TrainScope::all_blocks;
    bool threw = false;
    try {
        run_experiment(cfg);
    } catch (const StageError& e) {
        threw = true;
        CHECK(e.stage() == "dpo-train");
    }
    CHECK(threw);

    // partial outputs retained, manifest marks the failure
    auto manifest = nlohmann::json::parse(read_text_file(out / "manifest.json"));
    CHECK(manifest.at("failed_stage") == "dpo-train");
    CHECK(fs::exists(out / "base.ckpt"));
    fs::remove_all(out);
}
