#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gfnem/methods.hpp"

using namespace gfnem;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("config round trip preserves every key") {
    RunConfig cfg;
    cfg.domain = "grammar";
    cfg.method = "mcem";
    cfg.seed = 1234;
    cfg.sizes = {4, 5, 17};
    cfg.threshold_max = 9.5;
    cfg.ebm_enabled = true;
    std::string text = config_to_text(cfg);
    RunConfig back = parse_config_text(text);
    CHECK(back.domain == "grammar");
    CHECK(back.method == "mcem");
    CHECK(back.seed == 1234);
    CHECK(back.sizes.num_nt == 4);
    CHECK(back.sizes.num_pt == 5);
    CHECK(back.sizes.vocab == 17);
    CHECK(back.threshold_max == 9.5);
    CHECK(back.ebm_enabled);
    CHECK(config_to_text(back) == text);
}

TEST_CASE("unknown config keys are hard errors") {
    CHECK_THROWS_WITH_AS(parse_config_text("grammar.num_nts = 4\n"),
                         doctest::Contains("unknown key"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config_text("grammar.num_nt = four\n"),
                         doctest::Contains("integer"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config_text("nonsense line\n"), doctest::Contains("key = value"),
                         std::runtime_error);
}

TEST_CASE("config validation rejects impossible method/domain pairs") {
    CHECK_THROWS_AS(parse_config_text("domain = mixture\nmethod = mcem\n"), std::runtime_error);
    CHECK_THROWS_WITH_AS(
        parse_config_text("domain = grammar\nmethod = marginalization\ngrammar.mode = noncfg\n"),
        doctest::Contains("intractable"), std::runtime_error);
    CHECK_THROWS_AS(parse_config_text("gfn.epsilon = 1.5\n"), std::runtime_error);
}

TEST_CASE("comments and spacing are tolerated") {
    RunConfig cfg = parse_config_text("# a comment\n  seed = 42   # trailing\n\nsteps = 7\n");
    CHECK(cfg.seed == 42);
    CHECK(cfg.steps == 7);
}

TEST_CASE("every ablation preset applies to a base config") {
    for (const auto& preset : known_presets()) {
        RunConfig cfg;
        cfg.domain = "grammar";
        cfg.method = "gfnem";
        RunConfig out = apply_preset(cfg, preset);
        out.validate();
    }
    CHECK_THROWS_WITH_AS(apply_preset(RunConfig{}, "-everything"),
                         doctest::Contains("unknown ablation preset"), std::runtime_error);
    // spot-check a few effects
    CHECK(apply_preset(RunConfig{}, "-mcmc").mcmc_steps == 0);
    CHECK(apply_preset(RunConfig{}, "-subtb").gfn_loss == "tb");
    CHECK(apply_preset(RunConfig{}, "th-12-6").threshold_max == 12.0);
    CHECK(apply_preset(RunConfig{}, "hvi").gfn_loss == "hvi");
}

TEST_CASE("mixture exact EM run: artifacts exist and eval reproduces the summary") {
    fs::path dir = fresh_dir("gfnem_cli_mix_em");
    RunConfig cfg;
    cfg.domain = "mixture";
    cfg.method = "exact_em";
    cfg.seed = 5;
    cfg.steps = 8;
    cfg.mixture_points = 96;
    cfg.out_dir = (dir / "run").string();
    nlohmann::json summary = run_experiment(cfg);
    CHECK(fs::exists(dir / "run" / "config.cfg"));
    CHECK(fs::exists(dir / "run" / "metrics.ndjson"));
    CHECK(fs::exists(dir / "run" / "checkpoint_mixture.bin"));
    CHECK(fs::exists(dir / "run" / "summary.json"));
    CHECK(fs::exists(dir / "run" / "data" / "mixture.bin"));

    nlohmann::json eval = evaluate_run((dir / "run").string());
    CHECK(eval["per_sample_ll"].get<double>() == summary["per_sample_ll"].get<double>());
    fs::remove_all(dir);
}

TEST_CASE("same config and seed produce byte-identical metrics streams") {
    fs::path dir = fresh_dir("gfnem_cli_det");
    auto run_once = [&](const std::string& name) {
        RunConfig cfg;
        cfg.domain = "mixture";
        cfg.method = "gfnem";
        cfg.seed = 11;
        cfg.steps = 40;
        cfg.mixture_points = 32;
        cfg.mixture_policy_hidden = 8;
        cfg.em_mode = "fixed";
        cfg.fixed_e = 3;
        cfg.fixed_m = 1;
        cfg.gfn_loss = "tb";
        cfg.e_batch = 2;
        cfg.m_batch = 4;
        cfg.out_dir = (dir / name).string();
        run_experiment(cfg);
        return slurp(dir / name / "metrics.ndjson");
    };
    CHECK(run_once("a") == run_once("b"));
    fs::remove_all(dir);
}

TEST_CASE("gen-data writes loadable grammar artifacts used by train") {
    fs::path dir = fresh_dir("gfnem_cli_gen");
    RunConfig gen_cfg;
    gen_cfg.domain = "grammar";
    gen_cfg.seed = 3;
    gen_cfg.sizes = {2, 2, 6};
    gen_cfg.corpus_sentences = 40;
    gen_cfg.max_len = 6;
    generate_data(gen_cfg, (dir / "data").string());
    CHECK(fs::exists(dir / "data" / "corpus.txt"));
    CHECK(fs::exists(dir / "data" / "vocab.txt"));
    CHECK(fs::exists(dir / "data" / "gold.txt"));
    CHECK(fs::exists(dir / "data" / "gt_grammar.bin"));

    // every line parses under the vocabulary
    grammar::Corpus corpus = grammar::load_corpus((dir / "data").string());
    CHECK(corpus.sentences.size() == 40);
    for (const auto& s : corpus.sentences) {
        CHECK(s.size() >= 2);
        CHECK(s.size() <= 6);
        for (int tok : s) CHECK(tok < 6);
    }

    RunConfig cfg;
    cfg.domain = "grammar";
    cfg.method = "marginalization";
    cfg.seed = 3;
    cfg.steps = 15;
    cfg.sizes = {2, 2, 6};
    cfg.grammar_batch = 4;
    cfg.max_len = 6;
    cfg.data_dir = (dir / "data").string();
    cfg.out_dir = (dir / "run").string();
    nlohmann::json summary = run_experiment(cfg);
    CHECK(summary.contains("nll_exact"));
    CHECK(summary.contains("sentence_f1"));
    CHECK(summary["wall_clock_sec"].get<double>() > 0.0);

    nlohmann::json eval = evaluate_run((dir / "run").string());
    CHECK(eval["nll_exact"].get<double>() == summary["nll_exact"].get<double>());
    CHECK(eval["sentence_f1"].get<double>() == summary["sentence_f1"].get<double>());
    fs::remove_all(dir);
}

TEST_CASE("corpus self-NLL per word is near the generating grammar's rate") {
    fs::path dir = fresh_dir("gfnem_cli_rate");
    RunConfig cfg;
    cfg.domain = "grammar";
    cfg.seed = 9;
    cfg.sizes = {2, 3, 8};
    cfg.corpus_sentences = 400;
    cfg.max_len = 8;
    generate_data(cfg, (dir / "data").string());

    grammar::Corpus corpus = grammar::load_corpus((dir / "data").string());
    Rng rng = Rng(cfg.seed).fork(0xc0de);
    grammar::Grammar gt = grammar::make_random_cfg(cfg.sizes, cfg.gen_nt_mass, rng);
    // NLL/word of the corpus under its own generator, two independent halves
    auto nll_per_word = [&](size_t from, size_t to) {
        double total = 0.0;
        int64_t words = 0;
        for (size_t i = from; i < to; ++i) {
            total -= grammar::inside_log_marginal(gt, corpus.sentences[i]);
            words += static_cast<int64_t>(corpus.sentences[i].size());
        }
        return total / static_cast<double>(words);
    };
    double a = nll_per_word(0, 200);
    double b = nll_per_word(200, 400);
    CHECK(a == doctest::Approx(b).epsilon(0.12));  // self-consistency across halves
    fs::remove_all(dir);
}

TEST_CASE("evaluate rejects metrics the model class cannot support") {
    fs::path dir = fresh_dir("gfnem_cli_metric_err");
    RunConfig cfg;
    cfg.domain = "mixture";
    cfg.method = "exact_em";
    cfg.seed = 2;
    cfg.steps = 2;
    cfg.mixture_points = 32;
    cfg.out_dir = (dir / "run").string();
    run_experiment(cfg);
    CHECK_THROWS_WITH_AS(evaluate_run((dir / "run").string(), "nll_exact"),
                         doctest::Contains("not defined"), std::runtime_error);
    CHECK_THROWS_WITH_AS(evaluate_run((dir / "run").string(), "made_up_metric"),
                         doctest::Contains("unknown metric"), std::runtime_error);
    fs::remove_all(dir);
}
