#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <sstream>

#include "latentkit/checkpoint.hpp"
#include "latentkit/commands.hpp"
#include "latentkit/metrics.hpp"
#include "latentkit/verify.hpp"

using namespace latentkit;

namespace {

std::string tmpdir(const std::string& name) {
    const std::string dir = "harness_test_out/" + name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

TrainConfig tiny_train(const std::string& task) {
    TrainConfig cfg;
    cfg.task = task;
    cfg.steps = 4;
    cfg.batch_size = 4;
    cfg.corpus_size = 16;
    cfg.seq_len = 10;
    cfg.vocab = 8;
    cfg.period = 4;
    cfg.payload_len = 4;
    cfg.mtp.depth = 2;
    cfg.mtp.lambda = 0.3;
    cfg.model.d = 8;
    cfg.model.n_h = 2;
    cfg.model.d_h = 4;
    cfg.model.d_c = 3;
    cfg.model.d_R = 2;
    cfg.model.d_ff = 8;
    return cfg;
}

GrpoRunConfig tiny_grpo() {
    GrpoRunConfig cfg;
    cfg.steps = 0;
    cfg.warmup_steps = 0;
    cfg.task_count = 4;
    cfg.model.d = 8;
    cfg.model.n_h = 2;
    cfg.model.d_h = 4;
    cfg.model.d_c = 3;
    cfg.model.d_R = 2;
    cfg.model.d_ff = 8;
    return cfg;
}

} // namespace

TEST_SUITE_BEGIN("harness");

TEST_CASE("digitsum generator: ground truth and determinism") {
    TaskInstance t = digitsum_from_string("3 4 5");
    CHECK(t.ground_truth == 12);
    CHECK(t.question.size() == 5); // bos, 3 digits, sep
    CHECK(t.question.front() == vocab16::BOS);
    CHECK(t.question.back() == vocab16::SEP);

    DigitSumSpec spec;
    std::vector<TaskInstance> a = make_digitsum_tasks(spec, 16, Rng(5));
    std::vector<TaskInstance> b = make_digitsum_tasks(spec, 16, Rng(5));
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].question == b[i].question);
        CHECK(a[i].ground_truth == b[i].ground_truth);
        long long manual = 0;
        for (int tok : a[i].question) {
            if (tok >= vocab16::DIGIT0 && tok < vocab16::DIGIT0 + 10) manual += tok - vocab16::DIGIT0;
        }
        CHECK(manual == a[i].ground_truth);
    }
}

TEST_CASE("pattern corpus: the true next-token process is deterministic") {
    Corpus c = make_pattern_corpus(8, 4, 16, 20, Rng(9));
    // map each token to its unique successor across the whole corpus
    std::vector<int> next(8, -1);
    for (const std::vector<int>& seq : c.seqs) {
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
            if (next[static_cast<size_t>(seq[i])] < 0) next[static_cast<size_t>(seq[i])] = seq[i + 1];
            CHECK(next[static_cast<size_t>(seq[i])] == seq[i + 1]);
        }
    }
    Corpus c2 = make_pattern_corpus(8, 4, 16, 20, Rng(9));
    CHECK(c.seqs == c2.seqs);
}

TEST_CASE("copy corpus echoes the payload after the marker") {
    Corpus c = make_copy_corpus(6, 5, 10, Rng(11));
    CHECK(c.vocab == 7);
    for (const std::vector<int>& seq : c.seqs) {
        REQUIRE(seq.size() == 11);
        CHECK(seq[5] == 6); // marker
        for (int i = 0; i < 5; ++i) CHECK(seq[static_cast<size_t>(i)] == seq[static_cast<size_t>(i) + 6]);
    }
}

TEST_CASE("digitsum-lm corpus: correct answers vs uniform answers") {
    DigitSumSpec spec;
    Corpus correct = make_digitsum_lm_corpus(spec, 50, AnswerMode::Correct, Rng(13));
    RewardSpec rs = digitsum_reward_spec();
    for (const std::vector<int>& seq : correct.seqs) {
        // answer digits inside the span equal the question's sum
        TaskInstance t;
        for (int tok : seq) {
            if (tok >= vocab16::DIGIT0 && tok < vocab16::DIGIT0 + 10) t.ground_truth += tok - vocab16::DIGIT0;
            if (tok == vocab16::THINK_OPEN) break;
        }
        t.ground_truth = 0;
        size_t i = 0;
        while (seq[i] != vocab16::SEP) {
            if (seq[i] >= vocab16::DIGIT0 && seq[i] < vocab16::DIGIT0 + 10) t.ground_truth += seq[i] - vocab16::DIGIT0;
            ++i;
        }
        std::vector<int> completion(seq.begin() + static_cast<long>(i) + 1, seq.end());
        CHECK(accuracy_reward(completion, t, rs) == 1.0);
        CHECK(format_reward(completion, rs) == 1.0);
    }
    // uniform answers hit the truth only at chance rate
    Corpus uniform = make_digitsum_lm_corpus(spec, 200, AnswerMode::Uniform, Rng(13));
    int hits = 0;
    for (const std::vector<int>& seq : uniform.seqs) {
        TaskInstance t;
        size_t i = 0;
        while (seq[i] != vocab16::SEP) {
            if (seq[i] >= vocab16::DIGIT0 && seq[i] < vocab16::DIGIT0 + 10) t.ground_truth += seq[i] - vocab16::DIGIT0;
            ++i;
        }
        std::vector<int> completion(seq.begin() + static_cast<long>(i) + 1, seq.end());
        hits += accuracy_reward(completion, t, rs) == 1.0 ? 1 : 0;
    }
    CHECK(hits < 80); // well under half at chance ~1/9
}

TEST_CASE("tokenize/detokenize cover the reward examples") {
    std::vector<int> toks = tokenize("<think>34</think><answer>12</answer>");
    RewardSpec rs = digitsum_reward_spec();
    TaskInstance t;
    t.ground_truth = 12;
    CHECK(accuracy_reward(toks, t, rs) == 1.0);
    CHECK(format_reward(toks, rs) == 1.0);
    CHECK(language_consistency_reward(toks, rs) == 1.0);
    CHECK(detokenize(toks) == "<think>34</think><answer>12</answer>");
    CHECK_THROWS_AS(tokenize("<think>x</think>"), UsageError);
}

TEST_CASE("config round trip and strictness") {
    TrainConfig t = tiny_train("pattern");
    t.model.moe_enabled = true;
    CHECK(parse_train_config(serialize(t)) == t);

    GrpoRunConfig g = tiny_grpo();
    g.hyper.beta = 1.5;
    CHECK(parse_grpo_config(serialize(g)) == g);

    KvReportConfig k;
    k.grid.push_back({.variant = "MLA", .n_h = 4, .d_h = 8, .d_c = 16, .d_R = 8, .T = 10, .L = 2});
    CHECK(parse_kvreport_config(serialize(k)) == k);

    CHECK_THROWS_AS(parse_train_config("{\"schema_version\":1,\"frobnicate\":1}"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("{\"schema_version\":7}"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("not json"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("{\"schema_version\":1,\"task\":\"nope\"}"), UsageError);
    CHECK_THROWS_AS(parse_grpo_config("{\"schema_version\":1,\"hyper\":{\"zeta\":1}}"), ConfigError);
}

TEST_CASE("metrics log: schema, ordering, strict csv, jsonl") {
    MetricsLog log("run1", {"loss", "acc"});
    log.append(1, std::vector<double>{0.5, 0.25});
    log.append(2, std::vector<double>{0.375, 0.5});
    CHECK_THROWS_AS(log.append(2, std::vector<double>{0.1, 0.1}), UsageError);
    CHECK_THROWS_AS(log.append(3, std::vector<double>{0.1}), DimensionError);

    CsvTable t = parse_strict_csv(log.serialize());
    CHECK(t.header == std::vector<std::string>{"step", "loss", "acc"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[1][1] == 0.375);

    MetricsLog jl("run1", {"loss"}, "jsonl");
    jl.append(1, std::vector<double>{0.5});
    CHECK(jl.serialize() == "{\"run_id\":\"run1\",\"step\":1,\"loss\":0.5}\n");

    CHECK_THROWS_AS(parse_strict_csv("a,b\n1,x\n"), UsageError);
    CHECK_THROWS_AS(parse_strict_csv("a,b\n1\n"), UsageError);
    CHECK_THROWS_AS(parse_strict_csv(""), UsageError);
}

TEST_CASE("format_double round-trips through the strict reader") {
    for (double v : {0.1, -1.25e-300, 3.0, 1e17, 0.30000000000000004}) {
        CsvTable t = parse_strict_csv("x\n" + format_double(v) + "\n");
        CHECK(t.rows[0][0] == v);
    }
}

TEST_CASE("checkpoint: bitwise round trip, manifest, errors") {
    const std::string dir = tmpdir("ckpt");
    Rng rng(21);
    Param a = Param::randn("a", {3, 4}, rng, 1.0);
    Param b = Param::randn("b", {5}, rng, 1.0);
    std::vector<Param*> ps{&a, &b};
    const std::string path = dir + "/model.ltk";
    save_checkpoint(path, ps);

    Param a2("a", Tensor({3, 4}));
    Param b2("b", Tensor({5}));
    std::vector<Param*> ps2{&a2, &b2};
    load_checkpoint(path, ps2);
    CHECK(a2.value.data == a.value.data);
    CHECK(b2.value.data == b.value.data);

    std::vector<CheckpointEntry> man = checkpoint_manifest(path);
    REQUIRE(man.size() == 2);
    CHECK(man[0].name == "a");
    CHECK(man[0].shape == std::vector<int64_t>{3, 4});

    Param wrong("a", Tensor({4, 3}));
    std::vector<Param*> psw{&wrong};
    CHECK_THROWS_AS(load_checkpoint(path, psw), DimensionError);
    Param missing("zz", Tensor({2}));
    std::vector<Param*> psm{&missing};
    CHECK_THROWS_AS(load_checkpoint(path, psm), StateError);
}

TEST_CASE("kvreport: ratios, bad rows, empty grid") {
    KvReportConfig cfg;
    cfg.grid.push_back({.variant = "MHA", .n_h = 4, .d_h = 8, .T = 10, .L = 2});
    cfg.grid.push_back({.variant = "MQA", .n_h = 4, .d_h = 8, .T = 10, .L = 2});
    cfg.grid.push_back({.variant = "GQA", .n_h = 4, .d_h = 8, .groups = 2, .T = 10, .L = 2});
    cfg.grid.push_back({.variant = "MLA", .n_h = 4, .d_h = 8, .d_c = 16, .d_R = 8, .T = 10, .L = 2});
    cfg.grid.push_back({.variant = "GQA", .n_h = 4, .d_h = 8, .groups = 3, .T = 10, .L = 2}); // bad
    std::vector<KvReportRow> rows = run_kvreport(cfg);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].ratio_vs_mha == 1.0);
    CHECK(rows[1].ratio_vs_mha == 0.25);
    CHECK(rows[2].ratio_vs_mha == 0.5);
    CHECK(rows[3].ratio_vs_mha == 0.375);
    CHECK_FALSE(rows[4].ok);
    CHECK(rows[4].error.find("groups") != std::string::npos);

    KvReportConfig empty;
    CHECK_THROWS_AS(run_kvreport(empty), UsageError);

    CsvTable table = parse_strict_csv("h\n0\n");
    (void)table;
}

TEST_CASE("run_train: csv schema follows lambda, reruns are byte-identical") {
    TrainConfig cfg = tiny_train("pattern");
    const std::string d1 = tmpdir("train1");
    const std::string d2 = tmpdir("train2");
    TrainOutputs o1 = run_train(cfg, d1);
    TrainOutputs o2 = run_train(cfg, d2);
    const std::string csv1 = read_text_file(o1.loss_csv_path);
    const std::string csv2 = read_text_file(o2.loss_csv_path);
    CHECK(csv1 == csv2);
    CsvTable t = parse_strict_csv(csv1);
    CHECK(t.header == std::vector<std::string>{"step", "main_loss", "L1", "L2", "mtp_loss"});
    CHECK(t.rows.size() == 4);

    TrainConfig flat = cfg;
    flat.mtp.lambda = 0.0;
    TrainOutputs o3 = run_train(flat, tmpdir("train3"));
    CsvTable t3 = parse_strict_csv(read_text_file(o3.loss_csv_path));
    CHECK(t3.header == std::vector<std::string>{"step", "main_loss"});
}

TEST_CASE("run_train: moe histogram is emitted and parses") {
    TrainConfig cfg = tiny_train("pattern");
    cfg.model.moe_enabled = true;
    cfg.model.moe_shared = 1;
    cfg.model.moe_routed = 4;
    cfg.model.moe_top_k = 2;
    cfg.model.moe_d_ff = 8;
    TrainOutputs o = run_train(cfg, tmpdir("train_moe"));
    REQUIRE_FALSE(o.expert_csv_path.empty());
    CsvTable t = parse_strict_csv(read_text_file(o.expert_csv_path));
    CHECK(t.header == std::vector<std::string>{"window", "expert_id", "load", "bias"});
    CHECK(t.rows.size() == 4 * 4); // steps x experts
}

TEST_CASE("run_grpo: zero steps emit a header-only metrics file and a checkpoint") {
    GrpoRunConfig cfg = tiny_grpo();
    const std::string dir = tmpdir("grpo0");
    GrpoOutputs o = run_grpo(cfg, dir);
    const std::string text = read_text_file(o.metrics_path);
    CHECK(text ==
          "step,mean_reward,mean_acc,mean_format,mean_lang,mean_abs_adv,mean_kl,clip_fraction,"
          "objective,degenerate_groups\n");
    CHECK(std::filesystem::exists(o.checkpoint_path));
    std::vector<CheckpointEntry> man = checkpoint_manifest(o.checkpoint_path);
    CHECK(man.size() > 4);
}

TEST_CASE("moe balance sim: bias on beats bias off on the skewed stream") {
    MoeBalanceConfig cfg;
    cfg.windows = 60;
    cfg.window_tokens = 128;
    MoeBalanceResult with_bias = run_moe_balance(cfg, "");
    MoeBalanceConfig off = cfg;
    off.bias_enabled = false;
    MoeBalanceResult control = run_moe_balance(off, "");
    CHECK(with_bias.final_trailing_ratio < control.final_trailing_ratio);
    CsvTable t = parse_strict_csv(with_bias.csv);
    CHECK(t.header == std::vector<std::string>{"window", "expert_id", "load", "bias"});
}

TEST_CASE("verify: module scope runs green") {
    std::ostringstream os;
    CHECK(run_verify("moe", os) == 0);
    CHECK(os.str().find("[PASS] moe.gate-simplex") != std::string::npos);
    CHECK_THROWS_AS(run_verify("bogus", os), UsageError);
}

TEST_CASE("verify: injected clip fault is caught and named") {
    std::ostringstream os;
    const int rc = run_verify("grpo", os, FaultMode::FlipClipDirection);
    CHECK(rc == 1);
    CHECK(os.str().find("[FAIL] grpo.clip-pessimism") != std::string::npos);
    // hook resets afterwards
    std::ostringstream os2;
    CHECK(run_verify("grpo", os2) == 0);
}

TEST_SUITE_END();
