#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "latentkit/commands.hpp"
#include "latentkit/metrics.hpp"
#include "latentkit/verify.hpp"

namespace {

using namespace latentkit;

// precedence: --seed flag, then LATENTKIT_SEED, then the config file value
uint64_t resolve_seed(uint64_t config_seed, bool flag_given, uint64_t flag_seed) {
    if (flag_given) return flag_seed;
    if (const char* env = std::getenv("LATENTKIT_SEED")) {
        return std::strtoull(env, nullptr, 10);
    }
    return config_seed;
}

int do_kvreport(const std::string& config_path, const std::string& out_dir) {
    KvReportConfig cfg = parse_kvreport_config(read_text_file(config_path));
    std::vector<KvReportRow> rows = run_kvreport(cfg);
    std::cout << kvreport_table(rows);
    if (!out_dir.empty()) {
        const std::string path = out_dir + "/kvreport.csv";
        write_text_file(path, kvreport_csv(rows));
        std::cout << "csv written to " << path << "\n";
    }
    return 0;
}

int do_train(const std::string& config_path, bool seed_given, uint64_t seed,
             const std::string& out_dir) {
    TrainConfig cfg = parse_train_config(read_text_file(config_path));
    cfg.seed = resolve_seed(cfg.seed, seed_given, seed);
    TrainOutputs outs = run_train(cfg, out_dir);
    std::cout << "train: task=" << cfg.task << " steps=" << cfg.steps
              << " final main_loss=" << format_double(outs.final_report.main_loss);
    if (cfg.mtp.lambda > 0.0)
        std::cout << " mtp_loss=" << format_double(outs.final_report.mtp_loss);
    std::cout << "\nloss curve: " << outs.loss_csv_path << "\n";
    if (!outs.expert_csv_path.empty()) std::cout << "expert load: " << outs.expert_csv_path << "\n";
    std::cout << "checkpoint: " << outs.checkpoint_path << "\n";
    return 0;
}

int do_grpo(const std::string& config_path, bool seed_given, uint64_t seed,
            const std::string& out_dir) {
    GrpoRunConfig cfg = parse_grpo_config(read_text_file(config_path));
    cfg.seed = resolve_seed(cfg.seed, seed_given, seed);
    GrpoOutputs outs = run_grpo(cfg, out_dir);
    std::cout << "grpo: steps=" << cfg.steps
              << " baseline_acc=" << format_double(outs.baseline_accuracy)
              << " final_acc=" << format_double(outs.final_accuracy)
              << " final_kl=" << format_double(outs.final_kl) << "\n"
              << "metrics: " << outs.metrics_path << "\ncheckpoint: " << outs.checkpoint_path
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"latentkit: latent-attention KV caching, MoE routing, multi-token prediction "
                 "and group-relative policy optimization, with a verification suite"};
    app.require_subcommand(1);

    std::string config_path, out_dir, scope = "all", fault;
    uint64_t seed = 0;
    bool seed_given = false;

    CLI::App* kvreport = app.add_subcommand("kvreport", "per-variant KV cache footprint table");
    kvreport->add_option("--config", config_path, "grid config JSON")->required();
    kvreport->add_option("--out", out_dir, "output directory for the CSV");

    CLI::App* train = app.add_subcommand("train", "train a toy LM on a synthetic task");
    train->add_option("--config", config_path, "train config JSON")->required();
    train->add_option("--seed", seed, "seed override")
        ->each([&seed_given](const std::string&) { seed_given = true; });
    train->add_option("--out", out_dir, "output directory");

    CLI::App* grpo = app.add_subcommand("grpo", "run the GRPO loop on a rule-rewarded task");
    grpo->add_option("--config", config_path, "grpo config JSON")->required();
    grpo->add_option("--seed", seed, "seed override")
        ->each([&seed_given](const std::string&) { seed_given = true; });
    grpo->add_option("--out", out_dir, "output directory");

    CLI::App* verify = app.add_subcommand("verify", "run the invariant suite");
    verify->add_option("--scope", scope, "all | core | attention | moe | mtp | grpo | harness");
    verify->add_option("--inject-fault", fault, "test hook: clip-direction")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*kvreport) return do_kvreport(config_path, out_dir);
        if (*train) return do_train(config_path, seed_given, seed, out_dir);
        if (*grpo) return do_grpo(config_path, seed_given, seed, out_dir);
        if (*verify) {
            FaultMode mode = FaultMode::None;
            if (fault == "clip-direction") mode = FaultMode::FlipClipDirection;
            else if (!fault.empty()) throw UsageError("unknown fault '" + fault + "'");
            return run_verify(scope, std::cout, mode);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
