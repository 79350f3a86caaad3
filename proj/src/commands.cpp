#include "latentkit/commands.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <sstream>

#include "latentkit/attention.hpp"
#include "latentkit/checkpoint.hpp"
#include "latentkit/metrics.hpp"

namespace latentkit {

namespace {

namespace fs = std::filesystem;

std::string join_out(const std::string& dir, const std::string& file) {
    if (dir.empty()) return file;
    fs::create_directories(dir);
    return (fs::path(dir) / file).string();
}

AttnConfig row_to_attn(const KvReportConfig::Row& r) {
    AttnConfig c;
    c.variant = variant_from_name(r.variant);
    c.d = std::max(1, r.n_h * r.d_h); // kv accounting only; model width is irrelevant
    c.n_h = r.n_h;
    c.d_h = r.d_h;
    c.d_c = r.d_c;
    c.d_R = r.d_R;
    c.groups = r.groups;
    return c;
}

Corpus build_corpus(const TrainConfig& cfg, Rng rng) {
    if (cfg.task == "copy") return make_copy_corpus(cfg.vocab, cfg.payload_len, cfg.corpus_size, rng);
    if (cfg.task == "pattern")
        return make_pattern_corpus(cfg.vocab, cfg.period, cfg.seq_len, cfg.corpus_size, rng);
    if (cfg.task == "digitsum-lm")
        return make_digitsum_lm_corpus(cfg.digitsum, cfg.corpus_size, AnswerMode::Correct, rng);
    throw UsageError("train: unknown task '" + cfg.task + "'");
}

std::vector<std::vector<int>> sample_batch(const Corpus& corpus, int batch_size, Rng rng) {
    std::vector<std::vector<int>> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        batch.push_back(corpus.seqs[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(corpus.seqs.size())))]);
    }
    return batch;
}

} // namespace

std::vector<KvReportRow> run_kvreport(const KvReportConfig& cfg) {
    if (cfg.grid.empty()) throw UsageError("kvreport: empty grid");
    std::vector<KvReportRow> rows;
    for (const KvReportConfig::Row& in : cfg.grid) {
        KvReportRow out;
        out.in = in;
        try {
            AttnConfig ac = row_to_attn(in);
            KVCacheLayout lay = kv_cache_scalars(ac, in.T, in.L);
            AttnConfig mha = ac;
            mha.variant = AttnVariant::MHA;
            KVCacheLayout base = kv_cache_scalars(mha, in.T, in.L);
            out.scalars_per_token = lay.scalars_per_token_per_layer;
            out.total_scalars = lay.total_scalars();
            out.ratio_vs_mha = static_cast<double>(lay.total_scalars()) /
                               static_cast<double>(base.total_scalars());
            out.ok = true;
        } catch (const Error& e) {
            out.error = e.what(); // keep going, one bad row does not kill the report
        }
        rows.push_back(std::move(out));
    }
    return rows;
}

std::string kvreport_csv(const std::vector<KvReportRow>& rows) {
    std::ostringstream os;
    os << "variant,n_h,d_h,d_c,d_R,groups,T,L,scalars_per_token_per_layer,total_scalars,ratio_vs_mha\n";
    for (const KvReportRow& r : rows) {
        if (!r.ok) continue;
        os << r.in.variant << "," << r.in.n_h << "," << r.in.d_h << "," << r.in.d_c << ","
           << r.in.d_R << "," << r.in.groups << "," << r.in.T << "," << r.in.L << ","
           << r.scalars_per_token << "," << r.total_scalars << ","
           << format_double(r.ratio_vs_mha) << "\n";
    }
    return os.str();
}

std::string kvreport_table(const std::vector<KvReportRow>& rows) {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-8s %5s %5s %5s %5s %7s %5s %4s %14s %12s %10s", "variant",
                  "n_h", "d_h", "d_c", "d_R", "groups", "T", "L", "scalars/tok/ly", "total",
                  "vs MHA");
    os << buf << "\n";
    for (const KvReportRow& r : rows) {
        if (r.ok) {
            std::snprintf(buf, sizeof(buf), "%-8s %5d %5d %5d %5d %7d %5d %4d %14lld %12lld %10.4f",
                          r.in.variant.c_str(), r.in.n_h, r.in.d_h, r.in.d_c, r.in.d_R, r.in.groups,
                          r.in.T, r.in.L, static_cast<long long>(r.scalars_per_token),
                          static_cast<long long>(r.total_scalars), r.ratio_vs_mha);
            os << buf << "\n";
        } else {
            os << r.in.variant << ": error: " << r.error << "\n";
        }
    }
    return os.str();
}

TrainOutputs run_train(const TrainConfig& cfg, const std::string& out_dir) {
    Rng master(cfg.seed);
    Corpus corpus = build_corpus(cfg, master.fork(1));
    Rng init_rng = master.fork(2);
    MTPConfig mcfg;
    mcfg.D = cfg.mtp.depth;
    mcfg.lambda = cfg.mtp.lambda;
    MTPModel model = MTPModel::init(to_lm_config(cfg.model, corpus.vocab), mcfg, init_rng);
    AdamOpt opt(cfg.lr);

    const bool with_mtp = cfg.mtp.lambda > 0.0;
    std::vector<std::string> columns{"main_loss"};
    if (with_mtp) {
        for (int k = 1; k <= mcfg.D; ++k) columns.push_back("L" + std::to_string(k));
        columns.push_back("mtp_loss");
    }
    MetricsLog log("train-" + std::to_string(cfg.seed), columns, cfg.report);

    const bool moe = cfg.model.moe_enabled;
    std::ostringstream expert_csv;
    if (moe) expert_csv << "window,expert_id,load,bias\n";

    TrainOutputs outs;
    outs.checkpoint_path = join_out(out_dir, "train_checkpoint.ltk");
    std::vector<Param*> ps = model.params();
    save_checkpoint(outs.checkpoint_path, ps);

    MTPReport rep;
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<std::vector<int>> batch =
            sample_batch(corpus, cfg.batch_size, master.fork(100).fork(static_cast<uint64_t>(step)));
        try {
            rep = mtp_train_step(model, opt, batch);
        } catch (const NumericError&) {
            std::fprintf(stderr, "latentkit: train aborted at step %d, last checkpoint kept\n", step);
            throw;
        }
        std::vector<double> vals{rep.main_loss};
        if (with_mtp) {
            for (double l : rep.depth_losses) vals.push_back(l);
            vals.push_back(rep.mtp_loss);
        }
        log.append(step, vals);

        if (moe && !rep.routing.empty()) {
            // each step is one balancing window; histogram covers the first MoE block
            for (size_t l = 0; l < model.trunk.blocks.size(); ++l) {
                TransformerBlock& blk = model.trunk.blocks[l];
                if (!blk.use_moe) continue;
                blk.moe.bias.gamma = cfg.model.moe_gamma;
                std::vector<int64_t> loads = bias_update(blk.moe.bias, rep.routing[l]);
                if (l == 0) {
                    for (size_t e = 0; e < loads.size(); ++e) {
                        expert_csv << step << "," << e << "," << loads[e] << ","
                                   << format_double(blk.moe.bias.b[e]) << "\n";
                    }
                }
            }
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_checkpoint(outs.checkpoint_path, ps);
        }
    }
    save_checkpoint(outs.checkpoint_path, ps);

    const std::string ext = cfg.report == "csv" ? ".csv" : ".jsonl";
    outs.loss_csv_path = join_out(out_dir, "train_loss" + ext);
    log.write_file(outs.loss_csv_path);
    if (moe) {
        outs.expert_csv_path = join_out(out_dir, "expert_load.csv");
        write_text_file(outs.expert_csv_path, expert_csv.str());
    }
    outs.final_report = rep;
    return outs;
}

GrpoOutputs run_grpo(const GrpoRunConfig& cfg, const std::string& out_dir) {
    Rng master(cfg.seed);
    std::vector<TaskInstance> tasks = make_digitsum_tasks(cfg.digitsum, cfg.task_count, master.fork(1));
    Rng init_rng = master.fork(2);
    TinyLM policy = TinyLM::init(to_lm_config(cfg.model, vocab16::SIZE), init_rng);

    // format warmup: uniform random answers teach the delimiters but keep the
    // answer digits independent of the question, so accuracy starts at chance
    if (cfg.warmup_steps > 0) {
        Corpus warmup = make_digitsum_lm_corpus(cfg.digitsum, 256, AnswerMode::Uniform, master.fork(3));
        AdamOpt wopt(cfg.warmup_lr);
        for (int step = 1; step <= cfg.warmup_steps; ++step) {
            std::vector<std::vector<int>> batch =
                sample_batch(warmup, cfg.warmup_batch, master.fork(4).fork(static_cast<uint64_t>(step)));
            lm_train_step(policy, wopt, batch);
        }
    }

    PolicySnapshot ref(policy);
    RewardSpec spec = digitsum_reward_spec();
    GRPOHyper hyper = to_grpo_hyper(cfg.hyper);
    AdamOpt opt(hyper.lr);
    opt.beta2 = 0.99; // sporadic per-question gradients need a faster second moment
    opt.clip_norm = 1.0; // the unclipped negative-advantage branch can spike

    std::vector<std::string> columns{"mean_reward", "mean_acc",      "mean_format",
                                     "mean_lang",   "mean_abs_adv",  "mean_kl",
                                     "clip_fraction", "objective",   "degenerate_groups"};
    MetricsLog log("grpo-" + std::to_string(cfg.seed), columns, cfg.report);

    GrpoOutputs outs;
    auto append = [&](int64_t step, const GRPOStepMetrics& m) {
        std::vector<double> vals{m.mean_reward,      m.mean_accuracy, m.mean_format,
                                 m.mean_language,    m.mean_abs_advantage, m.mean_kl,
                                 m.clip_fraction,    m.objective,
                                 static_cast<double>(m.degenerate_groups)};
        log.append(step, vals);
    };

    if (cfg.steps > 0) {
        GRPOStepMetrics baseline = grpo_eval(policy, tasks, hyper, spec, master.fork(5), vocab16::ANS_CLOSE);
        outs.baseline_accuracy = baseline.mean_accuracy;
        append(0, baseline);

        const int tail_from = cfg.steps - std::max(1, cfg.steps / 10) + 1;
        double tail_acc = 0.0, tail_kl = 0.0;
        int tail_n = 0;
        const double lr0 = cfg.hyper.lr;
        const double lr1 = cfg.hyper.lr_final >= 0.0 ? cfg.hyper.lr_final : cfg.hyper.lr;
        for (int step = 1; step <= cfg.steps; ++step) {
            const double frac = cfg.steps > 1 ? static_cast<double>(step - 1) / (cfg.steps - 1) : 0.0;
            hyper.lr = lr0 + (lr1 - lr0) * frac;
            Rng step_rng = master.fork(6).fork(static_cast<uint64_t>(step));
            std::vector<TaskInstance> batch;
            for (int g = 0; g < hyper.groups_per_step; ++g) {
                batch.push_back(tasks[static_cast<size_t>(step_rng.uniform_int(
                    static_cast<int64_t>(tasks.size())))]);
            }
            GRPOStepMetrics m =
                grpo_step(policy, ref, batch, hyper, spec, opt, step_rng.fork(9999), vocab16::ANS_CLOSE);
            append(step, m);
            if (step >= tail_from) {
                tail_acc += m.mean_accuracy;
                tail_kl += m.mean_kl;
                ++tail_n;
            }
        }
        outs.final_accuracy = tail_acc / std::max(1, tail_n);
        outs.final_kl = tail_kl / std::max(1, tail_n);
    }

    const std::string ext = cfg.report == "csv" ? ".csv" : ".jsonl";
    outs.metrics_path = join_out(out_dir, "grpo_metrics" + ext);
    log.write_file(outs.metrics_path);
    outs.checkpoint_path = join_out(out_dir, "grpo_checkpoint.ltk");
    std::vector<Param*> ps = policy.params();
    save_checkpoint(outs.checkpoint_path, ps);
    return outs;
}

int MoeBalanceResult::first_window_below(double threshold) const {
    for (size_t w = 0; w < trailing_ratio.size(); ++w) {
        if (trailing_ratio[w] <= threshold) return static_cast<int>(w);
    }
    return -1;
}

MoeBalanceResult run_moe_balance(const MoeBalanceConfig& cfg, const std::string& out_dir) {
    Rng master(cfg.seed);
    Rng init = master.fork(1);
    Tensor centroids({cfg.n_r, cfg.d});
    const double cscale = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    for (double& v : centroids.data) v = cscale * init.normal();
    std::vector<double> mu_a(static_cast<size_t>(cfg.d)), mu_b(static_cast<size_t>(cfg.d));
    for (double& v : mu_a) v = init.normal();
    for (double& v : mu_b) v = init.normal();

    ExpertBiasState bias(cfg.n_r, cfg.gamma);
    MoeBalanceResult res;
    std::ostringstream csv;
    csv << "window,expert_id,load,bias\n";

    std::vector<int64_t> trailing_sum(static_cast<size_t>(cfg.n_r), 0);
    std::vector<std::vector<int64_t>> history;

    Rng stream = master.fork(2);
    std::vector<double> u(static_cast<size_t>(cfg.d));
    for (int w = 0; w < cfg.windows; ++w) {
        std::vector<RoutingDecision> window;
        window.reserve(static_cast<size_t>(cfg.window_tokens));
        for (int t = 0; t < cfg.window_tokens; ++t) {
            const bool cluster_a = stream.uniform() < cfg.skew;
            const std::vector<double>& mu = cluster_a ? mu_a : mu_b;
            for (size_t j = 0; j < u.size(); ++j) u[j] = mu[j] + cfg.noise * stream.normal();
            std::vector<double> s = affinity_scores(u, centroids);
            RoutingDecision d;
            d.token = t;
            d.selected = route_topk(s, bias.b, cfg.k_r);
            window.push_back(std::move(d));
        }
        std::vector<int64_t> loads;
        if (cfg.bias_enabled) {
            loads = bias_update(bias, window);
        } else {
            loads.assign(static_cast<size_t>(cfg.n_r), 0);
            for (const RoutingDecision& d : window)
                for (int e : d.selected) ++loads[static_cast<size_t>(e)];
        }
        for (size_t e = 0; e < loads.size(); ++e) {
            csv << w << "," << e << "," << loads[e] << "," << format_double(bias.b[e]) << "\n";
        }
        history.push_back(loads);
        for (size_t e = 0; e < loads.size(); ++e) trailing_sum[e] += loads[e];
        if (static_cast<int>(history.size()) > cfg.trailing) {
            const std::vector<int64_t>& old = history[history.size() - 1 - static_cast<size_t>(cfg.trailing)];
            for (size_t e = 0; e < old.size(); ++e) trailing_sum[e] -= old[e];
        }
        int64_t mx = 0, mn = std::numeric_limits<int64_t>::max();
        for (int64_t l : trailing_sum) {
            mx = std::max(mx, l);
            mn = std::min(mn, l);
        }
        res.trailing_ratio.push_back(mn == 0 ? std::numeric_limits<double>::infinity()
                                             : static_cast<double>(mx) / static_cast<double>(mn));
        res.window_loads.push_back(std::move(loads));
    }
    res.final_trailing_ratio = res.trailing_ratio.empty() ? 0.0 : res.trailing_ratio.back();
    res.csv = csv.str();
    if (!out_dir.empty()) {
        write_text_file(join_out(out_dir, cfg.bias_enabled ? "moe_balance.csv" : "moe_balance_control.csv"),
                        res.csv);
    }
    return res;
}

} // namespace latentkit
