#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "latentkit/config.hpp"
#include "latentkit/mtp.hpp"

namespace latentkit {

struct KvReportRow {
    KvReportConfig::Row in;
    bool ok = false;
    std::string error;
    int64_t scalars_per_token = 0;
    int64_t total_scalars = 0;
    double ratio_vs_mha = 0.0;
};

std::vector<KvReportRow> run_kvreport(const KvReportConfig& cfg);
std::string kvreport_csv(const std::vector<KvReportRow>& rows);
std::string kvreport_table(const std::vector<KvReportRow>& rows);

struct TrainOutputs {
    std::string loss_csv_path;
    std::string expert_csv_path; // empty when the model has no MoE blocks
    std::string checkpoint_path;
    MTPReport final_report;
};

TrainOutputs run_train(const TrainConfig& cfg, const std::string& out_dir);

struct GrpoOutputs {
    std::string metrics_path;
    std::string checkpoint_path;
    double baseline_accuracy = 0.0; // step-0 evaluation before any update
    double final_accuracy = 0.0;    // mean accuracy over the last 10% of steps
    double final_kl = 0.0;          // mean KL over the last 10% of steps
};

GrpoOutputs run_grpo(const GrpoRunConfig& cfg, const std::string& out_dir);

// Synthetic skewed-stream benchmark for the routing bias: two token clusters
// with an 80/20 split by default. The trailing ratio is max/min of expert
// loads summed over the most recent `trailing` windows.
struct MoeBalanceConfig {
    int n_r = 8;
    int k_r = 2;
    int d = 16;
    int windows = 200;
    int window_tokens = 512;
    double gamma = 0.02;
    double skew = 0.8;
    double noise = 0.5;
    uint64_t seed = 7;
    bool bias_enabled = true;
    int trailing = 8;
};

struct MoeBalanceResult {
    std::vector<std::vector<int64_t>> window_loads;
    std::vector<double> trailing_ratio; // per window; +inf when an expert is idle
    double final_trailing_ratio = 0.0;
    int first_window_below(double threshold) const; // -1 when never reached
    std::string csv;                                // window,expert_id,load,bias
};

MoeBalanceResult run_moe_balance(const MoeBalanceConfig& cfg, const std::string& out_dir);

} // namespace latentkit
