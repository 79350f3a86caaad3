#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentkit/grpo.hpp"
#include "latentkit/model.hpp"
#include "latentkit/tasks.hpp"

namespace latentkit {

// Model block shared by the train and grpo commands. The vocabulary is owned
// by the task, not the config.
struct ModelConfig {
    int d = 16;
    int n_layers = 1;
    int d_ff = 32;
    std::string variant = "MLA";
    int n_h = 2;
    int d_h = 8;
    int d_c = 4;
    int d_cq = -1;
    int d_R = 4;
    int groups = 1;
    double rope_base = 10000.0;
    double init_std = 0.08;
    bool moe_enabled = false;
    int moe_shared = 1;
    int moe_routed = 4;
    int moe_top_k = 2;
    int moe_d_ff = 16;
    double moe_gamma = 0.001;
    bool operator==(const ModelConfig&) const = default;
};

LMConfig to_lm_config(const ModelConfig& m, int vocab);

struct MtpSubConfig {
    int depth = 1;
    double lambda = 0.3;
    bool operator==(const MtpSubConfig&) const = default;
};

struct TrainConfig {
    int schema_version = 1;
    std::string task = "pattern"; // copy | pattern | digitsum-lm
    uint64_t seed = 1;
    int steps = 100;
    int batch_size = 8;
    int corpus_size = 128;
    int seq_len = 16;
    int vocab = 8;
    int period = 4;
    int payload_len = 6;
    double lr = 1e-3;
    int checkpoint_every = 50;
    std::string report = "csv";
    MtpSubConfig mtp;
    DigitSumSpec digitsum;
    ModelConfig model;
    bool operator==(const TrainConfig&) const = default;
};

struct GrpoHyperConfig {
    double epsilon = 0.2;
    double beta = 0.0;
    int G = 8;
    double lr = 1e-3;
    double lr_final = -1.0; // linear decay target; negative keeps lr constant
    int groups_per_step = 8;
    int max_new_tokens = 8;
    double temperature = 1.0;
    int epochs = 1;
    bool operator==(const GrpoHyperConfig&) const = default;
};

struct GrpoRunConfig {
    int schema_version = 1;
    uint64_t seed = 1;
    std::string task = "digitsum";
    DigitSumSpec digitsum;
    int task_count = 32;
    int steps = 500;
    int warmup_steps = 300;
    int warmup_batch = 16;
    double warmup_lr = 3e-3;
    std::string report = "csv";
    GrpoHyperConfig hyper;
    ModelConfig model;
    bool operator==(const GrpoRunConfig&) const = default;
};

GRPOHyper to_grpo_hyper(const GrpoHyperConfig& h);

struct KvReportConfig {
    struct Row {
        std::string variant = "MHA";
        int n_h = 1;
        int d_h = 1;
        int d_c = 0;
        int d_R = 0;
        int groups = 1;
        int T = 1;
        int L = 1;
        bool operator==(const Row&) const = default;
    };
    int schema_version = 1;
    std::vector<Row> grid;
    bool operator==(const KvReportConfig&) const = default;
};

// parse_* reject unknown keys and bad schema versions
TrainConfig parse_train_config(const std::string& json_text);
GrpoRunConfig parse_grpo_config(const std::string& json_text);
KvReportConfig parse_kvreport_config(const std::string& json_text);

std::string serialize(const TrainConfig& c);
std::string serialize(const GrpoRunConfig& c);
std::string serialize(const KvReportConfig& c);

} // namespace latentkit
