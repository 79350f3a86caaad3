#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "latentkit/model.hpp"
#include "latentkit/param.hpp"
#include "latentkit/rng.hpp"

namespace latentkit {

// Rule-based reward configuration: answer correctness, delimiter structure,
// and target-alphabet token fraction, combined as a weighted sum.
struct RewardSpec {
    double w_accuracy = 1.0;
    double w_format = 0.5;
    double w_language = 0.5;
    int think_open = -1, think_close = -1;
    int ans_open = -1, ans_close = -1;
    int digit_base = -1;            // token id of digit 0; digits occupy ten consecutive ids
    std::vector<int> alphabet;      // target-language token ids
    void validate() const;
};

// One synthetic question with a rule-checkable answer.
struct TaskInstance {
    std::vector<int> question;
    long long ground_truth = 0;
};

struct GRPOHyper {
    double epsilon = 0.2; // clip radius
    double beta = 0.0;    // KL coefficient
    int G = 8;            // group size
    double lr = 1e-3;
    int groups_per_step = 8;
    int max_new_tokens = 16;
    double temperature = 1.0;
    int epochs = 1; // optimization passes per sampled batch
    void validate() const;
};

struct GroupOutput {
    std::vector<int> tokens; // generated tokens, question excluded
    bool truncated = false;
    std::vector<double> logp_old;   // under the sampling snapshot
    std::vector<double> logp_ref;   // under the frozen reference
    std::vector<double> logp_theta; // under the current policy
    double reward = 0.0;
    double r_accuracy = 0.0, r_format = 0.0, r_language = 0.0;
    double advantage = 0.0;
};

struct Group {
    std::vector<int> question;
    std::vector<GroupOutput> outputs;
    bool advantages_set = false;
};

// Frozen parameter copy with log-prob evaluation; immutable after creation.
class PolicySnapshot {
  public:
    explicit PolicySnapshot(const TinyLM& m) : model_(m) {}
    std::vector<double> token_logprobs(std::span<const int> question,
                                       std::span<const int> completion) const;
    const TinyLM& model() const { return model_; }

  private:
    TinyLM model_;
};

// G independent rollouts from the sampling snapshot; logp_old is recorded from
// the same forward arithmetic used for re-evaluation, so both agree exactly.
Group sample_group(const PolicySnapshot& policy, std::span<const int> question, int G,
                   int max_new, double temperature, int stop_token, Rng rng);

// {0,1}: extracted answer equals the instance's ground truth.
double accuracy_reward(std::span<const int> output, const TaskInstance& task,
                       const RewardSpec& spec);
// {0,1}: think span then answer span, both closed, non-overlapping.
double format_reward(std::span<const int> output, const RewardSpec& spec);
// Fraction of non-delimiter tokens drawn from the target alphabet.
double language_consistency_reward(std::span<const int> output, const RewardSpec& spec);

// A_i = (r_i - mean) / population std; all zeros when the group is degenerate.
std::vector<double> group_advantages(std::span<const double> rewards);

// mean_t (rho - log rho - 1), rho = pi_ref / pi_theta per token.
double kl_estimate(std::span<const double> logp_theta, std::span<const double> logp_ref);

// min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)
double clipped_surrogate(double ratio, double advantage, double epsilon);

void fill_rewards(Group& g, const TaskInstance& task, const RewardSpec& spec);
void fill_advantages(Group& g);

struct ObjectiveEval {
    double J = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
    bool degenerate = false;
    // dJ/dlogp_theta per output per token, including the 1/G factor
    std::vector<std::vector<double>> dlogp;
};

double grpo_objective(const Group& g, const GRPOHyper& hyper);
ObjectiveEval grpo_objective_eval(const Group& g, const GRPOHyper& hyper);

struct GRPOStepMetrics {
    double mean_reward = 0.0;
    double mean_accuracy = 0.0;
    double mean_format = 0.0;
    double mean_language = 0.0;
    double mean_abs_advantage = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
    double objective = 0.0;
    int64_t degenerate_groups = 0;
    int64_t groups = 0;
};

// One GRPO update: sample a group per task from the pre-step snapshot, score,
// normalize within groups, ascend the clipped objective with the direct KL
// term. Rollouts run in parallel into slot-indexed buffers with forked rng
// streams, so results do not depend on completion order.
GRPOStepMetrics grpo_step(TinyLM& policy, const PolicySnapshot& ref,
                          std::span<const TaskInstance> batch, const GRPOHyper& hyper,
                          const RewardSpec& spec, AdamOpt& opt, Rng rng, int stop_token);

// Evaluation-only pass: sample and score, no update.
GRPOStepMetrics grpo_eval(const TinyLM& policy, std::span<const TaskInstance> batch,
                          const GRPOHyper& hyper, const RewardSpec& spec, Rng rng,
                          int stop_token);

// Structural marker: this module carries no state-value estimator.
inline constexpr bool kGrpoHasValueModel = false;

// Test hook: flips the surrogate's min to max to prove the pessimism
// invariant check catches a broken clip.
void set_clip_fault(bool flipped);
bool clip_fault_active();

} // namespace latentkit
