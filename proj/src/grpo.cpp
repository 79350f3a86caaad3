#include "latentkit/grpo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>

namespace latentkit {

namespace {

std::atomic<bool> g_clip_flipped{false};

bool is_delimiter(int tok, const RewardSpec& spec) {
    return tok == spec.think_open || tok == spec.think_close || tok == spec.ans_open ||
           tok == spec.ans_close;
}

int find_first(std::span<const int> v, int tok) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (v[i] == tok) return static_cast<int>(i);
    }
    return -1;
}

void check_group_state(const Group& g) {
    if (g.outputs.size() < 2) throw UsageError("grpo: group size must be >= 2");
    for (const GroupOutput& o : g.outputs) {
        const size_t n = o.tokens.size();
        if (o.logp_old.size() != n || o.logp_ref.size() != n || o.logp_theta.size() != n) {
            throw StateError("grpo: missing or misaligned snapshot log-probs");
        }
    }
    if (!g.advantages_set) throw StateError("grpo: advantages not computed");
}

double seq_sum(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

} // namespace

void set_clip_fault(bool flipped) { g_clip_flipped.store(flipped); }
bool clip_fault_active() { return g_clip_flipped.load(); }

void RewardSpec::validate() const {
    if (w_accuracy < 0 || w_format < 0 || w_language < 0) {
        throw ConfigError("reward spec: component weights must be nonnegative");
    }
    if (think_open < 0 || think_close < 0 || ans_open < 0 || ans_close < 0) {
        throw ConfigError("reward spec: delimiter token ids not set");
    }
}

void GRPOHyper::validate() const {
    if (epsilon <= 0.0 || epsilon >= 1.0) throw ConfigError("grpo hyper: epsilon must be in (0,1)");
    if (beta < 0.0) throw ConfigError("grpo hyper: beta must be >= 0");
    if (G < 2) throw ConfigError("grpo hyper: group size must be >= 2");
    if (epochs < 1) throw ConfigError("grpo hyper: epochs must be >= 1");
}

std::vector<double> PolicySnapshot::token_logprobs(std::span<const int> question,
                                                   std::span<const int> completion) const {
    std::vector<int> full(question.begin(), question.end());
    full.insert(full.end(), completion.begin(), completion.end());
    return model_.token_logprobs(full, question.size());
}

Group sample_group(const PolicySnapshot& policy, std::span<const int> question, int G,
                   int max_new, double temperature, int stop_token, Rng rng) {
    if (G < 2) throw UsageError("sample_group: G must be >= 2");
    if (max_new < 1) throw UsageError("sample_group: max_new must be >= 1");
    Group g;
    g.question.assign(question.begin(), question.end());
    g.outputs.resize(static_cast<size_t>(G));
    for (int i = 0; i < G; ++i) {
        Rng slot = rng.fork(static_cast<uint64_t>(i));
        SampleResult s =
            sample_sequence(policy.model(), question, max_new, temperature, stop_token, slot);
        GroupOutput& o = g.outputs[static_cast<size_t>(i)];
        o.tokens = std::move(s.tokens);
        o.logp_old = std::move(s.logp);
        o.truncated = s.truncated;
    }
    return g;
}

double accuracy_reward(std::span<const int> output, const TaskInstance& task,
                       const RewardSpec& spec) {
    const int open = find_first(output, spec.ans_open);
    if (open < 0) return 0.0;
    long long value = 0;
    bool any = false;
    for (size_t i = static_cast<size_t>(open) + 1; i < output.size(); ++i) {
        const int tok = output[i];
        if (tok == spec.ans_close) {
            return (any && value == task.ground_truth) ? 1.0 : 0.0;
        }
        const int digit = tok - spec.digit_base;
        if (digit < 0 || digit > 9) return 0.0; // non-digit inside the answer span
        value = value * 10 + digit;
        any = true;
        if (value > 1000000000LL) return 0.0;
    }
    return 0.0; // span never closed
}

double format_reward(std::span<const int> output, const RewardSpec& spec) {
    const int to = find_first(output, spec.think_open);
    const int tc = find_first(output, spec.think_close);
    const int ao = find_first(output, spec.ans_open);
    const int ac = find_first(output, spec.ans_close);
    if (to < 0 || tc < 0 || ao < 0 || ac < 0) return 0.0;
    return (to < tc && tc < ao && ao < ac) ? 1.0 : 0.0;
}

double language_consistency_reward(std::span<const int> output, const RewardSpec& spec) {
    int64_t content = 0, in_alphabet = 0;
    for (int tok : output) {
        if (is_delimiter(tok, spec)) continue;
        ++content;
        for (int a : spec.alphabet) {
            if (tok == a) {
                ++in_alphabet;
                break;
            }
        }
    }
    if (content == 0) return 0.0;
    return static_cast<double>(in_alphabet) / static_cast<double>(content);
}

std::vector<double> group_advantages(std::span<const double> rewards) {
    const size_t n = rewards.size();
    if (n < 2) throw UsageError("group_advantages: need at least 2 rewards");
    double mean = 0.0;
    for (double r : rewards) {
        if (!std::isfinite(r)) throw NumericError("group_advantages: non-finite reward");
        mean += r;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(n); // population std, no Bessel correction
    std::vector<double> a(n, 0.0);
    if (var == 0.0) return a; // degenerate group: all advantages zero
    const double sd = std::sqrt(var);
    for (size_t i = 0; i < n; ++i) a[i] = (rewards[i] - mean) / sd;
    return a;
}

double kl_estimate(std::span<const double> logp_theta, std::span<const double> logp_ref) {
    if (logp_theta.size() != logp_ref.size()) {
        throw DimensionError("kl_estimate: misaligned token sequences");
    }
    if (logp_theta.empty()) return 0.0;
    double acc = 0.0;
    for (size_t t = 0; t < logp_theta.size(); ++t) {
        const double x = logp_ref[t] - logp_theta[t]; // log rho
        const double d = std::expm1(x) - x;           // rho - log rho - 1
        if (!std::isfinite(d)) throw NumericError("kl_estimate: non-finite ratio");
        acc += d;
    }
    return acc / static_cast<double>(logp_theta.size());
}

double clipped_surrogate(double ratio, double advantage, double epsilon) {
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage;
    const double plain = ratio * advantage;
    if (g_clip_flipped.load(std::memory_order_relaxed)) return std::max(plain, clipped);
    return std::min(plain, clipped);
}

void fill_rewards(Group& g, const TaskInstance& task, const RewardSpec& spec) {
    spec.validate();
    for (GroupOutput& o : g.outputs) {
        o.r_accuracy = accuracy_reward(o.tokens, task, spec);
        o.r_format = format_reward(o.tokens, spec);
        o.r_language = language_consistency_reward(o.tokens, spec);
        o.reward = spec.w_accuracy * o.r_accuracy + spec.w_format * o.r_format +
                   spec.w_language * o.r_language;
    }
}

void fill_advantages(Group& g) {
    std::vector<double> r;
    r.reserve(g.outputs.size());
    for (const GroupOutput& o : g.outputs) r.push_back(o.reward);
    std::vector<double> a = group_advantages(r);
    for (size_t i = 0; i < a.size(); ++i) g.outputs[i].advantage = a[i];
    g.advantages_set = true;
}

ObjectiveEval grpo_objective_eval(const Group& g, const GRPOHyper& hyper) {
    hyper.validate();
    check_group_state(g);
    const double inv_g = 1.0 / static_cast<double>(g.outputs.size());
    ObjectiveEval ev;
    ev.dlogp.resize(g.outputs.size());
    ev.degenerate = true;
    int clipped_count = 0;
    for (size_t i = 0; i < g.outputs.size(); ++i) {
        const GroupOutput& o = g.outputs[i];
        if (o.advantage != 0.0) ev.degenerate = false;
        const double ratio = std::exp(seq_sum(o.logp_theta) - seq_sum(o.logp_old));
        if (!std::isfinite(ratio)) throw NumericError("grpo objective: non-finite ratio");
        const double plain = ratio * o.advantage;
        const double clipped = std::clamp(ratio, 1.0 - hyper.epsilon, 1.0 + hyper.epsilon) * o.advantage;
        const bool flip = g_clip_flipped.load(std::memory_order_relaxed);
        const bool take_plain = flip ? plain >= clipped : plain <= clipped;
        const double surrogate = take_plain ? plain : clipped;
        if (!take_plain) ++clipped_count;
        const double kl = kl_estimate(o.logp_theta, o.logp_ref);
        ev.J += inv_g * (surrogate - hyper.beta * kl);
        ev.mean_kl += inv_g * kl;

        const size_t n = o.tokens.size();
        std::vector<double>& dl = ev.dlogp[i];
        dl.assign(n, 0.0);
        const double surr_coef = take_plain ? plain : 0.0; // d(I A)/dlogp_t = I A
        for (size_t t = 0; t < n; ++t) {
            const double rho = std::exp(o.logp_ref[t] - o.logp_theta[t]);
            // d(-beta KL)/dlogp_t = beta (rho - 1) / n
            dl[t] = inv_g * (surr_coef + hyper.beta * (rho - 1.0) / static_cast<double>(n));
        }
    }
    ev.clip_fraction = static_cast<double>(clipped_count) / static_cast<double>(g.outputs.size());
    return ev;
}

double grpo_objective(const Group& g, const GRPOHyper& hyper) {
    return grpo_objective_eval(g, hyper).J;
}

namespace {

// Recomputes logp_theta through the differentiable path and applies the
// objective gradient at the logits of every generated position.
void backprop_group(TinyLM& policy, Group& g, const GRPOHyper& hyper, double group_weight) {
    for (GroupOutput& o : g.outputs) {
        std::vector<int> full(g.question.begin(), g.question.end());
        full.insert(full.end(), o.tokens.begin(), o.tokens.end());
        o.logp_theta = policy.token_logprobs(full, g.question.size());
    }
    ObjectiveEval ev = grpo_objective_eval(g, hyper);
    for (size_t i = 0; i < g.outputs.size(); ++i) {
        GroupOutput& o = g.outputs[i];
        if (o.tokens.empty()) continue;
        std::vector<int> full(g.question.begin(), g.question.end());
        full.insert(full.end(), o.tokens.begin(), o.tokens.end());
        TinyLM::Cache cache;
        Tensor logits = policy.forward_logits(full, &cache);
        Tensor dlogits(logits.shape);
        const int64_t qlen = static_cast<int64_t>(g.question.size());
        for (size_t t = 0; t < o.tokens.size(); ++t) {
            const int64_t row = qlen - 1 + static_cast<int64_t>(t);
            // maximizing J: loss = -J, dloss/dlogits = coef (softmax - onehot)
            add_cross_entropy_grad(logits, row, o.tokens[t], ev.dlogp[i][t] * group_weight,
                                   dlogits);
        }
        policy.backward_logits(dlogits, cache);
    }
}

GRPOStepMetrics summarize(std::span<const Group> groups, const GRPOHyper& hyper) {
    GRPOStepMetrics m;
    m.groups = static_cast<int64_t>(groups.size());
    int64_t outputs = 0;
    for (const Group& g : groups) {
        ObjectiveEval ev = grpo_objective_eval(g, hyper);
        m.objective += ev.J;
        m.mean_kl += ev.mean_kl;
        m.clip_fraction += ev.clip_fraction;
        if (ev.degenerate) ++m.degenerate_groups;
        for (const GroupOutput& o : g.outputs) {
            m.mean_reward += o.reward;
            m.mean_accuracy += o.r_accuracy;
            m.mean_format += o.r_format;
            m.mean_language += o.r_language;
            m.mean_abs_advantage += std::abs(o.advantage);
            ++outputs;
        }
    }
    const double gn = std::max<double>(1.0, static_cast<double>(m.groups));
    const double on = std::max<double>(1.0, static_cast<double>(outputs));
    m.objective /= gn;
    m.mean_kl /= gn;
    m.clip_fraction /= gn;
    m.mean_reward /= on;
    m.mean_accuracy /= on;
    m.mean_format /= on;
    m.mean_language /= on;
    m.mean_abs_advantage /= on;
    return m;
}

std::vector<Group> rollout_groups(const TinyLM& policy_model, std::span<const TaskInstance> batch,
                                  const GRPOHyper& hyper, const RewardSpec& spec, Rng rng,
                                  int stop_token) {
    PolicySnapshot sampler(policy_model);
    std::vector<Group> groups(batch.size());
    // independent rollouts into slot-indexed buffers; forked streams keep the
    // result independent of scheduling
#pragma omp parallel for schedule(static)
    for (int64_t gi = 0; gi < static_cast<int64_t>(batch.size()); ++gi) {
        Rng slot = rng.fork(static_cast<uint64_t>(gi));
        groups[static_cast<size_t>(gi)] =
            sample_group(sampler, batch[static_cast<size_t>(gi)].question, hyper.G,
                         hyper.max_new_tokens, hyper.temperature, stop_token, slot);
    }
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        fill_rewards(groups[gi], batch[gi], spec);
        fill_advantages(groups[gi]);
    }
    return groups;
}

void fill_ref_and_theta(std::vector<Group>& groups, const PolicySnapshot& ref,
                        const TinyLM& policy) {
#pragma omp parallel for schedule(static)
    for (int64_t gi = 0; gi < static_cast<int64_t>(groups.size()); ++gi) {
        Group& g = groups[static_cast<size_t>(gi)];
        for (GroupOutput& o : g.outputs) {
            o.logp_ref = ref.token_logprobs(g.question, o.tokens);
            std::vector<int> full(g.question.begin(), g.question.end());
            full.insert(full.end(), o.tokens.begin(), o.tokens.end());
            o.logp_theta = policy.token_logprobs(full, g.question.size());
        }
    }
}

} // namespace

GRPOStepMetrics grpo_step(TinyLM& policy, const PolicySnapshot& ref,
                          std::span<const TaskInstance> batch, const GRPOHyper& hyper,
                          const RewardSpec& spec, AdamOpt& opt, Rng rng, int stop_token) {
    hyper.validate();
    if (batch.empty()) throw UsageError("grpo_step: empty task batch");
    std::vector<Group> groups = rollout_groups(policy, batch, hyper, spec, rng, stop_token);
    fill_ref_and_theta(groups, ref, policy);

    GRPOStepMetrics metrics = summarize(groups, hyper);
    if (metrics.degenerate_groups == metrics.groups && hyper.beta == 0.0) {
        std::fprintf(stderr, "latentkit: grpo step saw only degenerate groups, zero gradient\n");
    }

    std::vector<Param*> ps = policy.params();
    const double gw = 1.0 / static_cast<double>(groups.size());
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        zero_grads(ps);
        for (Group& g : groups) backprop_group(policy, g, hyper, gw);
        opt.lr = hyper.lr;
        opt.step(ps);
    }
    return metrics;
}

GRPOStepMetrics grpo_eval(const TinyLM& policy, std::span<const TaskInstance> batch,
                          const GRPOHyper& hyper, const RewardSpec& spec, Rng rng,
                          int stop_token) {
    hyper.validate();
    if (batch.empty()) throw UsageError("grpo_eval: empty task batch");
    std::vector<Group> groups = rollout_groups(policy, batch, hyper, spec, rng, stop_token);
    PolicySnapshot self(policy);
    fill_ref_and_theta(groups, self, policy);
    return summarize(groups, hyper);
}

} // namespace latentkit
