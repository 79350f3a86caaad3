#pragma once

#include <string>
#include <vector>

#include "latentkit/grpo.hpp"
#include "latentkit/rng.hpp"

namespace latentkit {

// Fixed 16-token vocabulary shared by the rule-rewarded tasks.
namespace vocab16 {
inline constexpr int BOS = 0;
inline constexpr int DIGIT0 = 1; // digits 0..9 occupy ids 1..10
inline constexpr int SEP = 11;
inline constexpr int THINK_OPEN = 12;
inline constexpr int THINK_CLOSE = 13;
inline constexpr int ANS_OPEN = 14;
inline constexpr int ANS_CLOSE = 15;
inline constexpr int SIZE = 16;
} // namespace vocab16

RewardSpec digitsum_reward_spec();

struct DigitSumSpec {
    int n_digits = 2;
    int digit_lo = 0;
    int digit_hi = 4;
    bool operator==(const DigitSumSpec&) const = default;
};

// question = [BOS d1 .. dn SEP], ground truth = digit sum
TaskInstance make_digitsum_instance(std::span<const int> digits);
TaskInstance digitsum_from_string(const std::string& spaced_digits); // "3 4 5" -> 12
std::vector<TaskInstance> make_digitsum_tasks(const DigitSumSpec& spec, int count, Rng rng);

std::vector<int> answer_digit_tokens(long long value);

// text <-> token helpers for the 16-token vocabulary
std::string detokenize(std::span<const int> tokens);
std::vector<int> tokenize(const std::string& text);

struct Corpus {
    int vocab = 0;
    std::vector<std::vector<int>> seqs;
};

// echo task: payload, marker, payload again
Corpus make_copy_corpus(int payload_vocab, int n_payload, int count, Rng rng);

// one fixed pattern of distinct tokens sampled at random phases; the true
// next-token process is deterministic
Corpus make_pattern_corpus(int vocab, int period, int seq_len, int count, Rng rng);

enum class AnswerMode { Correct, Uniform };

// question plus a delimited answer; Uniform keeps answers independent of the
// digits so a model trained on it knows the format but stays at chance
// accuracy
Corpus make_digitsum_lm_corpus(const DigitSumSpec& spec, int count, AnswerMode mode, Rng rng);

} // namespace latentkit
