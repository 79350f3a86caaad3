#include "latentkit/tasks.hpp"

#include <algorithm>

namespace latentkit {

RewardSpec digitsum_reward_spec() {
    RewardSpec s;
    s.think_open = vocab16::THINK_OPEN;
    s.think_close = vocab16::THINK_CLOSE;
    s.ans_open = vocab16::ANS_OPEN;
    s.ans_close = vocab16::ANS_CLOSE;
    s.digit_base = vocab16::DIGIT0;
    for (int i = 0; i < 10; ++i) s.alphabet.push_back(vocab16::DIGIT0 + i);
    return s;
}

TaskInstance make_digitsum_instance(std::span<const int> digits) {
    if (digits.empty()) throw UsageError("digitsum: need at least one digit");
    TaskInstance t;
    t.question.push_back(vocab16::BOS);
    for (int d : digits) {
        if (d < 0 || d > 9) throw UsageError("digitsum: digit " + std::to_string(d) + " out of range");
        t.question.push_back(vocab16::DIGIT0 + d);
        t.ground_truth += d;
    }
    t.question.push_back(vocab16::SEP);
    return t;
}

TaskInstance digitsum_from_string(const std::string& spaced_digits) {
    std::vector<int> digits;
    for (char c : spaced_digits) {
        if (c == ' ') continue;
        if (c < '0' || c > '9') throw UsageError("digitsum: bad character in digit string");
        digits.push_back(c - '0');
    }
    return make_digitsum_instance(digits);
}

std::vector<TaskInstance> make_digitsum_tasks(const DigitSumSpec& spec, int count, Rng rng) {
    if (spec.n_digits < 1 || spec.digit_lo < 0 || spec.digit_hi > 9 || spec.digit_lo > spec.digit_hi) {
        throw UsageError("digitsum: bad task spec");
    }
    std::vector<TaskInstance> out;
    out.reserve(static_cast<size_t>(count));
    const int span = spec.digit_hi - spec.digit_lo + 1;
    for (int i = 0; i < count; ++i) {
        std::vector<int> digits(static_cast<size_t>(spec.n_digits));
        for (int& d : digits) d = spec.digit_lo + static_cast<int>(rng.uniform_int(span));
        out.push_back(make_digitsum_instance(digits));
    }
    return out;
}

std::vector<int> answer_digit_tokens(long long value) {
    if (value < 0) throw UsageError("answer tokens: negative value");
    std::string s = std::to_string(value);
    std::vector<int> out;
    for (char c : s) out.push_back(vocab16::DIGIT0 + (c - '0'));
    return out;
}

std::string detokenize(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
        if (t == vocab16::BOS) out += "<s>";
        else if (t == vocab16::SEP) out += "=";
        else if (t == vocab16::THINK_OPEN) out += "<think>";
        else if (t == vocab16::THINK_CLOSE) out += "</think>";
        else if (t == vocab16::ANS_OPEN) out += "<answer>";
        else if (t == vocab16::ANS_CLOSE) out += "</answer>";
        else if (t >= vocab16::DIGIT0 && t < vocab16::DIGIT0 + 10)
            out += static_cast<char>('0' + (t - vocab16::DIGIT0));
        else out += "?";
    }
    return out;
}

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> out;
    size_t i = 0;
    auto match = [&](const char* tag) {
        const size_t n = std::string(tag).size();
        if (text.compare(i, n, tag) == 0) {
            i += n;
            return true;
        }
        return false;
    };
    while (i < text.size()) {
        if (text[i] == ' ') {
            ++i;
        } else if (match("<think>")) {
            out.push_back(vocab16::THINK_OPEN);
        } else if (match("</think>")) {
            out.push_back(vocab16::THINK_CLOSE);
        } else if (match("<answer>")) {
            out.push_back(vocab16::ANS_OPEN);
        } else if (match("</answer>")) {
            out.push_back(vocab16::ANS_CLOSE);
        } else if (match("<s>")) {
            out.push_back(vocab16::BOS);
        } else if (text[i] == '=') {
            out.push_back(vocab16::SEP);
            ++i;
        } else if (text[i] >= '0' && text[i] <= '9') {
            out.push_back(vocab16::DIGIT0 + (text[i] - '0'));
            ++i;
        } else {
            throw UsageError("tokenize: unexpected character '" + std::string(1, text[i]) + "'");
        }
    }
    return out;
}

Corpus make_copy_corpus(int payload_vocab, int n_payload, int count, Rng rng) {
    if (payload_vocab < 2 || n_payload < 1 || count < 1) throw UsageError("copy corpus: bad sizes");
    Corpus c;
    c.vocab = payload_vocab + 1; // marker token is the last id
    const int marker = payload_vocab;
    for (int s = 0; s < count; ++s) {
        std::vector<int> payload(static_cast<size_t>(n_payload));
        for (int& t : payload) t = static_cast<int>(rng.uniform_int(payload_vocab));
        std::vector<int> seq = payload;
        seq.push_back(marker);
        seq.insert(seq.end(), payload.begin(), payload.end());
        c.seqs.push_back(std::move(seq));
    }
    return c;
}

Corpus make_pattern_corpus(int vocab, int period, int seq_len, int count, Rng rng) {
    if (period < 2 || period > vocab || seq_len < 2 || count < 1) {
        throw UsageError("pattern corpus: bad sizes");
    }
    // one fixed pattern of distinct tokens per corpus
    std::vector<int> ids(static_cast<size_t>(vocab));
    for (int i = 0; i < vocab; ++i) ids[static_cast<size_t>(i)] = i;
    for (int i = vocab - 1; i > 0; --i) {
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(rng.uniform_int(i + 1))]);
    }
    std::vector<int> pattern(ids.begin(), ids.begin() + period);
    Corpus c;
    c.vocab = vocab;
    for (int s = 0; s < count; ++s) {
        const int offset = static_cast<int>(rng.uniform_int(period));
        std::vector<int> seq(static_cast<size_t>(seq_len));
        for (int i = 0; i < seq_len; ++i) {
            seq[static_cast<size_t>(i)] = pattern[static_cast<size_t>((offset + i) % period)];
        }
        c.seqs.push_back(std::move(seq));
    }
    return c;
}

Corpus make_digitsum_lm_corpus(const DigitSumSpec& spec, int count, AnswerMode mode, Rng rng) {
    std::vector<TaskInstance> tasks = make_digitsum_tasks(spec, count, rng.fork(1));
    Rng ans_rng = rng.fork(2);
    const long long lo = static_cast<long long>(spec.n_digits) * spec.digit_lo;
    const long long hi = static_cast<long long>(spec.n_digits) * spec.digit_hi;
    Corpus c;
    c.vocab = vocab16::SIZE;
    for (const TaskInstance& t : tasks) {
        long long answer = t.ground_truth;
        if (mode == AnswerMode::Uniform) {
            answer = lo + ans_rng.uniform_int(hi - lo + 1);
        }
        std::vector<int> seq = t.question;
        // think span echoes the question digits: the model learns to read the
        // question while the answer stays uninformative in Uniform mode
        seq.push_back(vocab16::THINK_OPEN);
        for (size_t i = 1; i + 1 < t.question.size(); ++i) seq.push_back(t.question[i]);
        seq.push_back(vocab16::THINK_CLOSE);
        seq.push_back(vocab16::ANS_OPEN);
        for (int tok : answer_digit_tokens(answer)) seq.push_back(tok);
        seq.push_back(vocab16::ANS_CLOSE);
        c.seqs.push_back(std::move(seq));
    }
    return c;
}

} // namespace latentkit
