#include "latentkit/config.hpp"

#include <set>

#include "json.hpp"

namespace latentkit {

namespace {

using nlohmann::json;

// Tracks which keys were consumed so leftovers can be rejected.
class Reader {
  public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return; // keep default
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where_ + ": bad value for key '" + std::string(key) + "'");
        }
    }

    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        return &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.contains(it.key())) {
                throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
            }
        }
    }

  private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

json parse_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: malformed JSON");
    return j;
}

void check_schema(Reader& r) {
    int version = 1;
    r.get("schema_version", version);
    if (version != 1) {
        throw ConfigError("config: unsupported schema_version " + std::to_string(version));
    }
}

ModelConfig read_model(const json& j) {
    Reader r(j, "model");
    ModelConfig m;
    r.get("d", m.d);
    r.get("n_layers", m.n_layers);
    r.get("d_ff", m.d_ff);
    r.get("variant", m.variant);
    r.get("n_h", m.n_h);
    r.get("d_h", m.d_h);
    r.get("d_c", m.d_c);
    r.get("d_cq", m.d_cq);
    r.get("d_R", m.d_R);
    r.get("groups", m.groups);
    r.get("rope_base", m.rope_base);
    r.get("init_std", m.init_std);
    if (const json* moe = r.child("moe")) {
        Reader mr(*moe, "model.moe");
        mr.get("enabled", m.moe_enabled);
        mr.get("shared", m.moe_shared);
        mr.get("routed", m.moe_routed);
        mr.get("top_k", m.moe_top_k);
        mr.get("d_ff", m.moe_d_ff);
        mr.get("gamma", m.moe_gamma);
        mr.finish();
    }
    r.finish();
    return m;
}

json model_json(const ModelConfig& m) {
    json j;
    j["d"] = m.d;
    j["n_layers"] = m.n_layers;
    j["d_ff"] = m.d_ff;
    j["variant"] = m.variant;
    j["n_h"] = m.n_h;
    j["d_h"] = m.d_h;
    j["d_c"] = m.d_c;
    j["d_cq"] = m.d_cq;
    j["d_R"] = m.d_R;
    j["groups"] = m.groups;
    j["rope_base"] = m.rope_base;
    j["init_std"] = m.init_std;
    j["moe"] = {{"enabled", m.moe_enabled}, {"shared", m.moe_shared},   {"routed", m.moe_routed},
                {"top_k", m.moe_top_k},     {"d_ff", m.moe_d_ff},       {"gamma", m.moe_gamma}};
    return j;
}

DigitSumSpec read_digitsum(const json& j) {
    Reader r(j, "digitsum");
    DigitSumSpec d;
    r.get("n_digits", d.n_digits);
    r.get("digit_lo", d.digit_lo);
    r.get("digit_hi", d.digit_hi);
    r.finish();
    return d;
}

json digitsum_json(const DigitSumSpec& d) {
    return {{"n_digits", d.n_digits}, {"digit_lo", d.digit_lo}, {"digit_hi", d.digit_hi}};
}

} // namespace

LMConfig to_lm_config(const ModelConfig& m, int vocab) {
    LMConfig c;
    c.vocab = vocab;
    c.d = m.d;
    c.n_layers = m.n_layers;
    c.d_ff = m.d_ff;
    c.init_std = m.init_std;
    c.attn.d = m.d;
    c.attn.n_h = m.n_h;
    c.attn.d_h = m.d_h;
    c.attn.d_c = m.d_c;
    c.attn.d_cq = m.d_cq;
    c.attn.d_R = m.d_R;
    c.attn.groups = m.groups;
    c.attn.rope_base = m.rope_base;
    c.attn.variant = variant_from_name(m.variant);
    c.use_moe = m.moe_enabled;
    if (m.moe_enabled) {
        c.moe.N_s = m.moe_shared;
        c.moe.N_r = m.moe_routed;
        c.moe.K_r = m.moe_top_k;
        c.moe.d = m.d;
        c.moe.d_ff = m.moe_d_ff;
    }
    return c;
}

GRPOHyper to_grpo_hyper(const GrpoHyperConfig& h) {
    GRPOHyper g;
    g.epsilon = h.epsilon;
    g.beta = h.beta;
    g.G = h.G;
    g.lr = h.lr;
    g.groups_per_step = h.groups_per_step;
    g.max_new_tokens = h.max_new_tokens;
    g.temperature = h.temperature;
    g.epochs = h.epochs;
    return g;
}

TrainConfig parse_train_config(const std::string& text) {
    json j = parse_json(text);
    Reader r(j, "train config");
    check_schema(r);
    TrainConfig c;
    r.get("task", c.task);
    r.get("seed", c.seed);
    r.get("steps", c.steps);
    r.get("batch_size", c.batch_size);
    r.get("corpus_size", c.corpus_size);
    r.get("seq_len", c.seq_len);
    r.get("vocab", c.vocab);
    r.get("period", c.period);
    r.get("payload_len", c.payload_len);
    r.get("lr", c.lr);
    r.get("checkpoint_every", c.checkpoint_every);
    r.get("report", c.report);
    if (const json* m = r.child("mtp")) {
        Reader mr(*m, "mtp");
        mr.get("depth", c.mtp.depth);
        mr.get("lambda", c.mtp.lambda);
        mr.finish();
    }
    if (const json* d = r.child("digitsum")) c.digitsum = read_digitsum(*d);
    if (const json* m = r.child("model")) c.model = read_model(*m);
    r.finish();
    if (c.task != "copy" && c.task != "pattern" && c.task != "digitsum-lm") {
        throw UsageError("train config: unknown task '" + c.task + "'");
    }
    return c;
}

GrpoRunConfig parse_grpo_config(const std::string& text) {
    json j = parse_json(text);
    Reader r(j, "grpo config");
    check_schema(r);
    GrpoRunConfig c;
    r.get("seed", c.seed);
    r.get("task", c.task);
    if (const json* d = r.child("digitsum")) c.digitsum = read_digitsum(*d);
    r.get("task_count", c.task_count);
    r.get("steps", c.steps);
    r.get("warmup_steps", c.warmup_steps);
    r.get("warmup_batch", c.warmup_batch);
    r.get("warmup_lr", c.warmup_lr);
    r.get("report", c.report);
    if (const json* h = r.child("hyper")) {
        Reader hr(*h, "hyper");
        hr.get("epsilon", c.hyper.epsilon);
        hr.get("beta", c.hyper.beta);
        hr.get("G", c.hyper.G);
        hr.get("lr", c.hyper.lr);
        hr.get("lr_final", c.hyper.lr_final);
        hr.get("groups_per_step", c.hyper.groups_per_step);
        hr.get("max_new_tokens", c.hyper.max_new_tokens);
        hr.get("temperature", c.hyper.temperature);
        hr.get("epochs", c.hyper.epochs);
        hr.finish();
    }
    if (const json* m = r.child("model")) c.model = read_model(*m);
    r.finish();
    if (c.task != "digitsum") throw UsageError("grpo config: unknown task '" + c.task + "'");
    return c;
}

KvReportConfig parse_kvreport_config(const std::string& text) {
    json j = parse_json(text);
    Reader r(j, "kvreport config");
    check_schema(r);
    KvReportConfig c;
    if (const json* grid = r.child("grid")) {
        if (!grid->is_array()) throw ConfigError("kvreport config: grid must be an array");
        for (const json& row : *grid) {
            Reader rr(row, "kvreport row");
            KvReportConfig::Row out;
            rr.get("variant", out.variant);
            rr.get("n_h", out.n_h);
            rr.get("d_h", out.d_h);
            rr.get("d_c", out.d_c);
            rr.get("d_R", out.d_R);
            rr.get("groups", out.groups);
            rr.get("T", out.T);
            rr.get("L", out.L);
            rr.finish();
            c.grid.push_back(out);
        }
    }
    r.finish();
    return c;
}

std::string serialize(const TrainConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["task"] = c.task;
    j["seed"] = c.seed;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["corpus_size"] = c.corpus_size;
    j["seq_len"] = c.seq_len;
    j["vocab"] = c.vocab;
    j["period"] = c.period;
    j["payload_len"] = c.payload_len;
    j["lr"] = c.lr;
    j["checkpoint_every"] = c.checkpoint_every;
    j["report"] = c.report;
    j["mtp"] = {{"depth", c.mtp.depth}, {"lambda", c.mtp.lambda}};
    j["digitsum"] = digitsum_json(c.digitsum);
    j["model"] = model_json(c.model);
    return j.dump(2);
}

std::string serialize(const GrpoRunConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["seed"] = c.seed;
    j["task"] = c.task;
    j["digitsum"] = digitsum_json(c.digitsum);
    j["task_count"] = c.task_count;
    j["steps"] = c.steps;
    j["warmup_steps"] = c.warmup_steps;
    j["warmup_batch"] = c.warmup_batch;
    j["warmup_lr"] = c.warmup_lr;
    j["report"] = c.report;
    j["hyper"] = {{"epsilon", c.hyper.epsilon},
                  {"beta", c.hyper.beta},
                  {"G", c.hyper.G},
                  {"lr", c.hyper.lr},
                  {"lr_final", c.hyper.lr_final},
                  {"groups_per_step", c.hyper.groups_per_step},
                  {"max_new_tokens", c.hyper.max_new_tokens},
                  {"temperature", c.hyper.temperature},
                  {"epochs", c.hyper.epochs}};
    j["model"] = model_json(c.model);
    return j.dump(2);
}

std::string serialize(const KvReportConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    json grid = json::array();
    for (const KvReportConfig::Row& row : c.grid) {
        grid.push_back({{"variant", row.variant},
                        {"n_h", row.n_h},
                        {"d_h", row.d_h},
                        {"d_c", row.d_c},
                        {"d_R", row.d_R},
                        {"groups", row.groups},
                        {"T", row.T},
                        {"L", row.L}});
    }
    j["grid"] = std::move(grid);
    return j.dump(2);
}

} // namespace latentkit
