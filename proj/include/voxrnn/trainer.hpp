#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxrnn/dataprep.hpp"
#include "voxrnn/errors.hpp"
#include "voxrnn/io.hpp"
#include "voxrnn/lm.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

struct TrainConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double grad_clip = 1.0; // max global L2 norm; <= 0 disables clipping
    std::size_t steps = 1000;
    std::size_t accumulation = 1; // examples per optimizer step
    std::uint64_t seed = 0;
    double prompt_drop = 0.1;
    std::size_t checkpoint_every = 0; // 0: only the final checkpoint

    void validate() const {
        if (!(lr >= 0.0 && std::isfinite(lr))) throw config_error("train config: lr must be >= 0");
        if (!(beta1 > 0.0 && beta1 < 1.0)) throw config_error("train config: beta1 must be in (0, 1)");
        if (!(beta2 > 0.0 && beta2 < 1.0)) throw config_error("train config: beta2 must be in (0, 1)");
        if (!(eps > 0.0)) throw config_error("train config: eps must be positive");
        if (accumulation == 0) throw config_error("train config: accumulation must be >= 1");
        if (!(prompt_drop >= 0.0 && prompt_drop <= 1.0))
            throw config_error("train config: prompt_drop must be in [0, 1]");
    }
};

/// Reads a JSON object with optional keys: the TrainConfig fields plus
/// d_model, n_heads, n_layers, speech_vocab for the model.
inline void parse_train_config(std::string_view text, TrainConfig& train, ModelConfig& model) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("train config: ") + e.what());
    }
    if (!j.is_object()) throw config_error("train config: expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        const auto& v = it.value();
        try {
            if (key == "lr") train.lr = v.get<double>();
            else if (key == "beta1") train.beta1 = v.get<double>();
            else if (key == "beta2") train.beta2 = v.get<double>();
            else if (key == "eps") train.eps = v.get<double>();
            else if (key == "grad_clip") train.grad_clip = v.get<double>();
            else if (key == "steps") train.steps = v.get<std::size_t>();
            else if (key == "accumulation") train.accumulation = v.get<std::size_t>();
            else if (key == "seed") train.seed = v.get<std::uint64_t>();
            else if (key == "prompt_drop") train.prompt_drop = v.get<double>();
            else if (key == "checkpoint_every") train.checkpoint_every = v.get<std::size_t>();
            else if (key == "d_model") model.block.d_model = v.get<std::size_t>();
            else if (key == "n_heads") model.block.n_heads = v.get<std::size_t>();
            else if (key == "n_layers") model.block.n_layers = v.get<std::size_t>();
            else if (key == "speech_vocab") model.speech_vocab = v.get<std::size_t>();
            else throw config_error("train config: unknown key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw config_error("train config: key '" + key + "': " + e.what());
        }
    }
    train.validate();
    model.validate();
}

// ---------------------------------------------------------------------------
// Optimizer

struct Moments {
    Model<float> m, v;

    Moments() = default;
    explicit Moments(const ModelConfig& c) : m(c), v(c) {}
    friend bool operator==(const Moments&, const Moments&) = default;
};

inline double global_norm(const Model<float>& grads) {
    double ss = 0.0;
    grads.visit([&](const std::string&, std::span<const float> s) {
        for (float g : s) ss += static_cast<double>(g) * static_cast<double>(g);
    });
    return std::sqrt(ss);
}

/// Scales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
inline double clip_gradients(Model<float>& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        grads.visit([&](const std::string&, std::span<float> g) {
            for (auto& x : g) x = static_cast<float>(static_cast<double>(x) * s);
        });
    }
    return norm;
}

/// One bias-corrected adaptive-moment update at step t (1-based). Gradients
/// are clipped in place first. Returns the pre-clip gradient norm.
inline double adam_step(Model<float>& params, Model<float>& grads, Moments& moments, const TrainConfig& config,
                        std::uint64_t t) {
    if (t < 1) throw parameter_error("adam_step: step index must be >= 1");
    if (!(params.config == grads.config) || !(params.config == moments.m.config))
        throw shape_error("adam_step: parameter, gradient and moment shapes differ");
    grads.visit([](const std::string& name, std::span<const float> g) {
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(g[i]))
                throw training_error("adam_step: non-finite gradient in " + name + "[" + std::to_string(i) + "]");
    });
    const double norm = clip_gradients(grads, config.grad_clip);

    std::vector<std::span<float>> p, g, m, v;
    params.visit([&](const std::string&, std::span<float> s) { p.push_back(s); });
    grads.visit([&](const std::string&, std::span<float> s) { g.push_back(s); });
    moments.m.visit([&](const std::string&, std::span<float> s) { m.push_back(s); });
    moments.v.visit([&](const std::string&, std::span<float> s) { v.push_back(s); });
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t k = 0; k < p.size(); ++k)
        for (std::size_t i = 0; i < p[k].size(); ++i) {
            const double gi = g[k][i];
            const double mi = b1 * m[k][i] + (1.0 - b1) * gi;
            const double vi = b2 * v[k][i] + (1.0 - b2) * gi * gi;
            m[k][i] = static_cast<float>(mi);
            v[k][i] = static_cast<float>(vi);
            const double step = config.lr * (mi / c1) / (std::sqrt(vi / c2) + config.eps);
            p[k][i] = static_cast<float>(static_cast<double>(p[k][i]) - step);
        }
    clamp_mix_coefficients(params.blocks);
    return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
    Model<float> model;
    Moments moments;
    std::uint64_t step = 0;
    SeededRng rng{0};

    TrainState() = default;
    TrainState(const ModelConfig& c, std::uint64_t seed)
        : model(Model<float>::init(c, seed)), moments(c), rng(mix_seed(seed, 0x7A11)) {}

    friend bool operator==(const TrainState&, const TrainState&) = default;
};

/// Layout: "VXCK", u32 version, u32 d_model, n_heads, n_layers, text_vocab,
/// speech_vocab, u64 step, u64 rng state, then parameters, first moments and
/// second moments as little-endian f32 in Model::visit order.
inline std::vector<char> serialize_checkpoint(const TrainState& s) {
    io::ByteWriter w;
    w.bytes("VXCK");
    w.u32(kCheckpointVersion);
    const auto& c = s.model.config;
    w.u32(static_cast<std::uint32_t>(c.block.d_model));
    w.u32(static_cast<std::uint32_t>(c.block.n_heads));
    w.u32(static_cast<std::uint32_t>(c.block.n_layers));
    w.u32(static_cast<std::uint32_t>(c.text_vocab()));
    w.u32(static_cast<std::uint32_t>(c.speech_vocab));
    w.u64(s.step);
    w.u64(s.rng.state());
    for (const Model<float>* m : {&s.model, &s.moments.m, &s.moments.v})
        m->visit([&](const std::string&, std::span<const float> t) { w.f32s(t); });
    return w.take();
}

inline TrainState deserialize_checkpoint(std::span<const char> data, const std::string& what = "checkpoint") {
    io::ByteReader r(data, what);
    if (r.bytes(4) != "VXCK") throw data_error(what + ": bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw data_error(what + ": unsupported version " + std::to_string(version));
    ModelConfig c;
    c.block.d_model = r.u32();
    c.block.n_heads = r.u32();
    c.block.n_layers = r.u32();
    const std::uint32_t text_vocab = r.u32();
    c.speech_vocab = r.u32();
    if (text_vocab != c.text_vocab())
        throw config_error(what + ": text vocabulary " + std::to_string(text_vocab) + " != " +
                           std::to_string(c.text_vocab()));
    try {
        c.validate();
    } catch (const error& e) {
        throw data_error(what + ": " + e.what());
    }
    TrainState s;
    s.model = Model<float>(c);
    s.moments = Moments(c);
    s.step = r.u64();
    s.rng.set_state(r.u64());
    for (Model<float>* m : {&s.model, &s.moments.m, &s.moments.v})
        m->visit([&](const std::string&, std::span<float> t) { r.f32s(t); });
    if (!r.at_end()) throw data_error(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
    io::write_file(path, serialize_checkpoint(s));
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Training loop

struct StepRecord {
    std::uint64_t step = 0;
    double loss = 0.0;
    std::size_t masked = 0;
    double ms = 0.0;
    double grad_norm = 0.0;
};

inline std::string format_step(const StepRecord& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%llu %.6f %zu %.3f", static_cast<unsigned long long>(r.step), r.loss, r.masked,
                  r.ms);
    return buf;
}

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const TrainState&)> on_checkpoint;
};

/// Record visiting order: plan_batches order with no token budget, so records
/// are sorted by packed length.
inline std::vector<std::size_t> training_order(const std::vector<CorpusRecord>& records) {
    std::size_t longest = 0;
    for (const auto& r : records) longest = std::max(longest, packed_length(r));
    return plan_batches(records, longest).order();
}

/// One optimizer step. Step t (1-based) uses examples (t-1)*A .. t*A-1 of the
/// cyclic training order, so resuming needs only the step counter and RNG.
inline StepRecord train_step(TrainState& s, const std::vector<CorpusRecord>& records,
                             const std::vector<std::size_t>& order, const TrainConfig& config) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const std::uint64_t t = s.step + 1;
    std::vector<PackedInput<float>> packed;
    std::vector<const CorpusRecord*> sources;
    std::size_t total = 0;
    for (std::size_t e = 0; e < config.accumulation; ++e) {
        const std::size_t idx = order[((t - 1) * config.accumulation + e) % order.size()];
        const CorpusRecord rec = apply_prompt_drop(records[idx], config.prompt_drop, s.rng);
        try {
            packed.push_back(assemble(to_example(rec), s.model));
        } catch (const error& ex) {
            throw data_error(records[idx].provenance + ": " + ex.what());
        }
        sources.push_back(&records[idx]);
        total += packed.back().masked_count();
    }
    if (total == 0) throw empty_loss_error("train_step: no supervised positions in step " + std::to_string(t));

    Model<float> grads(s.model.config);
    double loss_sum = 0.0;
    for (std::size_t e = 0; e < packed.size(); ++e) {
        const double w = static_cast<double>(packed[e].masked_count()) / static_cast<double>(total);
        LossValue lv;
        try {
            lv = lm_loss_and_grad(s.model, packed[e], grads, w);
        } catch (const data_error& ex) {
            throw training_error(sources[e]->provenance + ": " + ex.what());
        }
        if (!std::isfinite(lv.loss))
            throw training_error("non-finite loss at step " + std::to_string(t) + " on " + sources[e]->provenance);
        loss_sum += lv.loss * static_cast<double>(lv.count);
    }
    StepRecord rec;
    rec.grad_norm = adam_step(s.model, grads, s.moments, config, t);
    s.step = t;
    rec.step = t;
    rec.loss = loss_sum / static_cast<double>(total);
    rec.masked = total;
    rec.ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    return rec;
}

/// Runs until s.step == config.steps. Checkpoint hook fires every
/// checkpoint_every steps and once at the end.
inline std::vector<StepRecord> train(TrainState& s, const std::vector<CorpusRecord>& records,
                                     const TrainConfig& config, const TrainHooks& hooks = {}) {
    config.validate();
    if (records.empty()) throw data_error("train: corpus is empty");
    const auto order = training_order(records);
    std::vector<StepRecord> curve;
    while (s.step < config.steps) {
        curve.push_back(train_step(s, records, order, config));
        if (hooks.on_step) hooks.on_step(curve.back());
        if (hooks.on_checkpoint && config.checkpoint_every && s.step % config.checkpoint_every == 0 &&
            s.step != config.steps)
            hooks.on_checkpoint(s);
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(s);
    return curve;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    double loss = 0.0;     // token-weighted mean over masked positions
    double accuracy = 0.0; // argmax (lowest id on ties) == target
    std::size_t masked = 0;
};

inline EvalResult evaluate_teacher_forced(const Model<float>& model, const std::vector<CorpusRecord>& records) {
    const std::size_t vocab = model.config.speech_vocab;
    EvalResult out;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& r : records) {
        for (const auto* ids : {&r.prompt_speech_ids, &r.target_speech_ids})
            for (TokenId id : *ids)
                if (id < 0 || static_cast<std::size_t>(id) >= vocab)
                    throw config_error(r.provenance + ": speech id " + std::to_string(id) +
                                       " outside model vocabulary of " + std::to_string(vocab));
        const PackedInput<float> p = assemble(to_example(r), model);
        RecurrentState<float> state(model.config.block);
        const basic_matrix<float> logits = lm_forward(model, p, state);
        const LossValue lv = lm_loss(logits, p);
        loss_sum += lv.loss * static_cast<double>(lv.count);
        out.masked += lv.count;
        for (std::size_t t = 0; t < p.length(); ++t) {
            if (!p.loss_mask[t]) continue;
            const auto row = logits.row(t);
            std::size_t best = 0;
            for (std::size_t j = 1; j < row.size(); ++j)
                if (row[j] > row[best]) best = j;
            correct += static_cast<TokenId>(best) == p.targets[t];
        }
    }
    if (out.masked == 0) throw empty_loss_error("evaluate_teacher_forced: no supervised positions");
    out.loss = loss_sum / static_cast<double>(out.masked);
    out.accuracy = static_cast<double>(correct) / static_cast<double>(out.masked);
    return out;
}

} // namespace voxrnn
