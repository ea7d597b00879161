#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "voxrnn/attention.hpp"
#include "voxrnn/errors.hpp"
#include "voxrnn/lm.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

struct BenchRow {
    std::size_t length = 0;
    double recur_us_per_tok = 0.0;
    double attn_us_per_tok = 0.0;
    std::size_t state_bytes = 0;
    std::size_t cache_bytes = 0;
};

struct BenchOptions {
    std::size_t warmup = 4;
    std::size_t repetitions = 32;
    std::uint64_t seed = 0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw parameter_error("median: no samples");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Per-token decode latency after T context tokens, for the recurrent stack
/// and the attention baseline. Both run the shared audio head on every token.
/// Each repetition decodes one token from the same context: the recurrent
/// state is restored from a copy, the cache is truncated back to T.
inline std::vector<BenchRow> run_bench(const ModelConfig& config, const std::vector<std::size_t>& lengths,
                                       const BenchOptions& opt = {}) {
    if (lengths.empty()) throw parameter_error("bench: no lengths given");
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] == 0) throw parameter_error("bench: lengths must be >= 1");
        if (i && lengths[i] <= lengths[i - 1]) throw parameter_error("bench: lengths must be strictly ascending");
    }
    if (opt.repetitions == 0) throw parameter_error("bench: repetitions must be >= 1");
    using clock = std::chrono::steady_clock;
    const Model<float> model = Model<float>::init(config, opt.seed);
    SeededRng rng(mix_seed(opt.seed, 0xBE9C));
    const AttentionParams attn = AttentionParams::init(config.block, rng);
    const std::size_t d = config.block.d_model;

    auto token = [&](SeededRng& r) { return model.lm.speech_embedding.row(r.below(config.speech_vocab)); };
    RecurrentState<float> state(config.block);
    KvCache cache(config.block);
    SeededRng ctx(mix_seed(opt.seed, 0xC7));
    std::size_t pos = 0;
    std::vector<BenchRow> rows;
    for (std::size_t target : lengths) {
        for (; pos < target; ++pos) {
            const auto x = token(ctx);
            stack_step<float>(model.blocks, x, state);
            attention_step(attn, x, cache);
        }
        SeededRng probe(mix_seed(opt.seed, target));
        std::vector<double> recur, att;
        for (std::size_t rep = 0; rep < opt.warmup + opt.repetitions; ++rep) {
            const auto x = token(probe);
            RecurrentState<float> s = state;
            const auto t0 = clock::now();
            const auto h = stack_step<float>(model.blocks, x, s);
            const auto logits = audio_head_logits(model, std::span<const float>(h));
            const auto t1 = clock::now();
            const auto ha = attention_step(attn, x, cache);
            const auto la = audio_head_logits(model, std::span<const float>(ha));
            const auto t2 = clock::now();
            cache.truncate(target, d);
            if (logits.empty() || la.empty()) throw error("bench: empty logits");
            if (rep >= opt.warmup) {
                recur.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
                att.push_back(std::chrono::duration<double, std::micro>(t2 - t1).count());
            }
        }
        rows.push_back({target, median(recur), median(att), state.byte_size(), cache.byte_size()});
    }
    return rows;
}

inline std::string format_bench(const std::vector<BenchRow>& rows) {
    std::string out = "T recur_us_per_tok attn_us_per_tok state_bytes cache_bytes\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu %.3f %.3f %zu %zu\n", r.length, r.recur_us_per_tok, r.attn_us_per_tok,
                      r.state_bytes, r.cache_bytes);
        out += buf;
    }
    return out;
}

} // namespace voxrnn
