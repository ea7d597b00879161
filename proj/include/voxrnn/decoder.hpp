#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "voxrnn/codec.hpp"
#include "voxrnn/errors.hpp"
#include "voxrnn/lm.hpp"
#include "voxrnn/recurrent.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

enum class SamplingStrategy { greedy, top_k, top_p };

struct GenerationConfig {
    SamplingStrategy strategy = SamplingStrategy::greedy;
    std::size_t top_k = 1;
    double top_p = 1.0;
    double temperature = 1.0;
    std::size_t max_tokens = 512;
    std::size_t min_tokens = 1; // eos_speech is suppressed until this many ids were emitted
    std::uint64_t seed = 0;

    void validate() const {
        if (!(temperature > 0.0)) throw parameter_error("generation: temperature must be positive");
        if (strategy == SamplingStrategy::top_k && top_k < 1) throw parameter_error("generation: top_k must be >= 1");
        if (strategy == SamplingStrategy::top_p && !(top_p > 0.0 && top_p <= 1.0))
            throw parameter_error("generation: top_p must be in (0, 1]");
        if (min_tokens > max_tokens)
            throw parameter_error("generation: min_tokens " + std::to_string(min_tokens) + " exceeds max_tokens " +
                                  std::to_string(max_tokens));
    }
};

/// Picks the next id from logits of length speech_vocab + 1 (last entry is
/// eos_speech). With `suppress_eos` the eos logit is treated as -inf.
template <class T>
TokenId sample(std::span<const T> logits, const GenerationConfig& config, SeededRng& rng, bool suppress_eos = false) {
    config.validate();
    if (logits.size() < 2) throw parameter_error("sample: need at least one codeword plus eos");
    const std::size_t n = suppress_eos ? logits.size() - 1 : logits.size();

    if (config.strategy == SamplingStrategy::greedy) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (logits[i] > logits[best]) best = i;
        return static_cast<TokenId>(best);
    }

    // candidate ids ordered by logit descending, id ascending on ties
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });

    const double inv_t = 1.0 / config.temperature;
    const double top = static_cast<double>(logits[order[0]]);
    std::vector<double> probs(n);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        probs[r] = std::exp((static_cast<double>(logits[order[r]]) - top) * inv_t);
        total += probs[r];
    }
    std::size_t keep = n;
    if (config.strategy == SamplingStrategy::top_k) {
        keep = std::min(config.top_k, n);
    } else {
        double cum = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            cum += probs[r] / total;
            if (cum >= config.top_p) {
                keep = r + 1;
                break;
            }
        }
    }
    double kept = 0.0;
    for (std::size_t r = 0; r < keep; ++r) kept += probs[r];
    const double u = rng.uniform() * kept;
    double cum = 0.0;
    for (std::size_t r = 0; r < keep; ++r) {
        cum += probs[r];
        if (u < cum) return static_cast<TokenId>(order[r]);
    }
    return static_cast<TokenId>(order[keep - 1]);
}

template <class T>
TokenId sample(const std::vector<T>& logits, const GenerationConfig& config, SeededRng& rng, bool suppress_eos = false) {
    return sample(std::span<const T>(logits), config, rng, suppress_eos);
}

template <class T>
struct Prefill {
    RecurrentState<T> state;
    std::vector<T> hidden; // hidden at the final prefix position
    std::size_t prefix_length = 0;
};

/// Runs sos | text | task | prompt audio through the stack from a fresh state.
template <class T>
Prefill<T> prefill(const Model<T>& model, const TokenSequence& text, const TokenSequence& prompt_speech) {
    PackedInput<T> prefix = assemble_prefix(model, text, prompt_speech);
    Prefill<T> out{RecurrentState<T>(model.config.block), {}, prefix.length()};
    basic_matrix<T> h = stack_sequence(model.blocks, prefix.embeddings, out.state);
    const auto last = h.row(h.rows() - 1);
    out.hidden.assign(last.begin(), last.end());
    return out;
}

enum class StopReason { eos, max_tokens };

struct GenerationResult {
    std::vector<TokenId> speech_ids;
    StopReason stop_reason = StopReason::max_tokens;
    std::vector<double> per_token_latency_us;
    std::size_t state_bytes = 0;
    std::vector<std::size_t> state_bytes_trace; // one entry per decoding step
};

/// Thrown when the incremental consumer fails; carries what was generated.
class generation_aborted : public error {
public:
    generation_aborted(const std::string& what, GenerationResult partial)
        : error(what), partial_(std::move(partial)) {}
    const GenerationResult& partial() const { return partial_; }

private:
    GenerationResult partial_;
};

/// Stateful incremental decoder. Each call to next() samples one id from the
/// current hidden state and, unless it is eos_speech, feeds it back through
/// the stack so the state always includes every emitted id.
template <class T>
class Generator {
public:
    Generator(const Model<T>& model, const TokenSequence& text, const TokenSequence& prompt_speech,
              GenerationConfig config)
        : model_(model), config_(config), rng_(config.seed) {
        config_.validate();
        Prefill<T> p = prefill(model, text, prompt_speech);
        state_ = std::move(p.state);
        hidden_ = std::move(p.hidden);
    }

    /// Next emitted id, or nullopt once eos is sampled or max_tokens is reached.
    std::optional<TokenId> next() {
        if (done_) return std::nullopt;
        if (emitted_ >= config_.max_tokens) {
            done_ = true;
            stop_ = StopReason::max_tokens;
            return std::nullopt;
        }
        const std::vector<T> logits = audio_head_logits(model_, std::span<const T>(hidden_));
        const TokenId id = sample(logits, config_, rng_, emitted_ < config_.min_tokens);
        if (id == model_.config.specials().eos_speech()) {
            done_ = true;
            stop_ = StopReason::eos;
            return std::nullopt;
        }
        hidden_ = stack_step(model_.blocks, model_.lm.speech_embedding.row(static_cast<std::size_t>(id)), state_);
        ++emitted_;
        return id;
    }

    const RecurrentState<T>& state() const { return state_; }
    std::span<const T> hidden() const { return hidden_; }
    std::size_t emitted() const { return emitted_; }
    bool done() const { return done_; }
    StopReason stop_reason() const { return stop_; }

private:
    const Model<T>& model_;
    GenerationConfig config_;
    SeededRng rng_;
    RecurrentState<T> state_;
    std::vector<T> hidden_;
    std::size_t emitted_ = 0;
    bool done_ = false;
    StopReason stop_ = StopReason::max_tokens;
};

using TokenConsumer = std::function<void(TokenId)>;

template <class T>
GenerationResult generate(const Model<T>& model, const TokenSequence& text, const TokenSequence& prompt_speech,
                          const GenerationConfig& config, const TokenConsumer& on_token = {}) {
    using clock = std::chrono::steady_clock;
    Generator<T> gen(model, text, prompt_speech, config);
    GenerationResult result;
    result.state_bytes = gen.state().byte_size();
    for (;;) {
        const auto t0 = clock::now();
        const std::optional<TokenId> id = gen.next();
        const auto t1 = clock::now();
        if (!id) break;
        result.speech_ids.push_back(*id);
        result.per_token_latency_us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
        result.state_bytes_trace.push_back(gen.state().byte_size());
        if (on_token) {
            try {
                on_token(*id);
            } catch (const std::exception& e) {
                result.stop_reason = gen.stop_reason();
                throw generation_aborted(std::string("token consumer failed: ") + e.what(), std::move(result));
            }
        }
    }
    result.stop_reason = gen.stop_reason();
    return result;
}

} // namespace voxrnn
