#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxrnn/codec.hpp"
#include "voxrnn/errors.hpp"
#include "voxrnn/numerics.hpp"
#include "voxrnn/recurrent.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

struct ModelConfig {
    BlockConfig block;
    std::size_t speech_vocab = kDefaultCodes;

    SpecialTokens specials() const { return SpecialTokens{speech_vocab}; }
    std::size_t text_vocab() const { return SpecialTokens::text_vocab; }

    void validate() const {
        block.validate();
        if (speech_vocab == 0) throw config_error("model config: speech_vocab must be >= 1");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct LmParams {
    basic_matrix<T> text_embedding;   // text_vocab x d
    basic_matrix<T> speech_embedding; // speech_vocab x d (no row for eos_speech)
    std::vector<T> sos_embedding;
    std::vector<T> task_id_embedding;
    std::vector<T> out_norm;
    basic_matrix<T> audio_head; // d x (speech_vocab + 1)

    LmParams() = default;
    explicit LmParams(const ModelConfig& c)
        : text_embedding(c.text_vocab(), c.block.d_model), speech_embedding(c.speech_vocab, c.block.d_model),
          sos_embedding(c.block.d_model), task_id_embedding(c.block.d_model), out_norm(c.block.d_model),
          audio_head(c.block.d_model, c.speech_vocab + 1) {}

    friend bool operator==(const LmParams&, const LmParams&) = default;
};

/// All learnable tensors. Tensor order (used by checkpoints):
/// text_embedding, speech_embedding, sos_embedding, task_id_embedding,
/// the per-layer block tensors, out_norm, audio_head.
template <class T>
struct Model {
    ModelConfig config;
    BlockParams<T> blocks;
    LmParams<T> lm;

    Model() = default;
    explicit Model(const ModelConfig& c) : config(c), blocks(c.block), lm(c) { c.validate(); }

    static Model init(const ModelConfig& c, std::uint64_t seed) {
        SeededRng rng(seed);
        Model m(c);
        for (auto* e : {&m.lm.text_embedding, &m.lm.speech_embedding})
            for (auto& v : e->values()) v = static_cast<T>(rng.normal());
        for (auto* e : {&m.lm.sos_embedding, &m.lm.task_id_embedding})
            for (auto& v : *e) v = static_cast<T>(rng.normal());
        m.blocks = BlockParams<T>::init(c.block, rng);
        std::fill(m.lm.out_norm.begin(), m.lm.out_norm.end(), T(1));
        for (auto& v : m.lm.audio_head.values()) v = static_cast<T>(rng.normal() * 0.02);
        return m;
    }

    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, auto s) { n += s.size(); });
        return n;
    }

    void zero() {
        visit([](const std::string&, std::span<T> s) { std::fill(s.begin(), s.end(), T(0)); });
    }

    template <class U>
    Model<U> cast() const {
        Model<U> out(config);
        std::vector<std::span<U>> dst;
        out.visit([&](const std::string&, std::span<U> s) { dst.push_back(s); });
        std::size_t i = 0;
        visit([&](const std::string&, std::span<const T> s) {
            std::transform(s.begin(), s.end(), dst[i++].begin(), [](T v) { return static_cast<U>(v); });
        });
        return out;
    }

    friend bool operator==(const Model&, const Model&) = default;

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        f(std::string("text_embedding"), s.lm.text_embedding.values());
        f(std::string("speech_embedding"), s.lm.speech_embedding.values());
        f(std::string("sos_embedding"), std::span(s.lm.sos_embedding));
        f(std::string("task_id_embedding"), std::span(s.lm.task_id_embedding));
        s.blocks.visit(f);
        f(std::string("out_norm"), std::span(s.lm.out_norm));
        f(std::string("audio_head"), s.lm.audio_head.values());
    }
};

struct TrainingExample {
    TokenSequence text{TokenRole::text, {}};
    TokenSequence prompt_speech{TokenRole::prompt_speech, {}};
    TokenSequence target_speech{TokenRole::target_speech, {}};
};

struct SegmentSpan {
    std::size_t begin = 0;
    std::size_t size = 0;
    std::size_t end() const { return begin + size; }
    friend bool operator==(const SegmentSpan&, const SegmentSpan&) = default;
};

/// Fixed layout order: sos | text | task | prompt audio | target audio.
struct Segments {
    SegmentSpan sos, text, task, prompt_audio, target_audio;
    std::array<SegmentSpan, 5> ordered() const { return {sos, text, task, prompt_audio, target_audio}; }
};

enum class PositionKind : std::uint8_t { sos, text, task, speech };

struct PositionSource {
    PositionKind kind;
    TokenId id; // text or speech id; unused for sos/task
};

template <class T>
struct PackedInput {
    basic_matrix<T> embeddings; // L x d
    Segments segments;
    std::vector<std::uint8_t> loss_mask;
    std::vector<TokenId> targets; // -1 where unsupervised
    std::vector<PositionSource> sources;

    std::size_t length() const { return sources.size(); }
    std::size_t masked_count() const {
        std::size_t n = 0;
        for (auto m : loss_mask) n += m;
        return n;
    }
};

/// Builds the prefix sos | text | task | prompt (no target) as embeddings plus sources.
template <class T>
PackedInput<T> assemble_prefix(const Model<T>& model, const TokenSequence& text, const TokenSequence& prompt) {
    const SpecialTokens sp = model.config.specials();
    if (text.role != TokenRole::text) throw data_error("assemble: text sequence has role " + std::string(role_name(text.role)));
    if (prompt.role == TokenRole::text) throw data_error("assemble: prompt sequence must be speech");
    text.validate(sp);
    prompt.validate(sp);
    const std::size_t d = model.config.block.d_model;
    PackedInput<T> p;
    p.embeddings = basic_matrix<T>(0, d);
    auto push = [&](PositionKind kind, TokenId id, std::span<const T> row) {
        p.embeddings.append_row(row);
        p.sources.push_back({kind, id});
    };
    p.segments.sos = {0, 1};
    push(PositionKind::sos, -1, model.lm.sos_embedding);
    p.segments.text = {1, text.size()};
    for (TokenId id : text.ids) push(PositionKind::text, id, model.lm.text_embedding.row(static_cast<std::size_t>(id)));
    p.segments.task = {p.segments.text.end(), 1};
    push(PositionKind::task, -1, model.lm.task_id_embedding);
    p.segments.prompt_audio = {p.segments.task.end(), prompt.size()};
    for (TokenId id : prompt.ids)
        push(PositionKind::speech, id, model.lm.speech_embedding.row(static_cast<std::size_t>(id)));
    p.segments.target_audio = {p.segments.prompt_audio.end(), 0};
    p.loss_mask.assign(p.sources.size(), 0);
    p.targets.assign(p.sources.size(), -1);
    return p;
}

/// Packs one training example. The position before the target segment
/// predicts target[0], target position i predicts target[i+1], and the last
/// target position predicts eos_speech.
template <class T>
PackedInput<T> assemble(const TrainingExample& ex, const Model<T>& model) {
    const SpecialTokens sp = model.config.specials();
    if (ex.target_speech.role != TokenRole::target_speech)
        throw data_error("assemble: target sequence has role " + std::string(role_name(ex.target_speech.role)));
    ex.target_speech.validate(sp);
    PackedInput<T> p = assemble_prefix(model, ex.text, ex.prompt_speech);
    const std::size_t start = p.segments.target_audio.begin;
    p.segments.target_audio.size = ex.target_speech.size();
    for (TokenId id : ex.target_speech.ids) {
        p.embeddings.append_row(model.lm.speech_embedding.row(static_cast<std::size_t>(id)));
        p.sources.push_back({PositionKind::speech, id});
    }
    p.loss_mask.assign(p.sources.size(), 0);
    p.targets.assign(p.sources.size(), -1);
    if (!ex.target_speech.ids.empty()) {
        for (std::size_t i = 0; i < ex.target_speech.size(); ++i) {
            p.loss_mask[start - 1 + i] = 1;
            p.targets[start - 1 + i] = ex.target_speech.ids[i];
        }
        p.loss_mask[p.sources.size() - 1] = 1;
        p.targets[p.sources.size() - 1] = sp.eos_speech();
    }
    return p;
}

template <class T>
struct LmCache {
    StackCache<T> stack;
    basic_matrix<T> hidden;
    basic_matrix<T> normed;
    std::vector<double> inv;
    bool valid = false;
};

/// Final norm + audio head for each row of `hidden`.
template <class T>
basic_matrix<T> audio_head_logits(const Model<T>& model, const basic_matrix<T>& hidden, basic_matrix<T>* normed_out = nullptr,
                                  std::vector<double>* inv_out = nullptr) {
    std::vector<double> inv;
    basic_matrix<T> normed = detail::norm_rows<T>(hidden, model.lm.out_norm, inv);
    basic_matrix<T> logits = detail::project(normed, model.lm.audio_head);
    if (normed_out) *normed_out = std::move(normed);
    if (inv_out) *inv_out = std::move(inv);
    return logits;
}

template <class T>
std::vector<T> audio_head_logits(const Model<T>& model, std::span<const T> hidden) {
    basic_matrix<T> h(1, hidden.size(), std::vector<T>(hidden.begin(), hidden.end()));
    auto l = audio_head_logits(model, h);
    return {l.values().begin(), l.values().end()};
}

template <class T>
basic_matrix<T> lm_forward(const Model<T>& model, const PackedInput<T>& packed, RecurrentState<T>& state,
                           LmCache<T>* cache = nullptr) {
    basic_matrix<T> hidden = stack_sequence(model.blocks, packed.embeddings, state, cache ? &cache->stack : nullptr);
    if (!cache) return audio_head_logits(model, hidden);
    basic_matrix<T> logits = audio_head_logits(model, hidden, &cache->normed, &cache->inv);
    cache->hidden = std::move(hidden);
    cache->valid = true;
    return logits;
}

template <class T>
LossValue lm_loss(const basic_matrix<T>& logits, const PackedInput<T>& packed) {
    if (logits.rows() != packed.length())
        throw shape_error("lm_loss: logits rows " + std::to_string(logits.rows()) + " vs packed length " +
                          std::to_string(packed.length()));
    return cross_entropy(logits, std::span<const std::int32_t>(packed.targets),
                         std::span<const std::uint8_t>(packed.loss_mask));
}

/// Adds gradients for every tensor into `grads` given d(loss)/d(logits).
template <class T>
void lm_backward(const Model<T>& model, const PackedInput<T>& packed, const LmCache<T>& cache,
                 const basic_matrix<T>& dlogits, Model<T>& grads) {
    if (!cache.valid || !cache.stack.valid) throw usage_error("lm_backward: no cached forward pass");
    if (!(grads.config == model.config)) throw shape_error("lm_backward: gradient buffer has a different config");
    kernel::accumulate_at_b(cache.normed, dlogits, grads.lm.audio_head);
    basic_matrix<T> dnormed(dlogits.rows(), model.config.block.d_model);
    kernel::accumulate_a_bt(dlogits, model.lm.audio_head, dnormed);
    basic_matrix<T> dhidden(dnormed.rows(), dnormed.cols());
    detail::norm_rows_backward<T>(cache.hidden, model.lm.out_norm, cache.inv, dnormed, dhidden, grads.lm.out_norm);
    basic_matrix<T> de = stack_backward(model.blocks, cache.stack, dhidden, grads.blocks);
    for (std::size_t t = 0; t < packed.length(); ++t) {
        std::span<T> dst;
        const PositionSource& src = packed.sources[t];
        switch (src.kind) {
        case PositionKind::sos: dst = grads.lm.sos_embedding; break;
        case PositionKind::task: dst = grads.lm.task_id_embedding; break;
        case PositionKind::text: dst = grads.lm.text_embedding.row(static_cast<std::size_t>(src.id)); break;
        case PositionKind::speech: dst = grads.lm.speech_embedding.row(static_cast<std::size_t>(src.id)); break;
        }
        const auto g = de.row(t);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
}

/// Forward from a fresh state, masked loss, and backward; gradients are
/// scaled by `scale` and added into `grads`.
template <class T>
LossValue lm_loss_and_grad(const Model<T>& model, const PackedInput<T>& packed, Model<T>& grads, double scale = 1.0) {
    RecurrentState<T> state(model.config.block);
    LmCache<T> cache;
    basic_matrix<T> logits = lm_forward(model, packed, state, &cache);
    LossValue loss = lm_loss(logits, packed);
    basic_matrix<T> dlogits = cross_entropy_backward(logits, std::span<const std::int32_t>(packed.targets),
                                                     std::span<const std::uint8_t>(packed.loss_mask), scale);
    lm_backward(model, packed, cache, dlogits, grads);
    return loss;
}

template <class T>
LossValue lm_evaluate(const Model<T>& model, const PackedInput<T>& packed) {
    RecurrentState<T> state(model.config.block);
    return lm_loss(lm_forward(model, packed, state), packed);
}

} // namespace voxrnn
