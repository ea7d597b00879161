#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "voxrnn/errors.hpp"
#include "voxrnn/io.hpp"
#include "voxrnn/numerics.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

using TokenId = std::int32_t;

/// Text-vocabulary layout: specials first, then a reserved control block,
/// then the 256 byte values. The speech EOS lives only in logit space, one
/// past the last codeword.
struct SpecialTokens {
    static constexpr TokenId sos_text = 0;
    static constexpr TokenId task_id = 1;
    static constexpr TokenId end_of_prompt = 2;
    static constexpr TokenId control_begin = 3;
    static constexpr TokenId control_end = 16; // exclusive; 13 reserved ids
    static constexpr TokenId byte_offset = 16;
    static constexpr std::size_t text_vocab = 16 + 256;
    static constexpr std::string_view end_of_prompt_text = "<|endofprompt|>";

    std::size_t speech_vocab = 1024;

    TokenId eos_speech() const { return static_cast<TokenId>(speech_vocab); }
    std::size_t speech_logits() const { return speech_vocab + 1; }

    /// Reserved ids for expressive control tokens (laughter, breath, dialects).
    /// Only the reservation exists; nothing in the data pipeline emits them.
    static TokenId control_token(std::size_t index) {
        if (index >= static_cast<std::size_t>(control_end - control_begin))
            throw parameter_error("control token index out of reserved range");
        return control_begin + static_cast<TokenId>(index);
    }
    static constexpr std::array<std::string_view, 2> named_controls = {"<|laughter|>", "<|breath|>"};
};

enum class TokenRole { text, prompt_speech, target_speech };

inline const char* role_name(TokenRole r) {
    switch (r) {
    case TokenRole::text: return "text";
    case TokenRole::prompt_speech: return "prompt_speech";
    case TokenRole::target_speech: return "target_speech";
    }
    return "?";
}

struct TokenSequence {
    TokenRole role = TokenRole::text;
    std::vector<TokenId> ids;

    std::size_t size() const { return ids.size(); }

    void validate(const SpecialTokens& sp) const {
        const std::size_t limit = role == TokenRole::text ? SpecialTokens::text_vocab : sp.speech_vocab;
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= limit)
                throw data_error(std::string(role_name(role)) + " token " + std::to_string(ids[i]) +
                                 " at index " + std::to_string(i) + " outside vocabulary of " +
                                 std::to_string(limit));
    }

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// ---------------------------------------------------------------------------
// Text

inline TokenSequence text_encode(std::string_view s, bool instruction) {
    TokenSequence out{TokenRole::text, {}};
    out.ids.reserve(s.size() + 1);
    for (char c : s) out.ids.push_back(SpecialTokens::byte_offset + static_cast<unsigned char>(c));
    if (instruction) out.ids.push_back(SpecialTokens::end_of_prompt);
    return out;
}

struct DecodedText {
    std::string text;
    bool instruction = false;
};

inline DecodedText text_decode(const TokenSequence& seq) {
    if (seq.role != TokenRole::text) throw data_error("text_decode: sequence is not text");
    DecodedText out;
    std::size_t n = seq.ids.size();
    if (n > 0 && seq.ids.back() == SpecialTokens::end_of_prompt) {
        out.instruction = true;
        --n;
    }
    out.text.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const TokenId id = seq.ids[i];
        if (id < SpecialTokens::byte_offset || id >= static_cast<TokenId>(SpecialTokens::text_vocab))
            throw data_error("text_decode: id " + std::to_string(id) + " at index " + std::to_string(i) +
                             " is not a byte token");
        out.text.push_back(static_cast<char>(id - SpecialTokens::byte_offset));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Audio codebook

inline constexpr std::uint64_t kCodebookSeed = 0x5658434231ull;
inline constexpr std::size_t kDefaultCodes = 1024;
inline constexpr std::size_t kDefaultFeatureDim = 16;
inline constexpr std::size_t kHopSamples = 160;
inline constexpr std::uint32_t kSampleRate = 16000;

struct Codebook {
    Matrix centers; // n_codes x dim

    std::size_t n_codes() const { return centers.rows(); }
    std::size_t dim() const { return centers.cols(); }

    /// Rotated Halton points scaled to [-1,1]^dim.
    static Codebook make(std::size_t n_codes = kDefaultCodes, std::size_t dim = kDefaultFeatureDim,
                         std::uint64_t seed = kCodebookSeed) {
        if (n_codes == 0 || dim == 0) throw parameter_error("codebook: n_codes and dim must be >= 1");
        std::vector<std::uint32_t> primes;
        for (std::uint32_t c = 2; primes.size() < dim; ++c) {
            bool prime = true;
            for (auto p : primes)
                if (c % p == 0) { prime = false; break; }
            if (prime) primes.push_back(c);
        }
        SeededRng rng(seed);
        std::vector<double> shift(dim);
        for (auto& s : shift) s = rng.uniform();
        Codebook b{Matrix(n_codes, dim)};
        for (std::size_t i = 0; i < n_codes; ++i)
            for (std::size_t d = 0; d < dim; ++d) {
                double f = 1.0, x = 0.0;
                for (std::size_t k = i + 1; k > 0; k /= primes[d]) {
                    f /= primes[d];
                    x += f * static_cast<double>(k % primes[d]);
                }
                x += shift[d];
                x -= std::floor(x);
                b.centers(i, d) = static_cast<float>(2.0 * x - 1.0);
            }
        return b;
    }

    friend bool operator==(const Codebook&, const Codebook&) = default;
};

inline std::vector<char> serialize_codebook(const Codebook& book) {
    io::ByteWriter w;
    w.bytes("VXCB");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(book.n_codes()));
    w.u32(static_cast<std::uint32_t>(book.dim()));
    w.f32s(book.centers.values());
    return w.take();
}

inline Codebook deserialize_codebook(std::span<const char> data) {
    io::ByteReader r(data, "codebook");
    if (r.bytes(4) != "VXCB") throw data_error("codebook: bad magic");
    if (const auto v = r.u32(); v != 1) throw data_error("codebook: unsupported version " + std::to_string(v));
    const std::size_t n = r.u32(), dim = r.u32();
    if (r.remaining() != n * dim * 4) throw data_error("codebook: payload size does not match header");
    Codebook b{Matrix(n, dim)};
    r.f32s(b.centers.values());
    return b;
}

inline void save_codebook(const std::filesystem::path& path, const Codebook& book) {
    const auto bytes = serialize_codebook(book);
    io::write_file(path, bytes);
}

inline Codebook load_codebook(const std::filesystem::path& path) {
    return deserialize_codebook(io::read_file(path));
}

/// Nearest center by L2 distance; ties go to the lowest id.
inline TokenId nearest_code(std::span<const float> frame, const Codebook& book) {
    TokenId best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < book.n_codes(); ++c) {
        const auto center = book.centers.row(c);
        double dist = 0.0;
        for (std::size_t j = 0; j < frame.size(); ++j) {
            const double diff = static_cast<double>(frame[j]) - static_cast<double>(center[j]);
            dist += diff * diff;
        }
        if (dist < best_d) {
            best_d = dist;
            best = static_cast<TokenId>(c);
        }
    }
    return best;
}

inline TokenSequence audio_encode(const Matrix& frames, const Codebook& book,
                                  TokenRole role = TokenRole::target_speech) {
    if (role == TokenRole::text) throw parameter_error("audio_encode: role must be a speech role");
    if (frames.rows() > 0 && frames.cols() != book.dim())
        throw shape_error("audio_encode: frame dim " + std::to_string(frames.cols()) +
                          " does not match codebook dim " + std::to_string(book.dim()));
    TokenSequence out{role, {}};
    out.ids.reserve(frames.rows());
    for (std::size_t t = 0; t < frames.rows(); ++t) out.ids.push_back(nearest_code(frames.row(t), book));
    return out;
}

inline Matrix audio_decode(std::span<const TokenId> ids, const Codebook& book) {
    Matrix frames(ids.size(), book.dim());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= book.n_codes())
            throw data_error("audio_decode: id " + std::to_string(ids[t]) + " at index " + std::to_string(t) +
                             " is not a codeword (n_codes=" + std::to_string(book.n_codes()) + ")");
        const auto c = book.centers.row(static_cast<std::size_t>(ids[t]));
        std::copy(c.begin(), c.end(), frames.row(t).begin());
    }
    return frames;
}

/// Synthetic "reference audio" features: a clamped AR(1) walk in [-1,1]^dim.
inline Matrix synth_reference_audio(std::uint64_t seed, std::size_t n_frames,
                                    std::size_t dim = kDefaultFeatureDim) {
    if (n_frames == 0) throw parameter_error("synth_reference_audio: n_frames must be >= 1");
    constexpr double kCorrelation = 0.5;
    const double innovation = std::sqrt(1.0 - kCorrelation * kCorrelation);
    SeededRng rng(mix_seed(seed, 0xA0D10));
    Matrix frames(n_frames, dim);
    std::vector<double> x(dim);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    for (std::size_t t = 0; t < n_frames; ++t) {
        for (std::size_t j = 0; j < dim; ++j) {
            if (t > 0) x[j] = std::clamp(kCorrelation * x[j] + innovation * rng.uniform(-1.0, 1.0), -1.0, 1.0);
            frames(t, j) = static_cast<float>(x[j]);
        }
    }
    return frames;
}

// ---------------------------------------------------------------------------
// Waveform

/// Renders each token as kHopSamples samples of a small harmonic bank whose
/// pitch is keyed by the codeword id and whose partial amplitudes follow the
/// codeword's first feature values. Phase is continuous across frames.
inline std::vector<std::int16_t> render_waveform(std::span<const TokenId> ids, const Codebook& book) {
    constexpr std::size_t kPartials = 4;
    const Matrix frames = audio_decode(ids, book);
    std::vector<std::int16_t> pcm;
    pcm.reserve(ids.size() * kHopSamples);
    std::array<double, kPartials> phase{};
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const double f0 = 110.0 * (1.0 + static_cast<double>(ids[t] % 32) / 8.0);
        std::array<double, kPartials> amp{};
        double norm = 0.0;
        for (std::size_t m = 0; m < kPartials; ++m) {
            amp[m] = m < book.dim() ? 0.25 + 0.75 * std::abs(static_cast<double>(frames(t, m))) : 0.25;
            norm += amp[m];
        }
        for (std::size_t s = 0; s < kHopSamples; ++s) {
            double v = 0.0;
            for (std::size_t m = 0; m < kPartials; ++m) {
                phase[m] += 2.0 * std::numbers::pi * f0 * static_cast<double>(m + 1) / kSampleRate;
                v += amp[m] * std::sin(phase[m]);
            }
            pcm.push_back(static_cast<std::int16_t>(std::lround(0.3 * 32767.0 * v / norm)));
        }
        for (auto& p : phase) p = std::fmod(p, 2.0 * std::numbers::pi);
    }
    return pcm;
}

/// RIFF/WAVE, 16-bit little-endian PCM, mono.
inline std::vector<char> encode_wav(std::span<const std::int16_t> pcm, std::uint32_t sample_rate = kSampleRate) {
    io::ByteWriter w;
    const auto data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
    w.bytes("RIFF");
    w.u32(36 + data_bytes);
    w.bytes("WAVE");
    w.bytes("fmt ");
    w.u32(16);
    w.u16(1); // PCM
    w.u16(1); // mono
    w.u32(sample_rate);
    w.u32(sample_rate * 2);
    w.u16(2);
    w.u16(16);
    w.bytes("data");
    w.u32(data_bytes);
    for (auto s : pcm) w.i16(s);
    return w.take();
}

struct WavInfo {
    std::uint32_t sample_rate = 0;
    std::uint16_t channels = 0;
    std::uint16_t bits = 0;
    std::size_t samples = 0;
};

inline WavInfo parse_wav_header(std::span<const char> data) {
    io::ByteReader r(data, "wav");
    if (r.bytes(4) != "RIFF") throw data_error("wav: missing RIFF");
    r.u32();
    if (r.bytes(4) != "WAVE") throw data_error("wav: missing WAVE");
    if (r.bytes(4) != "fmt ") throw data_error("wav: missing fmt chunk");
    if (r.u32() != 16) throw data_error("wav: unexpected fmt size");
    if (r.u16() != 1) throw data_error("wav: not PCM");
    WavInfo info;
    info.channels = r.u16();
    info.sample_rate = r.u32();
    r.u32();
    r.u16();
    info.bits = r.u16();
    if (r.bytes(4) != "data") throw data_error("wav: missing data chunk");
    const std::uint32_t bytes = r.u32();
    if (r.remaining() != bytes) throw data_error("wav: data size mismatch");
    info.samples = bytes / (info.bits / 8) / info.channels;
    return info;
}

} // namespace voxrnn
