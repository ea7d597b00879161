#include <gtest/gtest.h>

#include <filesystem>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "voxrnn/codec.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {
namespace {

const Codebook& book() {
    static const Codebook b = Codebook::make();
    return b;
}

// Random valid UTF-8: code points from every encoding length, surrogates skipped.
std::string random_utf8(SeededRng& rng, std::size_t n_points) {
    std::string s;
    for (std::size_t i = 0; i < n_points; ++i) {
        std::uint32_t cp = 0;
        switch (rng.below(4)) {
        case 0: cp = static_cast<std::uint32_t>(rng.below(0x80)); break;
        case 1: cp = 0x80 + static_cast<std::uint32_t>(rng.below(0x800 - 0x80)); break;
        case 2:
            do cp = 0x800 + static_cast<std::uint32_t>(rng.below(0x10000 - 0x800));
            while (cp >= 0xD800 && cp <= 0xDFFF);
            break;
        default: cp = 0x10000 + static_cast<std::uint32_t>(rng.below(0x110000 - 0x10000)); break;
        }
        if (cp < 0x80) {
            s += static_cast<char>(cp);
        } else if (cp < 0x800) {
            s += static_cast<char>(0xC0 | (cp >> 6));
            s += static_cast<char>(0x80 | (cp & 0x3F));
        } else if (cp < 0x10000) {
            s += static_cast<char>(0xE0 | (cp >> 12));
            s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            s += static_cast<char>(0x80 | (cp & 0x3F));
        } else {
            s += static_cast<char>(0xF0 | (cp >> 18));
            s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
            s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            s += static_cast<char>(0x80 | (cp & 0x3F));
        }
    }
    return s;
}

TEST(TextCodec, EmptyStrings) {
    EXPECT_TRUE(text_encode("", false).ids.empty());
    EXPECT_EQ(text_encode("", true).ids, std::vector<TokenId>{SpecialTokens::end_of_prompt});
}

TEST(TextCodec, BytesAreOffsetPastSpecials) {
    const auto seq = text_encode("A\xff", false);
    EXPECT_EQ(seq.ids, (std::vector<TokenId>{SpecialTokens::byte_offset + 65, SpecialTokens::byte_offset + 255}));
    EXPECT_EQ(seq.role, TokenRole::text);
}

TEST(TextCodec, RoundtripRandomUtf8) {
    SeededRng rng(40);
    for (int i = 0; i < 1000; ++i) {
        const std::string s = random_utf8(rng, rng.below(24));
        const bool instruction = rng.bernoulli(0.5);
        const DecodedText d = text_decode(text_encode(s, instruction));
        ASSERT_EQ(d.text, s);
        ASSERT_EQ(d.instruction, instruction);
    }
}

TEST(TextCodec, DecodeRejectsNonByteIds) {
    EXPECT_THROW(text_decode(TokenSequence{TokenRole::text, {SpecialTokens::task_id, 20}}), data_error);
    EXPECT_THROW(text_decode(TokenSequence{TokenRole::prompt_speech, {20}}), data_error);
}

TEST(SpecialTokens, LayoutAndReservations) {
    const SpecialTokens sp{1024};
    EXPECT_EQ(sp.eos_speech(), 1024);
    EXPECT_EQ(sp.speech_logits(), 1025u);
    EXPECT_EQ(SpecialTokens::text_vocab, 272u);
    std::set<TokenId> ids{SpecialTokens::sos_text, SpecialTokens::task_id, SpecialTokens::end_of_prompt};
    for (std::size_t i = 0; i < 13; ++i) ids.insert(SpecialTokens::control_token(i));
    EXPECT_EQ(ids.size(), 16u);
    EXPECT_LT(*ids.rbegin(), SpecialTokens::byte_offset);
    EXPECT_THROW(SpecialTokens::control_token(13), parameter_error);
}

TEST(TokenSequence, ValidateRejectsEosInSpeech) {
    const SpecialTokens sp{1024};
    EXPECT_NO_THROW((TokenSequence{TokenRole::target_speech, {0, 1023}}.validate(sp)));
    EXPECT_THROW((TokenSequence{TokenRole::target_speech, {1024}}.validate(sp)), data_error);
    EXPECT_THROW((TokenSequence{TokenRole::text, {272}}.validate(sp)), data_error);
    EXPECT_THROW((TokenSequence{TokenRole::prompt_speech, {-1}}.validate(sp)), data_error);
}

TEST(Codebook, DefaultShapeRangeAndDistinctCenters) {
    const Codebook& b = book();
    ASSERT_EQ(b.n_codes(), 1024u);
    ASSERT_EQ(b.dim(), 16u);
    for (float v : b.centers.values()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
    std::set<std::vector<float>> rows;
    for (std::size_t i = 0; i < b.n_codes(); ++i) rows.insert({b.centers.row(i).begin(), b.centers.row(i).end()});
    EXPECT_EQ(rows.size(), 1024u);
}

TEST(Codebook, DeterministicAndSeedDependent) {
    EXPECT_EQ(Codebook::make(), Codebook::make());
    EXPECT_FALSE(Codebook::make(64, 4, 1) == Codebook::make(64, 4, 2));
}

TEST(Codebook, FileRoundtrip) {
    const auto bytes = serialize_codebook(book());
    ASSERT_EQ(bytes.size(), 16u + 1024u * 16u * 4u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "VXCB");
    EXPECT_EQ(deserialize_codebook(bytes), book());
    const auto path = std::filesystem::temp_directory_path() / "voxrnn_test_codebook.vxcb";
    save_codebook(path, book());
    EXPECT_EQ(load_codebook(path), book());
    std::filesystem::remove(path);
}

TEST(Codebook, CorruptFilesAreDataErrors) {
    auto bytes = serialize_codebook(Codebook::make(4, 2));
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_codebook(bad), data_error);
    bad = bytes;
    bad[4] = 2;
    EXPECT_THROW(deserialize_codebook(bad), data_error);
    bad = bytes;
    bad.pop_back();
    EXPECT_THROW(deserialize_codebook(bad), data_error);
}

TEST(AudioEncode, ExactCenterMapsToItsId) {
    Matrix f(1, 16, std::vector<float>(book().centers.row(7).begin(), book().centers.row(7).end()));
    EXPECT_EQ(audio_encode(f, book()).ids, std::vector<TokenId>{7});
}

TEST(AudioEncode, HandNearestNeighbour) {
    const Codebook b{Matrix{{0, 0}, {1, 1}}};
    EXPECT_EQ(audio_encode(Matrix{{0.9f, 0.8f}}, b).ids, std::vector<TokenId>{1});
}

TEST(AudioEncode, EquidistantFrameGoesToLowestId) {
    const Codebook b{Matrix{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
    EXPECT_EQ(audio_encode(Matrix{{0, 0}}, b).ids, std::vector<TokenId>{0});
    EXPECT_EQ(audio_encode(Matrix{{-0.5f, 0.5f}}, b).ids, std::vector<TokenId>{1});
}

TEST(AudioEncode, MatchesExhaustiveSearch) {
    SeededRng rng(41);
    Matrix frames(200, 16);
    for (auto& v : frames.values()) v = static_cast<float>(rng.uniform(-1.2, 1.2));
    const auto ids = audio_encode(frames, book()).ids;
    for (std::size_t t = 0; t < 200; ++t) {
        std::vector<double> dist(1024);
        for (std::size_t c = 0; c < 1024; ++c)
            for (std::size_t j = 0; j < 16; ++j) {
                const double e = double(frames(t, j)) - double(book().centers(c, j));
                dist[c] += e * e;
            }
        const auto best = std::min_element(dist.begin(), dist.end()) - dist.begin();
        ASSERT_EQ(ids[t], best);
    }
}

TEST(AudioEncode, DimMismatchIsShapeError) {
    EXPECT_THROW(audio_encode(Matrix(3, 8), book()), shape_error);
}

TEST(AudioDecode, EmptyAndOutOfRange) {
    EXPECT_EQ(audio_decode(std::vector<TokenId>{}, book()).rows(), 0u);
    EXPECT_THROW(audio_decode(std::vector<TokenId>{1024}, book()), data_error);
    EXPECT_THROW(audio_decode(std::vector<TokenId>{-3}, book()), data_error);
}

TEST(AudioDecode, EveryCodewordIsAFixedPoint) {
    for (TokenId id = 0; id < 1024; ++id) {
        const std::vector<TokenId> ids{id};
        ASSERT_EQ(audio_encode(audio_decode(ids, book()), book()).ids, ids);
    }
}

TEST(AudioDecode, RandomSequencesRoundtrip) {
    SeededRng rng(42);
    for (int i = 0; i < 1000; ++i) {
        std::vector<TokenId> ids(1 + rng.below(16));
        for (auto& id : ids) id = static_cast<TokenId>(rng.below(1024));
        ASSERT_EQ(audio_encode(audio_decode(ids, book()), book()).ids, ids);
    }
}

TEST(SynthAudio, DeterministicAndInRange) {
    const Matrix a = synth_reference_audio(5, 40), b = synth_reference_audio(5, 40);
    EXPECT_EQ(a, b);
    for (float v : a.values()) {
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
    EXPECT_THROW(synth_reference_audio(5, 0), parameter_error);
}

TEST(SynthAudio, DistinctSeedsGiveDistinctTokens) {
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto a = audio_encode(synth_reference_audio(2 * s, 8), book()).ids;
        const auto b = audio_encode(synth_reference_audio(2 * s + 1, 8), book()).ids;
        EXPECT_NE(a, b) << s;
    }
}

TEST(SynthAudio, QuantizationUsesMostOfTheCodebook) {
    std::set<TokenId> used;
    for (std::uint64_t s = 0; s < 100; ++s)
        for (TokenId id : audio_encode(synth_reference_audio(s, 100), book()).ids) used.insert(id);
    EXPECT_GE(used.size(), 512u);
}

TEST(Waveform, SampleCountIsHopTimesTokens) {
    const std::vector<TokenId> ids{1, 2, 3, 1000, 17};
    const auto pcm = render_waveform(ids, book());
    EXPECT_EQ(pcm.size(), 160u * ids.size());
    const auto wav = encode_wav(pcm);
    EXPECT_EQ(wav.size(), 44u + 2u * pcm.size());
    const WavInfo info = parse_wav_header(wav);
    EXPECT_EQ(info.sample_rate, 16000u);
    EXPECT_EQ(info.channels, 1);
    EXPECT_EQ(info.bits, 16);
    EXPECT_EQ(info.samples, pcm.size());
}

TEST(Waveform, RejectsEos) {
    EXPECT_THROW(render_waveform(std::vector<TokenId>{1024}, book()), data_error);
}

} // namespace
} // namespace voxrnn
