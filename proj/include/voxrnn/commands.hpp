#pragma once

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "voxrnn/bench.hpp"
#include "voxrnn/codec.hpp"
#include "voxrnn/dataprep.hpp"
#include "voxrnn/decoder.hpp"
#include "voxrnn/errors.hpp"
#include "voxrnn/io.hpp"
#include "voxrnn/report.hpp"
#include "voxrnn/trainer.hpp"

namespace voxrnn {

/// VOXRNN_SEED, when set, overrides any seed given on the command line.
inline std::uint64_t resolve_seed(std::uint64_t flag_value) {
    const char* env = std::getenv("VOXRNN_SEED");
    if (!env || !*env) return flag_value;
    std::uint64_t v = 0;
    const char* end = env + std::char_traits<char>::length(env);
    const auto [ptr, ec] = std::from_chars(env, end, v);
    if (ec != std::errc{} || ptr != end) throw usage_error(std::string("VOXRNN_SEED is not an integer: ") + env);
    return v;
}

// ---------------------------------------------------------------------------
// prepare

struct PrepareOptions {
    std::uint64_t seed = 0;
    std::size_t records = 64;
    std::filesystem::path out;
};

inline int cmd_prepare(const PrepareOptions& opt, std::ostream& os) {
    if (opt.out.empty()) throw usage_error("prepare: --out is required");
    const Manifest m = prepare_corpus(opt.out, resolve_seed(opt.seed), opt.records);
    os << "records " << m.records() << "\n";
    os << "tokens " << m.tokens() << "\n";
    for (const auto& s : m.shards) os << "shard " << s.path << " " << s.records << " " << s.hash << "\n";
    os << "manifest " << (opt.out / "manifest.json").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
    std::filesystem::path data;
    std::filesystem::path config; // optional JSON
    std::filesystem::path out;
    std::optional<std::size_t> steps; // overrides the config value
};

inline int cmd_train(const TrainOptions& opt, std::ostream& os) {
    if (opt.data.empty() || opt.out.empty()) throw usage_error("train: --data and --out are required");
    TrainConfig tc;
    ModelConfig mc;
    if (!opt.config.empty()) {
        const auto bytes = io::read_file(opt.config);
        try {
            parse_train_config(std::string_view(bytes.data(), bytes.size()), tc, mc);
        } catch (const config_error& e) {
            throw config_error(opt.config.string() + ": " + e.what());
        }
    }
    if (opt.steps) tc.steps = *opt.steps;
    tc.seed = resolve_seed(tc.seed);
    const Corpus corpus = load_corpus(opt.data);
    if (corpus.codebook.n_codes() != mc.speech_vocab)
        throw config_error("train: codebook has " + std::to_string(corpus.codebook.n_codes()) +
                           " codes but speech_vocab is " + std::to_string(mc.speech_vocab));
    TrainState state(mc, tc.seed);
    std::string log;
    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
        const std::string line = format_step(r);
        os << line << "\n";
        log += line + "\n";
    };
    hooks.on_checkpoint = [&](const TrainState& s) {
        if (s.step == tc.steps) save_checkpoint(opt.out, s);
        else save_checkpoint(opt.out.string() + ".step" + std::to_string(s.step), s);
    };
    train(state, corpus.records, tc, hooks);
    io::write_text(opt.out.string() + ".loss", log);
    os << "checkpoint " << opt.out.string() << " step " << state.step << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateOptions {
    std::filesystem::path ckpt;
    std::string text;
    bool instruction = false;
    std::string ref_audio; // "seed:N[:frames]", comma-separated ids, or empty
    std::filesystem::path out;
    std::filesystem::path codebook; // default: the built-in codebook
    std::string strategy = "greedy";
    std::size_t k = 1;
    double p = 1.0;
    double temperature = 1.0;
    std::size_t max_tokens = 512;
    std::size_t min_tokens = 1;
    std::uint64_t seed = 0;
};

inline std::vector<TokenId> parse_id_list(std::string_view s) {
    std::vector<TokenId> ids;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string_view::npos) comma = s.size();
        const std::string_view tok = s.substr(pos, comma - pos);
        TokenId v = 0;
        const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (tok.empty() || ec != std::errc{} || ptr != tok.data() + tok.size())
            throw usage_error("--ref-audio: '" + std::string(tok) + "' is not a token id");
        ids.push_back(v);
        pos = comma + 1;
    }
    return ids;
}

/// Prompt tokens from "seed:N[:frames]" (synthetic reference audio) or an id list.
inline TokenSequence parse_ref_audio(const std::string& spec, const Codebook& book) {
    if (spec.empty()) return {TokenRole::prompt_speech, {}};
    if (spec.rfind("seed:", 0) == 0) {
        std::uint64_t seed = 0;
        std::size_t frames = 8;
        const std::string rest = spec.substr(5);
        const std::size_t colon = rest.find(':');
        const std::string seed_text = rest.substr(0, colon);
        auto r = std::from_chars(seed_text.data(), seed_text.data() + seed_text.size(), seed);
        bool ok = !seed_text.empty() && r.ec == std::errc{} && r.ptr == seed_text.data() + seed_text.size();
        if (ok && colon != std::string::npos) {
            const std::string ft = rest.substr(colon + 1);
            r = std::from_chars(ft.data(), ft.data() + ft.size(), frames);
            ok = !ft.empty() && r.ec == std::errc{} && r.ptr == ft.data() + ft.size() && frames > 0;
        }
        if (!ok) throw usage_error("--ref-audio: expected seed:N[:frames], got '" + spec + "'");
        return audio_encode(synth_reference_audio(seed, frames, book.dim()), book, TokenRole::prompt_speech);
    }
    return {TokenRole::prompt_speech, parse_id_list(spec)};
}

inline SamplingStrategy parse_strategy(const std::string& s) {
    if (s == "greedy") return SamplingStrategy::greedy;
    if (s == "top_k" || s == "top-k") return SamplingStrategy::top_k;
    if (s == "top_p" || s == "top-p") return SamplingStrategy::top_p;
    throw usage_error("--strategy: expected greedy, top_k or top_p, got '" + s + "'");
}

inline int cmd_generate(const GenerateOptions& opt, std::ostream& os) {
    if (opt.ckpt.empty() || opt.out.empty()) throw usage_error("generate: --ckpt and --out are required");
    GenerationConfig gc;
    gc.strategy = parse_strategy(opt.strategy);
    gc.top_k = opt.k;
    gc.top_p = opt.p;
    gc.temperature = opt.temperature;
    gc.max_tokens = opt.max_tokens;
    gc.min_tokens = opt.min_tokens;
    gc.seed = resolve_seed(opt.seed);
    gc.validate();

    const TrainState state = load_checkpoint(opt.ckpt);
    const Codebook book = opt.codebook.empty() ? Codebook::make() : load_codebook(opt.codebook);
    if (book.n_codes() != state.model.config.speech_vocab)
        throw config_error("generate: checkpoint speech_vocab " + std::to_string(state.model.config.speech_vocab) +
                           " does not match codebook size " + std::to_string(book.n_codes()));
    const TokenSequence prompt = parse_ref_audio(opt.ref_audio, book);
    const TokenSequence text = text_encode(opt.text, opt.instruction);
    const GenerationResult result = generate(state.model, text, prompt, gc);

    const auto pcm = render_waveform(result.speech_ids, book);
    io::write_file(opt.out, encode_wav(pcm));
    std::string ids;
    for (std::size_t i = 0; i < result.speech_ids.size(); ++i)
        ids += (i ? " " : "") + std::to_string(result.speech_ids[i]);
    io::write_text(opt.out.string() + ".ids", ids + "\n");
    os << "tokens " << result.speech_ids.size() << "\n";
    os << "stop " << (result.stop_reason == StopReason::eos ? "eos" : "max_tokens") << "\n";
    os << "samples " << pcm.size() << "\n";
    os << "state_bytes " << result.state_bytes << "\n";
    return 0;
}

/// Reads the id dump written next to a generated waveform.
inline std::vector<TokenId> read_id_dump(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    std::vector<TokenId> ids;
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    for (TokenId v; in >> v;) ids.push_back(v);
    return ids;
}

// ---------------------------------------------------------------------------
// bench

struct BenchCommandOptions {
    std::filesystem::path config; // optional JSON with model keys
    std::vector<std::size_t> lengths{64, 256, 1024};
    std::size_t repetitions = 32;
    std::uint64_t seed = 0;
};

inline std::vector<BenchRow> cmd_bench(const BenchCommandOptions& opt, std::ostream& os) {
    TrainConfig unused;
    ModelConfig mc;
    if (!opt.config.empty()) {
        const auto bytes = io::read_file(opt.config);
        parse_train_config(std::string_view(bytes.data(), bytes.size()), unused, mc);
    }
    BenchOptions bo;
    bo.repetitions = opt.repetitions;
    bo.seed = resolve_seed(opt.seed);
    const auto rows = run_bench(mc, opt.lengths, bo);
    os << format_bench(rows);
    return rows;
}

// ---------------------------------------------------------------------------
// report

struct ReportOptions {
    std::filesystem::path scores;
};

inline int cmd_report(const ReportOptions& opt, std::ostream& os) {
    if (opt.scores.empty()) throw usage_error("report: --scores is required");
    const auto bytes = io::read_file(opt.scores);
    ScoreFile scores;
    try {
        scores = parse_scores(std::string_view(bytes.data(), bytes.size()));
    } catch (const data_error& e) {
        throw data_error(opt.scores.string() + ": " + e.what());
    }
    os << render_report(scores);
    return 0;
}

/// Runs a command body and maps failures to exit codes: 2 for usage errors,
/// 1 for everything else. The message goes to `err`.
template <class F>
int run_guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const usage_error& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace voxrnn
