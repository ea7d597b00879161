#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "voxrnn/codec.hpp"
#include "voxrnn/errors.hpp"
#include "voxrnn/io.hpp"
#include "voxrnn/lm.hpp"
#include "voxrnn/rng.hpp"

namespace voxrnn {

struct CorpusRecord {
    std::string text;
    bool instruction = false;
    std::vector<TokenId> prompt_speech_ids;
    std::vector<TokenId> target_speech_ids;
    std::string provenance;

    friend bool operator==(const CorpusRecord&, const CorpusRecord&) = default;
};

inline TrainingExample to_example(const CorpusRecord& r) {
    return TrainingExample{text_encode(r.text, r.instruction),
                           TokenSequence{TokenRole::prompt_speech, r.prompt_speech_ids},
                           TokenSequence{TokenRole::target_speech, r.target_speech_ids}};
}

/// Packed length: sos + text tokens + task + prompt + target.
inline std::size_t packed_length(const CorpusRecord& r) {
    return 2 + r.text.size() + (r.instruction ? 1 : 0) + r.prompt_speech_ids.size() + r.target_speech_ids.size();
}

inline constexpr std::size_t kFramesPerByte = 4;

namespace detail {

inline constexpr std::array<std::string_view, 18> kLexicon = {
    "sun", "cat", "rain", "blue", "tree", "moon", "sea", "wind", "red",
    "bird", "day", "sky", "你好", "猫", "天", "水", "山", "好",
};

/// Fixed acoustic signature of one byte at frame offset j.
inline std::vector<double> byte_signature(unsigned char byte, std::size_t j, std::size_t dim) {
    SeededRng rng(mix_seed(0xB17E5157ull, byte * kFramesPerByte + j));
    std::vector<double> out(dim);
    for (auto& v : out) v = rng.uniform(-1.0, 1.0);
    return out;
}

} // namespace detail

/// Deterministic synthetic corpus. Each record gets a 1-2 word text from a
/// mixed English/CJK lexicon, a 4-12 frame prompt from a seeded speaker, and a
/// target of 4 frames per text byte mixing a per-byte signature with the
/// speaker's mean feature vector.
inline std::vector<CorpusRecord> build_synthetic_corpus(std::uint64_t seed, std::size_t n_records,
                                                        const Codebook& book) {
    if (n_records == 0) throw parameter_error("build_synthetic_corpus: n_records must be >= 1");
    const std::size_t dim = book.dim();
    std::vector<CorpusRecord> out;
    out.reserve(n_records);
    for (std::size_t i = 0; i < n_records; ++i) {
        SeededRng rng(mix_seed(seed, i));
        CorpusRecord rec;
        const std::size_t words = 1 + rng.below(2);
        for (std::size_t w = 0; w < words; ++w) {
            if (w) rec.text += ' ';
            rec.text += detail::kLexicon[rng.below(detail::kLexicon.size())];
        }
        rec.instruction = rng.bernoulli(0.25);

        const std::uint64_t speaker = rng.next_u64();
        const std::size_t prompt_frames = 4 + rng.below(9);
        const Matrix prompt = synth_reference_audio(speaker, prompt_frames, dim);
        rec.prompt_speech_ids = audio_encode(prompt, book, TokenRole::prompt_speech).ids;

        std::vector<double> style(dim, 0.0);
        for (std::size_t t = 0; t < prompt.rows(); ++t)
            for (std::size_t j = 0; j < dim; ++j) style[j] += prompt(t, j) / static_cast<double>(prompt.rows());

        Matrix target(rec.text.size() * kFramesPerByte, dim);
        for (std::size_t b = 0; b < rec.text.size(); ++b)
            for (std::size_t f = 0; f < kFramesPerByte; ++f) {
                const auto sig = detail::byte_signature(static_cast<unsigned char>(rec.text[b]), f, dim);
                for (std::size_t j = 0; j < dim; ++j) {
                    const double v = 0.75 * sig[j] + 0.25 * style[j] + 0.05 * rng.uniform(-1.0, 1.0);
                    target(b * kFramesPerByte + f, j) = static_cast<float>(std::clamp(v, -1.0, 1.0));
                }
            }
        rec.target_speech_ids = audio_encode(target, book, TokenRole::target_speech).ids;
        rec.provenance = "synthetic:seed=" + std::to_string(seed) + ":record=" + std::to_string(i);
        out.push_back(std::move(rec));
    }
    return out;
}

/// With probability p returns the record with an empty prompt.
inline CorpusRecord apply_prompt_drop(const CorpusRecord& record, double p, SeededRng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw parameter_error("apply_prompt_drop: probability must be in [0, 1]");
    CorpusRecord out = record;
    if (rng.bernoulli(p)) out.prompt_speech_ids.clear();
    return out;
}

struct BatchPlan {
    std::vector<std::vector<std::size_t>> batches;
    std::size_t max_tokens_per_batch = 0;

    std::vector<std::size_t> order() const {
        std::vector<std::size_t> out;
        for (const auto& b : batches) out.insert(out.end(), b.begin(), b.end());
        return out;
    }
};

/// Sorts records by packed length (index breaks ties) and fills batches greedily.
inline BatchPlan plan_batches(const std::vector<CorpusRecord>& records, std::size_t max_tokens) {
    std::vector<std::size_t> idx(records.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<std::size_t> len(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        len[i] = packed_length(records[i]);
        if (len[i] > max_tokens)
            throw capacity_error("plan_batches: record " + std::to_string(i) + " (" + records[i].provenance +
                                 ") has packed length " + std::to_string(len[i]) + " > max_tokens " +
                                 std::to_string(max_tokens));
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return len[a] < len[b]; });
    BatchPlan plan;
    plan.max_tokens_per_batch = max_tokens;
    std::size_t used = 0;
    for (std::size_t i : idx) {
        if (plan.batches.empty() || used + len[i] > max_tokens) {
            plan.batches.emplace_back();
            used = 0;
        }
        plan.batches.back().push_back(i);
        used += len[i];
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Shards

inline nlohmann::ordered_json record_to_json(const CorpusRecord& r) {
    nlohmann::ordered_json j;
    j["text"] = r.text;
    j["instruction"] = r.instruction;
    j["prompt"] = r.prompt_speech_ids;
    j["target"] = r.target_speech_ids;
    j["provenance"] = r.provenance;
    return j;
}

inline CorpusRecord record_from_json(const nlohmann::json& j, const std::string& where) {
    auto field = [&](const char* name) -> const nlohmann::json& {
        if (!j.is_object() || !j.contains(name)) throw data_error(where + ": missing field '" + name + "'");
        return j.at(name);
    };
    CorpusRecord r;
    try {
        r.text = field("text").get<std::string>();
        r.instruction = field("instruction").get<bool>();
        r.prompt_speech_ids = field("prompt").get<std::vector<TokenId>>();
        r.target_speech_ids = field("target").get<std::vector<TokenId>>();
        r.provenance = field("provenance").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error(where + ": " + e.what());
    }
    if (r.target_speech_ids.empty()) throw data_error(where + ": empty target");
    return r;
}

inline std::string serialize_shard(const std::vector<CorpusRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<CorpusRecord> parse_shard(std::string_view text, const std::string& name) {
    std::vector<CorpusRecord> out;
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.empty()) continue;
        const std::string where = name + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error(where + ": " + e.what());
        }
        out.push_back(record_from_json(j, where));
    }
    return out;
}

inline void write_shard(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
    io::write_text(path, serialize_shard(records));
}

inline std::vector<CorpusRecord> read_shard(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return parse_shard(std::string_view(bytes.data(), bytes.size()), path.string());
}

struct ShardEntry {
    std::string path; // relative to the manifest directory
    std::size_t records = 0;
    std::size_t tokens = 0;
    std::string hash;
};

struct Manifest {
    std::uint64_t seed = 0;
    std::string codebook;
    std::string codebook_hash;
    std::vector<ShardEntry> shards;

    std::size_t records() const {
        std::size_t n = 0;
        for (const auto& s : shards) n += s.records;
        return n;
    }
    std::size_t tokens() const {
        std::size_t n = 0;
        for (const auto& s : shards) n += s.tokens;
        return n;
    }
};

/// Text, prompt and target token count of one record.
inline std::size_t record_tokens(const CorpusRecord& r) {
    return r.text.size() + (r.instruction ? 1 : 0) + r.prompt_speech_ids.size() + r.target_speech_ids.size();
}

inline std::string manifest_to_json(const Manifest& m) {
    nlohmann::ordered_json j;
    j["seed"] = m.seed;
    j["codebook"] = m.codebook;
    j["codebook_hash"] = m.codebook_hash;
    j["records"] = m.records();
    j["tokens"] = m.tokens();
    j["shards"] = nlohmann::ordered_json::array();
    for (const auto& s : m.shards)
        j["shards"].push_back({{"path", s.path}, {"records", s.records}, {"tokens", s.tokens}, {"hash", s.hash}});
    return j.dump(2) + "\n";
}

inline Manifest manifest_from_json(std::string_view text, const std::string& where) {
    Manifest m;
    try {
        const auto j = nlohmann::json::parse(text);
        m.seed = j.at("seed").get<std::uint64_t>();
        m.codebook = j.at("codebook").get<std::string>();
        m.codebook_hash = j.at("codebook_hash").get<std::string>();
        for (const auto& s : j.at("shards"))
            m.shards.push_back({s.at("path").get<std::string>(), s.at("records").get<std::size_t>(),
                                s.at("tokens").get<std::size_t>(), s.at("hash").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
        throw data_error(where + ": " + e.what());
    }
    return m;
}

inline constexpr std::size_t kRecordsPerShard = 4096;

/// Builds the corpus and writes codebook.vxcb, shard-NNNNN.jsonl and
/// manifest.json under `dir`.
inline Manifest prepare_corpus(const std::filesystem::path& dir, std::uint64_t seed, std::size_t n_records,
                               std::size_t records_per_shard = kRecordsPerShard) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("cannot create " + dir.string() + ": " + ec.message());
    const Codebook book = Codebook::make();
    const auto book_bytes = serialize_codebook(book);
    io::write_file(dir / "codebook.vxcb", book_bytes);

    Manifest m;
    m.seed = seed;
    m.codebook = "codebook.vxcb";
    m.codebook_hash = io::fnv1a_hex(book_bytes);
    const auto records = build_synthetic_corpus(seed, n_records, book);
    for (std::size_t begin = 0; begin < records.size(); begin += records_per_shard) {
        const std::size_t end = std::min(records.size(), begin + records_per_shard);
        const std::vector<CorpusRecord> part(records.begin() + static_cast<std::ptrdiff_t>(begin),
                                             records.begin() + static_cast<std::ptrdiff_t>(end));
        char name[32];
        std::snprintf(name, sizeof name, "shard-%05zu.jsonl", begin / records_per_shard);
        const std::string text = serialize_shard(part);
        io::write_text(dir / name, text);
        ShardEntry e{name, part.size(), 0, io::fnv1a_hex(std::span<const char>(text.data(), text.size()))};
        for (const auto& r : part) e.tokens += record_tokens(r);
        m.shards.push_back(std::move(e));
    }
    io::write_text(dir / "manifest.json", manifest_to_json(m));
    return m;
}

struct Corpus {
    Manifest manifest;
    Codebook codebook;
    std::vector<CorpusRecord> records;
};

/// Loads a prepared directory (or a manifest path) and checks every hash.
inline Corpus load_corpus(const std::filesystem::path& where) {
    const std::filesystem::path manifest_path =
        std::filesystem::is_directory(where) ? where / "manifest.json" : where;
    const std::filesystem::path dir = manifest_path.parent_path();
    const auto mbytes = io::read_file(manifest_path);
    Corpus c;
    c.manifest = manifest_from_json(std::string_view(mbytes.data(), mbytes.size()), manifest_path.string());
    const auto book_bytes = io::read_file(dir / c.manifest.codebook);
    if (io::fnv1a_hex(book_bytes) != c.manifest.codebook_hash)
        throw data_error((dir / c.manifest.codebook).string() + ": codebook hash mismatch");
    c.codebook = deserialize_codebook(book_bytes);
    for (const auto& s : c.manifest.shards) {
        const auto bytes = io::read_file(dir / s.path);
        if (io::fnv1a_hex(bytes) != s.hash) throw data_error((dir / s.path).string() + ": shard hash mismatch");
        auto part = parse_shard(std::string_view(bytes.data(), bytes.size()), (dir / s.path).string());
        if (part.size() != s.records)
            throw data_error((dir / s.path).string() + ": manifest lists " + std::to_string(s.records) +
                             " records, shard has " + std::to_string(part.size()));
        for (auto& r : part) c.records.push_back(std::move(r));
    }
    if (c.records.empty()) throw data_error(manifest_path.string() + ": corpus is empty");
    for (const auto& r : c.records) {
        try {
            TokenSequence{TokenRole::prompt_speech, r.prompt_speech_ids}.validate(SpecialTokens{c.codebook.n_codes()});
            TokenSequence{TokenRole::target_speech, r.target_speech_ids}.validate(SpecialTokens{c.codebook.n_codes()});
        } catch (const data_error& e) {
            throw data_error(r.provenance + ": " + e.what());
        }
    }
    return c;
}

} // namespace voxrnn
