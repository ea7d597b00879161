#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "voxrnn/commands.hpp"

int main(int argc, char** argv) {
    using namespace voxrnn;
    CLI::App app{"voxrnn: recurrent speech-token language model toolkit"};
    app.require_subcommand(1);

    PrepareOptions prep;
    std::string prep_out;
    auto* prepare = app.add_subcommand("prepare", "Build a synthetic corpus: shards, codebook and manifest");
    prepare->add_option("--seed", prep.seed, "Corpus seed (VOXRNN_SEED overrides)");
    prepare->add_option("--records", prep.records, "Number of records")->check(CLI::PositiveNumber);
    prepare->add_option("--out", prep_out, "Output directory")->required();

    TrainOptions tr;
    std::string tr_data, tr_config, tr_out;
    std::size_t tr_steps = 0;
    auto* train = app.add_subcommand("train", "Teacher-forced training from prepared shards");
    train->add_option("--data", tr_data, "Prepared corpus directory or manifest")->required();
    train->add_option("--config", tr_config, "JSON training/model config");
    train->add_option("--out", tr_out, "Checkpoint path")->required();
    auto* tr_steps_opt = train->add_option("--steps", tr_steps, "Override the configured step count");

    GenerateOptions gen;
    std::string gen_ckpt, gen_out, gen_book;
    auto* generate = app.add_subcommand("generate", "Zero-shot synthesis to a 16 kHz waveform");
    generate->add_option("--ckpt", gen_ckpt, "Checkpoint")->required();
    generate->add_option("--text", gen.text, "Text to speak");
    generate->add_flag("--instruction", gen.instruction, "Treat the text as an instruction prompt");
    generate->add_option("--ref-audio", gen.ref_audio, "seed:N[:frames] or comma-separated prompt token ids");
    generate->add_option("--out", gen_out, "Output .wav path (ids go to <out>.ids)")->required();
    generate->add_option("--codebook", gen_book, "Codebook file (default: built-in)");
    generate->add_option("--strategy", gen.strategy, "greedy, top_k or top_p");
    generate->add_option("--k", gen.k, "top_k cutoff");
    generate->add_option("--p", gen.p, "top_p mass");
    generate->add_option("--temperature", gen.temperature, "Sampling temperature");
    generate->add_option("--max-tokens", gen.max_tokens, "Maximum emitted tokens");
    generate->add_option("--min-tokens", gen.min_tokens, "EOS is suppressed before this many tokens");
    generate->add_option("--seed", gen.seed, "Sampling seed (VOXRNN_SEED overrides)");

    BenchCommandOptions bench;
    std::string bench_config;
    auto* bench_cmd = app.add_subcommand("bench", "Per-token latency and memory: recurrent vs attention");
    bench_cmd->add_option("--config", bench_config, "JSON model config");
    bench_cmd->add_option("--lengths", bench.lengths, "Ascending context lengths")->delimiter(',');
    bench_cmd->add_option("--reps", bench.repetitions, "Timed repetitions per length");
    bench_cmd->add_option("--seed", bench.seed, "Model seed (VOXRNN_SEED overrides)");

    ReportOptions rep;
    std::string rep_scores = VOXRNN_DATA_DIR "/scores.txt";
    auto* report = app.add_subcommand("report", "Render a score file as a comparison table");
    report->add_option("--scores", rep_scores, "Score file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    return run_guarded(std::cerr, [&]() -> int {
        if (*prepare) {
            prep.out = prep_out;
            return cmd_prepare(prep, std::cout);
        }
        if (*train) {
            tr.data = tr_data;
            tr.config = tr_config;
            tr.out = tr_out;
            if (tr_steps_opt->count()) tr.steps = tr_steps;
            return cmd_train(tr, std::cout);
        }
        if (*generate) {
            gen.ckpt = gen_ckpt;
            gen.out = gen_out;
            gen.codebook = gen_book;
            return cmd_generate(gen, std::cout);
        }
        if (*bench_cmd) {
            bench.config = bench_config;
            cmd_bench(bench, std::cout);
            return 0;
        }
        rep.scores = rep_scores;
        return cmd_report(rep, std::cout);
    });
}
