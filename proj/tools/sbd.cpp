// sbd: command-line front end. Payload (translations, tables, reports) goes
// to stdout, progress and errors to stderr.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
// Setting precedence: built-in defaults < --config file < --set overrides <
// command-specific flags.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sbd/evaluation.hpp"

namespace {

namespace fs = std::filesystem;

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd, bool required = false) {
        auto* opt = cmd->add_option("--config", path, "run configuration (key = value lines)");
        if (required) opt->required();
        cmd->add_option("--set", overrides, "override one setting, key=value (repeatable)");
    }

    sbd::Config load() const {
        sbd::Config c = path.empty() ? sbd::Config{} : sbd::Config::load(path);
        for (const auto& o : overrides) c.set_assignment(o);
        return c;
    }
};

std::vector<std::size_t> parse_sizes(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t pos = 0;
            const unsigned long long v = std::stoull(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw sbd::ConfigError("expected a comma-separated list of integers, got '" + csv + "'");
        }
    }
    return out;
}

std::vector<std::string> read_input(const std::string& path) {
    if (!path.empty() && path != "-") return sbd::read_lines(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(std::cin, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    return lines;
}

// Blank source lines map to blank output lines so files stay aligned.
std::vector<std::string> translate_lines(const sbd::LoadedRun& run, const std::vector<std::string>& lines,
                                         const sbd::DecodeOptions& opt) {
    std::vector<std::vector<sbd::TokenId>> sources;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto ids = run.src_codec.encode(lines[i]);
        if (ids.empty()) continue;
        sources.push_back(std::move(ids));
        where.push_back(i);
    }
    const auto hyps = sbd::decode_corpus(run.model, sources, opt);
    std::vector<std::string> out(lines.size());
    for (std::size_t k = 0; k < hyps.size(); ++k) out[where[k]] = run.tgt_codec.decode(hyps[k]);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transformer NMT with a backward-decoder regularizer"};
    app.require_subcommand(1);

    // learn-bpe
    auto* learn = app.add_subcommand("learn-bpe", "learn BPE merges from text files");
    std::vector<std::string> bpe_inputs;
    std::size_t bpe_merges = 0;
    std::string bpe_model, bpe_vocab;
    ConfigArgs learn_cfg;
    learn->add_option("--input", bpe_inputs, "training text, one sentence per line")->required();
    learn->add_option("--merges", bpe_merges, "number of merges (default: data.num_merges)");
    learn->add_option("--model", bpe_model, "output merges file")->required();
    learn->add_option("--vocab", bpe_vocab, "output vocabulary file")->required();
    learn_cfg.attach(learn);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write the synthetic train/dev/test split as text");
    ConfigArgs gen_cfg;
    std::string gen_out;
    gen_cfg.attach(gen);
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train one model");
    ConfigArgs train_cfg;
    std::string train_out;
    train_cfg.attach(train, true);
    train->add_option("--out", train_out, "run directory")->required();

    // translate
    auto* translate = app.add_subcommand("translate", "translate source lines with the forward decoder");
    std::string tr_ckpt, tr_src, tr_config;
    std::size_t tr_beam = 0;
    double tr_alpha = -1.0;
    translate->add_option("--ckpt", tr_ckpt, "checkpoint inside a run directory")->required();
    translate->add_option("--src", tr_src, "source file (default: stdin)");
    translate->add_option("--config", tr_config, "run configuration (default: config.cfg next to the checkpoint)");
    translate->add_option("--beam", tr_beam, "beam size (default: decode.beam)");
    translate->add_option("--alpha", tr_alpha, "length-penalty exponent (default: decode.alpha)");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "corpus and length-bucketed BLEU as JSON");
    std::string ev_ckpt, ev_src, ev_ref, ev_hyp, ev_buckets = "10,20,30,40,50";
    std::size_t ev_beam = 0;
    evaluate->add_option("--ckpt", ev_ckpt, "checkpoint to decode with (omit when --hyp is given)");
    evaluate->add_option("--src", ev_src, "source file")->required();
    evaluate->add_option("--ref", ev_ref, "reference file")->required();
    evaluate->add_option("--hyp", ev_hyp, "score these hypotheses instead of decoding");
    evaluate->add_option("--buckets", ev_buckets, "source-length bucket edges");
    evaluate->add_option("--beam", ev_beam, "beam size (default: decode.beam)");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "train and score the ablation variants");
    ConfigArgs ab_cfg;
    std::string ab_out, ab_variants = "all";
    ab_cfg.attach(ablate, true);
    ablate->add_option("--out", ab_out, "directory for the variant runs")->required();
    ablate->add_option("--variants", ab_variants, "'all' or a comma-separated subset");

    // sweep-wstep
    auto* sweep = app.add_subcommand("sweep-wstep", "dev BLEU for several warm-start lengths");
    ConfigArgs sw_cfg;
    std::string sw_out, sw_candidates;
    sw_cfg.attach(sweep, true);
    sweep->add_option("--out", sw_out, "directory for the runs")->required();
    sweep->add_option("--candidates", sw_candidates, "comma-separated w_step values")->required();

    // avg-ckpt
    auto* avg = app.add_subcommand("avg-ckpt", "average checkpoints parameter-wise");
    std::vector<std::string> avg_inputs;
    std::string avg_out;
    avg->add_option("inputs", avg_inputs, "checkpoints to average")->required();
    avg->add_option("--out", avg_out, "output checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*learn) {
            const sbd::Config c = learn_cfg.load();
            const std::size_t merges = learn->count("--merges") ? bpe_merges : c.count("data.num_merges");
            std::vector<std::string> corpus;
            for (const auto& p : bpe_inputs) {
                auto lines = sbd::read_lines(p);
                corpus.insert(corpus.end(), lines.begin(), lines.end());
            }
            const auto m = sbd::BpeModel::learn(corpus, merges);
            m.save(bpe_model, bpe_vocab);
            std::cerr << "learned " << m.merges().size() << " merges, vocabulary " << m.vocab_size() << '\n';
        } else if (*gen) {
            const sbd::Config c = gen_cfg.load();
            if (!sbd::synthetic_task(c)) throw sbd::ConfigError("gen-data: data.task must be copy, reverse or agree");
            const auto data = sbd::prepare_dataset(c);
            fs::create_directories(gen_out);
            auto dump = [&](const sbd::ParallelCorpus& corpus, const std::string& name) {
                std::vector<std::string> s, t;
                for (std::size_t i = 0; i < corpus.size(); ++i) {
                    s.push_back(data.src_codec.decode(corpus.src[i]));
                    t.push_back(data.tgt_codec.decode(corpus.tgt[i]));
                }
                sbd::write_lines((fs::path(gen_out) / (name + ".src")).string(), s);
                sbd::write_lines((fs::path(gen_out) / (name + ".tgt")).string(), t);
            };
            dump(data.train, "train");
            dump(data.dev, "dev");
            dump(data.test, "test");
            c.save((fs::path(gen_out) / "config.cfg").string());
        } else if (*train) {
            const sbd::Config c = train_cfg.load();
            const auto r = sbd::train(c, train_out, &std::cerr);
            nlohmann::ordered_json j;
            j["checkpoint"] = r.final_checkpoint;
            j["steps"] = r.steps;
            j["early_stopped"] = r.early_stopped;
            j["dev_bleu"] = r.dev_bleu;
            std::cout << j.dump() << '\n';
        } else if (*translate) {
            const auto run = sbd::load_run(tr_ckpt, tr_config);
            sbd::DecodeOptions opt = sbd::decode_options_from(run.config);
            if (tr_beam > 0) opt.beam = tr_beam;
            if (tr_alpha >= 0.0) opt.alpha = tr_alpha;
            for (const auto& line : translate_lines(run, read_input(tr_src), opt)) std::cout << line << '\n';
            std::cerr << "backward-decoder passes: " << run.model.backward_decoder_calls() << '\n';
        } else if (*evaluate) {
            const auto src_lines = sbd::read_lines(ev_src);
            const auto ref_lines = sbd::read_lines(ev_ref);
            std::vector<std::string> hyp_lines;
            if (!ev_hyp.empty()) {
                hyp_lines = sbd::read_lines(ev_hyp);
            } else {
                if (ev_ckpt.empty()) throw sbd::ConfigError("evaluate: give --ckpt or --hyp");
                const auto run = sbd::load_run(ev_ckpt);
                sbd::DecodeOptions opt = sbd::decode_options_from(run.config);
                if (ev_beam > 0) opt.beam = ev_beam;
                hyp_lines = translate_lines(run, src_lines, opt);
            }
            std::vector<std::vector<std::string>> hyps, refs, srcs;
            for (const auto& l : hyp_lines) hyps.push_back(sbd::split_words(l));
            for (const auto& l : ref_lines) refs.push_back(sbd::split_words(l));
            for (const auto& l : src_lines) srcs.push_back(sbd::split_words(l));
            const auto edges = parse_sizes(ev_buckets);
            nlohmann::ordered_json j = sbd::bleu_to_json(sbd::bleu(hyps, refs));
            j["buckets"] = sbd::buckets_to_json(sbd::bleu_by_length(hyps, refs, srcs, edges));
            std::cout << j.dump(2) << '\n';
        } else if (*ablate) {
            const sbd::Config c = ab_cfg.load();
            const auto rows = sbd::run_ablation(c, sbd::parse_variants(ab_variants), ab_out, &std::cerr);
            std::cout << sbd::ablation_tsv(rows);
        } else if (*sweep) {
            const sbd::Config c = sw_cfg.load();
            std::vector<std::uint64_t> cands;
            for (const auto v : parse_sizes(sw_candidates)) cands.push_back(v);
            const auto r = sbd::sweep_wstep(c, cands, sw_out, &std::cerr);
            std::cout << "w_step\tdev_bleu\n";
            std::cout.setf(std::ios::fixed);
            std::cout.precision(2);
            for (const auto& row : r.rows) std::cout << row.w_step << '\t' << row.dev_bleu << '\n';
            std::cerr << "best w_step: " << r.best_w_step << '\n';
        } else if (*avg) {
            sbd::save_checkpoint(avg_out, sbd::average_checkpoints(avg_inputs));
        }
    } catch (const sbd::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
