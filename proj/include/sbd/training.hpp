#pragma once

// Joint training: every mini-batch runs both decoders, combines the terms
// with the annealed weights and applies one Adam update to all parameter
// groups at once.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "sbd/checkpoint.hpp"
#include "sbd/config.hpp"
#include "sbd/data.hpp"
#include "sbd/losses.hpp"
#include "sbd/model.hpp"
#include "sbd/scoring.hpp"
#include "sbd/tokenizer.hpp"

namespace sbd {

// d^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double noam_lr(std::uint64_t step, std::size_t d_model, std::size_t warmup) {
    if (step == 0) throw ContractError("noam_lr: steps count from 1");
    if (d_model == 0 || warmup == 0) throw ConfigError("noam_lr: d_model and warmup must be positive");
    const double s = static_cast<double>(step);
    return std::pow(static_cast<double>(d_model), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double clip_norm = 1.0;  // global norm; 0 disables
    double weight_decay = 0.0;
};

// Adam over a model's parameter list. Parameters that received no gradient
// in a step are left alone (apart from weight decay) and keep their own
// bias-correction counters.
template <typename T>
class Adam {
   public:
    Adam(const std::vector<NamedParameter<T>>& params, AdamOptions opt) : opt_(opt) {
        for (const auto& p : params) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
        t_.assign(params.size(), 0);
    }

    // Returns the gradient norm before clipping.
    double step(std::vector<NamedParameter<T>>& params, double lr) {
        if (params.size() != m_.size()) throw ContractError("adam: parameter list changed");
        double sq = 0.0;
        for (const auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (const T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericError("adam: non-finite gradient norm");
        const double clip = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;

        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = params[k].tensor;
            auto w = p.mutable_data();
            if (opt_.weight_decay > 0.0) {
                for (auto& x : w) x = static_cast<T>(x - lr * opt_.weight_decay * x);
            }
            if (!p.has_grad()) continue;
            const auto g = p.grad();
            const std::uint64_t t = ++t_[k];
            const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t));
            const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t));
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]) * clip;
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
                const double upd = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
                w[i] = static_cast<T>(static_cast<double>(w[i]) - upd);
            }
        }
        return norm;
    }

    std::uint64_t updates(std::size_t k) const { return t_.at(k); }

   private:
    AdamOptions opt_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<std::uint64_t> t_;
};

// Teacher-forced forward pass of one batch. Which terms exist depends on the
// decoders the model carries and on the distillation flags.
template <typename T>
LossTerms<T> compute_loss_terms(const SbdModel<T>& model, const ParallelBatch& b, const AnnealSchedule& s,
                                double eps_ls, const RunMode& mode) {
    LossTerms<T> terms;
    const auto enc = model.encode(b.src_ids, b.src_pad_mask, mode);
    std::optional<DecoderOutput<T>> fwd, bwd;
    if (model.has_forward() && s.decoders != DecoderSet::kBackwardOnly) {
        fwd = model.decode_forward(enc, b.src_pad_mask, b.fwd_in, b.tgt_pad_mask, mode);
        terms.ce_fwd = cross_entropy_label_smoothed(fwd->logits, b.tgt_out, b.tgt_pad_mask, eps_ls);
    }
    if (model.has_backward() && s.decoders != DecoderSet::kForwardOnly) {
        bwd = model.decode_backward(enc, b.src_pad_mask, b.bwd_in, b.tgt_pad_mask, mode);
        terms.ce_bwd = cross_entropy_label_smoothed(bwd->logits, b.tgt_out, b.tgt_pad_mask, eps_ls);
    }
    if (fwd && bwd && s.decoders == DecoderSet::kBoth) {
        const Tensor<T> teacher_logits = s.stop_teacher_grad ? detach(bwd->logits) : bwd->logits;
        const Tensor<T> teacher_hidden = s.stop_teacher_grad ? detach(bwd->hidden) : bwd->hidden;
        if (s.use_logit_kd) terms.kd_logit = logit_kd_loss(teacher_logits, fwd->logits, b.tgt_pad_mask);
        if (s.use_hidden_kd && model.has_projection()) {
            terms.kd_hidden = hidden_kd_loss(fwd->hidden, model.projection(), teacher_hidden, b.tgt_pad_mask);
        }
    }
    return terms;
}

// ---------------------------------------------------------------------------
// Config plumbing

inline DecoderSet parse_decoders(const std::string& v) {
    if (v == "both") return DecoderSet::kBoth;
    if (v == "fwd" || v == "l2r_only") return DecoderSet::kForwardOnly;
    if (v == "bwd" || v == "r2l_only") return DecoderSet::kBackwardOnly;
    throw ConfigError("config: model.decoders must be both, fwd or bwd (got '" + v + "')");
}

inline AnnealSchedule schedule_from(const Config& c) {
    AnnealSchedule s;
    s.w_step = c.count("loss.w_step");
    if (s.w_step == 0) throw ConfigError("config: loss.w_step must be at least 1");
    s.use_logit_kd = c.flag("loss.use_logit_kd");
    s.use_hidden_kd = c.flag("loss.use_hidden_kd");
    s.use_annealing = c.flag("loss.use_annealing");
    s.stop_teacher_grad = c.flag("loss.stop_teacher_grad");
    s.decoders = parse_decoders(c.str("model.decoders"));
    return s;
}

inline ModelConfig model_config_from(const Config& c, std::size_t src_vocab, std::size_t tgt_vocab) {
    const AnnealSchedule s = schedule_from(c);
    ModelConfig m;
    m.src_vocab = src_vocab;
    m.tgt_vocab = tgt_vocab;
    m.d_model = c.count("model.d_model");
    m.heads = c.count("model.heads");
    m.d_ffn = c.count("model.d_ffn");
    m.enc_layers = m.dec_layers = c.count("model.layers");
    m.dropout = c.real("model.dropout");
    m.share_target_embedding = c.flag("model.share_target_embedding");
    m.with_forward = s.decoders != DecoderSet::kBackwardOnly;
    m.with_backward = s.decoders != DecoderSet::kForwardOnly;
    m.with_projection = s.decoders == DecoderSet::kBoth && s.use_hidden_kd;
    m.init_seed = mix_seed(static_cast<std::uint64_t>(c.integer("optim.seed")), 0x1A17);
    return m;
}

inline DecodeOptions decode_options_from(const Config& c) {
    DecodeOptions o;
    o.beam = c.count("decode.beam");
    if (o.beam == 0) throw ConfigError("config: decode.beam must be at least 1");
    o.alpha = c.real("decode.alpha");
    if (o.alpha < 0.0) throw ConfigError("config: decode.alpha must be non-negative");
    o.max_len_factor = c.real("decode.max_len_factor");
    o.max_len_offset = c.count("decode.max_len_offset");
    return o;
}

inline AdamOptions adam_options_from(const Config& c) {
    AdamOptions o;
    o.clip_norm = c.real("optim.clip_norm");
    o.weight_decay = c.real("optim.weight_decay");
    return o;
}

// ---------------------------------------------------------------------------
// Data

struct Dataset {
    ParallelCorpus train, dev, test;
    TextCodec src_codec{SyntheticVocab(special::kCount + 1)};
    TextCodec tgt_codec{SyntheticVocab(special::kCount + 1)};
};

inline bool synthetic_task(const Config& c) { return c.str("data.task") != "files"; }

inline SyntheticSpec synthetic_spec(const Config& c, std::size_t n_pairs, std::uint64_t stream) {
    SyntheticSpec s;
    s.task = parse_task(c.str("data.task"));
    s.n_pairs = n_pairs;
    s.min_len = c.count("data.min_len");
    s.max_len = c.count("data.max_len");
    s.vocab_size = c.count("data.vocab_size");
    s.seed = mix_seed(static_cast<std::uint64_t>(c.integer("optim.seed")), 0xDA7A, stream);
    return s;
}

inline std::vector<std::string> codec_files(const std::string& dir) {
    namespace fs = std::filesystem;
    return {(fs::path(dir) / "src.bpe").string(), (fs::path(dir) / "src.vocab").string(),
            (fs::path(dir) / "tgt.bpe").string(), (fs::path(dir) / "tgt.vocab").string()};
}

inline void save_codecs(const Dataset& d, const std::string& dir) {
    if (!d.src_codec.is_bpe()) return;
    const auto f = codec_files(dir);
    d.src_codec.bpe().save(f[0], f[1]);
    d.tgt_codec.bpe().save(f[2], f[3]);
}

// Codecs of a finished run: synthetic vocabularies come from the config,
// BPE models from the files saved next to the checkpoints.
inline std::pair<TextCodec, TextCodec> load_codecs(const Config& c, const std::string& dir) {
    if (synthetic_task(c)) {
        const SyntheticVocab v(c.count("data.vocab_size"));
        return {TextCodec(v), TextCodec(v)};
    }
    const auto f = codec_files(dir);
    return {TextCodec(BpeModel::load(f[0], f[1])), TextCodec(BpeModel::load(f[2], f[3]))};
}

inline Dataset prepare_dataset(const Config& c) {
    Dataset d;
    if (synthetic_task(c)) {
        const SyntheticVocab v(c.count("data.vocab_size"));
        d.src_codec = TextCodec(v);
        d.tgt_codec = TextCodec(v);
        d.train = gen_synthetic(synthetic_spec(c, c.count("data.n_train"), 1));
        d.dev = gen_synthetic(synthetic_spec(c, c.count("data.n_dev"), 2));
        d.test = gen_synthetic(synthetic_spec(c, c.count("data.n_test"), 3));
        return d;
    }
    const std::string train_src = c.str("data.train_src"), train_tgt = c.str("data.train_tgt");
    if (train_src.empty() || train_tgt.empty()) {
        throw ConfigError("config: data.task = files needs data.train_src and data.train_tgt");
    }
    const auto src_lines = read_lines(train_src);
    const auto tgt_lines = read_lines(train_tgt);
    const std::size_t merges = c.count("data.num_merges");
    if (c.flag("data.joint_vocab")) {
        std::vector<std::string> both = src_lines;
        both.insert(both.end(), tgt_lines.begin(), tgt_lines.end());
        const auto m = BpeModel::learn(both, merges);
        d.src_codec = TextCodec(m);
        d.tgt_codec = TextCodec(m);
    } else {
        d.src_codec = TextCodec(BpeModel::learn(src_lines, merges));
        d.tgt_codec = TextCodec(BpeModel::learn(tgt_lines, merges));
    }
    d.train = encode_parallel(src_lines, tgt_lines, d.src_codec, d.tgt_codec, c.count("data.max_tokens_per_example"));
    // Held-out sets are never truncated.
    const std::size_t no_limit = static_cast<std::size_t>(-1);
    if (!c.str("data.dev_src").empty()) {
        d.dev = load_parallel(c.str("data.dev_src"), c.str("data.dev_tgt"), d.src_codec, d.tgt_codec, no_limit);
    }
    if (!c.str("data.test_src").empty()) {
        d.test = load_parallel(c.str("data.test_src"), c.str("data.test_tgt"), d.src_codec, d.tgt_codec, no_limit);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Checkpoint averaging

inline Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts) {
    if (ckpts.empty()) throw InputError("average_checkpoints: no checkpoints given");
    Checkpoint out = ckpts.front();
    std::vector<std::vector<double>> acc;
    for (const auto& a : out) acc.emplace_back(a.values.begin(), a.values.end());
    for (std::size_t k = 1; k < ckpts.size(); ++k) {
        const auto& c = ckpts[k];
        if (c.size() != out.size()) throw InputError("average_checkpoints: tensor counts differ");
        for (std::size_t i = 0; i < c.size(); ++i) {
            if (c[i].name != out[i].name || c[i].shape != out[i].shape) {
                throw InputError("average_checkpoints: tensor '" + c[i].name + "' " + shape_str(c[i].shape) +
                                 " does not match '" + out[i].name + "' " + shape_str(out[i].shape));
            }
            for (std::size_t j = 0; j < c[i].values.size(); ++j) acc[i][j] += c[i].values[j];
        }
    }
    const double n = static_cast<double>(ckpts.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 0; j < acc[i].size(); ++j) out[i].values[j] = static_cast<float>(acc[i][j] / n);
    return out;
}

inline Checkpoint average_checkpoints(const std::vector<std::string>& paths) {
    std::vector<Checkpoint> ckpts;
    for (const auto& p : paths) ckpts.push_back(load_checkpoint(p));
    return average_checkpoints(ckpts);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    std::string out_dir;
    std::string final_checkpoint;  // avg.sbdn when averaging applied, else last.sbdn
    std::vector<std::string> checkpoints;
    std::uint64_t steps = 0;
    bool early_stopped = false;
    double dev_bleu = 0.0;  // greedy, on the returned checkpoint
};

inline std::string checkpoint_name(std::uint64_t step) {
    std::ostringstream os;
    os << "ckpt_" << std::setw(7) << std::setfill('0') << step << ".sbdn";
    return os.str();
}

namespace detail {

struct MetricsAccumulator {
    LossParts sum;
    std::size_t n = 0;

    void add(const LossParts& p) {
        sum.ce_fwd += p.ce_fwd;
        sum.ce_bwd += p.ce_bwd;
        sum.kd_logit += p.kd_logit;
        sum.kd_hidden += p.kd_hidden;
        sum.total += p.total;
        ++n;
    }
};

}  // namespace detail

// Trains one model as configured, writing into out_dir: config.cfg,
// metrics.jsonl, periodic ckpt_*.sbdn, last.sbdn, avg.sbdn and, for text
// corpora, the BPE files. Progress goes to `log` when given.
inline TrainResult train(const Config& cfg, const std::string& out_dir, const Dataset& data,
                         std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("train: cannot create " + out_dir + ": " + ec.message());
    cfg.save((fs::path(out_dir) / "config.cfg").string());
    save_codecs(data, out_dir);

    if (data.train.size() == 0) throw InputError("train: training corpus is empty");
    const AnnealSchedule schedule = schedule_from(cfg);
    const double eps_ls = cfg.real("loss.eps_ls");
    const std::uint64_t max_steps = cfg.count("optim.max_steps");
    const std::size_t warmup = cfg.count("optim.warmup");
    const std::size_t tokens_per_batch = cfg.count("optim.tokens_per_batch");
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.integer("optim.seed"));
    const std::uint64_t ckpt_every = cfg.count("optim.ckpt_every");
    const std::size_t avg_last_k = cfg.count("optim.avg_last_k");
    const std::uint64_t log_every = std::max<std::size_t>(1, cfg.count("optim.log_every"));
    const std::size_t patience = cfg.count("optim.patience");
    DecodeOptions greedy = decode_options_from(cfg);
    greedy.beam = 1;

    SbdModel<float> model(model_config_from(cfg, data.src_codec.vocab_size(), data.tgt_codec.vocab_size()));
    Adam<float> adam(model.parameters(), adam_options_from(cfg));
    const std::size_t d_model = model.config().d_model;

    const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw IoError("train: cannot write " + metrics_path);

    auto dev_bleu = [&]() {
        return data.dev.size() ? score_corpus(model, data.dev, data.src_codec, data.tgt_codec, greedy).report.score
                               : 0.0;
    };

    TrainResult result;
    result.out_dir = out_dir;
    detail::MetricsAccumulator acc;
    double best_dev = -1.0;
    std::size_t stale = 0;
    std::uint64_t step = 0;

    auto emit = [&](std::uint64_t at, double lambda, double lr, std::optional<double> bleu) {
        nlohmann::ordered_json j;
        const double n = acc.n ? static_cast<double>(acc.n) : 1.0;
        j["step"] = at;
        j["lambda"] = lambda;
        j["lr"] = lr;
        j["ce_fwd"] = acc.sum.ce_fwd / n;
        j["ce_bwd"] = acc.sum.ce_bwd / n;
        j["kd_logit"] = acc.sum.kd_logit / n;
        j["kd_hidden"] = acc.sum.kd_hidden / n;
        j["total"] = acc.sum.total / n;
        if (bleu) j["dev_bleu"] = *bleu;
        metrics << j.dump() << '\n';
        if (!metrics) throw IoError("train: write failed for " + metrics_path);
        if (log) {
            *log << "step " << at << " lambda " << lambda << " lr " << lr << " total " << acc.sum.total / n;
            if (bleu) *log << " dev_bleu " << *bleu;
            *log << '\n';
        }
        acc = {};
    };

    for (std::uint64_t epoch = 0; step < max_steps; ++epoch) {
        const auto batches = make_batches(data.train, tokens_per_batch, mix_seed(seed, 0xE90C, epoch));
        for (const auto& batch : batches) {
            if (step >= max_steps) break;
            ++step;
            const double lambda = lambda_schedule(step, schedule.w_step);
            const double lr = noam_lr(step, d_model, warmup);
            LossParts parts;
            try {
                const auto terms = compute_loss_terms(model, batch, schedule, eps_ls, RunMode{true, seed, step});
                auto jl = joint_loss(terms, lambda, schedule);
                parts = jl.parts;
                if (!std::isfinite(parts.total)) throw NumericError("non-finite loss");
                for (auto& p : model.parameters()) p.tensor.zero_grad();
                jl.total.backward();
                adam.step(model.parameters(), lr);
            } catch (const NumericError& e) {
                throw NumericError("train: diverged at step " + std::to_string(step) + ": " + e.what());
            }
            acc.add(parts);

            const bool at_ckpt = (ckpt_every > 0 && step % ckpt_every == 0) || step == max_steps;
            std::optional<double> bleu;
            bool stop = false;
            if (at_ckpt) {
                const std::string path = (fs::path(out_dir) / checkpoint_name(step)).string();
                save_checkpoint(path, snapshot(model));
                result.checkpoints.push_back(path);
                if (patience > 0 && data.dev.size()) {
                    bleu = dev_bleu();
                    if (*bleu > best_dev) {
                        best_dev = *bleu;
                        stale = 0;
                    } else if (++stale >= patience) {
                        stop = true;
                    }
                }
            }
            if (step % log_every == 0 || bleu) emit(step, lambda, lr, bleu);
            if (stop) {
                result.early_stopped = true;
                break;
            }
        }
        if (result.early_stopped) break;
    }
    result.steps = step;

    const std::string last = (fs::path(out_dir) / "last.sbdn").string();
    save_checkpoint(last, snapshot(model));
    result.final_checkpoint = last;
    if (avg_last_k > 1 && result.checkpoints.size() > 1) {
        const std::size_t k = std::min(avg_last_k, result.checkpoints.size());
        const std::vector<std::string> tail(result.checkpoints.end() - static_cast<std::ptrdiff_t>(k),
                                            result.checkpoints.end());
        const auto avg = average_checkpoints(tail);
        const std::string avg_path = (fs::path(out_dir) / "avg.sbdn").string();
        save_checkpoint(avg_path, avg);
        restore(model, avg);
        result.final_checkpoint = avg_path;
    }
    result.dev_bleu = dev_bleu();

    nlohmann::ordered_json summary;
    summary["steps"] = result.steps;
    summary["early_stopped"] = result.early_stopped;
    summary["checkpoint"] = fs::path(result.final_checkpoint).filename().string();
    summary["dev_bleu"] = result.dev_bleu;
    std::ofstream sum((fs::path(out_dir) / "summary.json").string(), std::ios::binary | std::ios::trunc);
    sum << summary.dump(2) << '\n';
    if (!sum) throw IoError("train: cannot write summary.json in " + out_dir);
    if (log) *log << "done: " << result.steps << " steps, dev BLEU " << result.dev_bleu << '\n';
    return result;
}

inline TrainResult train(const Config& cfg, const std::string& out_dir, std::ostream* log = nullptr) {
    return train(cfg, out_dir, prepare_dataset(cfg), log);
}

// Loads the model of a finished run from any checkpoint in its directory.
struct LoadedRun {
    Config config;
    TextCodec src_codec, tgt_codec;
    SbdModel<float> model;
};

inline LoadedRun load_run(const std::string& ckpt_path, const std::string& config_path = "") {
    namespace fs = std::filesystem;
    const std::string dir = fs::path(ckpt_path).parent_path().string();
    const std::string cfg_path = config_path.empty() ? (fs::path(dir) / "config.cfg").string() : config_path;
    Config cfg = Config::load(cfg_path);
    auto [src, tgt] = load_codecs(cfg, dir.empty() ? "." : dir);
    SbdModel<float> model(model_config_from(cfg, src.vocab_size(), tgt.vocab_size()));
    restore(model, load_checkpoint(ckpt_path));
    return LoadedRun{std::move(cfg), std::move(src), std::move(tgt), std::move(model)};
}

// ---------------------------------------------------------------------------
// w_step sweep

struct SweepRow {
    std::uint64_t w_step = 0;
    double dev_bleu = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;  // ascending w_step
    std::uint64_t best_w_step = 0;
};

// One run per candidate with the same seed and budget, each in
// out_dir/wstep_<w>.
inline SweepResult sweep_wstep(const Config& base, std::vector<std::uint64_t> candidates, const std::string& out_dir,
                               std::ostream* log = nullptr) {
    if (candidates.empty()) throw ConfigError("sweep_wstep: no candidates");
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    const Dataset data = prepare_dataset(base);
    SweepResult out;
    double best = -1.0;
    for (const auto w : candidates) {
        if (w == 0) throw ConfigError("sweep_wstep: w_step must be at least 1");
        Config c = base;
        c.set("loss.w_step", std::to_string(w));
        if (log) *log << "== w_step " << w << '\n';
        const auto r = train(c, (std::filesystem::path(out_dir) / ("wstep_" + std::to_string(w))).string(), data, log);
        out.rows.push_back({w, r.dev_bleu});
        if (r.dev_bleu > best) {
            best = r.dev_bleu;
            out.best_w_step = w;
        }
    }
    return out;
}

}  // namespace sbd
