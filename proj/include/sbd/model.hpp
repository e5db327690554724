#pragma once

// Transformer encoder shared by a forward (left-attending) and a backward
// (right-attending) decoder stack, plus the square projection that maps
// forward hidden states into the backward decoder's space.
//
// Blocks are pre-norm: x + Sublayer(LayerNorm(x)), with a final LayerNorm on
// each non-empty stack. Both decoders index positions left to right; the
// direction lives entirely in the self-attention mask.

#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sbd/common.hpp"
#include "sbd/tensor.hpp"

namespace sbd {

enum class Direction { kForward, kBackward };

// Parameter partition used by the joint update.
enum class ParamGroup { kForward, kBackward, kProjection };

struct ModelConfig {
    std::size_t src_vocab = 16;
    std::size_t tgt_vocab = 16;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t d_ffn = 256;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 2;
    double dropout = 0.1;
    bool share_target_embedding = false;
    bool with_forward = true;
    bool with_backward = true;
    bool with_projection = true;  // only meaningful with both decoders
    std::uint64_t init_seed = 1;
};

// Controls stochastic layers. Dropout masks derive from (seed, step, site).
struct RunMode {
    bool training = false;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

struct BoolMatrix {
    std::size_t n = 0;
    std::vector<std::uint8_t> cells;

    bool at(std::size_t i, std::size_t j) const { return cells[i * n + j] != 0; }
    BoolMatrix transposed() const {
        BoolMatrix t{n, std::vector<std::uint8_t>(cells.size())};
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) t.cells[j * n + i] = cells[i * n + j];
        return t;
    }
    friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;
};

// Position i may attend j iff j <= i.
inline BoolMatrix causal_mask_forward(std::size_t t) {
    if (t == 0) throw ShapeError("causal_mask_forward: length must be positive");
    BoolMatrix m{t, std::vector<std::uint8_t>(t * t, 0)};
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) m.cells[i * t + j] = 1;
    return m;
}

// Position i may attend j iff j >= i.
inline BoolMatrix causal_mask_backward(std::size_t t) {
    if (t == 0) throw ShapeError("causal_mask_backward: length must be positive");
    BoolMatrix m{t, std::vector<std::uint8_t>(t * t, 0)};
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = i; j < t; ++j) m.cells[i * t + j] = 1;
    return m;
}

// Keys must be real tokens; queries additionally obey `order` when given.
inline std::shared_ptr<const AttentionMask> make_attention_mask(std::size_t batch, std::size_t queries,
                                                                 std::size_t keys, std::span<const std::uint8_t> key_real,
                                                                 const BoolMatrix* order = nullptr) {
    if (key_real.size() != batch * keys) throw ShapeError("attention mask: key mask does not match batch x keys");
    auto m = std::make_shared<AttentionMask>();
    m->batch = batch;
    m->queries = queries;
    m->keys = keys;
    m->allowed.assign(batch * queries * keys, 0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t q = 0; q < queries; ++q)
            for (std::size_t k = 0; k < keys; ++k) {
                const bool ok = key_real[b * keys + k] && (!order || order->at(q, k));
                m->allowed[(b * queries + q) * keys + k] = ok ? 1 : 0;
            }
    return m;
}

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t d) {
    std::vector<T> pe(length * d);
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / d);
            pe[pos * d + i] = static_cast<T>(std::sin(angle));
            if (i + 1 < d) pe[pos * d + i + 1] = static_cast<T>(std::cos(angle));
        }
    }
    return Tensor<T>({length, d}, std::move(pe));
}

template <typename T>
struct NamedParameter {
    std::string name;
    Tensor<T> tensor;
    ParamGroup group;
};

template <typename T>
struct DecoderOutput {
    Tensor<T> logits;  // [B x T x V]
    Tensor<T> hidden;  // [B x T x d], last layer after the final norm
};

template <typename T>
class SbdModel {
   public:
    struct Norm {
        Tensor<T> gain, bias;
    };
    struct Attention {
        Tensor<T> wq, wk, wv, wo;
    };
    struct FeedForward {
        Tensor<T> w1, b1, w2, b2;
    };
    struct EncoderLayer {
        Norm ln_attn;
        Attention attn;
        Norm ln_ffn;
        FeedForward ffn;
    };
    struct DecoderLayer {
        Norm ln_self;
        Attention self_attn;
        Norm ln_cross;
        Attention cross_attn;
        Norm ln_ffn;
        FeedForward ffn;
    };
    struct DecoderStack {
        Tensor<T> embedding;
        std::vector<DecoderLayer> layers;
        Norm final_norm;
        Tensor<T> out_proj;
    };

    explicit SbdModel(ModelConfig cfg) : cfg_(cfg), rng_(mix_seed(cfg.init_seed, 0x1417)) {
        if (cfg_.d_model == 0 || cfg_.heads == 0 || cfg_.d_model % cfg_.heads != 0) {
            throw ConfigError("model: d_model must be a positive multiple of heads");
        }
        if (!cfg_.with_forward && !cfg_.with_backward) throw ConfigError("model: at least one decoder is required");
        if (cfg_.dropout < 0.0 || cfg_.dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
        const std::size_t d = cfg_.d_model;

        src_embedding_ = add_embedding("emb.src", cfg_.src_vocab, ParamGroup::kForward);
        for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
            const std::string p = "enc." + std::to_string(i) + ".";
            EncoderLayer layer;
            layer.ln_attn = add_norm(p + "ln_attn", ParamGroup::kForward);
            layer.attn = add_attention(p + "attn", ParamGroup::kForward);
            layer.ln_ffn = add_norm(p + "ln_ffn", ParamGroup::kForward);
            layer.ffn = add_ffn(p + "ffn", ParamGroup::kForward);
            encoder_.push_back(std::move(layer));
        }
        if (cfg_.enc_layers > 0) enc_norm_ = add_norm("enc.ln", ParamGroup::kForward);

        Tensor<T> shared_tgt;
        if (cfg_.share_target_embedding) shared_tgt = add_embedding("emb.tgt", cfg_.tgt_vocab, ParamGroup::kForward);
        if (cfg_.with_forward) {
            fwd_ = build_decoder("dec_fwd", "emb.tgt_fwd", ParamGroup::kForward, shared_tgt);
        }
        if (cfg_.with_backward) {
            bwd_ = build_decoder("dec_bwd", "emb.tgt_bwd", ParamGroup::kBackward, shared_tgt);
        }
        if (cfg_.with_forward && cfg_.with_backward && cfg_.with_projection) {
            std::vector<T> eye(d * d, T(0));
            for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = T(1);
            wh_ = register_param("wh", Tensor<T>({d, d}, std::move(eye), true), ParamGroup::kProjection);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    bool has_forward() const { return cfg_.with_forward; }
    bool has_backward() const { return cfg_.with_backward; }
    bool has_projection() const { return wh_.defined(); }

    std::vector<NamedParameter<T>>& parameters() { return params_; }
    const std::vector<NamedParameter<T>>& parameters() const { return params_; }

    const Tensor<T>& projection() const {
        if (!wh_.defined()) throw ContractError("model: hidden projection not allocated");
        return wh_;
    }

    // Instrumentation: number of backward-decoder passes and projection uses.
    std::size_t backward_decoder_calls() const { return bwd_calls_; }
    std::size_t projection_calls() const { return proj_calls_; }
    void reset_counters() { bwd_calls_ = proj_calls_ = 0; }

    Tensor<T> encode(const IdMatrix& src, std::span<const std::uint8_t> src_real, const RunMode& mode) const {
        check_ids(src, cfg_.src_vocab, "source");
        const std::size_t b = src.rows, s = src.cols;
        auto mask = make_attention_mask(b, s, s, src_real);
        Tensor<T> x = embed(src_embedding_, src, mode, site(0, 0, 0));
        for (std::size_t i = 0; i < encoder_.size(); ++i) {
            const auto& L = encoder_[i];
            auto h = norm(x, L.ln_attn);
            x = add(x, dropout(attend(L.attn, h, h, mask), mode, site(0, i + 1, 1)));
            h = norm(x, L.ln_ffn);
            x = add(x, dropout(feed_forward(L.ffn, h), mode, site(0, i + 1, 2)));
        }
        if (!encoder_.empty()) x = norm(x, enc_norm_);
        return x;
    }

    DecoderOutput<T> decode_forward(const Tensor<T>& enc, std::span<const std::uint8_t> src_real, const IdMatrix& fwd_in,
                                    std::span<const std::uint8_t> tgt_real, const RunMode& mode) const {
        if (!cfg_.with_forward) throw ContractError("model: forward decoder not allocated");
        return run_decoder(fwd_, Direction::kForward, enc, src_real, fwd_in, tgt_real, mode);
    }

    DecoderOutput<T> decode_backward(const Tensor<T>& enc, std::span<const std::uint8_t> src_real,
                                     const IdMatrix& bwd_in, std::span<const std::uint8_t> tgt_real,
                                     const RunMode& mode) const {
        if (!cfg_.with_backward) throw ContractError("model: backward decoder not allocated");
        ++bwd_calls_;
        return run_decoder(bwd_, Direction::kBackward, enc, src_real, bwd_in, tgt_real, mode);
    }

    // H_fwd [.. x d] -> H_fwd W_h
    Tensor<T> project_hidden(const Tensor<T>& h_fwd) const {
        ++proj_calls_;
        return matmul(h_fwd, projection());
    }

   private:
    Tensor<T> register_param(std::string name, Tensor<T> t, ParamGroup g) {
        params_.push_back({std::move(name), t, g});
        return t;
    }

    Tensor<T> uniform(std::size_t rows, std::size_t cols, double limit) {
        std::vector<T> v(rows * cols);
        for (auto& x : v) x = static_cast<T>((2.0 * uniform01(rng_) - 1.0) * limit);
        return Tensor<T>({rows, cols}, std::move(v), true);
    }

    Tensor<T> add_embedding(const std::string& name, std::size_t vocab, ParamGroup g) {
        return register_param(name, uniform(vocab, cfg_.d_model, std::sqrt(3.0 / cfg_.d_model)), g);
    }

    Tensor<T> add_linear(const std::string& name, std::size_t in, std::size_t out, ParamGroup g) {
        return register_param(name, uniform(in, out, std::sqrt(6.0 / static_cast<double>(in + out))), g);
    }

    Tensor<T> add_vector(const std::string& name, std::size_t n, T fill, ParamGroup g) {
        return register_param(name, Tensor<T>({n}, std::vector<T>(n, fill), true), g);
    }

    Norm add_norm(const std::string& p, ParamGroup g) {
        return {add_vector(p + ".g", cfg_.d_model, T(1), g), add_vector(p + ".b", cfg_.d_model, T(0), g)};
    }

    Attention add_attention(const std::string& p, ParamGroup g) {
        const std::size_t d = cfg_.d_model;
        return {add_linear(p + ".wq", d, d, g), add_linear(p + ".wk", d, d, g), add_linear(p + ".wv", d, d, g),
                add_linear(p + ".wo", d, d, g)};
    }

    FeedForward add_ffn(const std::string& p, ParamGroup g) {
        const std::size_t d = cfg_.d_model, f = cfg_.d_ffn;
        FeedForward ffn;
        ffn.w1 = add_linear(p + ".w1", d, f, g);
        ffn.b1 = add_vector(p + ".b1", f, T(0), g);
        ffn.w2 = add_linear(p + ".w2", f, d, g);
        ffn.b2 = add_vector(p + ".b2", d, T(0), g);
        return ffn;
    }

    DecoderStack build_decoder(const std::string& prefix, const std::string& emb_name, ParamGroup g,
                               const Tensor<T>& shared_embedding) {
        DecoderStack dec;
        dec.embedding = shared_embedding.defined() ? shared_embedding : add_embedding(emb_name, cfg_.tgt_vocab, g);
        for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
            const std::string p = prefix + "." + std::to_string(i) + ".";
            DecoderLayer layer;
            layer.ln_self = add_norm(p + "ln_self", g);
            layer.self_attn = add_attention(p + "self", g);
            layer.ln_cross = add_norm(p + "ln_cross", g);
            layer.cross_attn = add_attention(p + "cross", g);
            layer.ln_ffn = add_norm(p + "ln_ffn", g);
            layer.ffn = add_ffn(p + "ffn", g);
            dec.layers.push_back(std::move(layer));
        }
        if (cfg_.dec_layers > 0) dec.final_norm = add_norm(prefix + ".ln", g);
        dec.out_proj = add_linear(prefix + ".out", cfg_.d_model, cfg_.tgt_vocab, g);
        return dec;
    }

    static void check_ids(const IdMatrix& m, std::size_t vocab, const char* what) {
        for (const TokenId id : m.ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
                throw InputError(std::string("model: ") + what + " id " + std::to_string(id) +
                                 " outside vocabulary of " + std::to_string(vocab));
            }
        }
    }

    static std::uint64_t site(std::uint64_t component, std::uint64_t layer, std::uint64_t slot) {
        return (component << 32) | (layer << 8) | slot;
    }

    Tensor<T> dropout(const Tensor<T>& x, const RunMode& mode, std::uint64_t where) const {
        if (!mode.training || cfg_.dropout <= 0.0) return x;
        return sbd::dropout(x, cfg_.dropout, mix_seed(mode.seed, mode.step, where));
    }

    Tensor<T> embed(const Tensor<T>& table, const IdMatrix& ids, const RunMode& mode, std::uint64_t where) const {
        auto x = scale(embedding(table, std::span<const TokenId>(ids.ids), {ids.rows, ids.cols}),
                       static_cast<T>(std::sqrt(static_cast<double>(cfg_.d_model))));
        x = add(x, sinusoidal_positions<T>(ids.cols, cfg_.d_model));
        return dropout(x, mode, where);
    }

    Tensor<T> norm(const Tensor<T>& x, const Norm& n) const { return layer_norm(x, n.gain, n.bias, T(1e-6)); }

    Tensor<T> attend(const Attention& p, const Tensor<T>& q_in, const Tensor<T>& kv_in,
                     const std::shared_ptr<const AttentionMask>& mask) const {
        const std::size_t h = cfg_.heads;
        const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.d_model / h)));
        auto q = split_heads(matmul(q_in, p.wq), h);
        auto k = split_heads(matmul(kv_in, p.wk), h);
        auto v = split_heads(matmul(kv_in, p.wv), h);
        auto probs = masked_softmax(scale(matmul(q, k, Trans::kYes), inv_sqrt), mask, h);
        return matmul(merge_heads(matmul(probs, v), h), p.wo);
    }

    Tensor<T> feed_forward(const FeedForward& f, const Tensor<T>& x) const {
        return add(matmul(relu(add(matmul(x, f.w1), f.b1)), f.w2), f.b2);
    }

    DecoderOutput<T> run_decoder(const DecoderStack& dec, Direction dir, const Tensor<T>& enc,
                                 std::span<const std::uint8_t> src_real, const IdMatrix& tgt_in,
                                 std::span<const std::uint8_t> tgt_real, const RunMode& mode) const {
        check_ids(tgt_in, cfg_.tgt_vocab, "target");
        const std::size_t b = tgt_in.rows, t = tgt_in.cols;
        if (enc.rank() != 3 || enc.dim(0) != b || enc.dim(2) != cfg_.d_model || src_real.size() != b * enc.dim(1)) {
            throw ShapeError("decoder: encoder states " + shape_str(enc.shape()) + " do not match target batch of " +
                             std::to_string(b));
        }
        if (tgt_real.size() != b * t) throw ShapeError("decoder: target mask does not match target ids");
        const BoolMatrix order = dir == Direction::kForward ? causal_mask_forward(t) : causal_mask_backward(t);
        auto self_mask = make_attention_mask(b, t, t, tgt_real, &order);
        auto cross_mask = make_attention_mask(b, t, enc.dim(1), src_real);
        const std::uint64_t comp = dir == Direction::kForward ? 1 : 2;

        Tensor<T> x = embed(dec.embedding, tgt_in, mode, site(comp, 0, 0));
        for (std::size_t i = 0; i < dec.layers.size(); ++i) {
            const auto& L = dec.layers[i];
            auto h = norm(x, L.ln_self);
            x = add(x, dropout(attend(L.self_attn, h, h, self_mask), mode, site(comp, i + 1, 1)));
            h = norm(x, L.ln_cross);
            x = add(x, dropout(attend(L.cross_attn, h, enc, cross_mask), mode, site(comp, i + 1, 2)));
            h = norm(x, L.ln_ffn);
            x = add(x, dropout(feed_forward(L.ffn, h), mode, site(comp, i + 1, 3)));
        }
        if (!dec.layers.empty()) x = norm(x, dec.final_norm);
        return {matmul(x, dec.out_proj), x};
    }

    ModelConfig cfg_;
    std::mt19937_64 rng_;
    std::vector<NamedParameter<T>> params_;
    Tensor<T> src_embedding_;
    std::vector<EncoderLayer> encoder_;
    Norm enc_norm_;
    DecoderStack fwd_, bwd_;
    Tensor<T> wh_;
    mutable std::size_t bwd_calls_ = 0;
    mutable std::size_t proj_calls_ = 0;
};

}  // namespace sbd
