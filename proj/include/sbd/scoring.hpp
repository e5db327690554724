#pragma once

// Corpus-level decoding and scoring shared by training (dev BLEU), the
// evaluate command and the ablation runner.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "sbd/bleu.hpp"
#include "sbd/data.hpp"
#include "sbd/inference.hpp"
#include "sbd/model.hpp"

namespace sbd {

struct DecodeOptions {
    std::size_t beam = 4;  // 1 selects the batched greedy path
    double alpha = 0.6;
    double max_len_factor = 2.0;
    std::size_t max_len_offset = 10;
    std::size_t greedy_batch = 64;
};

// Translates every source with the forward decoder. Models trained without
// one fall back to right-to-left greedy decoding with the backward decoder.
template <typename T>
std::vector<std::vector<TokenId>> decode_corpus(const SbdModel<T>& model, const std::vector<std::vector<TokenId>>& sources,
                                                const DecodeOptions& opt) {
    std::vector<std::vector<TokenId>> out(sources.size());
    if (!model.has_forward()) {
        for (std::size_t i = 0; i < sources.size(); ++i) {
            const auto max_len = default_max_len(sources[i].size(), opt.max_len_factor, opt.max_len_offset);
            out[i] = greedy_decode_backward(model, sources[i], max_len, opt.alpha);
        }
        return out;
    }
    if (opt.beam > 1) {
        for (std::size_t i = 0; i < sources.size(); ++i) {
            const auto max_len = default_max_len(sources[i].size(), opt.max_len_factor, opt.max_len_offset);
            out[i] = beam_search(model, sources[i], opt.beam, opt.alpha, max_len);
        }
        return out;
    }
    // Length-sorted chunks keep padding low.
    std::vector<std::size_t> order(sources.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sources[a].size() < sources[b].size(); });
    const std::size_t chunk = std::max<std::size_t>(1, opt.greedy_batch);
    for (std::size_t start = 0; start < order.size(); start += chunk) {
        const std::size_t end = std::min(order.size(), start + chunk);
        std::vector<std::vector<TokenId>> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(sources[order[i]]);
        auto hyps = greedy_decode_batch(model, batch, opt.max_len_factor, opt.max_len_offset);
        for (std::size_t i = start; i < end; ++i) out[order[i]] = std::move(hyps[i - start]);
    }
    return out;
}

// Whitespace words of the detokenized text, the unit BLEU is computed on.
inline std::vector<std::string> surface_words(const TextCodec& codec, std::span<const TokenId> ids) {
    return split_words(codec.decode(ids));
}

struct ScoredCorpus {
    std::vector<std::vector<std::string>> hyps, refs, srcs;
    BleuReport report;
};

template <typename T>
ScoredCorpus score_corpus(const SbdModel<T>& model, const ParallelCorpus& corpus, const TextCodec& src_codec,
                          const TextCodec& tgt_codec, const DecodeOptions& opt) {
    ScoredCorpus s;
    const auto decoded = decode_corpus(model, corpus.src, opt);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        s.hyps.push_back(surface_words(tgt_codec, decoded[i]));
        s.refs.push_back(surface_words(tgt_codec, corpus.tgt[i]));
        s.srcs.push_back(surface_words(src_codec, corpus.src[i]));
    }
    s.report = bleu(s.hyps, s.refs);
    return s;
}

// Position-wise agreement between hypothesis + EOS and the reference row
// (EOS included), over reference positions.
inline double token_accuracy(const std::vector<std::vector<TokenId>>& hyps,
                             const std::vector<std::vector<TokenId>>& refs_with_eos) {
    if (hyps.size() != refs_with_eos.size()) throw InputError("token_accuracy: misaligned inputs");
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        std::vector<TokenId> h = hyps[i];
        h.push_back(special::kEos);
        const auto& r = refs_with_eos[i];
        for (std::size_t t = 0; t < r.size(); ++t) hit += (t < h.size() && h[t] == r[t]) ? 1 : 0;
        total += r.size();
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace sbd
