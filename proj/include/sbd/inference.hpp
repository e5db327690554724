#pragma once

// Decoding. Translation uses the forward decoder only; the backward decoder
// and the hidden projection are never touched here except by the explicit
// right-to-left baseline decoder at the bottom of this file.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "sbd/common.hpp"
#include "sbd/model.hpp"
#include "sbd/tensor.hpp"

namespace sbd {

// Wu et al. length penalty ((5 + len) / 6)^alpha.
inline double length_penalty(std::size_t length, double alpha) {
    return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

inline std::size_t default_max_len(std::size_t src_len, double factor = 2.0, std::size_t offset = 10) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(src_len) * factor)) + offset;
}

struct Hypothesis {
    std::vector<TokenId> tokens;  // generated tokens after BOS, EOS included when finished
    double score = 0.0;           // sum of token log-probabilities
    bool finished = false;
};

// Next-token log-probabilities for a set of equal-length prefixes (BOS not
// included in the prefixes).
using NextTokenScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<TokenId>>&)>;

namespace detail {

inline bool better_final(const Hypothesis& a, const Hypothesis& b, double alpha) {
    const double na = a.score / length_penalty(std::max<std::size_t>(a.tokens.size(), 1), alpha);
    const double nb = b.score / length_penalty(std::max<std::size_t>(b.tokens.size(), 1), alpha);
    if (na != nb) return na > nb;
    const std::size_t common = std::min(a.tokens.size(), b.tokens.size());
    for (std::size_t i = 0; i < common; ++i) {
        if (a.tokens[i] != b.tokens[i]) return a.tokens[i] < b.tokens[i];
    }
    return a.tokens.size() < b.tokens.size();
}

inline std::vector<TokenId> strip_eos(std::vector<TokenId> t) {
    if (!t.empty() && t.back() == special::kEos) t.pop_back();
    return t;
}

}  // namespace detail

// Beam search over an abstract scorer. Each step keeps the `beam` best
// expansions overall; expansions ending in EOS retire to the finished pool.
// Stops when nothing is alive, when max_len tokens have been generated, or
// when even the best alive score, normalized by the largest possible
// penalty, falls below the best finished normalized score.
inline Hypothesis beam_search_with(const NextTokenScorer& scorer, std::size_t beam, double alpha, std::size_t max_len) {
    if (beam == 0) throw ContractError("beam_search: beam must be at least 1");
    if (max_len == 0) throw ContractError("beam_search: max_len must be at least 1");
    std::vector<Hypothesis> alive{Hypothesis{}};
    std::vector<Hypothesis> finished;
    for (std::size_t step = 0; step < max_len && !alive.empty(); ++step) {
        std::vector<std::vector<TokenId>> prefixes;
        for (const auto& h : alive) prefixes.push_back(h.tokens);
        const auto lps = scorer(prefixes);

        struct Cand {
            double score;
            double lp;
            std::size_t parent;
            TokenId token;
        };
        std::vector<Cand> cands;
        for (std::size_t p = 0; p < alive.size(); ++p) {
            for (std::size_t w = 0; w < lps[p].size(); ++w) {
                if (static_cast<TokenId>(w) == special::kPad || !std::isfinite(lps[p][w])) continue;
                cands.push_back({alive[p].score + lps[p][w], lps[p][w], p, static_cast<TokenId>(w)});
            }
        }
        const std::size_t keep = std::min(beam, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Cand& a, const Cand& b) {
                              if (a.score != b.score) return a.score > b.score;
                              if (a.parent == b.parent && a.lp != b.lp) return a.lp > b.lp;
                              if (a.token != b.token) return a.token < b.token;
                              return a.parent < b.parent;
                          });
        std::vector<Hypothesis> next;
        for (std::size_t i = 0; i < keep; ++i) {
            Hypothesis h = alive[cands[i].parent];
            h.tokens.push_back(cands[i].token);
            h.score = cands[i].score;
            if (cands[i].token == special::kEos) {
                h.finished = true;
                finished.push_back(std::move(h));
            } else {
                next.push_back(std::move(h));
            }
        }
        alive = std::move(next);
        if (!alive.empty() && !finished.empty()) {
            const Hypothesis* best = &finished.front();
            for (const auto& f : finished)
                if (detail::better_final(f, *best, alpha)) best = &f;
            const double best_norm = best->score / length_penalty(best->tokens.size(), alpha);
            double best_alive = alive.front().score;
            for (const auto& a : alive) best_alive = std::max(best_alive, a.score);
            if (best_alive / length_penalty(max_len, alpha) < best_norm) break;
        }
    }
    std::vector<Hypothesis> pool = std::move(finished);
    pool.insert(pool.end(), alive.begin(), alive.end());
    Hypothesis best = pool.front();
    for (const auto& h : pool)
        if (detail::better_final(h, best, alpha)) best = h;
    return best;
}

namespace detail {

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& x, std::size_t times) {
    Shape s = x.shape();
    std::vector<T> out;
    out.reserve(x.numel() * times);
    for (std::size_t r = 0; r < times; ++r) out.insert(out.end(), x.data().begin(), x.data().end());
    s[0] *= times;
    return Tensor<T>(std::move(s), std::move(out));
}

inline IdMatrix single_row(std::span<const TokenId> ids) {
    IdMatrix m(1, ids.size());
    std::copy(ids.begin(), ids.end(), m.ids.begin());
    return m;
}

template <typename T>
std::vector<double> last_position_log_probs(const Tensor<T>& logits, std::size_t row, std::size_t position) {
    const std::size_t t = logits.dim(1), v = logits.dim(2);
    const T* p = logits.data().data() + (row * t + position) * v;
    const T mx = *std::max_element(p, p + v);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(p[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    std::vector<double> out(v);
    for (std::size_t j = 0; j < v; ++j) out[j] = static_cast<double>(p[j]) - lse;
    return out;
}

}  // namespace detail

// Adapts the forward decoder of `model` to the scorer interface for one
// source sentence. Encoder states are computed once.
template <typename T>
NextTokenScorer forward_scorer(const SbdModel<T>& model, std::span<const TokenId> src) {
    if (src.empty()) throw InputError("decode: empty source");
    auto src_m = std::make_shared<IdMatrix>(detail::single_row(src));
    auto enc = std::make_shared<Tensor<T>>();
    {
        NoGradGuard ng;
        std::vector<std::uint8_t> real(src.size(), 1);
        *enc = model.encode(*src_m, real, RunMode{});
    }
    return [&model, enc, n_src = src.size()](const std::vector<std::vector<TokenId>>& prefixes) {
        NoGradGuard ng;
        const std::size_t rows = prefixes.size(), t = prefixes.front().size() + 1;
        IdMatrix in(rows, t);
        for (std::size_t r = 0; r < rows; ++r) {
            in.at(r, 0) = special::kBos;
            for (std::size_t j = 0; j + 1 < t; ++j) in.at(r, j + 1) = prefixes[r][j];
        }
        const auto states = rows == 1 ? *enc : detail::repeat_rows(*enc, rows);
        const std::vector<std::uint8_t> src_real(rows * n_src, 1), tgt_real(rows * t, 1);
        const auto out = model.decode_forward(states, src_real, in, tgt_real, RunMode{});
        std::vector<std::vector<double>> lps;
        for (std::size_t r = 0; r < rows; ++r) lps.push_back(detail::last_position_log_probs(out.logits, r, t - 1));
        return lps;
    };
}

// Best token sequence (EOS stripped) under length-normalized beam search.
template <typename T>
std::vector<TokenId> beam_search(const SbdModel<T>& model, std::span<const TokenId> src, std::size_t beam,
                                 double alpha, std::size_t max_len) {
    return detail::strip_eos(beam_search_with(forward_scorer(model, src), beam, alpha, max_len).tokens);
}

// Argmax token per step until EOS or max_len tokens.
template <typename T>
std::vector<TokenId> greedy_decode(const SbdModel<T>& model, std::span<const TokenId> src, std::size_t max_len) {
    if (src.empty()) throw InputError("decode: empty source");
    if (max_len == 0) throw ContractError("greedy_decode: max_len must be at least 1");
    NoGradGuard ng;
    const IdMatrix src_m = detail::single_row(src);
    const std::vector<std::uint8_t> src_real(src.size(), 1);
    const auto enc = model.encode(src_m, src_real, RunMode{});
    std::vector<TokenId> out;
    while (out.size() < max_len) {
        IdMatrix in(1, out.size() + 1);
        in.at(0, 0) = special::kBos;
        std::copy(out.begin(), out.end(), in.ids.begin() + 1);
        const std::vector<std::uint8_t> tgt_real(in.cols, 1);
        const auto res = model.decode_forward(enc, src_real, in, tgt_real, RunMode{});
        const auto lp = detail::last_position_log_probs(res.logits, 0, in.cols - 1);
        TokenId best = special::kEos;
        double best_lp = -std::numeric_limits<double>::infinity();
        for (std::size_t w = 0; w < lp.size(); ++w) {
            if (static_cast<TokenId>(w) == special::kPad) continue;
            if (lp[w] > best_lp) {
                best_lp = lp[w];
                best = static_cast<TokenId>(w);
            }
        }
        out.push_back(best);
        if (best == special::kEos) break;
    }
    return detail::strip_eos(std::move(out));
}

// Batched greedy decoding with the forward decoder, for dev-set scoring.
template <typename T>
std::vector<std::vector<TokenId>> greedy_decode_batch(const SbdModel<T>& model,
                                                      const std::vector<std::vector<TokenId>>& sources,
                                                      double max_len_factor = 2.0, std::size_t max_len_offset = 10) {
    NoGradGuard ng;
    const std::size_t b = sources.size();
    std::vector<std::vector<TokenId>> outputs(b);
    if (b == 0) return outputs;
    std::size_t s_len = 0, horizon = 0;
    std::vector<std::size_t> limit(b);
    for (std::size_t i = 0; i < b; ++i) {
        if (sources[i].empty()) throw InputError("decode: empty source");
        s_len = std::max(s_len, sources[i].size());
        limit[i] = default_max_len(sources[i].size(), max_len_factor, max_len_offset);
        horizon = std::max(horizon, limit[i]);
    }
    IdMatrix src(b, s_len);
    std::vector<std::uint8_t> src_real(b * s_len, 0);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < sources[i].size(); ++j) {
            src.at(i, j) = sources[i][j];
            src_real[i * s_len + j] = 1;
        }
    const auto enc = model.encode(src, src_real, RunMode{});
    std::vector<bool> done(b, false);
    std::vector<std::vector<TokenId>> prefix(b, std::vector<TokenId>{special::kBos});
    for (std::size_t step = 0; step < horizon; ++step) {
        if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
        const std::size_t t = step + 1;
        IdMatrix in(b, t);
        for (std::size_t i = 0; i < b; ++i) std::copy(prefix[i].begin(), prefix[i].end(), in.ids.begin() + i * t);
        const std::vector<std::uint8_t> tgt_real(b * t, 1);
        const auto res = model.decode_forward(enc, src_real, in, tgt_real, RunMode{});
        const std::size_t v = res.logits.dim(2);
        for (std::size_t i = 0; i < b; ++i) {
            TokenId best = special::kEos;
            if (!done[i]) {
                const T* p = res.logits.data().data() + (i * t + t - 1) * v;
                T best_v = -std::numeric_limits<T>::infinity();
                for (std::size_t w = 0; w < v; ++w) {
                    if (static_cast<TokenId>(w) == special::kPad) continue;
                    if (p[w] > best_v) {
                        best_v = p[w];
                        best = static_cast<TokenId>(w);
                    }
                }
                if (best == special::kEos || step + 1 >= limit[i]) done[i] = true;
                if (best != special::kEos) outputs[i].push_back(best);
            }
            prefix[i].push_back(best);
        }
    }
    return outputs;
}

// Right-to-left greedy decoding with the backward decoder. Positions are
// indexed from the left, so every target length 1..max_len is tried in one
// batch; each candidate is generated from its last position (the R2L start
// token) leftwards and the best length-normalized candidate wins.
template <typename T>
std::vector<TokenId> greedy_decode_backward(const SbdModel<T>& model, std::span<const TokenId> src,
                                            std::size_t max_len, double alpha = 0.0) {
    if (src.empty()) throw InputError("decode: empty source");
    if (max_len == 0) throw ContractError("greedy_decode_backward: max_len must be at least 1");
    NoGradGuard ng;
    const IdMatrix src_one = detail::single_row(src);
    const std::vector<std::uint8_t> one_real(src.size(), 1);
    const auto enc = detail::repeat_rows(model.encode(src_one, one_real, RunMode{}), max_len);
    const std::vector<std::uint8_t> src_real(max_len * src.size(), 1);

    const std::size_t rows = max_len, t = max_len;
    IdMatrix in(rows, t);
    std::vector<std::uint8_t> tgt_real(rows * t, 0);
    std::vector<std::vector<TokenId>> ys(rows);
    std::vector<double> scores(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t len = r + 1;
        ys[r].assign(len, special::kPad);
        in.at(r, len - 1) = special::kR2L;
        for (std::size_t j = 0; j < len; ++j) tgt_real[r * t + j] = 1;
    }
    for (std::size_t k = 0; k < max_len; ++k) {
        const auto res = model.decode_backward(enc, src_real, in, tgt_real, RunMode{});
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t len = r + 1;
            if (k >= len) continue;
            const std::size_t pos = len - 1 - k;
            const auto lp = detail::last_position_log_probs(res.logits, r, pos);
            TokenId best = special::kEos;
            double best_lp = -std::numeric_limits<double>::infinity();
            for (std::size_t w = 0; w < lp.size(); ++w) {
                if (special::is_special(static_cast<TokenId>(w)) && static_cast<TokenId>(w) != special::kEos) continue;
                if (lp[w] > best_lp) {
                    best_lp = lp[w];
                    best = static_cast<TokenId>(w);
                }
            }
            ys[r][pos] = best;
            scores[r] += best_lp;
            if (pos > 0) in.at(r, pos - 1) = best;
        }
    }
    std::size_t best_r = 0;
    double best_norm = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
        const double n = scores[r] / length_penalty(r + 1, alpha);
        if (n > best_norm) {
            best_norm = n;
            best_r = r;
        }
    }
    std::vector<TokenId> out;
    for (const TokenId y : ys[best_r])
        if (y != special::kEos) out.push_back(y);
    return out;
}

}  // namespace sbd
