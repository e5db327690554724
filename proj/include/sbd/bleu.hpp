#pragma once

// Corpus BLEU with multi-bleu semantics: 4-gram, clipped counts against a
// single reference, brevity penalty, no smoothing.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sbd/common.hpp"

namespace sbd {

inline constexpr std::size_t kBleuOrder = 4;

struct BleuReport {
    double score = 0.0;  // in [0, 100]
    std::array<double, kBleuOrder> precisions{};
    std::array<std::size_t, kBleuOrder> matches{};
    std::array<std::size_t, kBleuOrder> totals{};
    double brevity_penalty = 0.0;
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;
};

struct BleuStats {
    std::array<std::size_t, kBleuOrder> matches{};
    std::array<std::size_t, kBleuOrder> totals{};
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;

    BleuStats& operator+=(const BleuStats& o) {
        for (std::size_t n = 0; n < kBleuOrder; ++n) {
            matches[n] += o.matches[n];
            totals[n] += o.totals[n];
        }
        hyp_len += o.hyp_len;
        ref_len += o.ref_len;
        return *this;
    }
};

template <typename Tok>
BleuStats sentence_stats(const std::vector<Tok>& hyp, const std::vector<Tok>& ref) {
    BleuStats s;
    s.hyp_len = hyp.size();
    s.ref_len = ref.size();
    for (std::size_t n = 1; n <= kBleuOrder; ++n) {
        std::map<std::vector<Tok>, std::size_t> ref_counts, hyp_counts;
        for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[std::vector<Tok>(ref.begin() + i, ref.begin() + i + n)];
        for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[std::vector<Tok>(hyp.begin() + i, hyp.begin() + i + n)];
        std::size_t match = 0;
        for (const auto& [gram, c] : hyp_counts) {
            const auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) match += std::min(c, it->second);
        }
        s.matches[n - 1] = match;
        s.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
    }
    return s;
}

inline BleuReport bleu_from_stats(const BleuStats& s) {
    BleuReport r;
    r.matches = s.matches;
    r.totals = s.totals;
    r.hyp_len = s.hyp_len;
    r.ref_len = s.ref_len;
    bool zero = s.hyp_len == 0;
    double log_sum = 0.0;
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
        r.precisions[n] = s.totals[n] ? static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]) : 0.0;
        if (s.matches[n] == 0) {
            zero = true;
        } else {
            log_sum += std::log(r.precisions[n]);
        }
    }
    r.brevity_penalty = s.hyp_len == 0
                            ? 0.0
                            : std::min(1.0, std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len)));
    r.score = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(kBleuOrder));
    return r;
}

template <typename Tok>
BleuReport bleu(const std::vector<std::vector<Tok>>& hyps, const std::vector<std::vector<Tok>>& refs) {
    if (hyps.size() != refs.size()) {
        throw InputError("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(refs.size()) +
                         " references");
    }
    if (hyps.empty()) throw InputError("bleu: empty corpus");
    BleuStats total;
    for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_stats(hyps[i], refs[i]);
    return bleu_from_stats(total);
}

inline std::vector<std::size_t> default_bucket_edges() { return {10, 20, 30, 40, 50}; }

// Bucket i holds source lengths in (edges[i-1], edges[i]]; the first bucket
// starts at 0 and the last one is unbounded above.
inline std::size_t bucket_of(std::size_t length, const std::vector<std::size_t>& edges) {
    return static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), length) - edges.begin());
}

inline std::string bucket_label(std::size_t bucket, const std::vector<std::size_t>& edges) {
    const std::string lo = bucket == 0 ? "0" : std::to_string(edges[bucket - 1] + 1);
    const std::string hi = bucket < edges.size() ? std::to_string(edges[bucket]) : "inf";
    return lo + "-" + hi;
}

struct BucketReport {
    std::size_t bucket = 0;
    std::string label;
    std::size_t sentences = 0;
    BleuReport report;
};

// One entry per bucket (edges.size() + 1); empty buckets are nullopt.
template <typename Tok, typename SrcTok>
std::vector<std::optional<BucketReport>> bleu_by_length(const std::vector<std::vector<Tok>>& hyps,
                                                        const std::vector<std::vector<Tok>>& refs,
                                                        const std::vector<std::vector<SrcTok>>& srcs,
                                                        const std::vector<std::size_t>& edges) {
    if (hyps.size() != refs.size() || hyps.size() != srcs.size()) {
        throw InputError("bleu_by_length: misaligned inputs (" + std::to_string(hyps.size()) + " / " +
                         std::to_string(refs.size()) + " / " + std::to_string(srcs.size()) + ")");
    }
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (edges[i] <= edges[i - 1]) throw InputError("bleu_by_length: bucket edges must be strictly increasing");
    }
    std::vector<std::vector<std::size_t>> members(edges.size() + 1);
    for (std::size_t i = 0; i < srcs.size(); ++i) members[bucket_of(srcs[i].size(), edges)].push_back(i);
    std::vector<std::optional<BucketReport>> out(edges.size() + 1);
    for (std::size_t b = 0; b < members.size(); ++b) {
        if (members[b].empty()) continue;
        BleuStats s;
        for (const auto i : members[b]) s += sentence_stats(hyps[i], refs[i]);
        out[b] = BucketReport{b, bucket_label(b, edges), members[b].size(), bleu_from_stats(s)};
    }
    return out;
}

}  // namespace sbd
