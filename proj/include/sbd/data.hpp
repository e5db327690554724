#pragma once

// Parallel corpora, synthetic transduction tasks, and token-count batching.
//
// Both decoders predict the same target row y_1..y_T (y_T = EOS). The forward
// decoder reads [BOS, y_1, .., y_{T-1}] under a left-attending mask, the
// backward decoder reads [y_2, .., y_T, R2L] under a right-attending mask, so
// position t of either decoder is a prediction of y_t.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sbd/common.hpp"
#include "sbd/tokenizer.hpp"

namespace sbd {

inline constexpr std::size_t kDefaultMaxTokensPerExample = 256;

struct ParallelCorpus {
    std::vector<std::vector<TokenId>> src;
    std::vector<std::vector<TokenId>> tgt;  // every row ends with EOS
    std::size_t skipped = 0;                // pairs dropped while loading

    std::size_t size() const { return src.size(); }
};

enum class SyntheticTask { kCopy, kReverse, kAgree };

inline SyntheticTask parse_task(std::string_view name) {
    if (name == "copy") return SyntheticTask::kCopy;
    if (name == "reverse") return SyntheticTask::kReverse;
    if (name == "agree") return SyntheticTask::kAgree;
    throw InputError("unknown synthetic task '" + std::string(name) + "' (expected copy, reverse or agree)");
}

inline std::string task_name(SyntheticTask t) {
    switch (t) {
        case SyntheticTask::kCopy:
            return "copy";
        case SyntheticTask::kReverse:
            return "reverse";
        case SyntheticTask::kAgree:
            return "agree";
    }
    return "?";
}

struct SyntheticSpec {
    SyntheticTask task = SyntheticTask::kCopy;
    std::size_t n_pairs = 1000;
    std::size_t min_len = 1;
    std::size_t max_len = 12;
    std::size_t vocab_size = 16;  // including the reserved specials
    std::uint64_t seed = 1;
};

// Control tokens for the agree task are the first quarter of the content ids
// (at least two); each maps to a distinct content id from the top of the range.
inline std::size_t agree_control_count(std::size_t vocab_size) {
    const std::size_t content = vocab_size - special::kCount;
    return std::max<std::size_t>(2, content / 4);
}

inline TokenId agree_answer(TokenId control, std::size_t vocab_size) {
    return static_cast<TokenId>(vocab_size - 1) - (control - special::kCount);
}

inline ParallelCorpus gen_synthetic(const SyntheticSpec& spec) {
    if (spec.vocab_size <= static_cast<std::size_t>(special::kCount)) {
        throw InputError("gen_synthetic: vocab_size must exceed the " + std::to_string(special::kCount) +
                         " reserved tokens");
    }
    if (spec.max_len < 2) throw InputError("gen_synthetic: max_len must be at least 2");
    const std::size_t min_len = std::max<std::size_t>(spec.task == SyntheticTask::kAgree ? 2 : 1, spec.min_len);
    if (min_len > spec.max_len) throw InputError("gen_synthetic: min_len exceeds max_len");
    const std::size_t content = spec.vocab_size - special::kCount;
    if (spec.task == SyntheticTask::kAgree && content < 2 * agree_control_count(spec.vocab_size)) {
        throw InputError("gen_synthetic: agree task needs at least 8 content tokens");
    }

    std::mt19937_64 eng(mix_seed(spec.seed, static_cast<std::uint64_t>(spec.task)));
    auto draw = [&](std::size_t n) { return static_cast<TokenId>(special::kCount + uniform_index(eng, n)); };

    ParallelCorpus corpus;
    corpus.src.reserve(spec.n_pairs);
    corpus.tgt.reserve(spec.n_pairs);
    for (std::size_t i = 0; i < spec.n_pairs; ++i) {
        const std::size_t len = min_len + uniform_index(eng, spec.max_len - min_len + 1);
        std::vector<TokenId> src(len);
        for (auto& t : src) t = draw(content);
        std::vector<TokenId> tgt = src;
        switch (spec.task) {
            case SyntheticTask::kCopy:
                break;
            case SyntheticTask::kReverse:
                std::reverse(tgt.begin(), tgt.end());
                break;
            case SyntheticTask::kAgree: {
                const TokenId control = draw(agree_control_count(spec.vocab_size));
                src[0] = control;
                tgt = src;
                tgt.back() = agree_answer(control, spec.vocab_size);
                break;
            }
        }
        tgt.push_back(special::kEos);
        corpus.src.push_back(std::move(src));
        corpus.tgt.push_back(std::move(tgt));
    }
    return corpus;
}

// Text form of synthetic ids: id k renders as "w<k>".
class SyntheticVocab {
   public:
    explicit SyntheticVocab(std::size_t size) : size_(size) {}

    std::size_t vocab_size() const { return size_; }

    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> ids;
        for (const auto& w : split_words(text)) {
            TokenId id = special::kUnk;
            if (w.size() > 1 && w[0] == 'w' && std::all_of(w.begin() + 1, w.end(), [](unsigned char c) { return std::isdigit(c) != 0; }) && w.size() < 10) {
                const long v = std::stol(w.substr(1));
                if (v >= special::kCount && static_cast<std::size_t>(v) < size_) id = static_cast<TokenId>(v);
            }
            ids.push_back(id);
        }
        return ids;
    }

    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (const TokenId id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= size_) {
                throw InputError("decode: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size_));
            }
            if (special::is_special(id)) continue;
            if (!out.empty()) out.push_back(' ');
            out += "w" + std::to_string(id);
        }
        return out;
    }

   private:
    std::size_t size_;
};

// Text <-> id mapping for one side of a corpus: synthetic "wN" words or BPE.
class TextCodec {
   public:
    explicit TextCodec(SyntheticVocab v) : impl_(v) {}
    explicit TextCodec(BpeModel m) : impl_(std::move(m)) {}

    bool is_bpe() const { return std::holds_alternative<BpeModel>(impl_); }
    const BpeModel& bpe() const { return std::get<BpeModel>(impl_); }

    std::size_t vocab_size() const {
        return std::visit([](const auto& c) { return c.vocab_size(); }, impl_);
    }
    std::vector<TokenId> encode(std::string_view text) const {
        return std::visit([&](const auto& c) { return c.encode(text); }, impl_);
    }
    std::string decode(std::span<const TokenId> ids) const {
        return std::visit([&](const auto& c) { return c.decode(ids); }, impl_);
    }

   private:
    std::variant<SyntheticVocab, BpeModel> impl_;
};

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    if (in.bad()) throw IoError("read failed for " + path);
    return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw IoError("write failed for " + path);
}

// Encodes aligned lines; drops pairs with an empty side or more than
// `max_tokens` tokens on either side (EOS included), counting them in
// `skipped`.
template <typename SrcCodec, typename TgtCodec>
ParallelCorpus encode_parallel(const std::vector<std::string>& src_lines, const std::vector<std::string>& tgt_lines,
                               const SrcCodec& src_codec, const TgtCodec& tgt_codec,
                               std::size_t max_tokens = kDefaultMaxTokensPerExample) {
    if (src_lines.size() != tgt_lines.size()) {
        throw InputError("parallel corpus line counts differ: " + std::to_string(src_lines.size()) + " source vs " +
                         std::to_string(tgt_lines.size()) + " target");
    }
    ParallelCorpus corpus;
    for (std::size_t i = 0; i < src_lines.size(); ++i) {
        auto s = src_codec.encode(src_lines[i]);
        auto t = tgt_codec.encode(tgt_lines[i]);
        t.push_back(special::kEos);
        if (s.empty() || t.size() < 2 || s.size() > max_tokens || t.size() > max_tokens) {
            ++corpus.skipped;
            continue;
        }
        corpus.src.push_back(std::move(s));
        corpus.tgt.push_back(std::move(t));
    }
    return corpus;
}

template <typename SrcCodec, typename TgtCodec>
ParallelCorpus load_parallel(const std::string& src_path, const std::string& tgt_path, const SrcCodec& src_codec,
                             const TgtCodec& tgt_codec, std::size_t max_tokens = kDefaultMaxTokensPerExample) {
    return encode_parallel(read_lines(src_path), read_lines(tgt_path), src_codec, tgt_codec, max_tokens);
}

// ---------------------------------------------------------------------------
// Batches

struct ParallelBatch {
    IdMatrix src_ids;  // [B x S]
    IdMatrix tgt_out;  // [B x T] y_1..y_T
    IdMatrix fwd_in;   // [B x T] BOS, y_1..y_{T-1}
    IdMatrix bwd_in;   // [B x T] y_2..y_T, R2L
    std::vector<std::uint8_t> src_pad_mask;  // true on real source tokens
    std::vector<std::uint8_t> tgt_pad_mask;  // true on real target positions
    std::vector<std::size_t> example_ids;    // corpus indices, row order

    std::size_t batch_size() const { return src_ids.rows; }
    std::size_t target_positions() const {
        return static_cast<std::size_t>(std::count(tgt_pad_mask.begin(), tgt_pad_mask.end(), std::uint8_t{1}));
    }
};

// Left shift within the real positions; the last real position gets R2L.
inline std::vector<TokenId> make_backward_input(std::span<const TokenId> tgt_row) {
    std::size_t len = 0;
    while (len < tgt_row.size() && tgt_row[len] != special::kPad) ++len;
    if (len == 0 || tgt_row[len - 1] != special::kEos) {
        throw ContractError("make_backward_input: target row does not end with EOS");
    }
    std::vector<TokenId> out(tgt_row.size(), special::kPad);
    for (std::size_t t = 0; t + 1 < len; ++t) out[t] = tgt_row[t + 1];
    out[len - 1] = special::kR2L;
    return out;
}

inline ParallelBatch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> rows) {
    std::size_t s_len = 0, t_len = 0;
    for (const auto r : rows) {
        s_len = std::max(s_len, corpus.src[r].size());
        t_len = std::max(t_len, corpus.tgt[r].size());
    }
    const std::size_t b = rows.size();
    ParallelBatch batch;
    batch.src_ids = IdMatrix(b, s_len);
    batch.tgt_out = IdMatrix(b, t_len);
    batch.fwd_in = IdMatrix(b, t_len);
    batch.bwd_in = IdMatrix(b, t_len);
    batch.src_pad_mask.assign(b * s_len, 0);
    batch.tgt_pad_mask.assign(b * t_len, 0);
    batch.example_ids.assign(rows.begin(), rows.end());
    for (std::size_t i = 0; i < b; ++i) {
        const auto& s = corpus.src[rows[i]];
        const auto& t = corpus.tgt[rows[i]];
        if (t.empty() || t.back() != special::kEos) throw ContractError("make_batch: target row does not end with EOS");
        for (std::size_t j = 0; j < s.size(); ++j) {
            batch.src_ids.at(i, j) = s[j];
            batch.src_pad_mask[i * s_len + j] = 1;
        }
        for (std::size_t j = 0; j < t.size(); ++j) {
            batch.tgt_out.at(i, j) = t[j];
            batch.fwd_in.at(i, j) = j == 0 ? special::kBos : t[j - 1];
            batch.tgt_pad_mask[i * t_len + j] = 1;
        }
        const auto bwd = make_backward_input(std::span<const TokenId>(&batch.tgt_out.ids[i * t_len], t_len));
        std::copy(bwd.begin(), bwd.end(), batch.bwd_in.ids.begin() + static_cast<std::ptrdiff_t>(i * t_len));
    }
    return batch;
}

// Shuffles by seed, sorts by length inside windows of 100 batch capacities,
// then packs consecutive examples so that max(sum src, sum tgt) per batch
// stays within `tokens_per_batch`. Group sizes are balanced whenever the
// balanced split also fits the budget.
inline std::vector<std::vector<std::size_t>> plan_batches(const ParallelCorpus& corpus, std::size_t tokens_per_batch,
                                                          std::uint64_t seed) {
    const std::size_t n = corpus.size();
    std::size_t longest = 0;
    for (std::size_t i = 0; i < n; ++i) longest = std::max({longest, corpus.src[i].size(), corpus.tgt[i].size()});
    if (longest > tokens_per_batch) {
        throw InputError("make_batches: example of " + std::to_string(longest) + " tokens exceeds tokens_per_batch " +
                         std::to_string(tokens_per_batch));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 eng(mix_seed(seed, 0xBA7C4));
    shuffle_in_place(order, eng);

    const std::size_t capacity = std::max<std::size_t>(1, tokens_per_batch / std::max<std::size_t>(longest, 1));
    const std::size_t window = 100 * capacity;
    auto by_length = [&](std::size_t a, std::size_t b) {
        if (corpus.tgt[a].size() != corpus.tgt[b].size()) return corpus.tgt[a].size() < corpus.tgt[b].size();
        return corpus.src[a].size() < corpus.src[b].size();
    };
    for (std::size_t start = 0; start < n; start += window) {
        const auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
        const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + window));
        std::stable_sort(first, last, by_length);
    }

    auto fits = [&](std::size_t from, std::size_t to) {
        std::size_t s = 0, t = 0;
        for (std::size_t i = from; i < to; ++i) {
            s += corpus.src[order[i]].size();
            t += corpus.tgt[order[i]].size();
        }
        return std::max(s, t) <= tokens_per_batch;
    };

    std::vector<std::size_t> bounds{0};
    {
        std::size_t s = 0, t = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t es = corpus.src[order[i]].size(), et = corpus.tgt[order[i]].size();
            if (i > bounds.back() && std::max(s + es, t + et) > tokens_per_batch) {
                bounds.push_back(i);
                s = t = 0;
            }
            s += es;
            t += et;
        }
        if (n > 0) bounds.push_back(n);
    }
    const std::size_t groups = n == 0 ? 0 : bounds.size() - 1;
    if (groups > 1) {
        std::vector<std::size_t> balanced{0};
        for (std::size_t g = 1; g <= groups; ++g) balanced.push_back(g * n / groups);
        bool ok = true;
        for (std::size_t g = 0; g < groups && ok; ++g) ok = fits(balanced[g], balanced[g + 1]);
        if (ok) bounds = std::move(balanced);
    }

    std::vector<std::vector<std::size_t>> plan;
    for (std::size_t g = 0; g + 1 < bounds.size(); ++g) {
        plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(bounds[g]),
                          order.begin() + static_cast<std::ptrdiff_t>(bounds[g + 1]));
    }
    shuffle_in_place(plan, eng);
    return plan;
}

inline std::vector<ParallelBatch> make_batches(const ParallelCorpus& corpus, std::size_t tokens_per_batch,
                                               std::uint64_t seed) {
    std::vector<ParallelBatch> batches;
    for (const auto& rows : plan_batches(corpus, tokens_per_batch, seed)) batches.push_back(make_batch(corpus, rows));
    return batches;
}

}  // namespace sbd
