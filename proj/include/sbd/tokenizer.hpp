#pragma once

// Word-internal byte pair encoding with a "</w>" end-of-word marker attached
// to the final symbol of every word.

#include <algorithm>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sbd/common.hpp"

namespace sbd {

inline constexpr std::string_view kEndOfWord = "</w>";
inline constexpr std::string_view kBpeMagic = "SBD-BPE v1";

// Splits on ASCII whitespace; runs of whitespace collapse.
inline std::vector<std::string> split_words(std::string_view line) {
    std::vector<std::string> words;
    std::size_t i = 0;
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < line.size()) {
        while (i < line.size() && is_space(line[i])) ++i;
        const std::size_t start = i;
        while (i < line.size() && !is_space(line[i])) ++i;
        if (i > start) words.emplace_back(line.substr(start, i - start));
    }
    return words;
}

// Splits a word into UTF-8 code points; invalid lead bytes stand alone.
inline std::vector<std::string> utf8_chars(std::string_view word) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < word.size()) {
        const auto c = static_cast<unsigned char>(word[i]);
        std::size_t len = 1;
        if ((c & 0xE0) == 0xC0)
            len = 2;
        else if ((c & 0xF0) == 0xE0)
            len = 3;
        else if ((c & 0xF8) == 0xF0)
            len = 4;
        len = std::min(len, word.size() - i);
        out.emplace_back(word.substr(i, len));
        i += len;
    }
    return out;
}

// Initial symbol sequence of a word: its characters, the last one carrying
// the end-of-word marker.
inline std::vector<std::string> word_symbols(std::string_view word) {
    auto syms = utf8_chars(word);
    if (!syms.empty()) syms.back() += kEndOfWord;
    return syms;
}

using MergeRule = std::pair<std::string, std::string>;

class BpeModel {
   public:
    BpeModel() { reset_vocab(); }

    BpeModel(std::vector<MergeRule> merges, std::vector<std::string> tokens) : merges_(std::move(merges)) {
        tokens_ = std::move(tokens);
        if (tokens_.size() < static_cast<std::size_t>(special::kCount) ||
            !std::equal(special::names().begin(), special::names().end(), tokens_.begin())) {
            throw InputError("bpe: vocabulary must start with the reserved special tokens");
        }
        index_tokens();
        index_merges();
    }

    const std::vector<MergeRule>& merges() const { return merges_; }
    const std::vector<std::string>& tokens() const { return tokens_; }
    std::size_t vocab_size() const { return tokens_.size(); }

    TokenId id_of(const std::string& token) const {
        const auto it = ids_.find(token);
        return it == ids_.end() ? special::kUnk : it->second;
    }

    const std::string& token_of(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw InputError("bpe: id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(tokens_.size()));
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    // Applies merges to one word, lowest rank first, all occurrences at once.
    std::vector<std::string> segment_word(std::string_view word) const {
        auto syms = word_symbols(word);
        while (syms.size() > 1) {
            std::size_t best_rank = merges_.size();
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
                const auto it = ranks_.find(pair_key(syms[i], syms[i + 1]));
                if (it != ranks_.end()) best_rank = std::min(best_rank, it->second);
            }
            if (best_rank == merges_.size()) break;
            const auto& [left, right] = merges_[best_rank];
            std::vector<std::string> next;
            next.reserve(syms.size());
            for (std::size_t i = 0; i < syms.size(); ++i) {
                if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
                    next.push_back(left + right);
                    ++i;
                } else {
                    next.push_back(std::move(syms[i]));
                }
            }
            syms = std::move(next);
        }
        return syms;
    }

    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> ids;
        for (const auto& word : split_words(text)) {
            for (const auto& sym : segment_word(word)) ids.push_back(id_of(sym));
        }
        return ids;
    }

    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (const TokenId id : ids) {
            const std::string& tok = token_of(id);
            if (special::is_special(id)) continue;
            if (tok.size() >= kEndOfWord.size() &&
                std::string_view(tok).substr(tok.size() - kEndOfWord.size()) == kEndOfWord) {
                out.append(tok, 0, tok.size() - kEndOfWord.size());
                out.push_back(' ');
            } else {
                out += tok;
            }
        }
        if (!out.empty() && out.back() == ' ') out.pop_back();
        return out;
    }

    // Greedy most-frequent-pair learning; ties go to the lexicographically
    // smallest (left, right) pair.
    static BpeModel learn(const std::vector<std::string>& corpus, std::size_t num_merges) {
        if (corpus.empty()) throw InputError("bpe_learn: empty corpus");
        std::map<std::string, std::size_t> word_counts;
        for (const auto& line : corpus) {
            for (auto& w : split_words(line)) ++word_counts[w];
        }
        if (word_counts.empty()) throw InputError("bpe_learn: corpus has no words");

        std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
        words.reserve(word_counts.size());
        std::map<std::string, bool> chars;
        for (const auto& [w, n] : word_counts) {
            auto syms = word_symbols(w);
            for (const auto& s : syms) chars[s] = true;
            words.emplace_back(std::move(syms), n);
        }

        std::vector<MergeRule> merges;
        for (std::size_t m = 0; m < num_merges; ++m) {
            std::map<MergeRule, std::size_t> pair_counts;
            for (const auto& [syms, n] : words) {
                for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_counts[{syms[i], syms[i + 1]}] += n;
            }
            if (pair_counts.empty()) break;
            auto best = pair_counts.begin();
            for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
                if (it->second > best->second) best = it;
            }
            const MergeRule rule = best->first;
            merges.push_back(rule);
            const std::string joined = rule.first + rule.second;
            for (auto& [syms, n] : words) {
                std::vector<std::string> next;
                next.reserve(syms.size());
                for (std::size_t i = 0; i < syms.size(); ++i) {
                    if (i + 1 < syms.size() && syms[i] == rule.first && syms[i + 1] == rule.second) {
                        next.push_back(joined);
                        ++i;
                    } else {
                        next.push_back(std::move(syms[i]));
                    }
                }
                syms = std::move(next);
            }
        }

        std::vector<std::string> tokens = special::names();
        for (const auto& [c, _] : chars) tokens.push_back(c);
        std::map<std::string, bool> present(chars);
        for (const auto& [l, r] : merges) {
            std::string joined = l + r;
            if (present.emplace(joined, true).second) tokens.push_back(std::move(joined));
        }
        return BpeModel(std::move(merges), std::move(tokens));
    }

    // Model file: magic line then one "left right" rule per line.
    void save_merges(std::ostream& os) const {
        os << kBpeMagic << '\n';
        for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
    }

    // Vocab file: one token per line; line number (from 0) is the id.
    void save_vocab(std::ostream& os) const {
        for (const auto& t : tokens_) os << t << '\n';
    }

    void save(const std::string& model_path, const std::string& vocab_path) const {
        std::ofstream m(model_path, std::ios::binary), v(vocab_path, std::ios::binary);
        if (!m || !v) throw IoError("bpe: cannot write " + model_path + " / " + vocab_path);
        save_merges(m);
        save_vocab(v);
        if (!m || !v) throw IoError("bpe: write failed for " + model_path + " / " + vocab_path);
    }

    static BpeModel read(std::istream& merges_in, std::istream& vocab_in) {
        std::string line;
        if (!std::getline(merges_in, line) || line != kBpeMagic) throw InputError("bpe: missing model header");
        std::vector<MergeRule> merges;
        while (std::getline(merges_in, line)) {
            if (line.empty()) continue;
            const auto parts = split_words(line);
            if (parts.size() != 2) throw InputError("bpe: malformed merge rule '" + line + "'");
            merges.emplace_back(parts[0], parts[1]);
        }
        std::vector<std::string> tokens;
        while (std::getline(vocab_in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            tokens.push_back(line);
        }
        return BpeModel(std::move(merges), std::move(tokens));
    }

    static BpeModel load(const std::string& model_path, const std::string& vocab_path) {
        std::ifstream m(model_path, std::ios::binary), v(vocab_path, std::ios::binary);
        if (!m) throw IoError("bpe: cannot read " + model_path);
        if (!v) throw IoError("bpe: cannot read " + vocab_path);
        return read(m, v);
    }

    friend bool operator==(const BpeModel& a, const BpeModel& b) {
        return a.merges_ == b.merges_ && a.tokens_ == b.tokens_;
    }

   private:
    static std::string pair_key(const std::string& l, const std::string& r) {
        std::string k;
        k.reserve(l.size() + r.size() + 1);
        k += l;
        k.push_back('\x1f');
        k += r;
        return k;
    }

    void reset_vocab() {
        tokens_ = special::names();
        index_tokens();
    }

    void index_tokens() {
        ids_.clear();
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
                throw InputError("bpe: duplicate vocabulary entry '" + tokens_[i] + "'");
            }
        }
    }

    void index_merges() {
        ranks_.clear();
        for (std::size_t i = 0; i < merges_.size(); ++i) ranks_.emplace(pair_key(merges_[i].first, merges_[i].second), i);
    }

    std::vector<MergeRule> merges_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
    std::unordered_map<std::string, std::size_t> ranks_;
};

}  // namespace sbd
