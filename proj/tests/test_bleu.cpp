#include <gtest/gtest.h>

#include <random>

#include "bleu_oracle.hpp"
#include "sbd/evaluation.hpp"

using namespace sbd;
using Sentence = std::vector<std::string>;

namespace {

Sentence words(const std::string& s) {
    Sentence out;
    std::istringstream in(s);
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

std::vector<Sentence> random_corpus(std::mt19937_64& eng, std::size_t n, std::size_t alphabet) {
    std::vector<Sentence> c(n);
    for (auto& s : c) {
        s.resize(eng() % 16);
        for (auto& w : s) w = std::string(1, static_cast<char>('a' + eng() % alphabet));
    }
    return c;
}

}  // namespace

TEST(Bleu, IdenticalCorporaScoreHundred) {
    const std::vector<Sentence> c = {words("a b c d e"), words("the cat sat on the mat")};
    EXPECT_DOUBLE_EQ(bleu(c, c).score, 100.0);
}

TEST(Bleu, NoBigramMatchScoresZero) {
    const auto r = bleu(std::vector<Sentence>{words("the the the")}, std::vector<Sentence>{words("the cat")});
    EXPECT_EQ(r.score, 0.0);
    EXPECT_DOUBLE_EQ(r.precisions[0], 1.0 / 3.0);
    EXPECT_EQ(r.matches[1], 0u);
}

TEST(Bleu, TwoSentencePartialOverlapMatchesOracle) {
    const std::vector<Sentence> h = {words("the cat sat on a mat today"), words("a b c d e f")};
    const std::vector<Sentence> r = {words("the cat sat on the mat"), words("a b c d x f g")};
    EXPECT_NEAR(bleu(h, r).score, oracle::bleu(h, r), 1e-9);
    EXPECT_GT(bleu(h, r).score, 0.0);
}

TEST(Bleu, RandomMiniCorporaMatchOracle) {
    std::mt19937_64 eng(11);
    std::size_t nonzero = 0;
    for (int k = 0; k < 200; ++k) {
        const std::size_t n = 1 + eng() % 10;
        auto refs = random_corpus(eng, n, 3);
        auto hyps = random_corpus(eng, n, 3);
        double got = 0;
        try {
            got = bleu(hyps, refs).score;
        } catch (const InputError&) {
            FAIL();
        }
        EXPECT_NEAR(got, oracle::bleu(hyps, refs), 1e-9) << "corpus " << k;
        nonzero += got > 0;
    }
    EXPECT_GT(nonzero, 20u);
}

TEST(Bleu, BrevityPenalty) {
    const auto r = bleu(std::vector<Sentence>{words("a b c d")}, std::vector<Sentence>{words("a b c d e f g h")});
    EXPECT_NEAR(r.brevity_penalty, std::exp(1.0 - 8.0 / 4.0), 1e-15);
    EXPECT_NEAR(r.score, 100.0 * std::exp(-1.0), 1e-9);
    const auto longer = bleu(std::vector<Sentence>{words("a b c d e")}, std::vector<Sentence>{words("a b c d")});
    EXPECT_EQ(longer.brevity_penalty, 1.0);
}

TEST(Bleu, PermutationInvariant) {
    std::mt19937_64 eng(3);
    auto h = random_corpus(eng, 10, 3), r = random_corpus(eng, 10, 3);
    const double base = bleu(h, r).score;
    std::vector<std::size_t> order(10);
    std::iota(order.begin(), order.end(), 0);
    for (int k = 0; k < 10; ++k) {
        std::shuffle(order.begin(), order.end(), eng);
        std::vector<Sentence> hp, rp;
        for (const auto i : order) {
            hp.push_back(h[i]);
            rp.push_back(r[i]);
        }
        EXPECT_NEAR(bleu(hp, rp).score, base, 1e-12);
    }
}

TEST(Bleu, HundredOnlyForIdenticalCorpora) {
    std::mt19937_64 eng(4);
    for (int k = 0; k < 300; ++k) {
        const auto h = random_corpus(eng, 2, 2), r = random_corpus(eng, 2, 2);
        if (bleu(h, r).score == 100.0) {
            EXPECT_EQ(h, r);
        }
    }
}

TEST(Bleu, Errors) {
    EXPECT_THROW(bleu(std::vector<Sentence>{}, std::vector<Sentence>{}), InputError);
    EXPECT_THROW(bleu(std::vector<Sentence>{words("a")}, std::vector<Sentence>{}), InputError);
}

TEST(Buckets, DefaultEdgesGiveSixBuckets) {
    const auto e = default_bucket_edges();
    std::vector<Sentence> srcs;
    for (const std::size_t len : {1u, 10u, 11u, 25u, 35u, 45u, 51u}) srcs.push_back(Sentence(len, "x"));
    const auto b = bleu_by_length(srcs, srcs, srcs, e);
    ASSERT_EQ(b.size(), 6u);
    for (const auto& x : b) ASSERT_TRUE(x.has_value());
    EXPECT_EQ(b[0]->sentences, 2u);
    EXPECT_EQ(b[0]->label, "0-10");
    EXPECT_EQ(b[5]->label, "51-inf");
}

TEST(Buckets, SingleBucketEqualsCorpusBleu) {
    std::mt19937_64 eng(5);
    const auto h = random_corpus(eng, 10, 3), r = random_corpus(eng, 10, 3), s = random_corpus(eng, 10, 3);
    const auto b = bleu_by_length(h, r, s, {1000});
    ASSERT_TRUE(b[0].has_value());
    EXPECT_FALSE(b[1].has_value());
    EXPECT_EQ(b[0]->report.score, bleu(h, r).score);
}

TEST(Buckets, PartitionCoversCorpus) {
    std::mt19937_64 eng(6);
    const auto h = random_corpus(eng, 40, 3), r = random_corpus(eng, 40, 3), s = random_corpus(eng, 40, 3);
    const auto b = bleu_by_length(h, r, s, {3, 7, 11});
    std::size_t n = 0, hyp_len = 0;
    for (const auto& x : b) {
        if (!x) continue;
        n += x->sentences;
        hyp_len += x->report.hyp_len;
    }
    EXPECT_EQ(n, 40u);
    EXPECT_EQ(hyp_len, bleu(h, r).hyp_len);
}

TEST(Buckets, Errors) {
    const std::vector<Sentence> one = {words("a")};
    EXPECT_THROW(bleu_by_length(one, one, std::vector<Sentence>{}, {10}), InputError);
    EXPECT_THROW(bleu_by_length(one, one, one, {10, 10}), InputError);
}

TEST(BleuJson, Keys) {
    const std::vector<Sentence> c = {words("a b c d")};
    const auto j = bleu_to_json(bleu(c, c));
    for (const char* k : {"bleu", "precisions", "matches", "totals", "brevity_penalty", "hyp_len", "ref_len"})
        EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j["precisions"].size(), 4u);
}

TEST(Ablation, VariantFlagAlgebra) {
    const Config base;
    const auto full = variant_config(base, "sbd");
    auto stripped = full;
    stripped.set("loss.use_hidden_kd", "false");
    stripped.set("loss.use_logit_kd", "false");
    stripped.set("loss.use_annealing", "false");
    EXPECT_EQ(stripped, variant_config(base, "trm_both"));
    EXPECT_EQ(variant_config(base, "trm_fwd").str("model.decoders"), "fwd");
    EXPECT_EQ(variant_config(base, "trm_bwd").str("model.decoders"), "bwd");
    EXPECT_FALSE(variant_config(base, "sbd_no_logit").flag("loss.use_logit_kd"));
    EXPECT_THROW(variant_config(base, "sbd_plus"), ConfigError);
    EXPECT_EQ(parse_variants("all").size(), 7u);
    EXPECT_EQ(parse_variants("sbd,trm_fwd"), (std::vector<std::string>{"sbd", "trm_fwd"}));
    EXPECT_THROW(parse_variants("sbd,nope"), ConfigError);
}

TEST(Ablation, TsvLayout) {
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) rows.push_back(AblationRow{v, 12.3456, 6.7});
    const auto tsv = ablation_tsv(rows);
    std::istringstream in(tsv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "variant\tdev_bleu\ttest_bleu");
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        EXPECT_NE(line.find("\t12.35\t6.70"), std::string::npos) << line;
    }
    EXPECT_EQ(n, 7u);
}
