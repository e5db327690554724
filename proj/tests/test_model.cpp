#include <gtest/gtest.h>

#include <map>
#include <random>
#include <sstream>

#include "sbd/checkpoint.hpp"
#include "sbd/model.hpp"

using namespace sbd;

namespace {

ModelConfig micro(std::size_t layers = 1) {
    ModelConfig c;
    c.src_vocab = 11;
    c.tgt_vocab = 11;
    c.d_model = 8;
    c.heads = 2;
    c.d_ffn = 16;
    c.enc_layers = c.dec_layers = layers;
    c.dropout = 0.0;
    c.init_seed = 3;
    return c;
}

IdMatrix random_ids(std::size_t rows, std::size_t cols, std::size_t vocab, std::mt19937_64& eng) {
    IdMatrix m(rows, cols);
    for (auto& id : m.ids) id = static_cast<TokenId>(special::kCount + eng() % (vocab - special::kCount));
    return m;
}

template <typename T>
Tensor<T>& param(SbdModel<T>& m, const std::string& name) {
    for (auto& p : m.parameters())
        if (p.name == name) return p.tensor;
    throw std::runtime_error("no parameter " + name);
}

}  // namespace

TEST(Masks, ForwardMatchesFigure) {
    const auto m = causal_mask_forward(3);
    EXPECT_EQ(m.cells, (std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1}));
    EXPECT_EQ(causal_mask_forward(1).cells, std::vector<std::uint8_t>{1});
}

TEST(Masks, BackwardMatchesFigure) {
    EXPECT_EQ(causal_mask_backward(3).cells, (std::vector<std::uint8_t>{1, 1, 1, 0, 1, 1, 0, 0, 1}));
}

TEST(Masks, RowCountsAndDiagonal) {
    const auto f = causal_mask_forward(9), b = causal_mask_backward(9);
    for (std::size_t i = 0; i < 9; ++i) {
        std::size_t n = 0;
        for (std::size_t j = 0; j < 9; ++j) n += f.at(i, j);
        EXPECT_EQ(n, i + 1);
        EXPECT_TRUE(f.at(i, i));
        EXPECT_TRUE(b.at(i, i));
    }
}

TEST(Masks, DualityForAllLengthsUpTo64) {
    for (std::size_t t = 1; t <= 64; ++t) EXPECT_EQ(causal_mask_backward(t), causal_mask_forward(t).transposed()) << t;
}

TEST(Masks, ZeroLengthIsShapeError) {
    EXPECT_THROW(causal_mask_forward(0), ShapeError);
    EXPECT_THROW(causal_mask_backward(0), ShapeError);
}

TEST(Model, ParameterNamesAndGroups) {
    SbdModel<float> m(micro());
    std::map<std::string, ParamGroup> g;
    for (const auto& p : m.parameters()) EXPECT_TRUE(g.emplace(p.name, p.group).second) << "duplicate " << p.name;
    EXPECT_EQ(g.at("emb.src"), ParamGroup::kForward);
    EXPECT_EQ(g.at("enc.0.attn.wq"), ParamGroup::kForward);
    EXPECT_EQ(g.at("dec_fwd.0.self.wq"), ParamGroup::kForward);
    EXPECT_EQ(g.at("dec_bwd.0.cross.wk"), ParamGroup::kBackward);
    EXPECT_EQ(g.at("emb.tgt_bwd"), ParamGroup::kBackward);
    EXPECT_EQ(g.at("wh"), ParamGroup::kProjection);
    for (const auto& [name, group] : g) {
        if (name.rfind("dec_bwd", 0) == 0) EXPECT_EQ(group, ParamGroup::kBackward) << name;
        if (name.rfind("dec_fwd", 0) == 0) EXPECT_EQ(group, ParamGroup::kForward) << name;
    }
}

TEST(Model, ForwardOnlyAllocatesNoBackwardOrProjection) {
    auto c = micro();
    c.with_backward = false;
    SbdModel<float> m(c);
    EXPECT_FALSE(m.has_projection());
    for (const auto& p : m.parameters()) {
        EXPECT_NE(p.name.rfind("dec_bwd", 0), 0u) << p.name;
        EXPECT_NE(p.name, "wh");
    }
}

TEST(Model, ProjectionStartsAsIdentity) {
    SbdModel<double> m(micro());
    const auto& wh = m.projection();
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(wh.data()[i * 8 + j], i == j ? 1.0 : 0.0);
    const Tensor<double> h({1, 2, 8}, std::vector<double>(16, 0.25));
    const auto out = m.project_hidden(h);
    EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), h.data().begin()));
}

TEST(Model, ZeroProjectionGivesZeros) {
    SbdModel<double> m(micro());
    for (auto& v : param(m, "wh").mutable_data()) v = 0.0;
    const auto out = m.project_hidden(Tensor<double>({1, 1, 8}, std::vector<double>(8, 3.0)));
    for (const double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, HandMultipliedProjection) {
    auto c = micro();
    c.d_model = 2;
    c.heads = 1;
    SbdModel<double> m(c);
    auto w = param(m, "wh").mutable_data();
    w[0] = 1;
    w[1] = 2;
    w[2] = 3;
    w[3] = 4;
    const auto out = m.project_hidden(Tensor<double>({1, 1, 2}, {5, 6}));
    EXPECT_EQ(out.data()[0], 5 * 1 + 6 * 3);
    EXPECT_EQ(out.data()[1], 5 * 2 + 6 * 4);
}

TEST(Model, OutputShapes) {
    SbdModel<float> m(micro());
    std::mt19937_64 eng(1);
    const auto src = random_ids(3, 5, 11, eng);
    const std::vector<std::uint8_t> sr(15, 1);
    const auto enc = m.encode(src, sr, RunMode{});
    EXPECT_EQ(enc.shape(), (Shape{3, 5, 8}));
    for (const std::size_t t : {1u, 4u}) {
        const auto in = random_ids(3, t, 11, eng);
        const std::vector<std::uint8_t> tr(3 * t, 1);
        const auto f = m.decode_forward(enc, sr, in, tr, RunMode{});
        const auto b = m.decode_backward(enc, sr, in, tr, RunMode{});
        EXPECT_EQ(f.logits.shape(), (Shape{3, t, 11}));
        EXPECT_EQ(f.hidden.shape(), (Shape{3, t, 8}));
        EXPECT_EQ(b.logits.shape(), f.logits.shape());
        EXPECT_EQ(b.hidden.shape(), f.hidden.shape());
        const auto p = softmax_lastdim(f.logits);
        for (std::size_t r = 0; r < 3 * t; ++r) {
            double s = 0;
            for (std::size_t v = 0; v < 11; ++v) s += p.data()[r * 11 + v];
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Model, ZeroEncoderLayersPassEmbeddingsThrough) {
    auto c = micro();
    c.enc_layers = 0;
    SbdModel<double> m(c);
    IdMatrix src(1, 2);
    src.at(0, 0) = 6;
    src.at(0, 1) = 9;
    const std::vector<std::uint8_t> sr(2, 1);
    const auto enc = m.encode(src, sr, RunMode{});
    const auto& table = param(m, "emb.src");
    const auto pe = sinusoidal_positions<double>(2, 8);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t j = 0; j < 8; ++j) {
            const double want = table.data()[src.at(0, t) * 8 + j] * std::sqrt(8.0) + pe.data()[t * 8 + j];
            EXPECT_NEAR(enc.data()[t * 8 + j], want, 1e-12);
        }
}

TEST(Model, PadTailContentDoesNotLeak) {
    SbdModel<double> m(micro(2));
    std::mt19937_64 eng(4);
    auto src = random_ids(1, 6, 11, eng);
    const std::vector<std::uint8_t> sr = {1, 1, 1, 1, 0, 0};
    const auto a = m.encode(src, sr, RunMode{});
    std::swap(src.at(0, 4), src.at(0, 5));
    src.at(0, 5) = 7;
    const auto b = m.encode(src, sr, RunMode{});
    for (std::size_t i = 0; i < 4 * 8; ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Model, DecodersAgreeOnSinglePositionWithSharedWeights) {
    SbdModel<double> m(micro(2));
    std::map<std::string, Tensor<double>*> by_name;
    for (auto& p : m.parameters()) by_name[p.name] = &p.tensor;
    for (auto& p : m.parameters()) {
        std::string src_name;
        if (p.name.rfind("dec_bwd", 0) == 0) src_name = "dec_fwd" + p.name.substr(7);
        if (p.name == "emb.tgt_bwd") src_name = "emb.tgt_fwd";
        if (src_name.empty()) continue;
        auto dst = p.tensor.mutable_data();
        const auto from = by_name.at(src_name)->data();
        std::copy(from.begin(), from.end(), dst.begin());
    }
    std::mt19937_64 eng(2);
    const auto src = random_ids(2, 4, 11, eng);
    const std::vector<std::uint8_t> sr(8, 1), tr(2, 1);
    const auto enc = m.encode(src, sr, RunMode{});
    const auto in = random_ids(2, 1, 11, eng);
    const auto f = m.decode_forward(enc, sr, in, tr, RunMode{});
    const auto b = m.decode_backward(enc, sr, in, tr, RunMode{});
    for (std::size_t i = 0; i < f.logits.numel(); ++i) EXPECT_EQ(f.logits.data()[i], b.logits.data()[i]);
}

// 100 random inputs: forward logits before t' and backward logits after t'
// are bitwise unaffected by a change at t'.
TEST(Model, DecoderCausality) {
    SbdModel<float> m(micro(2));
    std::mt19937_64 eng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t s = 1 + eng() % 6, t = 2 + eng() % 7;
        const auto src = random_ids(1, s, 11, eng);
        const std::vector<std::uint8_t> sr(s, 1), tr(t, 1);
        const auto enc = m.encode(src, sr, RunMode{});
        auto in = random_ids(1, t, 11, eng);
        const std::size_t tp = eng() % t;
        const auto f0 = m.decode_forward(enc, sr, in, tr, RunMode{});
        const auto b0 = m.decode_backward(enc, sr, in, tr, RunMode{});
        in.at(0, tp) = static_cast<TokenId>(special::kCount + (in.at(0, tp) - special::kCount + 1) % 6);
        const auto f1 = m.decode_forward(enc, sr, in, tr, RunMode{});
        const auto b1 = m.decode_backward(enc, sr, in, tr, RunMode{});
        bool any_change = false;
        for (std::size_t pos = 0; pos < t; ++pos)
            for (std::size_t v = 0; v < 11; ++v) {
                const std::size_t i = pos * 11 + v;
                if (pos < tp) EXPECT_EQ(f0.logits.data()[i], f1.logits.data()[i]);
                if (pos > tp) EXPECT_EQ(b0.logits.data()[i], b1.logits.data()[i]);
                any_change |= f0.logits.data()[i] != f1.logits.data()[i];
            }
        EXPECT_TRUE(any_change);
    }
}

TEST(Model, DropoutIsSeededByStep) {
    auto c = micro();
    c.dropout = 0.3;
    SbdModel<float> m(c);
    std::mt19937_64 eng(1);
    const auto src = random_ids(2, 5, 11, eng);
    const std::vector<std::uint8_t> sr(10, 1);
    const auto a = m.encode(src, sr, RunMode{true, 7, 1});
    const auto b = m.encode(src, sr, RunMode{true, 7, 1});
    const auto c2 = m.encode(src, sr, RunMode{true, 7, 2});
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), c2.data().begin()));
}

TEST(Model, InvalidConfigs) {
    auto c = micro();
    c.heads = 3;
    EXPECT_THROW(SbdModel<float>{c}, ConfigError);
    c = micro();
    c.with_forward = c.with_backward = false;
    EXPECT_THROW(SbdModel<float>{c}, ConfigError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    SbdModel<float> m(micro());
    std::ostringstream a;
    write_checkpoint(a, snapshot(m));
    std::istringstream in(a.str());
    const auto loaded = read_checkpoint(in);
    SbdModel<float> other([] {
        auto c = micro();
        c.init_seed = 99;
        return c;
    }());
    restore(other, loaded);
    std::ostringstream b;
    write_checkpoint(b, snapshot(other));
    EXPECT_EQ(a.str(), b.str());
}

TEST(Checkpoint, HeaderLayout) {
    Checkpoint c = {NamedArray{"wh", {1, 2}, {1.0f, -2.0f}}};
    std::ostringstream os;
    write_checkpoint(os, c);
    const std::string s = os.str();
    const std::string want("SBDN\x01\x00\x00\x00\x01\x00\x00\x00\x02\x00wh\x02\x01\x00\x00\x00\x02\x00\x00\x00"
                           "\x00\x00\x80\x3f\x00\x00\x00\xc0",
                           4 + 4 + 4 + 2 + 2 + 1 + 8 + 8);
    EXPECT_EQ(s, want);
}

TEST(Checkpoint, CorruptInputsAreInputErrors) {
    std::istringstream bad_magic("XXXX");
    EXPECT_THROW(read_checkpoint(bad_magic), InputError);
    Checkpoint c = {NamedArray{"wh", {2}, {1.0f, 2.0f}}};
    std::ostringstream os;
    write_checkpoint(os, c);
    std::istringstream truncated(os.str().substr(0, os.str().size() - 2));
    EXPECT_THROW(read_checkpoint(truncated), InputError);
}

TEST(Checkpoint, RestoreRejectsShapeMismatch) {
    SbdModel<float> m(micro());
    auto ck = snapshot(m);
    ck[0].shape = {1, 1};
    ck[0].values = {0.0f};
    EXPECT_THROW(restore(m, ck), InputError);
}
