#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sbd/grad_check.hpp"
#include "sbd/training.hpp"

namespace fs = std::filesystem;
using namespace sbd;

namespace {

Config tiny_config() {
    Config c;
    for (const char* kv : {"model.d_model=16", "model.heads=2", "model.layers=1", "model.d_ffn=32",
                           "data.n_train=120", "data.n_dev=12", "data.n_test=12", "data.max_len=6",
                           "optim.max_steps=30", "optim.ckpt_every=10", "optim.log_every=5",
                           "optim.tokens_per_batch=96", "optim.warmup=100", "loss.w_step=10", "optim.avg_last_k=2"})
        c.set_assignment(kv);
    return c;
}

std::string fresh_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("sbd_train_" + name);
    fs::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::vector<nlohmann::json> read_metrics(const std::string& dir) {
    std::ifstream in((fs::path(dir) / "metrics.jsonl").string());
    std::vector<nlohmann::json> out;
    for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
    return out;
}

NamedArray arr(std::string name, std::vector<float> v) {
    const std::size_t n = v.size();
    return NamedArray{std::move(name), Shape{n}, std::move(v)};
}

}  // namespace

TEST(Noam, ReferenceValues) {
    EXPECT_NEAR(noam_lr(4000, 512, 4000), 6.988e-4, 1e-7);
    EXPECT_NEAR(noam_lr(1, 512, 4000), 1.747e-7, 1e-10);
}

TEST(Noam, PeaksAtWarmup) {
    const double peak = noam_lr(100, 64, 100);
    for (const std::uint64_t s : {1u, 50u, 99u, 101u, 400u}) EXPECT_LT(noam_lr(s, 64, 100), peak);
    EXPECT_THROW(noam_lr(0, 64, 100), ContractError);
    EXPECT_THROW(noam_lr(1, 64, 0), ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ModelConfig mc;
    mc.src_vocab = mc.tgt_vocab = 8;
    mc.d_model = 4;
    mc.heads = 1;
    mc.d_ffn = 4;
    mc.enc_layers = mc.dec_layers = 1;
    SbdModel<float> m(mc);
    auto params = m.parameters();
    // Gradient only on the first parameter: d/dx sum(x) = 1 everywhere.
    const auto before_first = std::vector<float>(params[0].tensor.data().begin(), params[0].tensor.data().end());
    const auto before_second = std::vector<float>(params[1].tensor.data().begin(), params[1].tensor.data().end());
    for (auto& p : params) p.tensor.zero_grad();
    sum(params[0].tensor).backward();
    AdamOptions opt;
    opt.clip_norm = 0.0;
    Adam<float> adam(params, opt);
    adam.step(params, 0.01);
    const auto after = params[0].tensor.data();
    for (std::size_t i = 0; i < after.size(); ++i) EXPECT_NEAR(after[i], before_first[i] - 0.01f, 1e-6);
    const auto second = params[1].tensor.data();
    EXPECT_TRUE(std::equal(second.begin(), second.end(), before_second.begin()));
    EXPECT_EQ(adam.updates(0), 1u);
    EXPECT_EQ(adam.updates(1), 0u);
}

TEST(Adam, ClippingReportsPreClipNorm) {
    ModelConfig mc;
    mc.src_vocab = mc.tgt_vocab = 8;
    mc.d_model = 4;
    mc.heads = 1;
    mc.d_ffn = 4;
    mc.enc_layers = mc.dec_layers = 1;
    SbdModel<float> m(mc);
    auto params = m.parameters();
    for (auto& p : params) p.tensor.zero_grad();
    sum(scale(params[0].tensor, 3.0f)).backward();
    Adam<float> adam(params, AdamOptions{});
    const double norm = adam.step(params, 0.01);
    EXPECT_NEAR(norm, 3.0 * std::sqrt(static_cast<double>(params[0].tensor.numel())), 1e-4);
}

TEST(Averaging, SingleCheckpointIsIdentity) {
    const Checkpoint c = {arr("a", {1, 2, 3}), arr("b", {-4})};
    EXPECT_EQ(average_checkpoints(std::vector<Checkpoint>{c}), c);
}

TEST(Averaging, ElementwiseMeanAndOrderInvariance) {
    const Checkpoint c1 = {arr("a", {1, 2}), arr("b", {0})};
    const Checkpoint c2 = {arr("a", {3, 6}), arr("b", {1})};
    const Checkpoint c3 = {arr("a", {5, 1}), arr("b", {5})};
    const auto m = average_checkpoints(std::vector<Checkpoint>{c1, c2, c3});
    EXPECT_EQ(m[0].values, (std::vector<float>{3, 3}));
    EXPECT_EQ(m[1].values, (std::vector<float>{2}));
    EXPECT_EQ(average_checkpoints(std::vector<Checkpoint>{c3, c1, c2}), m);
}

TEST(Averaging, MismatchAndEmptyAreInputErrors) {
    const Checkpoint c1 = {arr("a", {1, 2})};
    const Checkpoint renamed = {arr("z", {1, 2})};
    const Checkpoint reshaped = {arr("a", {1, 2, 3})};
    EXPECT_THROW(average_checkpoints(std::vector<Checkpoint>{c1, renamed}), InputError);
    EXPECT_THROW(average_checkpoints(std::vector<Checkpoint>{c1, reshaped}), InputError);
    EXPECT_THROW(average_checkpoints(std::vector<Checkpoint>{}), InputError);
}

TEST(ConfigFile, ParseCommentsAndOverrides) {
    std::istringstream in("# toy\nmodel.d_model = 32  # width\n\nloss.w_step=7\n");
    auto c = Config::parse(in);
    EXPECT_EQ(c.count("model.d_model"), 32u);
    EXPECT_EQ(c.count("loss.w_step"), 7u);
    c.set_assignment("loss.w_step=9");
    EXPECT_EQ(c.count("loss.w_step"), 9u);
}

TEST(ConfigFile, Errors) {
    std::istringstream unknown("model.depth = 3\n");
    EXPECT_THROW(Config::parse(unknown), ConfigError);
    std::istringstream no_eq("model.d_model 3\n");
    EXPECT_THROW(Config::parse(no_eq), ConfigError);
    Config c;
    EXPECT_THROW(c.set_assignment("model.d_model"), ConfigError);
    c.set("model.d_model", "abc");
    EXPECT_THROW(c.integer("model.d_model"), ConfigError);
    c.set("model.d_model", "-3");
    EXPECT_THROW(c.count("model.d_model"), ConfigError);
    c.set("loss.use_logit_kd", "maybe");
    EXPECT_THROW(c.flag("loss.use_logit_kd"), ConfigError);
}

TEST(ConfigFile, EchoRoundTrips) {
    Config c = tiny_config();
    c.set("data.task", "reverse");
    std::istringstream in(c.echo());
    EXPECT_EQ(Config::parse(in), c);
    EXPECT_NE(Config{}, c);
}

TEST(Train, IdenticalRunsAreByteIdentical) {
    const auto cfg = tiny_config();
    const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
    const auto ra = train(cfg, a), rb = train(cfg, b);
    EXPECT_EQ(ra.steps, 30u);
    for (const char* f : {"last.sbdn", "avg.sbdn", "metrics.jsonl", "summary.json", "ckpt_0000010.sbdn"}) {
        const auto x = slurp((fs::path(a) / f).string());
        EXPECT_FALSE(x.empty()) << f;
        EXPECT_EQ(x, slurp((fs::path(b) / f).string())) << f;
    }
    EXPECT_EQ(ra.dev_bleu, rb.dev_bleu);
}

TEST(Train, MetricsStepsHaveNoGaps) {
    const auto dir = fresh_dir("metrics");
    train(tiny_config(), dir);
    const auto rows = read_metrics(dir);
    ASSERT_EQ(rows.size(), 6u);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i]["step"].get<std::uint64_t>(), 5 * (i + 1));
        for (const char* k : {"lambda", "lr", "ce_fwd", "ce_bwd", "kd_logit", "kd_hidden", "total"})
            EXPECT_TRUE(rows[i].contains(k)) << k;
    }
    // lambda stays at 1 through w_step and then decays as w/c.
    EXPECT_EQ(rows[1]["lambda"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(rows[3]["lambda"].get<double>(), 0.5);
}

TEST(Train, CheckpointsAndAveraging) {
    const auto dir = fresh_dir("ckpts");
    const auto r = train(tiny_config(), dir);
    ASSERT_EQ(r.checkpoints.size(), 3u);
    EXPECT_EQ(fs::path(r.final_checkpoint).filename(), "avg.sbdn");
    const auto want = average_checkpoints(std::vector<std::string>{r.checkpoints[1], r.checkpoints[2]});
    EXPECT_EQ(load_checkpoint(r.final_checkpoint), want);
    EXPECT_EQ(load_checkpoint((fs::path(dir) / "last.sbdn").string()), load_checkpoint(r.checkpoints[2]));
    const auto summary = nlohmann::json::parse(slurp((fs::path(dir) / "summary.json").string()));
    EXPECT_EQ(summary["steps"].get<std::uint64_t>(), 30u);
    EXPECT_EQ(summary["checkpoint"].get<std::string>(), "avg.sbdn");
}

// While lambda = 1 only the backward CE is active, so nothing reachable only
// from the forward decoder may move.
TEST(Train, ForwardDecoderFrozenBeforeWStep) {
    auto cfg = tiny_config();
    cfg.set("loss.w_step", "1000");
    cfg.set("optim.max_steps", "6");
    cfg.set("optim.avg_last_k", "1");
    const auto data = prepare_dataset(cfg);
    const SbdModel<float> init(model_config_from(cfg, data.src_codec.vocab_size(), data.tgt_codec.vocab_size()));
    const auto before = snapshot(init);
    const auto r = train(cfg, fresh_dir("frozen"), data);
    const auto after = load_checkpoint(r.final_checkpoint);
    ASSERT_EQ(before.size(), after.size());
    std::size_t frozen = 0, moved = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto& n = before[i].name;
        const bool fwd_only = n.rfind("dec_fwd.", 0) == 0 || n == "emb.tgt_fwd" || n == "wh";
        if (fwd_only) {
            EXPECT_EQ(before[i].values, after[i].values) << n;
            ++frozen;
        } else if (n.rfind("enc.", 0) == 0 && before[i].values != after[i].values) {
            ++moved;
        }
    }
    EXPECT_GT(frozen, 0u);
    EXPECT_GT(moved, 0u);
}

TEST(Train, EarlyStoppingOnFlatDevBleu) {
    auto cfg = tiny_config();
    // A vanishing learning rate keeps dev BLEU flat, so patience 1 stops at
    // the second checkpoint.
    cfg.set("optim.warmup", "100000000");
    cfg.set("optim.patience", "1");
    const auto dir = fresh_dir("early");
    const auto r = train(cfg, dir);
    EXPECT_TRUE(r.early_stopped);
    EXPECT_EQ(r.steps, 20u);
    const auto rows = read_metrics(dir);
    std::size_t with_bleu = 0;
    for (const auto& row : rows) with_bleu += row.contains("dev_bleu");
    EXPECT_EQ(with_bleu, 2u);
}

TEST(Train, LoadRunRestoresTheSavedModel) {
    const auto dir = fresh_dir("load");
    const auto r = train(tiny_config(), dir);
    const auto run = load_run(r.final_checkpoint);
    EXPECT_EQ(snapshot(run.model), load_checkpoint(r.final_checkpoint));
    EXPECT_EQ(run.config, tiny_config());
}

TEST(Train, EmptyCorpusIsInputError) {
    auto cfg = tiny_config();
    Dataset d = prepare_dataset(cfg);
    d.train = ParallelCorpus{};
    EXPECT_THROW(train(cfg, fresh_dir("empty"), d), InputError);
}

TEST(Sweep, OneRowPerCandidateAscending) {
    auto cfg = tiny_config();
    cfg.set("optim.max_steps", "10");
    const auto dir = fresh_dir("sweep");
    const auto s = sweep_wstep(cfg, {50, 5}, dir);
    ASSERT_EQ(s.rows.size(), 2u);
    EXPECT_EQ(s.rows[0].w_step, 5u);
    EXPECT_EQ(s.rows[1].w_step, 50u);
    EXPECT_TRUE(s.best_w_step == 5u || s.best_w_step == 50u);
    EXPECT_TRUE(fs::exists(fs::path(dir) / "wstep_5" / "summary.json"));
    EXPECT_THROW(sweep_wstep(cfg, {}, dir), ConfigError);
}

TEST(JointObjective, GradientsMatchFiniteDifferences) {
    ModelConfig mc;
    mc.src_vocab = mc.tgt_vocab = 11;
    mc.d_model = 8;
    mc.heads = 2;
    mc.d_ffn = 16;
    mc.enc_layers = mc.dec_layers = 1;
    mc.dropout = 0.0;
    mc.init_seed = 5;
    SbdModel<double> model(mc);
    ParallelCorpus corpus;
    corpus.src = {{5, 6, 7}, {8, 9, 10, 5}};
    corpus.tgt = {{6, 7, 8, 9, special::kEos}, {10, 5, special::kEos}};
    const auto batch = make_batch(corpus, std::vector<std::size_t>{0, 1});
    for (const bool stop_grad : {false, true}) {
        AnnealSchedule s;
        s.stop_teacher_grad = stop_grad;
        auto loss = [&] { return joint_loss(compute_loss_terms(model, batch, s, 0.1, RunMode{}), 0.5, s).total; };
        std::vector<Tensor<double>> params;
        for (const auto& p : model.parameters()) params.push_back(p.tensor);
        if (!stop_grad) {
            EXPECT_LT(grad_check(loss, params, 1e-5), 1e-4);
        } else {
            // With a detached teacher the KD terms no longer reach the
            // backward decoder, so finite differences of the full loss differ
            // from the gradient; only check that training still gets one.
            for (auto& p : params) p.zero_grad();
            loss().backward();
            for (const auto& p : model.parameters())
                if (p.name.rfind("dec_bwd.", 0) == 0) EXPECT_TRUE(p.tensor.has_grad()) << p.name;
        }
    }
}
