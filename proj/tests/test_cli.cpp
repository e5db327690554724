#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(SBD_CLI) + " " + args + " 2>/dev/null";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (const std::size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::size_t count_lines(const std::string& s) {
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
   protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "sbd_cli";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        std::ofstream cfg(dir_ / "run.cfg");
        cfg << "# tiny run\n"
               "model.d_model = 16\nmodel.heads = 2\nmodel.layers = 1\nmodel.d_ffn = 32\n"
               "data.n_train = 80\ndata.n_dev = 8\ndata.n_test = 8\ndata.max_len = 6\n"
               "optim.max_steps = 6\noptim.ckpt_every = 3\noptim.log_every = 3\noptim.tokens_per_batch = 64\n"
               "loss.w_step = 3\ndecode.beam = 2\n";
    }
    static fs::path dir_;
    static std::string cfg() { return (dir_ / "run.cfg").string(); }
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("train --config " + cfg() + " --out x --bogus").code, 1);
    EXPECT_EQ(run("train --out x").code, 1);
    EXPECT_EQ(run("train --config " + cfg() + " --out " + (dir_ / "bad").string() + " --set model.depth=3").code, 1);
}

TEST_F(Cli, RuntimeErrorsExitTwo) {
    EXPECT_EQ(run("translate --ckpt /nonexistent/last.sbdn --src " + cfg()).code, 2);
    EXPECT_EQ(run("avg-ckpt /nonexistent/a.sbdn --out " + (dir_ / "avg.sbdn").string()).code, 2);
}

TEST_F(Cli, TrainTranslateEvaluate) {
    const auto data = dir_ / "data";
    ASSERT_EQ(run("gen-data --config " + cfg() + " --out " + data.string()).code, 0);
    for (const char* f : {"train.src", "train.tgt", "dev.src", "test.tgt", "config.cfg"})
        EXPECT_TRUE(fs::exists(data / f)) << f;
    EXPECT_EQ(count_lines(slurp(data / "train.src")), 80u);

    const auto out = dir_ / "run";
    const auto tr = run("train --config " + cfg() + " --out " + out.string());
    ASSERT_EQ(tr.code, 0);
    const auto summary = nlohmann::json::parse(tr.out);
    EXPECT_EQ(summary["steps"].get<int>(), 6);
    for (const char* f : {"metrics.jsonl", "config.cfg", "last.sbdn", "avg.sbdn", "ckpt_0000003.sbdn"})
        EXPECT_TRUE(fs::exists(out / f)) << f;

    // Same config and seed again: byte-identical artifacts.
    const auto again = dir_ / "run2";
    ASSERT_EQ(run("train --config " + cfg() + " --out " + again.string()).code, 0);
    EXPECT_EQ(slurp(out / "metrics.jsonl"), slurp(again / "metrics.jsonl"));
    EXPECT_EQ(slurp(out / "last.sbdn"), slurp(again / "last.sbdn"));

    // Re-running from the echoed config reproduces the run.
    const auto echoed = dir_ / "run3";
    ASSERT_EQ(run("train --config " + (out / "config.cfg").string() + " --out " + echoed.string()).code, 0);
    EXPECT_EQ(slurp(out / "avg.sbdn"), slurp(echoed / "avg.sbdn"));

    // One output line per input line, blank lines included.
    {
        std::ofstream src(dir_ / "in.src");
        src << "w5 w6 w7\n\nw8\n";
    }
    const auto tl = run("translate --ckpt " + (out / "avg.sbdn").string() + " --src " + (dir_ / "in.src").string());
    ASSERT_EQ(tl.code, 0);
    EXPECT_EQ(count_lines(tl.out), 3u);
    const auto tl_beam1 =
        run("translate --ckpt " + (out / "avg.sbdn").string() + " --beam 1 --src " + (data / "test.src").string());
    ASSERT_EQ(tl_beam1.code, 0);
    EXPECT_EQ(count_lines(tl_beam1.out), 8u);
    {
        std::ofstream hyp(dir_ / "hyp.txt");
        hyp << tl_beam1.out;
    }

    const auto ev = run("evaluate --hyp " + (dir_ / "hyp.txt").string() + " --src " + (data / "test.src").string() +
                        " --ref " + (data / "test.tgt").string());
    ASSERT_EQ(ev.code, 0);
    const auto j = nlohmann::json::parse(ev.out);
    EXPECT_TRUE(j.contains("bleu"));
    EXPECT_TRUE(j["buckets"].is_array());
    const auto self = run("evaluate --hyp " + (data / "test.tgt").string() + " --src " + (data / "test.src").string() +
                          " --ref " + (data / "test.tgt").string());
    EXPECT_DOUBLE_EQ(nlohmann::json::parse(self.out)["bleu"].get<double>(), 100.0);

    const auto decoded = run("evaluate --ckpt " + (out / "avg.sbdn").string() + " --beam 1 --src " +
                             (data / "test.src").string() + " --ref " + (data / "test.tgt").string());
    ASSERT_EQ(decoded.code, 0);
    EXPECT_EQ(nlohmann::json::parse(decoded.out)["bleu"].get<double>(), j["bleu"].get<double>());

    ASSERT_EQ(run("avg-ckpt " + (out / "ckpt_0000003.sbdn").string() + " " + (out / "ckpt_0000006.sbdn").string() +
                  " --out " + (dir_ / "avg2.sbdn").string())
                  .code,
              0);
    EXPECT_EQ(slurp(dir_ / "avg2.sbdn"), slurp(out / "avg.sbdn"));
}

TEST_F(Cli, LearnBpe) {
    {
        std::ofstream t(dir_ / "text.txt");
        t << "low lower lowest\nnew newer newest\n";
    }
    const auto r = run("learn-bpe --input " + (dir_ / "text.txt").string() + " --merges 10 --model " +
                       (dir_ / "m.bpe").string() + " --vocab " + (dir_ / "m.vocab").string());
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(count_lines(slurp(dir_ / "m.bpe")), 11u);  // header + merges
    EXPECT_TRUE(fs::exists(dir_ / "m.vocab"));
}

TEST_F(Cli, AblateEmitsSevenRows) {
    const auto r = run("ablate --config " + cfg() + " --set optim.max_steps=2 --variants all --out " +
                       (dir_ / "ablate").string());
    ASSERT_EQ(r.code, 0);
    std::istringstream in(r.out);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "variant\tdev_bleu\ttest_bleu");
    std::vector<std::string> names;
    while (std::getline(in, line)) names.push_back(line.substr(0, line.find('\t')));
    EXPECT_EQ(names, (std::vector<std::string>{"trm_fwd", "trm_bwd", "trm_both", "sbd", "sbd_no_anneal",
                                               "sbd_no_hidden", "sbd_no_logit"}));
    EXPECT_EQ(run("ablate --config " + cfg() + " --variants sbd,bogus --out " + (dir_ / "ab2").string()).code, 1);
}

TEST_F(Cli, SweepWStep) {
    const auto r = run("sweep-wstep --config " + cfg() + " --set optim.max_steps=2 --candidates 4,1 --out " +
                       (dir_ / "sweep").string());
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "w_step\tdev_bleu");
    EXPECT_EQ(count_lines(r.out), 3u);
    EXPECT_EQ(r.out.find("\n1\t") < r.out.find("\n4\t"), true);
}
