#pragma once

// Flat run configuration: UTF-8 lines of `key = value`, '#' starts a comment.
// Every key has a documented default; unknown keys are rejected.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sbd/common.hpp"

namespace sbd {

struct ConfigKey {
    const char* key;
    const char* default_value;
    const char* doc;
};

// Defaults form the desk preset (d_model 64, 2 layers, 4 heads).
inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> kSchema = {
        {"model.d_model", "64", "hidden size"},
        {"model.heads", "4", "attention heads"},
        {"model.layers", "2", "layers in the encoder and in each decoder"},
        {"model.d_ffn", "256", "feed-forward inner size"},
        {"model.dropout", "0.1", "dropout probability"},
        {"model.share_target_embedding", "false", "tie the two decoders' target embeddings"},
        {"model.decoders", "both", "both | fwd | bwd"},
        {"loss.eps_ls", "0.1", "label smoothing for the cross-entropy terms"},
        {"loss.use_logit_kd", "true", "positional KL distillation"},
        {"loss.use_hidden_kd", "true", "hidden-state MSE distillation"},
        {"loss.use_annealing", "true", "teacher-annealed weighting"},
        {"loss.stop_teacher_grad", "false", "block distillation gradients into the backward decoder"},
        {"loss.w_step", "1000", "warm-start steps before annealing"},
        {"optim.warmup", "4000", "learning-rate warmup steps"},
        {"optim.max_steps", "3000", "training steps"},
        {"optim.tokens_per_batch", "1024", "approximate tokens per batch"},
        {"optim.seed", "1", "seed for every random stream"},
        {"optim.ckpt_every", "500", "checkpoint interval in steps"},
        {"optim.avg_last_k", "5", "checkpoints averaged into avg.sbdn"},
        {"optim.log_every", "50", "metrics interval in steps"},
        {"optim.patience", "0", "early-stop patience in checkpoints on dev BLEU; 0 disables"},
        {"optim.clip_norm", "1.0", "global gradient-norm clip; 0 disables"},
        {"optim.weight_decay", "0", "decoupled weight decay"},
        {"decode.beam", "4", "beam size"},
        {"decode.alpha", "0.6", "length-penalty exponent"},
        {"decode.max_len_factor", "2", "max decode length = factor * source length + offset"},
        {"decode.max_len_offset", "10", "see decode.max_len_factor"},
        {"data.task", "copy", "copy | reverse | agree | files"},
        {"data.vocab_size", "16", "synthetic vocabulary size including specials"},
        {"data.min_len", "1", "synthetic minimum source length"},
        {"data.max_len", "12", "synthetic maximum source length"},
        {"data.n_train", "5000", "synthetic training pairs"},
        {"data.n_dev", "200", "synthetic dev pairs"},
        {"data.n_test", "200", "synthetic test pairs"},
        {"data.train_src", "", "training source file (task = files)"},
        {"data.train_tgt", "", "training target file"},
        {"data.dev_src", "", "dev source file"},
        {"data.dev_tgt", "", "dev target file"},
        {"data.test_src", "", "test source file"},
        {"data.test_tgt", "", "test target file"},
        {"data.num_merges", "8000", "BPE merges"},
        {"data.joint_vocab", "false", "learn one BPE model over source and target"},
        {"data.max_tokens_per_example", "256", "longer training pairs are dropped"},
    };
    return kSchema;
}

class Config {
   public:
    Config() {
        for (const auto& k : config_schema()) values_[k.key] = k.default_value;
    }

    static Config parse(std::istream& in, const std::string& origin = "<config>") {
        Config c;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            }
            c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("config: cannot read " + path);
        return parse(in, path);
    }

    void set(const std::string& key, const std::string& value) {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
        it->second = value;
    }

    // "key=value" form used by command-line overrides.
    void set_assignment(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("config: override '" + assignment + "' is not key=value");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    const std::string& str(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
        return it->second;
    }

    long long integer(const std::string& key) const {
        const std::string& v = str(key);
        long long out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size()) {
            throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
        }
        return out;
    }

    std::size_t count(const std::string& key) const {
        const long long v = integer(key);
        if (v < 0) throw ConfigError("config: '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    }

    double real(const std::string& key) const {
        const std::string& v = str(key);
        std::istringstream is(v);
        is.imbue(std::locale::classic());
        double out = 0.0;
        if (!(is >> out) || !is.eof()) throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
        return out;
    }

    bool flag(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
    }

    // Every key in schema order, one `key = value` per line.
    std::string echo() const {
        std::ostringstream os;
        for (const auto& k : config_schema()) os << k.key << " = " << values_.at(k.key) << '\n';
        return os.str();
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("config: cannot write " + path);
        out << echo();
        if (!out) throw IoError("config: write failed for " + path);
    }

    friend bool operator==(const Config& a, const Config& b) { return a.values_ == b.values_; }

   private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace sbd
