#pragma once

// Reports and the ablation grid.

#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sbd/bleu.hpp"
#include "sbd/config.hpp"
#include "sbd/scoring.hpp"
#include "sbd/training.hpp"

namespace sbd {

inline nlohmann::ordered_json bleu_to_json(const BleuReport& r) {
    nlohmann::ordered_json j;
    j["bleu"] = r.score;
    j["precisions"] = r.precisions;
    j["matches"] = r.matches;
    j["totals"] = r.totals;
    j["brevity_penalty"] = r.brevity_penalty;
    j["hyp_len"] = r.hyp_len;
    j["ref_len"] = r.ref_len;
    return j;
}

inline nlohmann::ordered_json buckets_to_json(const std::vector<std::optional<BucketReport>>& buckets) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& b : buckets) {
        if (!b) continue;
        nlohmann::ordered_json j;
        j["bucket"] = b->label;
        j["sentences"] = b->sentences;
        j["report"] = bleu_to_json(b->report);
        arr.push_back(std::move(j));
    }
    return arr;
}

// The seven rows of the ablation table.
inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> kVariants = {"trm_fwd",       "trm_bwd",       "trm_both",    "sbd",
                                                        "sbd_no_anneal", "sbd_no_hidden", "sbd_no_logit"};
    return kVariants;
}

// Applies a variant's flags on top of a base config.
inline Config variant_config(const Config& base, const std::string& variant) {
    Config c = base;
    c.set("model.decoders", "both");
    c.set("loss.use_logit_kd", "true");
    c.set("loss.use_hidden_kd", "true");
    c.set("loss.use_annealing", "true");
    if (variant == "trm_fwd") {
        c.set("model.decoders", "fwd");
    } else if (variant == "trm_bwd") {
        c.set("model.decoders", "bwd");
    } else if (variant == "trm_both") {
        c.set("loss.use_logit_kd", "false");
        c.set("loss.use_hidden_kd", "false");
        c.set("loss.use_annealing", "false");
    } else if (variant == "sbd_no_anneal") {
        c.set("loss.use_annealing", "false");
    } else if (variant == "sbd_no_hidden") {
        c.set("loss.use_hidden_kd", "false");
    } else if (variant == "sbd_no_logit") {
        c.set("loss.use_logit_kd", "false");
    } else if (variant != "sbd") {
        throw ConfigError("ablate: unknown variant '" + variant + "'");
    }
    return c;
}

// "all" or a comma-separated list of variant names.
inline std::vector<std::string> parse_variants(const std::string& spec) {
    if (spec == "all") return ablation_variants();
    std::vector<std::string> out;
    std::stringstream ss(spec);
    std::string v;
    while (std::getline(ss, v, ',')) {
        if (v.empty()) continue;
        variant_config(Config{}, v);  // validates the name
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("ablate: no variants given");
    return out;
}

struct AblationRow {
    std::string variant;
    double dev_bleu = 0.0;
    double test_bleu = 0.0;
};

// Trains every variant on the same data, seed and budget (out_dir/<variant>)
// and scores dev and test with the configured decoder settings.
inline std::vector<AblationRow> run_ablation(const Config& base, const std::vector<std::string>& variants,
                                             const std::string& out_dir, std::ostream* log = nullptr) {
    if (variants.empty()) throw ConfigError("ablate: no variants given");
    std::vector<Config> configs;
    for (const auto& v : variants) configs.push_back(variant_config(base, v));
    const Dataset data = prepare_dataset(base);
    const DecodeOptions opt = decode_options_from(base);
    std::vector<AblationRow> rows;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        if (log) *log << "== variant " << variants[i] << '\n';
        const auto dir = (std::filesystem::path(out_dir) / variants[i]).string();
        const auto result = train(configs[i], dir, data, log);
        const auto run = load_run(result.final_checkpoint);
        AblationRow row{variants[i], 0.0, 0.0};
        if (data.dev.size()) row.dev_bleu = score_corpus(run.model, data.dev, data.src_codec, data.tgt_codec, opt).report.score;
        if (data.test.size())
            row.test_bleu = score_corpus(run.model, data.test, data.src_codec, data.tgt_codec, opt).report.score;
        rows.push_back(row);
    }
    return rows;
}

inline std::string ablation_tsv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << "variant\tdev_bleu\ttest_bleu\n";
    for (const auto& r : rows) os << r.variant << '\t' << r.dev_bleu << '\t' << r.test_bleu << '\n';
    return os.str();
}

}  // namespace sbd
