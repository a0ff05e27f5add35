// SPDX-License-Identifier: Apache-2.0

#include "tape/pipeline/run_config.hpp"

#include <fstream>
#include <iterator>

#include <json.hpp>

#include "tape/numeric/errors.hpp"
#include "tape/vit/config.hpp"

namespace tape::pipeline {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json optim_json(const AdamWConfig& o) {
    return ordered_json{{"lr", o.lr},
                        {"beta1", o.beta1},
                        {"beta2", o.beta2},
                        {"eps", o.eps},
                        {"weight_decay", o.weight_decay}};
}

template <typename V>
V take(const json& j, std::string_view key, const std::string& where) {
    try {
        return j.get<V>();
    } catch (const json::exception&) {
        throw ConfigError(where + ": field '" + std::string(key) + "' has the wrong type");
    }
}

AdamWConfig optim_from(const json& j, AdamWConfig base, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "lr") base.lr = take<double>(value, key, where);
        else if (key == "beta1") base.beta1 = take<double>(value, key, where);
        else if (key == "beta2") base.beta2 = take<double>(value, key, where);
        else if (key == "eps") base.eps = take<double>(value, key, where);
        else if (key == "weight_decay") base.weight_decay = take<double>(value, key, where);
        else throw ConfigError(where + ": unknown field '" + key + "'");
    }
    return base;
}

void check_optim(const AdamWConfig& o, const std::string& stage) {
    if (!(o.lr > 0.0)) throw ConfigError(stage + " lr must be > 0");
    if (!(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0))
        throw ConfigError(stage + " betas must lie in [0, 1)");
    if (!(o.eps > 0.0)) throw ConfigError(stage + " eps must be > 0");
    if (!(o.weight_decay >= 0.0)) throw ConfigError(stage + " weight decay must be >= 0");
}

}  // namespace

void RunConfig::validate() const {
    (void)vit::preset(preset);
    if (stage1_epochs < 0 || stage2_epochs < 0) throw ConfigError("epochs must be >= 0");
    if (stage1_batch < 1 || stage2_batch < 1) throw ConfigError("batch sizes must be >= 1");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
    if (rank < 1 || bottleneck < 1 || tokens < 1) throw ConfigError("rank, bottleneck and tokens must be >= 1");
    check_optim(stage1_optim, "stage I");
    check_optim(stage2_optim, "stage II");
    const bool two_stage = peft::is_two_stage(strategy);
    const auto name = std::string(peft::strategy_name(strategy));
    if (!stage1_checkpoint.empty() && !two_stage)
        throw ConfigError("strategy " + name + " is single-stage and takes no stage-I checkpoint");
    if (!stage1_method.empty()) {
        const auto kind = peft::parse_kind(stage1_method);
        if (two_stage && kind != peft::stage1_peft(strategy, rank)->kind)
            throw ConfigError("strategy " + name + " cannot use a stage-I " + stage1_method + " adapter");
    }
}

peft::PEFTConfig stage1_peft(const RunConfig& cfg) {
    if (cfg.stage1_method.empty()) {
        auto implied = peft::stage1_peft(cfg.strategy, cfg.rank);
        if (!implied)
            throw ConfigError("strategy " + std::string(peft::strategy_name(cfg.strategy)) + " has no stage I");
        return *implied;
    }
    switch (peft::parse_kind(cfg.stage1_method)) {
        case peft::Kind::FFT: return peft::PEFTConfig::fft();
        case peft::Kind::LoRA: return peft::PEFTConfig::lora(cfg.rank);
        case peft::Kind::ViTAdapter: return peft::PEFTConfig::adapter(cfg.bottleneck);
        case peft::Kind::VPT: return peft::PEFTConfig::vpt(cfg.tokens);
    }
    throw ConfigError("unknown stage-I method '" + cfg.stage1_method + "'");
}

mim::Stage1Config stage1_config(const RunConfig& cfg) {
    mim::Stage1Config s;
    s.fm_kind = cfg.fm_kind;
    s.epochs = cfg.stage1_epochs;
    s.batch_size = cfg.stage1_batch;
    s.mask_ratio = cfg.mask_ratio;
    s.normalize_targets = cfg.normalize_targets;
    s.optim = cfg.stage1_optim;
    s.seed = cfg.seed;
    s.eval_seed = cfg.eval_seed;
    return s;
}

seg::Stage2Config stage2_config(const RunConfig& cfg, int threads) {
    seg::Stage2Config s;
    s.epochs = cfg.stage2_epochs;
    s.batch_size = cfg.stage2_batch;
    s.optim = cfg.stage2_optim;
    s.seed = cfg.seed;
    s.threads = threads;
    return s;
}

std::string to_json_text(const RunConfig& cfg) {
    ordered_json j;
    j["preset"] = cfg.preset;
    j["fm_kind"] = std::string(mim::fm_kind_name(cfg.fm_kind));
    j["strategy"] = std::string(peft::strategy_name(cfg.strategy));
    j["seed"] = cfg.seed;
    j["fm_seed"] = cfg.fm_seed;
    j["eval_seed"] = cfg.eval_seed;
    j["stage1_epochs"] = cfg.stage1_epochs;
    j["stage2_epochs"] = cfg.stage2_epochs;
    j["stage1_batch"] = cfg.stage1_batch;
    j["stage2_batch"] = cfg.stage2_batch;
    j["mask_ratio"] = cfg.mask_ratio;
    j["normalize_targets"] = cfg.normalize_targets;
    j["stage1_optim"] = optim_json(cfg.stage1_optim);
    j["stage2_optim"] = optim_json(cfg.stage2_optim);
    j["stage1_method"] = cfg.stage1_method;
    j["rank"] = cfg.rank;
    j["bottleneck"] = cfg.bottleneck;
    j["tokens"] = cfg.tokens;
    j["data_dir"] = cfg.data_dir;
    j["out_dir"] = cfg.out_dir;
    j["stage1_checkpoint"] = cfg.stage1_checkpoint;
    j["dataset_fingerprint"] = cfg.dataset_fingerprint;
    return j.dump(2) + "\n";
}

RunConfig from_json_text(std::string_view text, RunConfig cfg) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    const std::string where = "run config";
    for (const auto& [key, v] : j.items()) {
        if (key == "preset") cfg.preset = take<std::string>(v, key, where);
        else if (key == "fm_kind") cfg.fm_kind = mim::parse_fm_kind(take<std::string>(v, key, where));
        else if (key == "strategy") cfg.strategy = peft::parse_strategy(take<std::string>(v, key, where));
        else if (key == "seed") cfg.seed = take<std::uint64_t>(v, key, where);
        else if (key == "fm_seed") cfg.fm_seed = take<std::uint64_t>(v, key, where);
        else if (key == "eval_seed") cfg.eval_seed = take<std::uint64_t>(v, key, where);
        else if (key == "stage1_epochs") cfg.stage1_epochs = take<std::int64_t>(v, key, where);
        else if (key == "stage2_epochs") cfg.stage2_epochs = take<std::int64_t>(v, key, where);
        else if (key == "stage1_batch") cfg.stage1_batch = take<std::int64_t>(v, key, where);
        else if (key == "stage2_batch") cfg.stage2_batch = take<std::int64_t>(v, key, where);
        else if (key == "mask_ratio") cfg.mask_ratio = take<double>(v, key, where);
        else if (key == "normalize_targets") cfg.normalize_targets = take<bool>(v, key, where);
        else if (key == "stage1_optim") cfg.stage1_optim = optim_from(v, cfg.stage1_optim, "stage1_optim");
        else if (key == "stage2_optim") cfg.stage2_optim = optim_from(v, cfg.stage2_optim, "stage2_optim");
        else if (key == "stage1_method") cfg.stage1_method = take<std::string>(v, key, where);
        else if (key == "rank") cfg.rank = take<std::int64_t>(v, key, where);
        else if (key == "bottleneck") cfg.bottleneck = take<std::int64_t>(v, key, where);
        else if (key == "tokens") cfg.tokens = take<std::int64_t>(v, key, where);
        else if (key == "data_dir") cfg.data_dir = take<std::string>(v, key, where);
        else if (key == "out_dir") cfg.out_dir = take<std::string>(v, key, where);
        else if (key == "stage1_checkpoint") cfg.stage1_checkpoint = take<std::string>(v, key, where);
        else if (key == "dataset_fingerprint") cfg.dataset_fingerprint = take<std::string>(v, key, where);
        else throw ConfigError("run config: unknown field '" + key + "'");
    }
    return cfg;
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << to_json_text(cfg);
    if (!f) throw IoError("write failed: " + path.string());
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("run config not found: " + path.string());
    const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return from_json_text(text);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace tape::pipeline
