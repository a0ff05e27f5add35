// SPDX-License-Identifier: Apache-2.0

#include "tape/pipeline/runner.hpp"

#include <cstdio>
#include <fstream>
#include <map>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/pipeline/checkpoint.hpp"
#include "tape/seg/head.hpp"

namespace tape::pipeline {

namespace {

std::string fixed(double v, int decimals = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

void say(const RunOptions& opts, std::string_view line) {
    if (opts.log) opts.log(line);
}

std::string row_line(const mim::LossRow& r) {
    return r.stage + " epoch " + std::to_string(r.epoch) + " " + r.split + " " + r.modality + " " + fixed(r.loss);
}

using Layout = std::map<std::string, Shape>;

Layout role_layout(const ParamStore& params, Role role) {
    Layout out;
    for (const auto& e : params.entries())
        if (e.role == role) out.emplace(e.name, e.tensor.shape());
    return out;
}

bool layout_matches(const Layout& have, const std::vector<vit::ParamSpec>& want) {
    if (have.size() != want.size()) return false;
    for (const auto& spec : want) {
        auto it = have.find(spec.name);
        if (it == have.end() || it->second != spec.shape) return false;
    }
    return true;
}

void require_layout(const ParamStore& params, const std::vector<vit::ParamSpec>& want, const std::string& what) {
    for (const auto& spec : want) {
        if (!params.contains(spec.name))
            throw FormatError("checkpoint lacks " + what + " tensor '" + spec.name + "'");
        const auto& e = params.entry(spec.name);
        if (e.tensor.shape() != spec.shape || e.role != spec.role)
            throw FormatError("checkpoint tensor '" + spec.name + "' does not match the " + what + " layout");
    }
}

peft::Kind kind_or_fft(const std::optional<peft::PEFTConfig>& c) { return c ? c->kind : peft::Kind::FFT; }

void freeze_all(ParamStore& params) {
    for (auto& e : params.entries()) {
        e.tensor.clear_grad();
        e.tensor.set_requires_grad(false);
    }
}

std::string metrics_table(const std::vector<seg::MetricRow>& rows) {
    std::string out = "  pathology  images  mDice     mIoU\n";
    for (const auto& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "  %-9s  %6lld  %.6f  %.6f\n", r.pathology.c_str(),
                      static_cast<long long>(r.images), r.metrics.mdice, r.metrics.miou);
        out += buf;
    }
    return out;
}

}  // namespace

ParamStore foundation_backbone(const vit::ViTConfig& cfg, std::uint64_t fm_seed) {
    ParamStore params;
    Rng rng(fm_seed);
    vit::init_encoder(params, cfg, rng);
    return params;
}

std::optional<peft::PEFTConfig> infer_adapter(const ParamStore& params, const vit::ViTConfig& cfg, Role role) {
    const auto have = role_layout(params, role);
    if (have.empty()) return std::nullopt;
    // Every adapter layout is fixed by one size parameter that appears as a
    // dimension of each of its tensors; try them all.
    std::vector<std::int64_t> sizes;
    for (const auto& [name, shape] : have)
        for (auto d : shape) sizes.push_back(d);
    for (auto size : sizes) {
        for (auto make : {+[](std::int64_t s, Role r) { return peft::PEFTConfig::lora(s, r); },
                          +[](std::int64_t s, Role r) { return peft::PEFTConfig::adapter(s, r); },
                          +[](std::int64_t s, Role r) { return peft::PEFTConfig::vpt(s, r); }}) {
            const auto candidate = make(size, role);
            if (layout_matches(have, peft::adapter_layout(cfg, candidate))) return candidate;
        }
    }
    throw FormatError("checkpoint holds " + std::string(role_name(role)) +
                      " tensors that match no known adapter layout");
}

mim::Stage1Model stage1_from_checkpoint(ParamStore params, const vit::ViTConfig& cfg) {
    require_layout(params, vit::encoder_layout(cfg), "encoder");
    require_layout(params, vit::decoder_layout(cfg), "decoder");
    if (!role_layout(params, Role::TaskAdapter).empty() || !role_layout(params, Role::Head).empty())
        throw FormatError("not a stage-I checkpoint: it holds task-adapter or head tensors");
    const auto domain = infer_adapter(params, cfg, Role::DomainAdapter);
    mim::Stage1Model m;
    m.vit = cfg;
    m.peft = domain.value_or(peft::PEFTConfig::fft());
    m.adapters = peft::adapter_set(cfg, m.peft);
    m.params = std::move(params);
    freeze_all(m.params);
    return m;
}

seg::Stage2Model stage2_from_checkpoint(ParamStore params, const vit::ViTConfig& cfg, peft::StrategyId strategy) {
    seg::Stage2Model m;
    m.vit = cfg;
    m.strategy = strategy;
    m.head = seg::SegHeadConfig::for_vit(cfg, synth::kNumClasses);
    require_layout(params, vit::encoder_layout(cfg), "encoder");
    require_layout(params, seg::head_layout(m.head), "head");
    const auto domain = infer_adapter(params, cfg, Role::DomainAdapter);
    const auto task = infer_adapter(params, cfg, Role::TaskAdapter);

    const auto name = std::string(peft::strategy_name(strategy));
    const auto want_domain = kind_or_fft(peft::stage1_peft(strategy));
    if (kind_or_fft(domain) != want_domain)
        throw ConfigError("stage-II checkpoint has a " + std::string(peft::kind_name(kind_or_fft(domain))) +
                          " domain adapter, strategy " + name + " expects " +
                          std::string(peft::kind_name(want_domain)));
    if (task.has_value() != peft::task_peft(strategy).has_value())
        throw ConfigError("stage-II checkpoint task adapter does not match strategy " + name);

    if (domain) m.adapters = peft::adapter_set(cfg, *domain);
    if (task) m.adapters = m.adapters.merged(peft::adapter_set(cfg, *task));
    m.params = std::move(params);
    freeze_all(m.params);
    return m;
}

void check_dataset(const synth::Dataset& data, const vit::ViTConfig& cfg) {
    if (cfg.in_chans != 1)
        throw ConfigError("preset '" + cfg.name + "' expects " + std::to_string(cfg.in_chans) +
                          " input channels; phantoms have 1");
    for (const auto& s : data.samples)
        if (s.height != cfg.image_size || s.width != cfg.image_size)
            throw ConfigError("dataset images are " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                              ", preset '" + cfg.name + "' needs " + std::to_string(cfg.image_size) + "x" +
                              std::to_string(cfg.image_size));
}

void prepare_output_dir(const std::filesystem::path& dir, bool overwrite) {
    namespace fs = std::filesystem;
    if (dir.empty()) throw ConfigError("no output directory given");
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir)) {
            if (!overwrite) throw IoError(dir.string() + " is not empty (pass --force to overwrite)");
            // Only the files a run writes are removed; anything else is left alone.
            const RunFiles files{dir};
            for (const auto& f : {files.config(), files.stage1(), files.stage2(), files.losses(), files.metrics(),
                                  files.summary()})
                fs::remove(f);
        }
    }
    fs::create_directories(dir);
}

std::string format_losses_csv(const std::vector<mim::LossRow>& rows) {
    std::string out = "stage,epoch,split,modality,loss\n";
    for (const auto& r : rows)
        out += r.stage + "," + std::to_string(r.epoch) + "," + r.split + "," + r.modality + "," + fixed(r.loss) + "\n";
    return out;
}

std::string format_metrics_csv(std::string_view variant, const std::vector<seg::MetricRow>& rows) {
    std::string out = "variant,pathology,mDice,mIoU\n";
    for (const auto& r : rows)
        out += std::string(variant) + "," + r.pathology + "," + fixed(r.metrics.mdice) + "," +
               fixed(r.metrics.miou) + "\n";
    return out;
}

mim::Stage1Result run_pretrain(const RunConfig& cfg, const synth::Dataset& data, const RunOptions& opts) {
    auto check = cfg;
    check.stage1_method.clear();
    check.stage1_checkpoint.clear();
    check.validate();
    const auto peft_cfg = stage1_peft(cfg);
    const auto vit_cfg = vit::preset(cfg.preset);
    check_dataset(data, vit_cfg);

    RunFiles files{cfg.out_dir};
    prepare_output_dir(files.dir, opts.overwrite);
    auto written = cfg;
    written.dataset_fingerprint = data.fingerprint;
    save_run_config(written, files.config());

    auto model = mim::make_stage1_model(foundation_backbone(vit_cfg, cfg.fm_seed), vit_cfg, peft_cfg, cfg.seed);
    say(opts, "stage1 " + std::string(peft::kind_name(peft_cfg.kind)) + " on " +
                  std::string(mim::fm_kind_name(cfg.fm_kind)) + " targets, " + std::to_string(cfg.stage1_epochs) +
                  " epochs");
    auto result = mim::run_stage1(model, data, stage1_config(cfg), [&](const mim::LossRow& r) { say(opts, row_line(r)); });
    save_checkpoint(model.params, files.stage1());
    write_text(files.losses(), format_losses_csv(result.curve));

    std::string summary;
    summary += "stage: pretrain\n";
    summary += "preset: " + cfg.preset + "\n";
    summary += "fm_kind: " + std::string(mim::fm_kind_name(cfg.fm_kind)) + "\n";
    summary += "method: " + std::string(peft::kind_name(peft_cfg.kind)) + "\n";
    summary += "seed: " + std::to_string(cfg.seed) + "\n";
    summary += "fm_seed: " + std::to_string(cfg.fm_seed) + "\n";
    summary += "fingerprint: " + data.fingerprint + "\n";
    summary += "epochs: " + std::to_string(cfg.stage1_epochs) + ", steps: " + std::to_string(result.steps) + "\n";
    summary += "train loss: " + fixed(result.initial_loss("train")) + " -> " + fixed(result.final_loss("train")) + "\n";
    summary += "test loss: " + fixed(result.initial_loss("test")) + " -> " + fixed(result.final_loss("test")) + "\n";
    write_text(files.summary(), summary);
    return result;
}

RunOutcome run_strategy(const RunConfig& cfg, const synth::Dataset& data, const RunOptions& opts) {
    cfg.validate();
    const auto vit_cfg = vit::preset(cfg.preset);
    check_dataset(data, vit_cfg);
    if (!cfg.dataset_fingerprint.empty() && cfg.dataset_fingerprint != data.fingerprint)
        throw ConfigError("dataset fingerprint mismatch: config pins " + cfg.dataset_fingerprint + ", " +
                          data.dir.string() + " has " + data.fingerprint);

    // Read a reused Stage-I checkpoint before the output directory is cleared.
    std::optional<ParamStore> reused;
    if (!cfg.stage1_checkpoint.empty()) reused = load_checkpoint(cfg.stage1_checkpoint);

    RunOutcome out;
    out.files = RunFiles{cfg.out_dir};
    out.config = cfg;
    out.config.dataset_fingerprint = data.fingerprint;
    prepare_output_dir(out.files.dir, opts.overwrite);
    save_run_config(out.config, out.files.config());

    const auto strategy = std::string(peft::strategy_name(cfg.strategy));
    const auto log_row = [&](const mim::LossRow& r) { say(opts, row_line(r)); };
    std::vector<mim::LossRow> curve;
    std::string stage1_note = "none";

    ParamStore encoder;
    vit::AdapterSet stage1_adapters;
    if (peft::is_two_stage(cfg.strategy)) {
        const auto peft_cfg = stage1_peft(cfg);
        mim::Stage1Model s1;
        if (reused) {
            say(opts, "stage1 reused from " + cfg.stage1_checkpoint);
            s1 = stage1_from_checkpoint(std::move(*reused), vit_cfg);
            if (s1.peft.kind != peft_cfg.kind)
                throw ConfigError("stage-I checkpoint " + cfg.stage1_checkpoint + " holds a " +
                                  std::string(peft::kind_name(s1.peft.kind)) + " adapter, strategy " + strategy +
                                  " needs " + std::string(peft::kind_name(peft_cfg.kind)));
            stage1_note = "reused " + cfg.stage1_checkpoint;
        } else {
            say(opts, "stage1 " + std::string(peft::kind_name(peft_cfg.kind)) + ", " +
                          std::to_string(cfg.stage1_epochs) + " epochs");
            s1 = mim::make_stage1_model(foundation_backbone(vit_cfg, cfg.fm_seed), vit_cfg, peft_cfg, cfg.seed);
            out.stage1 = mim::run_stage1(s1, data, stage1_config(cfg), log_row);
            curve = out.stage1->curve;
            stage1_note = std::string(peft::kind_name(peft_cfg.kind)) + ", train loss " +
                          fixed(out.stage1->initial_loss("train")) + " -> " + fixed(out.stage1->final_loss("train")) +
                          ", test loss " + fixed(out.stage1->initial_loss("test")) + " -> " +
                          fixed(out.stage1->final_loss("test"));
        }
        save_checkpoint(s1.params, out.files.stage1());
        encoder = std::move(s1.params);
        stage1_adapters = s1.adapters;
    } else {
        encoder = foundation_backbone(vit_cfg, cfg.fm_seed);
    }

    auto model = seg::make_stage2_model(std::move(encoder), stage1_adapters, vit_cfg, cfg.strategy, cfg.seed, cfg.rank);
    out.trainable_stage2 = model.params.count_trainable();
    say(opts, "stage2 " + strategy + ", trains " + peft::freeze_plan(cfg.strategy).describe() + " (" +
                  std::to_string(out.trainable_stage2) + " parameters), " + std::to_string(cfg.stage2_epochs) +
                  " epochs");
    out.stage2 = seg::run_stage2(model, data, stage2_config(cfg, opts.threads), log_row);
    save_checkpoint(model.params, out.files.stage2());

    curve.insert(curve.end(), out.stage2.curve.begin(), out.stage2.curve.end());
    write_text(out.files.losses(), format_losses_csv(curve));
    write_text(out.files.metrics(), format_metrics_csv(strategy, out.stage2.test));

    std::string summary;
    summary += "strategy: " + strategy + "\n";
    summary += "preset: " + cfg.preset + "\n";
    summary += "fm_kind: " + std::string(mim::fm_kind_name(cfg.fm_kind)) + "\n";
    summary += "seed: " + std::to_string(cfg.seed) + "\n";
    summary += "fm_seed: " + std::to_string(cfg.fm_seed) + "\n";
    summary += "fingerprint: " + data.fingerprint + "\n";
    summary += "stage1: " + stage1_note + "\n";
    summary += "stage2: " + std::to_string(cfg.stage2_epochs) + " epochs, trains " +
               peft::freeze_plan(cfg.strategy).describe() + " (" + std::to_string(out.trainable_stage2) +
               " parameters)\n";
    summary += "selected epoch: " + std::to_string(out.stage2.best_epoch) + " (val mDice " +
               fixed(out.stage2.best_val_mdice) + ")\n";
    summary += "test split:\n" + metrics_table(out.stage2.test);
    write_text(out.files.summary(), summary);
    return out;
}

RunOutcome run_strategy(const RunConfig& cfg, const RunOptions& opts) {
    if (cfg.data_dir.empty()) throw ConfigError("no dataset directory given");
    return run_strategy(cfg, synth::load_dataset(cfg.data_dir), opts);
}

EvalOutcome evaluate_run(const std::filesystem::path& run_dir, const synth::Dataset& data, synth::Split split,
                         int threads) {
    const RunFiles files{run_dir};
    EvalOutcome out;
    out.config = load_run_config(files.config());
    const auto vit_cfg = vit::preset(out.config.preset);
    check_dataset(data, vit_cfg);
    const auto model = stage2_from_checkpoint(load_checkpoint(files.stage2()), vit_cfg, out.config.strategy);
    out.rows = seg::evaluate(model, data, split, threads);
    return out;
}

std::int64_t export_predictions(const seg::Stage2Model& model, const synth::Dataset& data, synth::Split split,
                                const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::int64_t written = 0;
    for (auto i : data.indices(split)) {
        const auto& s = data.samples[i];
        const auto stem = std::filesystem::path(data.index[i].filename).stem().string();
        synth::write_label_pgm(dir / (stem + "_pred.pgm"), seg::predict(model, s), s.height, s.width);
        synth::write_label_pgm(dir / (stem + "_gt.pgm"), s.labels, s.height, s.width);
        ++written;
    }
    return written;
}

}  // namespace tape::pipeline
