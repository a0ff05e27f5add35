// SPDX-License-Identifier: Apache-2.0
//
// tape: data generation, parameter audits, both training stages, evaluation,
// run comparison and gradient checks behind one binary.
//
// Exit codes: 0 success, 1 usage error, 2 runtime or data error.
// Results go to stdout, progress to stderr.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "tape/mim/mim.hpp"
#include "tape/numeric/errors.hpp"
#include "tape/peft/audit.hpp"
#include "tape/peft/peft.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/pipeline/checkpoint.hpp"
#include "tape/pipeline/compare.hpp"
#include "tape/pipeline/grad_suite.hpp"
#include "tape/pipeline/run_config.hpp"
#include "tape/pipeline/runner.hpp"
#include "tape/seg/stage2.hpp"
#include "tape/synth/dataset.hpp"
#include "tape/vit/config.hpp"

namespace {

using namespace tape;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

/// Test failures that are not exceptions (a failing gradient suite).
struct SuiteFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int default_threads() {
    int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* cap = std::getenv("TAPE_THREADS")) {
        try {
            n = std::min(n, std::max(1, std::stoi(cap)));
        } catch (const std::exception&) {
            std::cerr << "ignoring TAPE_THREADS='" << cap << "'\n";
        }
    }
    return n;
}

int capped_threads(int requested) {
    int n = std::max(1, requested);
    if (const char* cap = std::getenv("TAPE_THREADS")) {
        try {
            n = std::min(n, std::max(1, std::stoi(cap)));
        } catch (const std::exception&) {
        }
    }
    return n;
}

void log_line(std::string_view line) { std::cerr << line << '\n'; }

std::vector<std::string> strategy_names() {
    std::vector<std::string> out;
    for (auto s : peft::kAllStrategies) out.emplace_back(peft::strategy_name(s));
    return out;
}

// ---- gen-data ------------------------------------------------------------------

struct GenArgs {
    std::string out;
    std::int64_t n_per_class = 50;
    std::uint64_t seed = 42;
    std::int64_t size = 64;
    bool force = false;
};

void run_gen(const GenArgs& a) {
    synth::DatasetSpec spec;
    spec.n_per_class = a.n_per_class;
    spec.seed = a.seed;
    spec.height = a.size;
    spec.width = a.size;
    const auto counts = synth::split_counts(a.n_per_class);
    std::cout << "gen-data\n"
              << "  out: " << a.out << "\n"
              << "  n_per_class: " << a.n_per_class << "\n"
              << "  seed: " << a.seed << "\n"
              << "  size: " << a.size << "x" << a.size << "\n"
              << "  split per class (train/val/test): " << counts.train << "/" << counts.val << "/" << counts.test
              << "\n";
    const auto fingerprint = synth::gen_dataset(a.out, spec, a.force);
    std::cout << "samples: " << 4 * a.n_per_class << "\n"
              << "fingerprint: " << fingerprint << "\n";
}

// ---- audit ---------------------------------------------------------------------

struct AuditArgs {
    std::string preset = "vit-large";
    std::string peft = "lora";
    std::int64_t rank = 8;
    std::int64_t bottleneck = 8;
    std::int64_t tokens = 10;
    bool all = false;
    bool csv = false;
    std::uint64_t seed = 42;
};

peft::PEFTConfig peft_from(std::string_view kind, std::int64_t rank, std::int64_t bottleneck, std::int64_t tokens) {
    switch (peft::parse_kind(kind)) {
        case peft::Kind::FFT: return peft::PEFTConfig::fft();
        case peft::Kind::LoRA: return peft::PEFTConfig::lora(rank);
        case peft::Kind::ViTAdapter: return peft::PEFTConfig::adapter(bottleneck);
        case peft::Kind::VPT: return peft::PEFTConfig::vpt(tokens);
    }
    throw ConfigError("unknown adaptation method");
}

void run_audit(const AuditArgs& a) {
    std::cout << "audit preset=" << a.preset << " peft=" << (a.all ? "all" : a.peft) << " rank=" << a.rank
              << " bottleneck=" << a.bottleneck << " tokens=" << a.tokens << " seed=" << a.seed << "\n";
    std::vector<peft::AuditReport> reports;
    if (a.all) {
        for (std::string_view k : {"fft", "lora", "adapter", "vpt"})
            reports.push_back(peft::audit(a.preset, peft_from(k, a.rank, a.bottleneck, a.tokens)));
    } else {
        reports.push_back(peft::audit(a.preset, peft_from(a.peft, a.rank, a.bottleneck, a.tokens)));
    }
    std::cout << (a.csv ? peft::format_audit_rows(reports) : peft::format_audit_table(reports));
}

// ---- pretrain / adapt ------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::string data;
    std::string out;
    std::string preset = "vit-tiny";
    std::string fm = "domain";
    std::string peft = "lora";
    std::string strategy = "tape";
    std::string stage1;
    std::uint64_t seed = 42;
    std::uint64_t fm_seed = 7;
    std::int64_t epochs = 0;
    std::int64_t stage1_epochs = 20;
    std::int64_t batch = 0;
    double lr = 0.0;
    double stage1_lr = 1.5e-4;
    double weight_decay = 0.05;
    double mask_ratio = mim::kDefaultMaskRatio;
    bool no_normalize = false;
    std::int64_t rank = 8;
    std::int64_t bottleneck = 8;
    std::int64_t tokens = 10;
    int threads = 1;
    bool force = false;
};

bool given(const CLI::App* app, const std::string& flag) { return app->count(flag) > 0; }

// A --config file supplies the base; flags given on the command line override it.
pipeline::RunConfig resolve(const CLI::App* app, const TrainArgs& a, bool pretrain) {
    pipeline::RunConfig cfg;
    if (!a.config_path.empty()) cfg = pipeline::load_run_config(a.config_path);
    const bool base = a.config_path.empty();
    auto use = [&](const std::string& flag) { return base || given(app, flag); };

    if (use("--preset")) cfg.preset = a.preset;
    if (use("--fm")) cfg.fm_kind = mim::parse_fm_kind(a.fm);
    if (use("--seed")) cfg.seed = a.seed;
    if (use("--fm-seed")) cfg.fm_seed = a.fm_seed;
    if (use("--data")) cfg.data_dir = a.data;
    if (use("--out")) cfg.out_dir = a.out;
    if (use("--mask-ratio")) cfg.mask_ratio = a.mask_ratio;
    if (use("--no-normalize")) cfg.normalize_targets = !a.no_normalize;
    if (use("--rank")) cfg.rank = a.rank;
    if (use("--bottleneck")) cfg.bottleneck = a.bottleneck;
    if (use("--tokens")) cfg.tokens = a.tokens;
    if (pretrain) {
        if (use("--peft")) cfg.stage1_method = a.peft;
        // The strategy field only has to agree with the Stage-I method; Stage II never runs here.
        if (cfg.stage1_method == "fft") cfg.strategy = peft::StrategyId::FftDa;
        else if (cfg.stage1_method == "lora") cfg.strategy = peft::StrategyId::Tape;
        else if (!cfg.stage1_method.empty()) cfg.strategy = peft::StrategyId::Stl;
        if (use("--epochs")) cfg.stage1_epochs = a.epochs;
        if (use("--batch")) cfg.stage1_batch = a.batch;
        if (use("--lr")) cfg.stage1_optim.lr = a.lr;
        if (use("--weight-decay")) cfg.stage1_optim.weight_decay = a.weight_decay;
    } else {
        if (use("--strategy")) cfg.strategy = peft::parse_strategy(a.strategy);
        if (use("--stage1")) cfg.stage1_checkpoint = a.stage1;
        if (use("--epochs")) cfg.stage2_epochs = a.epochs;
        if (use("--stage1-epochs")) cfg.stage1_epochs = a.stage1_epochs;
        if (use("--batch")) cfg.stage2_batch = a.batch;
        if (use("--lr")) cfg.stage2_optim.lr = a.lr;
        if (use("--stage1-lr")) cfg.stage1_optim.lr = a.stage1_lr;
        if (use("--weight-decay")) cfg.stage2_optim.weight_decay = a.weight_decay;
    }
    if (cfg.data_dir.empty()) throw CLI::RequiredError("--data");
    if (cfg.out_dir.empty()) throw CLI::RequiredError("--out");
    return cfg;
}

void add_common_train_flags(CLI::App* sub, TrainArgs& a) {
    sub->add_option("--config", a.config_path, "Load a RunConfig JSON; flags given here override it");
    sub->add_option("--data", a.data, "Dataset directory (from gen-data)");
    sub->add_option("--out", a.out, "Output run directory");
    sub->add_option("--preset", a.preset, "Model geometry")->check(CLI::IsMember(vit::preset_names()));
    sub->add_option("--fm", a.fm, "Foundation-model kind: generic reconstructs OCT and OCTA, domain only OCTA")
        ->check(CLI::IsMember({"generic", "domain"}));
    sub->add_option("--seed", a.seed, "Training seed");
    sub->add_option("--fm-seed", a.fm_seed, "Seed of the randomly initialized backbone");
    sub->add_option("--mask-ratio", a.mask_ratio, "Stage-I mask ratio");
    sub->add_flag("--no-normalize", a.no_normalize, "Stage-I targets without per-patch normalization");
    sub->add_option("--rank", a.rank, "LoRA rank");
    sub->add_option("--bottleneck", a.bottleneck, "ViT-Adapter bottleneck width");
    sub->add_option("--tokens", a.tokens, "VPT prompt tokens");
    sub->add_option("--weight-decay", a.weight_decay, "AdamW weight decay");
    sub->add_option("--threads", a.threads, "Evaluation threads (capped by TAPE_THREADS)");
    sub->add_flag("--force", a.force, "Overwrite an existing run directory");
}

void run_pretrain_cmd(const CLI::App* app, const TrainArgs& a) {
    auto cfg = resolve(app, a, true);
    std::cout << pipeline::to_json_text(cfg);
    const auto data = synth::load_dataset(cfg.data_dir);
    pipeline::RunOptions opts{a.force, capped_threads(a.threads), log_line};
    const auto result = pipeline::run_pretrain(cfg, data, opts);
    std::cout << "split,initial_loss,final_loss\n"
              << "train," << result.initial_loss("train") << "," << result.final_loss("train") << "\n"
              << "test," << result.initial_loss("test") << "," << result.final_loss("test") << "\n"
              << "checkpoint: " << pipeline::RunFiles{cfg.out_dir}.stage1().string() << "\n";
}

void run_adapt_cmd(const CLI::App* app, const TrainArgs& a) {
    auto cfg = resolve(app, a, false);
    std::cout << pipeline::to_json_text(cfg);
    pipeline::RunOptions opts{a.force, capped_threads(a.threads), log_line};
    const auto out = pipeline::run_strategy(cfg, opts);
    std::cout << pipeline::format_metrics_csv(peft::strategy_name(cfg.strategy), out.stage2.test)
              << "run: " << out.files.dir.string() << "\n";
}

// ---- eval ----------------------------------------------------------------------

struct EvalArgs {
    std::string run;
    std::string data;
    std::string split = "test";
    std::string export_dir;
    std::uint64_t seed = 42;
    int threads = 1;
};

void run_eval(const EvalArgs& a) {
    const pipeline::RunFiles files{a.run};
    const auto cfg = pipeline::load_run_config(files.config());
    const auto data_dir = a.data.empty() ? cfg.data_dir : a.data;
    std::cout << "eval run=" << a.run << " data=" << data_dir << " split=" << a.split << " seed=" << a.seed
              << " strategy=" << peft::strategy_name(cfg.strategy) << "\n";
    const auto data = synth::load_dataset(data_dir);
    if (!cfg.dataset_fingerprint.empty() && cfg.dataset_fingerprint != data.fingerprint)
        std::cerr << "note: dataset fingerprint differs from the one the run was trained on\n";
    const auto vit_cfg = vit::preset(cfg.preset);
    pipeline::check_dataset(data, vit_cfg);
    const auto model = pipeline::stage2_from_checkpoint(pipeline::load_checkpoint(files.stage2()), vit_cfg, cfg.strategy);
    const auto split = synth::parse_split(a.split);
    std::cout << pipeline::format_metrics_csv(peft::strategy_name(cfg.strategy),
                                              seg::evaluate(model, data, split, capped_threads(a.threads)));
    if (!a.export_dir.empty()) {
        const auto n = pipeline::export_predictions(model, data, split, a.export_dir);
        std::cout << "exported " << n << " prediction/ground-truth pairs to " << a.export_dir << "\n";
    }
}

// ---- compare -------------------------------------------------------------------

struct CompareArgs {
    std::vector<std::string> runs;
    bool csv = false;
    std::uint64_t seed = 42;
};

void run_compare(const CompareArgs& a) {
    std::cerr << "compare " << a.runs.size() << " runs, seed=" << a.seed << "\n";
    std::vector<fs::path> dirs(a.runs.begin(), a.runs.end());
    const auto table = pipeline::compare_runs(dirs);
    std::cout << (a.csv ? pipeline::render_csv(table) : pipeline::render_table(table));
}

// ---- gradcheck -----------------------------------------------------------------

struct GradArgs {
    std::string suite = "all";
    std::uint64_t seed = 42;
    double tolerance = pipeline::kGradTolerance;
};

void run_gradcheck(const GradArgs& a) {
    std::cout << "gradcheck suite=" << a.suite << " seed=" << a.seed << " tolerance=" << a.tolerance << "\n";
    std::vector<pipeline::GradSuite> suites;
    if (a.suite == "all") suites.assign(std::begin(pipeline::kAllGradSuites), std::end(pipeline::kAllGradSuites));
    else suites.push_back(pipeline::parse_grad_suite(a.suite));
    int failed = 0;
    double worst = 0.0;
    for (auto s : suites) {
        for (const auto& c : pipeline::run_grad_suite(s, a.seed)) {
            const bool ok = c.passed(a.tolerance);
            failed += ok ? 0 : 1;
            worst = std::max(worst, c.result.max_rel_error);
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.3e", c.result.max_rel_error);
            std::cout << (ok ? "PASS " : "FAIL ") << c.suite << "/" << c.name << " max_rel_error=" << buf
                      << " coords=" << c.result.coords_checked;
            if (!ok) std::cout << " worst=" << c.result.worst_param << "[" << c.result.worst_index << "]";
            std::cout << "\n";
        }
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", worst);
    std::cout << "worst max_rel_error=" << buf << "\n";
    if (failed > 0) throw SuiteFailure(std::to_string(failed) + " gradient check(s) above tolerance");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage adaptation of vision transformers for retinal layer segmentation"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a stratified phantom dataset");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--n-per-class", gen.n_per_class, "Samples per pathology class (>= 5)");
    gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
    gen_cmd->add_option("--size", gen.size, "Image height and width");
    gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

    AuditArgs aud;
    auto* audit_cmd = app.add_subcommand("audit", "Count total and trainable parameters of an adaptation method");
    audit_cmd->add_option("--preset", aud.preset, "Model geometry")->check(CLI::IsMember(vit::preset_names()));
    audit_cmd->add_option("--peft", aud.peft, "Adaptation method")
        ->check(CLI::IsMember({"fft", "lora", "adapter", "vpt"}));
    audit_cmd->add_option("--rank", aud.rank, "LoRA rank");
    audit_cmd->add_option("--bottleneck", aud.bottleneck, "ViT-Adapter bottleneck width");
    audit_cmd->add_option("--tokens", aud.tokens, "VPT prompt tokens");
    audit_cmd->add_flag("--all", aud.all, "Report all four methods");
    audit_cmd->add_flag("--csv", aud.csv, "CSV instead of a table");
    audit_cmd->add_option("--seed", aud.seed, "Echoed only; audits are closed-form");

    TrainArgs pre;
    pre.epochs = 20;
    pre.batch = 16;
    pre.lr = 1.5e-4;
    pre.threads = default_threads();
    auto* pre_cmd = app.add_subcommand("pretrain", "Stage I: masked-image-modeling adaptation");
    add_common_train_flags(pre_cmd, pre);
    pre_cmd->add_option("--peft", pre.peft, "Stage-I adaptation method")
        ->check(CLI::IsMember({"fft", "lora", "adapter", "vpt"}));
    pre_cmd->add_option("--epochs", pre.epochs, "Stage-I epochs");
    pre_cmd->add_option("--batch", pre.batch, "Stage-I batch size");
    pre_cmd->add_option("--lr", pre.lr, "Stage-I learning rate");

    TrainArgs ad;
    ad.epochs = 30;
    ad.batch = 8;
    ad.lr = 1e-3;
    ad.threads = default_threads();
    auto* adapt_cmd = app.add_subcommand("adapt", "Run one strategy end to end (Stage I if needed, then Stage II)");
    add_common_train_flags(adapt_cmd, ad);
    adapt_cmd->add_option("--strategy", ad.strategy, "Adaptation strategy")->check(CLI::IsMember(strategy_names()));
    adapt_cmd->add_option("--stage1", ad.stage1, "Reuse this Stage-I checkpoint instead of training one");
    adapt_cmd->add_option("--epochs", ad.epochs, "Stage-II epochs");
    adapt_cmd->add_option("--stage1-epochs", ad.stage1_epochs, "Stage-I epochs");
    adapt_cmd->add_option("--batch", ad.batch, "Stage-II batch size");
    adapt_cmd->add_option("--lr", ad.lr, "Stage-II learning rate");
    adapt_cmd->add_option("--stage1-lr", ad.stage1_lr, "Stage-I learning rate");

    EvalArgs ev;
    ev.threads = default_threads();
    auto* eval_cmd = app.add_subcommand("eval", "Metrics of a finished run's Stage-II checkpoint");
    eval_cmd->add_option("--run", ev.run, "Run directory (from adapt)")->required();
    eval_cmd->add_option("--data", ev.data, "Dataset directory; defaults to the one in the run config");
    eval_cmd->add_option("--split", ev.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--export", ev.export_dir, "Write predicted and true label maps as PGM images here");
    eval_cmd->add_option("--threads", ev.threads, "Evaluation threads (capped by TAPE_THREADS)");
    eval_cmd->add_option("--seed", ev.seed, "Echoed only; evaluation is deterministic");

    CompareArgs cmp;
    auto* compare_cmd = app.add_subcommand("compare", "Rank finished runs by overall mDice");
    compare_cmd->add_option("runs", cmp.runs, "Run directories")->required();
    compare_cmd->add_flag("--csv", cmp.csv, "CSV instead of a table");
    compare_cmd->add_option("--seed", cmp.seed, "Echoed only");

    GradArgs gc;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
    grad_cmd->add_option("--suite", gc.suite, "Suite to run")->check(CLI::IsMember({"all", "numeric", "mim", "seg"}));
    grad_cmd->add_option("--seed", gc.seed, "Seed of inputs and probed coordinates");
    grad_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen_cmd) run_gen(gen);
        else if (*audit_cmd) run_audit(aud);
        else if (*pre_cmd) run_pretrain_cmd(pre_cmd, pre);
        else if (*adapt_cmd) run_adapt_cmd(adapt_cmd, ad);
        else if (*eval_cmd) run_eval(ev);
        else if (*compare_cmd) run_compare(cmp);
        else if (*grad_cmd) run_gradcheck(gc);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
