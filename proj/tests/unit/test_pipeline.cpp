// Checkpoints, run configs, the runner and run comparison.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/losses.hpp"
#include "tape/numeric/optim.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/pipeline/checkpoint.hpp"
#include "tape/pipeline/compare.hpp"
#include "tape/pipeline/grad_suite.hpp"
#include "tape/pipeline/run_config.hpp"
#include "tape/pipeline/runner.hpp"

using namespace tape;
using namespace tape::pipeline;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("tape_test_pl_" + tag)) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

const synth::Dataset& small_dataset() {
    static const synth::Dataset ds = [] {
        const auto dir = fs::temp_directory_path() / "tape_test_pl_ds";
        synth::DatasetSpec spec;
        spec.n_per_class = 5;
        synth::gen_dataset(dir, spec, true);
        return synth::load_dataset(dir);
    }();
    return ds;
}

ParamStore sample_store() {
    Rng rng(1);
    ParamStore ps;
    for (auto [name, role, shape] : {std::tuple<const char*, Role, Shape>{"a", Role::Backbone, {3, 4}},
                                     {"b.lora_a", Role::DomainAdapter, {2, 4}},
                                     {"c", Role::Head, {5}},
                                     {"d", Role::Decoder, {2, 1, 3, 2}}}) {
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<float>(rng.normal());
        ps.add(name, role, Tensor(shape, v));
    }
    ps.get("c").data()[0] = std::numeric_limits<float>::denorm_min();
    ps.get("c").data()[1] = -0.0f;
    return ps;
}

RunConfig quick_config(peft::StrategyId s, const fs::path& out) {
    RunConfig c;
    c.strategy = s;
    c.stage1_epochs = 1;
    c.stage2_epochs = 1;
    c.data_dir = small_dataset().dir.string();
    c.out_dir = out.string();
    return c;
}

RunScores scores(std::string label, double all, std::uint64_t seed = 42, std::string fp = "x") {
    RunScores s;
    s.label = label;
    s.strategy = label;
    s.seed = seed;
    s.fingerprint = fp;
    s.mdice.fill(all);
    s.miou.fill(all / 2);
    return s;
}

}  // namespace

TEST_SUITE("checkpoint") {
    TEST_CASE("roundtrip is a bitwise identity") {
        const auto ps = sample_store();
        const auto bytes = encode_checkpoint(ps);
        const auto back = decode_checkpoint(bytes);
        CHECK(encode_checkpoint(back) == bytes);
        CHECK(changed_tensors(ps, back).empty());
        for (std::size_t i = 0; i < ps.size(); ++i) {
            CHECK(back.entries()[i].name == ps.entries()[i].name);
            CHECK(back.entries()[i].role == ps.entries()[i].role);
            CHECK(back.entries()[i].tensor.shape() == ps.entries()[i].tensor.shape());
        }
    }

    TEST_CASE("header layout") {
        const auto bytes = encode_checkpoint(sample_store());
        CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "TAPECKPT");
        CHECK(bytes[8] == kCheckpointVersion);
        CHECK(bytes[12] == 4);
    }

    TEST_CASE("damage is a FormatError") {
        const auto good = encode_checkpoint(sample_store());
        auto magic = good;
        magic[0] = 'X';
        CHECK_THROWS_AS(decode_checkpoint(magic), FormatError);
        auto version = good;
        version[8] = 9;
        CHECK_THROWS_AS(decode_checkpoint(version), FormatError);
        for (std::size_t cut : {std::size_t(0), std::size_t(7), std::size_t(15), good.size() / 2, good.size() - 1})
            CHECK_THROWS_AS(decode_checkpoint(std::span(good).first(cut)), FormatError);
        auto trailing = good;
        trailing.push_back(0);
        CHECK_THROWS_AS(decode_checkpoint(trailing), FormatError);
    }

    TEST_CASE("files: roundtrip, missing file, error names the path") {
        TempDir tmp("ckpt");
        fs::create_directories(tmp.path);
        const auto ps = sample_store();
        save_checkpoint(ps, tmp.path / "x.ckpt");
        CHECK(changed_tensors(ps, load_checkpoint(tmp.path / "x.ckpt")).empty());
        CHECK_THROWS_AS(load_checkpoint(tmp.path / "none.ckpt"), IoError);
        std::ofstream(tmp.path / "bad.ckpt") << "not a checkpoint";
        try {
            load_checkpoint(tmp.path / "bad.ckpt");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("bad.ckpt") != std::string::npos);
        }
    }

    TEST_CASE("changed_tensors") {
        auto a = sample_store();
        auto b = a.clone();
        b.get("c").data()[3] += 1.0f;
        b.add("extra", Role::Head, Tensor::zeros({1}));
        CHECK(changed_tensors(a, b) == std::vector<std::string>{"c", "extra"});
    }
}

TEST_SUITE("run_config") {
    TEST_CASE("json roundtrip") {
        RunConfig c;
        c.strategy = peft::StrategyId::FftTa;
        c.fm_kind = mim::FmKind::Generic;
        c.seed = 3;
        c.stage1_optim.lr = 2.5e-4;
        c.data_dir = "/d";
        c.dataset_fingerprint = "abc";
        CHECK(from_json_text(to_json_text(c)) == c);
        CHECK(to_json_text(from_json_text(to_json_text(c))) == to_json_text(c));
    }

    TEST_CASE("partial json keeps defaults; bad keys and types are rejected") {
        const auto c = from_json_text(R"({"seed": 5, "strategy": "stl"})");
        CHECK(c.seed == 5);
        CHECK(c.strategy == peft::StrategyId::Stl);
        CHECK(c.stage2_epochs == 30);
        CHECK_THROWS_AS(from_json_text(R"({"sed": 5})"), ConfigError);
        CHECK_THROWS_AS(from_json_text(R"({"seed": "five"})"), ConfigError);
        CHECK_THROWS_AS(from_json_text(R"({"strategy": "best"})"), ConfigError);
        CHECK_THROWS_AS(from_json_text("{"), ConfigError);
    }

    TEST_CASE("validation") {
        RunConfig c;
        CHECK_NOTHROW(c.validate());
        c.mask_ratio = 1.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = RunConfig{};
        c.strategy = peft::StrategyId::Stl;
        c.stage1_checkpoint = "x.ckpt";
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = RunConfig{};
        c.stage1_method = "fft";  // TAPE needs LoRA
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = RunConfig{};
        c.preset = "nope";
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }

    TEST_CASE("derived stage configs") {
        RunConfig c;
        CHECK(stage1_peft(c).kind == peft::Kind::LoRA);
        c.strategy = peft::StrategyId::FftDa;
        CHECK(stage1_peft(c).kind == peft::Kind::FFT);
        c.strategy = peft::StrategyId::Stl;
        CHECK_THROWS_AS(stage1_peft(c), ConfigError);
        CHECK(stage1_config(c).optim.lr == 1.5e-4);
        CHECK(stage2_config(c).optim.lr == 1e-3);
        CHECK(stage2_config(c).batch_size == 8);
    }
}

TEST_SUITE("runner") {
    TEST_CASE("TAPE writes both checkpoints; DLoRA stage II has no task adapter") {
        TempDir tmp("tape");
        const auto out = run_strategy(quick_config(peft::StrategyId::Tape, tmp.path), small_dataset());
        for (auto f : {out.files.config(), out.files.stage1(), out.files.stage2(), out.files.losses(),
                       out.files.metrics(), out.files.summary()})
            CHECK(fs::exists(f));
        const auto s2 = load_checkpoint(out.files.stage2());
        CHECK(s2.count(Role::TaskAdapter) > 0);
        CHECK(s2.count(Role::Decoder) == 0);
        CHECK(out.config.dataset_fingerprint == small_dataset().fingerprint);
        CHECK(load_run_config(out.files.config()) == out.config);

        TempDir d("dlora");
        auto cfg = quick_config(peft::StrategyId::DLora, d.path);
        cfg.stage1_checkpoint = out.files.stage1().string();
        const auto dl = run_strategy(cfg, small_dataset());
        CHECK_FALSE(dl.stage1.has_value());
        const auto ck = load_checkpoint(dl.files.stage2());
        CHECK(ck.count(Role::TaskAdapter) == 0);
        CHECK(ck.count(Role::DomainAdapter) > 0);
        // the reused domain adapter is carried over untouched
        const auto s1 = load_checkpoint(out.files.stage1());
        for (const auto& name : changed_tensors(s1, ck)) {
            INFO(name);
            CHECK((!ck.contains(name) || ck.entry(name).role == Role::Head));
        }
    }

    TEST_CASE("single-stage strategies write no stage-I checkpoint") {
        TempDir tmp("stl");
        const auto out = run_strategy(quick_config(peft::StrategyId::Stl, tmp.path), small_dataset());
        CHECK_FALSE(fs::exists(out.files.stage1()));
        CHECK(out.trainable_stage2 == load_checkpoint(out.files.stage2()).count(Role::Head));
    }

    TEST_CASE("same config twice gives identical files; the stored config reproduces them") {
        TempDir a("det_a"), b("det_b"), c("det_c");
        const auto ra = run_strategy(quick_config(peft::StrategyId::Tape, a.path), small_dataset());
        const auto rb = run_strategy(quick_config(peft::StrategyId::Tape, b.path), small_dataset());
        for (auto f : {&RunFiles::metrics, &RunFiles::losses, &RunFiles::summary, &RunFiles::stage2})
            CHECK(read_file((ra.files.*f)()) == read_file((rb.files.*f)()));

        auto stored = load_run_config(ra.files.config());
        stored.out_dir = c.path.string();
        const auto rc = run_strategy(stored, small_dataset());
        CHECK(read_file(rc.files.metrics()) == read_file(ra.files.metrics()));
        CHECK(read_file(rc.files.stage2()) == read_file(ra.files.stage2()));
    }

    TEST_CASE("refuses to overwrite without the flag; fingerprint pin enforced") {
        TempDir tmp("force");
        const auto cfg = quick_config(peft::StrategyId::StlOct, tmp.path);
        run_strategy(cfg, small_dataset());
        CHECK_THROWS_AS(run_strategy(cfg, small_dataset()), IoError);
        RunOptions force;
        force.overwrite = true;
        CHECK_NOTHROW(run_strategy(cfg, small_dataset(), force));

        auto pinned = cfg;
        pinned.dataset_fingerprint = "0000";
        CHECK_THROWS_AS(run_strategy(pinned, small_dataset(), force), ConfigError);
    }

    TEST_CASE("eval reproduces the stored metrics") {
        TempDir tmp("eval");
        const auto out = run_strategy(quick_config(peft::StrategyId::TLora, tmp.path), small_dataset());
        const auto ev = evaluate_run(tmp.path, small_dataset(), synth::Split::Test, 2);
        CHECK(format_metrics_csv("tlora", ev.rows) == read_file(out.files.metrics()));

        TempDir ex("export");
        const auto model = stage2_from_checkpoint(load_checkpoint(out.files.stage2()), vit::preset("vit-tiny"),
                                                  peft::StrategyId::TLora);
        const auto n = export_predictions(model, small_dataset(), synth::Split::Test, ex.path);
        CHECK(n == static_cast<std::int64_t>(small_dataset().indices(synth::Split::Test).size()));
        CHECK(std::distance(fs::directory_iterator(ex.path), fs::directory_iterator{}) == 2 * n);
    }

    TEST_CASE("adapter kinds are recovered from checkpoint tensors") {
        const auto v = vit::preset("vit-tiny");
        for (auto p : {peft::PEFTConfig::lora(4), peft::PEFTConfig::adapter(6), peft::PEFTConfig::vpt(3)}) {
            auto ps = foundation_backbone(v, 7);
            Rng rng(1);
            peft::inject(ps, v, p, rng);
            const auto got = infer_adapter(ps, v, Role::DomainAdapter);
            REQUIRE(got.has_value());
            CHECK(got->kind == p.kind);
            CHECK(peft::adapter_layout(v, *got).size() == peft::adapter_layout(v, p).size());
            CHECK_FALSE(infer_adapter(ps, v, Role::TaskAdapter).has_value());
        }
    }

    TEST_CASE("FFT TA changes nearly every backbone tensor within one epoch") {
        const auto v = vit::preset("vit-tiny");
        auto m = seg::make_stage2_model(foundation_backbone(v, 7), {}, v, peft::StrategyId::FftTa, 42);
        const auto init = m.params.clone();
        OptimState st;
        const auto& ds = small_dataset();
        for (auto i : ds.indices(synth::Split::Train)) {
            const auto& s = ds.samples[i];
            m.params.zero_grad();
            cross_entropy(seg::stage2_logits(m.params, m.vit, m.adapters, m.strategy, m.head, s.oct, s.octa), s.labels)
                .backward();
            adamw_step(m.params, st);
        }
        const auto changed = changed_tensors(init, m.params);
        std::size_t backbone = 0, backbone_changed = 0;
        for (const auto& e : init.entries()) {
            if (e.role != Role::Backbone) continue;
            ++backbone;
            backbone_changed += std::count(changed.begin(), changed.end(), e.name);
        }
        CHECK(double(backbone_changed) > 0.99 * double(backbone));
    }
}

TEST_SUITE("compare") {
    TEST_CASE("single run") {
        const auto t = compare_scores({scores("stl", 0.8)});
        CHECK(t.rows.size() == 1);
        CHECK(t.metric_cells() == 10);
    }

    TEST_CASE("ranking and tie-break by name") {
        const auto t = compare_scores({scores("tlora", 0.8), scores("dlora", 0.8), scores("tape", 0.9)});
        CHECK(t.rows[0].label == "tape");
        CHECK(t.rows[1].label == "dlora");
        CHECK(t.rows[2].label == "tlora");
    }

    TEST_CASE("seven strategies give 7 x 5 x 2 cells") {
        std::vector<RunScores> runs;
        for (auto s : peft::kAllStrategies) runs.push_back(scores(std::string(peft::strategy_name(s)), 0.5));
        const auto t = compare_scores(runs);
        CHECK(t.metric_cells() == 70);
        const auto csv = render_csv(t);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
        CHECK(csv.starts_with("method,NORMAL_mIoU,NORMAL_mDice,AMD_mIoU"));
    }

    TEST_CASE("repeated strategies are labeled by seed") {
        const auto t = compare_scores({scores("stl", 0.8, 1), scores("stl", 0.7, 2)});
        CHECK(t.rows[0].label == "stl@1");
        CHECK(t.rows[1].label == "stl@2");
    }

    TEST_CASE("different fingerprints and empty input are rejected") {
        CHECK_THROWS_AS(compare_scores({scores("a", 0.5, 1, "f1"), scores("b", 0.5, 1, "f2")}), ConfigError);
        CHECK_THROWS_AS(compare_scores({}), ConfigError);
    }

    TEST_CASE("table shows percents") {
        const auto text = render_table(compare_scores({scores("tape", 0.9386)}));
        CHECK(text.find("93.86") != std::string::npos);
        CHECK(text.find("46.93") != std::string::npos);
    }

    TEST_CASE("reading run directories") {
        TempDir a("cmp_a"), b("cmp_b");
        run_strategy(quick_config(peft::StrategyId::Stl, a.path), small_dataset());
        run_strategy(quick_config(peft::StrategyId::StlOct, b.path), small_dataset());
        const std::vector<fs::path> dirs{a.path, b.path};
        const auto t = compare_runs(dirs);
        CHECK(t.rows.size() == 2);
        for (const auto& r : t.rows)
            for (std::size_t c = 0; c < kCompareColumns.size(); ++c) CHECK(r.mdice[c] >= r.miou[c]);
        CHECK_THROWS_AS(read_run(fs::temp_directory_path() / "tape_no_such_run"), IoError);
    }
}

TEST_SUITE("grad_suite") {
    TEST_CASE("numeric suite passes") {
        const auto cases = run_grad_suite(GradSuite::Numeric);
        CHECK(cases.size() > 20);
        for (const auto& c : cases) {
            INFO(c.name);
            CHECK(c.passed());
        }
        CHECK(parse_grad_suite("seg") == GradSuite::Seg);
        CHECK_THROWS(parse_grad_suite("all"));
    }
}
