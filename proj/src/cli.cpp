#include "nlsg/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>
#include <system_error>
#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "nlsg/experiment.hpp"
#include "nlsg/fusion.hpp"
#include "nlsg/tensor_io.hpp"
#include "nlsg/theory.hpp"

namespace nlsg {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Output directory assembled in a sibling temporary directory. commit() moves every entry into
// place (replacing same-named entries); otherwise the temporary directory is removed.
class StagedDir {
public:
    explicit StagedDir(fs::path target) : target_(std::move(target)) {
        if (target_.empty()) throw ConfigError("output path must not be empty");
        const fs::path parent = fs::absolute(target_).parent_path();
        fs::create_directories(parent);
        staging_ = parent / ("." + target_.filename().string() + ".tmp-" + std::to_string(::getpid()));
        fs::remove_all(staging_);
        fs::create_directories(staging_);
    }
    StagedDir(const StagedDir&) = delete;
    StagedDir& operator=(const StagedDir&) = delete;
    ~StagedDir() {
        std::error_code ec;
        fs::remove_all(staging_, ec);
    }

    const fs::path& path() const { return staging_; }

    void commit() {
        fs::create_directories(target_);
        for (const auto& entry : fs::directory_iterator(staging_)) {
            const fs::path dest = target_ / entry.path().filename();
            fs::remove_all(dest);
            fs::rename(entry.path(), dest);
        }
        fs::remove_all(staging_);
    }

private:
    fs::path target_;
    fs::path staging_;
};

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const Dataset& pick_split(const DatasetSplits& splits, const std::string& name) {
    if (name == "train") return splits.train;
    if (name == "test") return splits.test;
    throw ConfigError("--split: expected train or test");
}

std::uint64_t seed_or_first(const std::optional<std::uint64_t>& seed, const ExperimentConfig& cfg) {
    return seed ? *seed : cfg.seeds.front();
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
    const auto cfg = load_config(a.config);
    const auto seed = seed_or_first(a.seed, cfg);
    const auto splits = build_datasets(cfg, seed);
    StagedDir dir(a.out);
    json extra = {{"config_hash", config_hash(cfg)}, {"seed", seed}, {"regime", to_string(cfg.regime)}};
    save_dataset(dir.path(), splits.train, splits.test, extra.dump());
    write_text(dir.path() / "config.json", config_to_json(cfg));
    dir.commit();
    out << "wrote " << splits.train.size() << " train / " << splits.test.size() << " test images, "
        << splits.train.annotators << " annotators, to " << a.out << "\n";
    return kExitOk;
}

struct FuseArgs {
    std::string data;
    std::string method;
    std::string split = "train";
    std::string out;
    int window = 8;
    int stride = 4;
    int max_iters = 100;
};

int cmd_fuse(const FuseArgs& a, std::ostream& out) {
    const auto splits = load_dataset(a.data);
    const Dataset& d = pick_split(splits, a.split);
    if (d.size() == 0) throw ConfigError("--split: split is empty");
    const int L = d.classes;
    const int W = d.gt[0].width(), H = d.gt[0].height();
    std::vector<std::uint8_t> labels;
    std::vector<double> probs;
    json cms = json::array();
    for (int n = 0; n < d.size(); ++n) {
        std::vector<LabelMap> visible;
        std::vector<int> ids;
        for (int r = 0; r < d.annotators; ++r) {
            if (d.available[n][r]) {
                visible.push_back(d.noisy[n][r]);
                ids.push_back(r);
            }
        }
        ProbabilityMap p;
        if (a.method == "mean") {
            p = mean_fusion(visible);
        } else if (a.method == "majority" || a.method == "mode") {
            p = one_hot(majority_vote(visible), L);
        } else if (a.method == "staple") {
            auto st = staple(visible, a.max_iters);
            json per = json::array();
            for (std::size_t i = 0; i < ids.size(); ++i) per.push_back({{"annotator", ids[i]}, {"cm", st.annotator_cms[i]}});
            cms.push_back({{"image", n}, {"annotators", per}, {"iterations", st.iterations}});
            p = std::move(st.posterior);
        } else if (a.method == "spatial_staple") {
            p = spatial_staple(visible, a.window, a.stride, a.max_iters).posterior;
        } else {
            throw ConfigError("--method: expected mean, majority, staple or spatial_staple");
        }
        const auto lab = a.method == "majority" || a.method == "mode" ? majority_vote(visible) : argmax(p);
        labels.insert(labels.end(), lab.labels().begin(), lab.labels().end());
        probs.insert(probs.end(), p.values().begin(), p.values().end());
    }
    const auto N = std::uint32_t(d.size());
    StagedDir dir(a.out);
    write_tensor(dir.path() / "labels.nlt", make_u8({N, std::uint32_t(H), std::uint32_t(W)}, std::move(labels)));
    write_tensor(dir.path() / "probs.nlt",
                 make_f64({N, std::uint32_t(H), std::uint32_t(W), std::uint32_t(L)}, std::move(probs)));
    if (a.method == "staple") write_text(dir.path() / "staple_cms.json", cms.dump(1) + "\n");
    dir.commit();
    out << "fused " << d.size() << " images with " << a.method << " into " << a.out << "\n";
    return kExitOk;
}

struct TrainArgs {
    std::string data;
    std::string config;
    std::string method = "ours";
    std::optional<std::uint64_t> seed;
    std::string out;
    int checkpoint_every = 0;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    auto cfg = load_config(a.config);
    const auto& methods = known_methods();
    if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) {
        throw ConfigError("--method: unknown method '" + a.method + "'");
    }
    if (a.checkpoint_every < 0) throw ConfigError("--checkpoint-every: must be non-negative");
    const auto splits = load_dataset(a.data);
    const auto seed = seed_or_first(a.seed, cfg);
    StagedDir dir(a.out);
    if (a.checkpoint_every > 0) {
        cfg.train.checkpoint_dir = dir.path() / "checkpoints";
        cfg.train.checkpoint_every = a.checkpoint_every;
    }
    try {
        const auto res = fit_method(cfg, a.method, splits.train, seed);
        save_checkpoint(dir.path() / "checkpoint", res.params);
        write_text(dir.path() / "history.csv", res.history.to_csv());
    } catch (const DivergenceError& e) {
        save_checkpoint(dir.path() / "last_good", e.last_good());
        dir.commit();
        err << "error: " << e.what() << "; last good parameters saved to " << (fs::path(a.out) / "last_good") << "\n";
        return kExitRuntime;
    }
    write_text(dir.path() / "config.json", config_to_json(cfg));
    dir.commit();
    out << "trained " << a.method << " (seed " << seed << ") into " << a.out << "\n";
    return kExitOk;
}

struct EvaluateArgs {
    std::string checkpoint;
    std::string data;
    std::string split = "test";
    std::string out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
    const auto params = load_checkpoint(a.checkpoint);
    const auto splits = load_dataset(a.data);
    const auto& d = pick_split(splits, a.split);
    if (params.arch.classes != d.classes) throw ConfigError("checkpoint and dataset disagree on the class count");
    if (params.arch.annotators != 0 && params.arch.annotators != d.annotators) {
        throw ConfigError("checkpoint and dataset disagree on the annotator count");
    }
    const auto rep = evaluate(params, d);
    const std::string text = rep.to_json();
    if (a.out.empty()) {
        out << text << "\n";
    } else {
        write_text(a.out, text + "\n");
        out << "dice " << rep.dice_mean << "\n";
    }
    return kExitOk;
}

struct RecoveryArgs {
    int instances = 20;
    int classes = 2;
    int annotators = 3;
    int grid = 50;
    double margin = 0.02;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_verify(const RecoveryArgs& a, std::ostream& out) {
    if (a.instances < 1) throw ConfigError("--instances: must be at least 1");
    if (a.annotators < 1) throw ConfigError("--annotators: must be at least 1");
    Rng rng(a.seed);
    json reports = json::array();
    int recovered = 0;
    for (int i = 0; i < a.instances; ++i) {
        const int R = 1 + i % a.annotators;
        const auto prob = random_recovery_problem(a.classes, R, a.grid, a.margin, rng);
        const auto rep = brute_force_trace_recovery(prob);
        recovered += rep.recovered ? 1 : 0;
        json entry = json::parse(rep.to_json());
        entry["annotators"] = R;
        reports.push_back(entry);
    }
    json doc = {{"classes", a.classes}, {"grid", a.grid},         {"seed", a.seed},
                {"instances", a.instances}, {"recovered", recovered}, {"reports", reports}};
    if (!a.out.empty()) write_text(a.out, doc.dump(2) + "\n");
    out << "recovered " << recovered << " / " << a.instances << "\n";
    return kExitOk;
}

struct ReportArgs {
    std::string config;
    std::string out;
    std::vector<std::string> aggregate;
    int workers = 0;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
    std::vector<ResultRow> rows;
    std::vector<std::pair<std::string, TrainHistory>> histories;
    std::string out_dir = a.out;
    std::optional<ExperimentConfig> cfg;
    if (!a.aggregate.empty()) {
        for (const auto& path : a.aggregate) {
            auto part = rows_from_csv(read_text(path));
            rows.insert(rows.end(), part.begin(), part.end());
        }
        if (out_dir.empty()) throw ConfigError("--out is required with --aggregate");
    } else {
        if (a.config.empty()) throw ConfigError("report needs --config or --aggregate");
        cfg = load_config(a.config);
        if (out_dir.empty()) out_dir = cfg->output_dir;
        auto result = run_experiment(*cfg, a.workers > 0 ? a.workers : worker_count());
        rows = std::move(result.rows);
        histories = std::move(result.histories);
    }
    const auto summary = summarize(rows);
    StagedDir dir(out_dir);
    write_text(dir.path() / "results.csv", rows_to_csv(rows));
    write_text(dir.path() / "summary.csv", summary_to_csv(summary));
    write_text(dir.path() / "dice.svg", bar_chart_svg(summary, "Median test Dice per method"));
    const bool sweep = std::any_of(rows.begin(), rows.end(), [](const ResultRow& r) { return r.level.has_value(); });
    if (sweep) write_text(dir.path() / "noise_sweep.svg", sweep_chart_svg(rows, "Test Dice across annotation noise"));
    if (!histories.empty()) {
        write_text(dir.path() / "validation_curves.svg", loss_chart_svg(histories, "Validation Dice during training"));
        fs::create_directories(dir.path() / "histories");
        for (const auto& [name, h] : histories) {
            std::string file = name;
            std::replace(file.begin(), file.end(), ' ', '_');
            write_text(dir.path() / "histories" / (file + ".csv"), h.to_csv());
        }
    }
    if (cfg) write_text(dir.path() / "config.json", config_to_json(*cfg));
    dir.commit();
    out << summary_to_csv(summary);
    out << "wrote " << rows.size() << " rows to " << (fs::path(out_dir) / "results.csv").string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Segmentation from noisy multi-annotator labels with per-pixel annotator confusion matrices", "nlsg"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "Generate a dataset with simulated annotators");
    s->add_option("--config", sim.config, "Experiment config (JSON)")->required();
    s->add_option("--seed", sim.seed, "Seed (default: first seed of the config)");
    s->add_option("--out", sim.out, "Output dataset directory")->required();

    FuseArgs fu;
    auto* f = app.add_subcommand("fuse", "Fuse the visible labels of a dataset split");
    f->add_option("--data", fu.data, "Dataset directory")->required();
    f->add_option("--method", fu.method, "mean | majority | staple | spatial_staple")->required();
    f->add_option("--split", fu.split, "train | test")->capture_default_str();
    f->add_option("--window", fu.window, "Spatial STAPLE window")->capture_default_str();
    f->add_option("--stride", fu.stride, "Spatial STAPLE stride")->capture_default_str();
    f->add_option("--max-iters", fu.max_iters, "STAPLE EM iterations")->capture_default_str();
    f->add_option("--out", fu.out, "Output directory")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train one method on a dataset");
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--config", tr.config, "Experiment config (JSON); its train and model sections are used")->required();
    t->add_option("--method", tr.method, "Method name")->capture_default_str();
    t->add_option("--seed", tr.seed, "Seed (default: first seed of the config)");
    t->add_option("--checkpoint-every", tr.checkpoint_every, "Save parameters every k epochs (0: off)");
    t->add_option("--out", tr.out, "Output directory")->required();

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset split");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
    e->add_option("--data", ev.data, "Dataset directory")->required();
    e->add_option("--split", ev.split, "train | test")->capture_default_str();
    e->add_option("--out", ev.out, "Report JSON path (default: stdout)");

    RecoveryArgs th;
    auto* v = app.add_subcommand("verify-theorem", "Brute-force check of trace-minimisation recovery");
    v->add_option("--instances", th.instances)->capture_default_str();
    v->add_option("--classes", th.classes)->capture_default_str();
    v->add_option("--annotators", th.annotators, "Instances cycle through 1..R annotators")->capture_default_str();
    v->add_option("--grid", th.grid, "Simplex grid resolution")->capture_default_str();
    v->add_option("--margin", th.margin, "Minimum diagonal dominance margin")->capture_default_str();
    v->add_option("--seed", th.seed)->capture_default_str();
    v->add_option("--out", th.out, "Report JSON path");

    ReportArgs rp;
    auto* r = app.add_subcommand("report", "Run every method and seed, or aggregate result CSVs");
    r->add_option("--config", rp.config, "Experiment config (JSON)");
    r->add_option("--aggregate", rp.aggregate, "Result CSVs to summarise instead of running");
    r->add_option("--workers", rp.workers, "Parallel runs (default: NLSG_WORKERS or hardware threads)");
    r->add_option("--out", rp.out, "Output directory (default: the config's output_dir)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitConfig;
    }

    try {
        if (s->parsed()) return cmd_simulate(sim, out);
        if (f->parsed()) return cmd_fuse(fu, out);
        if (t->parsed()) return cmd_train(tr, out, err);
        if (e->parsed()) return cmd_evaluate(ev, out);
        if (v->parsed()) return cmd_verify(th, out);
        if (r->parsed()) return cmd_report(rp, out);
    } catch (const ConfigError& ex) {
        err << "config error: " << ex.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitRuntime;
    }
    return kExitConfig;
}

}  // namespace nlsg
