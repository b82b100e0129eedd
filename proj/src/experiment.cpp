#include "nlsg/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "nlsg/fusion.hpp"
#include "nlsg/metrics.hpp"

namespace nlsg {

using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Strict JSON reading.

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key)) throw ConfigError(path + ": unknown key '" + key + "'");
    }
}

template <class T>
void read(const json& obj, const std::string& key, const std::string& path, T& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    const std::string field = path + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field + ": expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
            if (v.is_number_unsigned() == false && v.get<long long>() < 0) {
                throw ConfigError(field + ": expected a non-negative integer");
            }
        }
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(field + ": expected a string");
    }
    out = v.get<T>();
}

template <class T>
void read_list(const json& obj, const std::string& key, const std::string& path, std::vector<T>& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    const std::string field = path + "." + key;
    if (!v.is_array()) throw ConfigError(field + ": expected an array");
    std::vector<T> items;
    for (std::size_t i = 0; i < v.size(); ++i) {
        json holder = {{"item", v[i]}};
        T item{};
        read(holder, "item", field + "[" + std::to_string(i) + "]", item);
        items.push_back(item);
    }
    out = std::move(items);
}

template <class Fn>
auto as_config_error(const std::string& field, Fn&& fn) {
    try {
        return fn();
    } catch (const DomainError& e) {
        throw ConfigError(field + ": " + e.what());
    }
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::optional<double> parse_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}

std::vector<LabelMap> visible_labels(const Dataset& data, int n) {
    std::vector<LabelMap> out;
    for (int r = 0; r < data.annotators; ++r) {
        if (data.available[n][r]) out.push_back(data.noisy[n][r]);
    }
    return out;
}

std::vector<int> visible_ids(const Dataset& data, int n) {
    std::vector<int> out;
    for (int r = 0; r < data.annotators; ++r) {
        if (data.available[n][r]) out.push_back(r);
    }
    return out;
}

bool is_annotator_model(const std::string& m) { return m == "ours" || m == "ours_no_trace" || m == "ours_low_rank"; }

// ---------------------------------------------------------------------------
// SVG.

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
                          "#7f7f7f", "#bcbd22"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

std::string line_chart(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                       const std::string& ylabel) {
    const double W = 640, H = 400, left = 60, right = 170, top = 40, bottom = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
    const double pw = W - left - right, ph = H - top - bottom;
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
    o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
        o << "<text x=\"" << sx(xv) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << num(std::round(xv * 1000) / 1000)
          << "</text>\n";
        o << "<text x=\"" << left - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << num(std::round(yv * 1000) / 1000)
          << "</text>\n";
        o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << sy(yv) << "\" y2=\"" << sy(yv)
          << "\" stroke=\"#eee\"/>\n";
    }
    o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << escape(xlabel)
      << "</text>\n";
    o << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(ylabel) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* colour = kPalette[i % 10];
        o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.6\" points=\"";
        for (auto [x, y] : series[i].points) o << sx(x) << ',' << sy(y) << ' ';
        o << "\"/>\n";
        for (auto [x, y] : series[i].points) {
            o << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"2.5\" fill=\"" << colour << "\"/>\n";
        }
        const double ly = top + 14 + 16 * double(i);
        o << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 30 << "\" y1=\"" << ly - 4 << "\" y2=\""
          << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly << "\">" << escape(series[i].name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace

const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"mean",  "mode",          "staple", "spatial_staple", "naive",
                                            "oracle", "ours_no_trace", "ours",   "ours_low_rank"};
    return m;
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    const auto& d = cfg.dataset;
    j["dataset"] = {{"source", d.source},       {"train_count", d.train_count}, {"test_count", d.test_count},
                    {"width", d.width},         {"height", d.height},           {"classes", d.classes},
                    {"idx_images", d.idx_images}, {"idx_labels", d.idx_labels}, {"idx_threshold", d.idx_threshold}};
    json ann = json::array();
    for (const auto& p : cfg.profiles) {
        ann.push_back({{"kind", to_string(p.kind)},
                       {"magnitude", p.magnitude},
                       {"fracture_count", p.fracture_count},
                       {"fracture_width", p.fracture_width},
                       {"target_class", p.target_class}});
    }
    j["annotators"] = ann;
    j["regime"] = to_string(cfg.regime);
    j["methods"] = cfg.methods;
    j["model"] = {{"trunk_layers", cfg.trunk_layers}, {"trunk_channels", cfg.trunk_channels}, {"low_rank", cfg.low_rank}};
    const auto& t = cfg.train;
    j["train"] = {{"learning_rate", t.learning_rate},
                  {"epochs", t.epochs},
                  {"batch_size", t.batch_size},
                  {"lambda", t.lambda},
                  {"warmup_epochs", t.warmup_epochs},
                  {"warmup_mode", to_string(t.warmup_mode)},
                  {"optimizer", to_string(t.optimizer)},
                  {"augment_flip", t.augment_flip},
                  {"validation_fraction", t.validation_fraction}};
    j["fusion"] = {{"spatial_window", cfg.spatial_window},
                   {"spatial_stride", cfg.spatial_stride},
                   {"staple_max_iters", cfg.staple_max_iters}};
    j["seeds"] = cfg.seeds;
    j["noise_levels"] = cfg.noise_levels;
    j["output_dir"] = cfg.output_dir;
    return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ExperimentConfig cfg;
    check_keys(j, "config",
               {"dataset", "annotators", "regime", "methods", "model", "train", "fusion", "seeds", "noise_levels",
                "output_dir"});
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, "config.dataset",
                   {"source", "train_count", "test_count", "width", "height", "classes", "idx_images", "idx_labels",
                    "idx_threshold"});
        auto& o = cfg.dataset;
        read(d, "source", "config.dataset", o.source);
        read(d, "train_count", "config.dataset", o.train_count);
        read(d, "test_count", "config.dataset", o.test_count);
        read(d, "width", "config.dataset", o.width);
        read(d, "height", "config.dataset", o.height);
        read(d, "classes", "config.dataset", o.classes);
        read(d, "idx_images", "config.dataset", o.idx_images);
        read(d, "idx_labels", "config.dataset", o.idx_labels);
        read(d, "idx_threshold", "config.dataset", o.idx_threshold);
    }
    if (j.contains("annotators")) {
        const auto& a = j.at("annotators");
        if (!a.is_array()) throw ConfigError("config.annotators: expected an array");
        cfg.profiles.clear();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::string path = "config.annotators[" + std::to_string(i) + "]";
            check_keys(a[i], path, {"kind", "magnitude", "fracture_count", "fracture_width", "target_class"});
            AnnotatorProfile p;
            std::string kind = to_string(p.kind);
            read(a[i], "kind", path, kind);
            p.kind = as_config_error(path + ".kind", [&] { return annotator_kind_from(kind); });
            read(a[i], "magnitude", path, p.magnitude);
            read(a[i], "fracture_count", path, p.fracture_count);
            read(a[i], "fracture_width", path, p.fracture_width);
            read(a[i], "target_class", path, p.target_class);
            cfg.profiles.push_back(p);
        }
    }
    if (j.contains("regime")) {
        std::string r;
        read(j, "regime", "config", r);
        cfg.regime = as_config_error("config.regime", [&] { return label_regime_from(r); });
    }
    read_list(j, "methods", "config", cfg.methods);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "config.model", {"trunk_layers", "trunk_channels", "low_rank"});
        read(m, "trunk_layers", "config.model", cfg.trunk_layers);
        read(m, "trunk_channels", "config.model", cfg.trunk_channels);
        read(m, "low_rank", "config.model", cfg.low_rank);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        const std::string path = "config.train";
        check_keys(t, path,
                   {"learning_rate", "epochs", "batch_size", "lambda", "warmup_epochs", "warmup_mode", "optimizer",
                    "augment_flip", "validation_fraction"});
        auto& o = cfg.train;
        read(t, "learning_rate", path, o.learning_rate);
        read(t, "epochs", path, o.epochs);
        read(t, "batch_size", path, o.batch_size);
        read(t, "lambda", path, o.lambda);
        read(t, "warmup_epochs", path, o.warmup_epochs);
        std::string wm = to_string(o.warmup_mode);
        read(t, "warmup_mode", path, wm);
        o.warmup_mode = as_config_error(path + ".warmup_mode", [&] { return warmup_mode_from(wm); });
        std::string opt = to_string(o.optimizer);
        read(t, "optimizer", path, opt);
        o.optimizer = as_config_error(path + ".optimizer", [&] { return optimizer_from(opt); });
        read(t, "augment_flip", path, o.augment_flip);
        read(t, "validation_fraction", path, o.validation_fraction);
    }
    if (j.contains("fusion")) {
        const auto& f = j.at("fusion");
        check_keys(f, "config.fusion", {"spatial_window", "spatial_stride", "staple_max_iters"});
        read(f, "spatial_window", "config.fusion", cfg.spatial_window);
        read(f, "spatial_stride", "config.fusion", cfg.spatial_stride);
        read(f, "staple_max_iters", "config.fusion", cfg.staple_max_iters);
    }
    read_list(j, "seeds", "config", cfg.seeds);
    read_list(j, "noise_levels", "config", cfg.noise_levels);
    read(j, "output_dir", "config", cfg.output_dir);
    validate(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

void validate(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    if (d.source != "synthetic" && d.source != "idx") throw ConfigError("config.dataset.source: expected synthetic or idx");
    if (d.train_count < 1) throw ConfigError("config.dataset.train_count: must be at least 1");
    if (d.test_count < 1) throw ConfigError("config.dataset.test_count: must be at least 1");
    if (d.width < 8 || d.height < 8) throw ConfigError("config.dataset: width and height must be at least 8");
    if (d.classes < 2 || d.classes > kMaxClasses) throw ConfigError("config.dataset.classes: must lie in [2, 16]");
    if (d.source == "idx") {
        if (d.idx_images.empty() || d.idx_labels.empty()) throw ConfigError("config.dataset: idx source needs idx_images and idx_labels");
        if (d.classes != 2) throw ConfigError("config.dataset.classes: idx data is binary");
        if (!(d.idx_threshold > 0.0 && d.idx_threshold < 1.0)) throw ConfigError("config.dataset.idx_threshold: must lie in (0, 1)");
    }
    if (cfg.profiles.empty()) throw ConfigError("config.annotators: at least one annotator is required");
    for (std::size_t i = 0; i < cfg.profiles.size(); ++i) {
        const auto& p = cfg.profiles[i];
        const std::string path = "config.annotators[" + std::to_string(i) + "]";
        if (p.magnitude < 0) throw ConfigError(path + ".magnitude: must be non-negative");
        if (p.magnitude > std::min(d.width, d.height) / 2) throw ConfigError(path + ".magnitude: exceeds min(W, H) / 2");
        if (p.fracture_count < 0) throw ConfigError(path + ".fracture_count: must be non-negative");
        if (p.fracture_width < 1) throw ConfigError(path + ".fracture_width: must be at least 1");
        if (p.target_class < 1 || p.target_class >= d.classes) throw ConfigError(path + ".target_class: must lie in [1, L)");
    }
    if (cfg.methods.empty()) throw ConfigError("config.methods: at least one method is required");
    for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
        const auto& m = known_methods();
        if (std::find(m.begin(), m.end(), cfg.methods[i]) == m.end()) {
            throw ConfigError("config.methods[" + std::to_string(i) + "]: unknown method '" + cfg.methods[i] + "'");
        }
    }
    if (std::set<std::string>(cfg.methods.begin(), cfg.methods.end()).size() != cfg.methods.size()) {
        throw ConfigError("config.methods: duplicate method");
    }
    if (cfg.trunk_layers < 1) throw ConfigError("config.model.trunk_layers: must be at least 1");
    if (cfg.trunk_channels < 1) throw ConfigError("config.model.trunk_channels: must be at least 1");
    if (cfg.low_rank < 1 || cfg.low_rank >= d.classes) throw ConfigError("config.model.low_rank: must lie in [1, L)");
    as_config_error("config.train", [&] {
        cfg.train.validate();
        return 0;
    });
    if (cfg.seeds.empty()) throw ConfigError("config.seeds: at least one seed is required");
    if (cfg.spatial_window < 4) throw ConfigError("config.fusion.spatial_window: must be at least 4");
    if (cfg.spatial_stride < 1 || cfg.spatial_stride > cfg.spatial_window) {
        throw ConfigError("config.fusion.spatial_stride: must lie in [1, spatial_window]");
    }
    if (cfg.staple_max_iters < 1) throw ConfigError("config.fusion.staple_max_iters: must be at least 1");
    for (int level : cfg.noise_levels) {
        if (level < 0 || level > std::min(d.width, d.height) / 2) {
            throw ConfigError("config.noise_levels: level " + std::to_string(level) + " out of range");
        }
    }
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::string canonical = json::parse(config_to_json(cfg)).dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : canonical) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ModelArch arch_for(const ExperimentConfig& cfg, const std::string& method, const Dataset& data) {
    ModelArch a;
    a.in_channels = data.images.empty() ? 1 : data.images[0].channels();
    a.trunk_layers = cfg.trunk_layers;
    a.trunk_channels = cfg.trunk_channels;
    a.classes = data.classes;
    a.annotators = (is_annotator_model(method) || method == "oracle") ? data.annotators : 0;
    a.cm_mode = method == "ours_low_rank" ? CmMode::LowRank : CmMode::Full;
    a.rank = cfg.low_rank;
    return a;
}

DatasetSplits build_datasets(const ExperimentConfig& cfg, std::uint64_t seed) {
    const auto& d = cfg.dataset;
    const Rng root(seed);
    std::vector<LabeledImage> items;
    const int total = d.train_count + d.test_count;
    if (d.source == "synthetic") {
        Rng shapes = root.split(10);
        items = synth_shapes(total, d.width, d.height, d.classes, shapes);
    } else {
        items = load_idx(d.idx_images, d.idx_labels, d.idx_threshold, total);
        if (static_cast<int>(items.size()) < total) {
            throw ConfigError("config.dataset: IDX file holds fewer than train_count + test_count images");
        }
    }
    const auto all = simulate_annotations(std::move(items), cfg.profiles, cfg.regime, d.classes, root.split(11));
    std::vector<int> tr(d.train_count), te(d.test_count);
    for (int i = 0; i < d.train_count; ++i) tr[i] = i;
    for (int i = 0; i < d.test_count; ++i) te[i] = d.train_count + i;
    return {all.subset(tr), all.subset(te)};
}

std::vector<AnnotatorProfile> profiles_at_level(const std::vector<AnnotatorProfile>& base, int level) {
    auto out = base;
    for (auto& p : out) {
        if (p.kind == AnnotatorKind::Blank) continue;
        p.magnitude = level;
        if (level == 0) p.fracture_count = 0;
    }
    return out;
}

double mean_annotator_dice(const Dataset& data) {
    double sum = 0.0;
    int count = 0;
    for (int n = 0; n < data.size(); ++n) {
        for (int r = 0; r < data.annotators; ++r) {
            if (!data.available[n][r]) continue;
            sum += mean_foreground_dice(data.noisy[n][r], data.gt[n]);
            ++count;
        }
    }
    return count ? sum / count : 0.0;
}

std::vector<ProbabilityMap> fused_targets(const ExperimentConfig& cfg, const std::string& method, const Dataset& data) {
    const int L = data.classes;
    std::vector<ProbabilityMap> targets;
    targets.reserve(data.size());
    for (int n = 0; n < data.size(); ++n) {
        const auto labels = visible_labels(data, n);
        if (method == "mean" || method == "naive") {
            targets.push_back(mean_fusion(labels));
        } else if (method == "mode") {
            targets.push_back(one_hot(majority_vote(labels), L));
        } else if (method == "staple") {
            targets.push_back(one_hot(argmax(staple(labels, cfg.staple_max_iters).posterior), L));
        } else if (method == "spatial_staple") {
            targets.push_back(one_hot(
                argmax(spatial_staple(labels, cfg.spatial_window, cfg.spatial_stride, cfg.staple_max_iters).posterior),
                L));
        } else {
            throw ConfigError("method '" + method + "' is not a label-fusion baseline");
        }
    }
    return targets;
}

std::vector<std::vector<ConfusionField>> reference_cms(const Dataset& data) {
    std::vector<std::vector<ConfusionField>> cms(data.size());
    for (int n = 0; n < data.size(); ++n) {
        for (int r = 0; r < data.annotators; ++r) cms[n].push_back(build_reference_cms(data.gt[n], data.noisy[n][r]));
    }
    return cms;
}

TrainResult fit_method(const ExperimentConfig& cfg, const std::string& method, const Dataset& train_set,
                       std::uint64_t seed) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    const auto arch = arch_for(cfg, method, train_set);
    if (is_annotator_model(method)) {
        if (method == "ours_no_trace") tc.lambda = 0.0;
        return train(train_set, arch, tc);
    }
    if (method == "oracle") return train_with_fixed_cms(train_set, reference_cms(train_set), arch, tc);
    return train_supervised(train_set, fused_targets(cfg, method, train_set), arch, tc);
}

MethodResult run_method(const ExperimentConfig& cfg, const std::string& method, const DatasetSplits& splits,
                        std::uint64_t seed) {
    const auto& test_set = splits.test;
    const int L = test_set.classes;
    MethodResult res;
    res.method = method;
    res.seed = seed;
    auto tr = fit_method(cfg, method, splits.train, seed);
    EvalOptions opts;
    if (method == "oracle") opts.injected_cms = reference_cms(test_set);
    const auto rep = evaluate(tr.params, test_set, opts);
    res.dice = rep.dice_mean;
    res.cm_rmse = rep.cm_rmse_true_column;
    res.cm_rmse_full = rep.cm_rmse_full;
    res.ged = rep.ged;
    if (is_annotator_model(method)) res.history = std::move(tr.history);
    res.params = std::move(tr.params);

    // STAPLE variants also estimate annotator CMs; score them on the test annotations.
    if (method == "staple" || method == "spatial_staple") {
        CmErrorAccumulator acc;
        for (int n = 0; n < test_set.size(); ++n) {
            const auto labels = visible_labels(test_set, n);
            const auto ids = visible_ids(test_set, n);
            const int W = test_set.gt[n].width(), H = test_set.gt[n].height();
            std::vector<ConfusionField> fields;
            if (method == "staple") {
                const auto st = staple(labels, cfg.staple_max_iters);
                for (const auto& m : st.annotator_cms) fields.push_back(constant_field(W, H, L, m));
            } else {
                fields = spatial_staple(labels, cfg.spatial_window, cfg.spatial_stride, cfg.staple_max_iters).annotator_cms;
            }
            for (std::size_t i = 0; i < ids.size(); ++i) {
                acc.add(fields[i], build_reference_cms(test_set.gt[n], test_set.noisy[n][ids[i]]), test_set.gt[n]);
            }
        }
        res.cm_rmse = acc.rmse(CmErrorMode::TrueColumn);
        res.cm_rmse_full = acc.rmse(CmErrorMode::Full);
    }
    return res;
}

ExperimentOutput run_experiment(const ExperimentConfig& cfg, int workers) {
    validate(cfg);
    const std::string hash = config_hash(cfg);
    struct Task {
        std::optional<int> level;
        std::uint64_t seed;
        std::string method;
    };
    std::vector<Task> tasks;
    std::vector<std::optional<int>> levels;
    if (cfg.noise_levels.empty()) levels.push_back(std::nullopt);
    for (int l : cfg.noise_levels) levels.push_back(l);
    for (const auto& level : levels) {
        for (auto seed : cfg.seeds) {
            for (const auto& m : cfg.methods) tasks.push_back({level, seed, m});
        }
    }

    std::vector<ResultRow> rows(tasks.size());
    std::vector<std::optional<TrainHistory>> hist(tasks.size());
    std::vector<std::exception_ptr> errors(tasks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            try {
                const auto& t = tasks[i];
                ExperimentConfig local = cfg;
                if (t.level) local.profiles = profiles_at_level(cfg.profiles, *t.level);
                const auto splits = build_datasets(local, t.seed);
                auto res = run_method(local, t.method, splits, t.seed);
                rows[i] = {hash, t.level, t.seed, t.method, res.dice, res.cm_rmse, res.cm_rmse_full, res.ged,
                           mean_annotator_dice(splits.train)};
                hist[i] = std::move(res.history);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(workers, static_cast<int>(tasks.size())));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    ExperimentOutput out;
    out.rows = std::move(rows);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (!hist[i]) continue;
        std::string name = tasks[i].method + " seed " + std::to_string(tasks[i].seed);
        if (tasks[i].level) name += " level " + std::to_string(*tasks[i].level);
        out.histories.emplace_back(name, std::move(*hist[i]));
    }
    return out;
}

std::string rows_to_csv(const std::vector<ResultRow>& rows) {
    std::ostringstream s;
    s << "config_hash,level,seed,method,dice,cm_rmse,cm_rmse_full,ged,annotator_dice\n";
    for (const auto& r : rows) {
        s << r.config_hash << ',' << (r.level ? std::to_string(*r.level) : "") << ',' << r.seed << ',' << r.method
          << ',' << num(r.dice) << ',' << opt_num(r.cm_rmse) << ',' << opt_num(r.cm_rmse_full) << ','
          << opt_num(r.ged) << ',' << num(r.annotator_dice) << '\n';
    }
    return s.str();
}

std::vector<ResultRow> rows_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("results CSV: empty input");
    const auto header = split_line(line);
    const std::vector<std::string> expected{"config_hash", "level", "seed", "method", "dice",
                                            "cm_rmse", "cm_rmse_full", "ged", "annotator_dice"};
    if (header != expected) throw FormatError("results CSV: unexpected header");
    std::vector<ResultRow> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_line(line);
        if (f.size() != expected.size()) {
            throw FormatError("results CSV line " + std::to_string(line_no) + ": expected 9 fields");
        }
        try {
            ResultRow r;
            r.config_hash = f[0];
            if (!f[1].empty()) r.level = std::stoi(f[1]);
            r.seed = std::stoull(f[2]);
            r.method = f[3];
            r.dice = std::stod(f[4]);
            r.cm_rmse = parse_opt(f[5]);
            r.cm_rmse_full = parse_opt(f[6]);
            r.ged = parse_opt(f[7]);
            r.annotator_dice = std::stod(f[8]);
            rows.push_back(r);
        } catch (const std::logic_error&) {
            throw FormatError("results CSV line " + std::to_string(line_no) + ": malformed number");
        }
    }
    return rows;
}

double median(std::vector<double> v) {
    if (v.empty()) throw DomainError("median of an empty sequence");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
    std::vector<std::pair<std::optional<int>, std::string>> keys;
    std::map<std::pair<int, std::string>, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (const auto& r : rows) {
        const std::pair<int, std::string> key{r.level.value_or(-1), r.method};
        if (!groups.count(key)) keys.emplace_back(r.level, r.method);
        auto& g = groups[key];
        g.first.push_back(r.dice);
        if (r.cm_rmse) g.second.push_back(*r.cm_rmse);
    }
    std::vector<SummaryRow> out;
    for (const auto& [level, method] : keys) {
        const auto& g = groups[{level.value_or(-1), method}];
        SummaryRow s;
        s.level = level;
        s.method = method;
        s.runs = static_cast<int>(g.first.size());
        s.median_dice = median(g.first);
        if (!g.second.empty()) s.median_cm_rmse = median(g.second);
        out.push_back(s);
    }
    return out;
}

std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream s;
    s << "level,method,runs,median_dice,median_cm_rmse\n";
    for (const auto& r : rows) {
        s << (r.level ? std::to_string(*r.level) : "") << ',' << r.method << ',' << r.runs << ','
          << num(r.median_dice) << ',' << opt_num(r.median_cm_rmse) << '\n';
    }
    return s.str();
}

std::string bar_chart_svg(const std::vector<SummaryRow>& rows, const std::string& title) {
    const double W = 640, H = 360, left = 60, top = 40, bottom = 70;
    const double ph = H - top - bottom;
    const double pw = W - left - 20;
    const double slot = rows.empty() ? pw : pw / rows.size();
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double y = top + ph * (1.0 - t / 4.0);
        o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << y << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/>\n";
        o << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << num(t / 4.0) << "</text>\n";
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double h = std::clamp(rows[i].median_dice, 0.0, 1.0) * ph;
        const double x = left + slot * i + slot * 0.15;
        o << "<rect x=\"" << x << "\" y=\"" << top + ph - h << "\" width=\"" << slot * 0.7 << "\" height=\"" << h
          << "\" fill=\"" << kPalette[i % 10] << "\"/>\n";
        o << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << top + ph - h - 4 << "\" text-anchor=\"middle\">"
          << num(std::round(rows[i].median_dice * 1000) / 1000) << "</text>\n";
        std::string label = rows[i].method;
        if (rows[i].level) label += " @" + std::to_string(*rows[i].level);
        o << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
          << escape(label) << "</text>\n";
    }
    o << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">median test Dice</text>\n";
    o << "</svg>\n";
    return o.str();
}

std::string sweep_chart_svg(const std::vector<ResultRow>& rows, const std::string& title) {
    // x: mean annotator Dice of each level (averaged over seeds), y: median test Dice.
    std::map<int, std::vector<double>> noise;
    for (const auto& r : rows) {
        if (r.level) noise[*r.level].push_back(r.annotator_dice);
    }
    std::vector<std::string> order;
    std::map<std::string, std::map<int, std::vector<double>>> dice;
    for (const auto& r : rows) {
        if (!r.level) continue;
        if (!dice.count(r.method)) order.push_back(r.method);
        dice[r.method][*r.level].push_back(r.dice);
    }
    std::vector<Series> series;
    for (const auto& m : order) {
        Series s{m, {}};
        for (const auto& [level, values] : dice[m]) {
            double x = 0.0;
            for (double v : noise[level]) x += v;
            s.points.emplace_back(x / noise[level].size(), median(values));
        }
        std::sort(s.points.begin(), s.points.end());
        series.push_back(std::move(s));
    }
    return line_chart(series, title, "mean annotator Dice vs ground truth", "median test Dice");
}

std::string loss_chart_svg(const std::vector<std::pair<std::string, TrainHistory>>& histories,
                           const std::string& title) {
    std::vector<Series> series;
    for (const auto& [name, h] : histories) {
        Series s{name, {}};
        for (const auto& e : h.epochs) {
            if (e.val_dice) s.points.emplace_back(e.epoch + 1, *e.val_dice);
        }
        if (!s.points.empty()) series.push_back(std::move(s));
    }
    return line_chart(series, title, "epoch", "validation Dice");
}

int worker_count() {
    if (const char* env = std::getenv("NLSG_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v > 0) return static_cast<int>(v);
        throw ConfigError("NLSG_WORKERS must be a positive integer");
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

}  // namespace nlsg
