#include "nlsg/annotator_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "json.hpp"
#include "nlsg/tensor_io.hpp"

namespace nlsg {

namespace {

struct Offset {
    int dx;
    int dy;
};

std::vector<Offset> disk(int radius) {
    std::vector<Offset> out;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            if (dx * dx + dy * dy <= radius * radius) out.push_back({dx, dy});
        }
    }
    return out;
}

LabelMap dilate(const LabelMap& in, int cls, int radius) {
    if (radius == 0) return in;
    const auto se = disk(radius);
    LabelMap out = in;
    const int W = in.width();
    const int H = in.height();
    for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
            if (in.at(w, h) == cls) continue;
            for (const auto& o : se) {
                const int x = w + o.dx;
                const int y = h + o.dy;
                if (x >= 0 && x < W && y >= 0 && y < H && in.at(x, y) == cls) {
                    out.set(w, h, cls);
                    break;
                }
            }
        }
    }
    return out;
}

// Pixels outside the grid count as not belonging to the mask.
LabelMap erode(const LabelMap& in, int cls, int radius) {
    if (radius == 0) return in;
    const auto se = disk(radius);
    LabelMap out = in;
    const int W = in.width();
    const int H = in.height();
    for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
            if (in.at(w, h) != cls) continue;
            for (const auto& o : se) {
                const int x = w + o.dx;
                const int y = h + o.dy;
                if (x < 0 || x >= W || y < 0 || y >= H || in.at(x, y) != cls) {
                    out.set(w, h, 0);
                    break;
                }
            }
        }
    }
    return out;
}

LabelMap fracture(const LabelMap& in, int cls, FractureSpec spec, Rng& rng) {
    LabelMap out = in;
    const int W = in.width();
    const int H = in.height();
    const double half_length = 0.25 * std::min(W, H);
    const double half_width = 0.5 * spec.width;
    for (int s = 0; s < spec.count; ++s) {
        std::vector<int> members;
        for (int p = 0; p < out.pixels(); ++p) {
            if (out[p] == cls) members.push_back(p);
        }
        if (members.empty()) break;
        const int centre = members[rng.uniform_int(members.size())];
        const double cx = centre % W;
        const double cy = centre / W;
        const double angle = rng.uniform(0.0, std::numbers::pi);
        const double dx = std::cos(angle);
        const double dy = std::sin(angle);
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                const double rx = w - cx;
                const double ry = h - cy;
                const double along = rx * dx + ry * dy;
                const double across = -rx * dy + ry * dx;
                if (std::abs(along) <= half_length && std::abs(across) <= half_width && out.at(w, h) == cls) {
                    out.set(w, h, 0);
                }
            }
        }
    }
    return out;
}

}  // namespace

std::string to_string(AnnotatorKind kind) {
    switch (kind) {
        case AnnotatorKind::Good: return "good";
        case AnnotatorKind::Over: return "over";
        case AnnotatorKind::Under: return "under";
        case AnnotatorKind::Wrong: return "wrong";
        case AnnotatorKind::Blank: return "blank";
    }
    return "unknown";
}

AnnotatorKind annotator_kind_from(const std::string& name) {
    for (auto k : {AnnotatorKind::Good, AnnotatorKind::Over, AnnotatorKind::Under, AnnotatorKind::Wrong,
                   AnnotatorKind::Blank}) {
        if (to_string(k) == name) return k;
    }
    throw DomainError("unknown annotator kind '" + name + "'");
}

std::string to_string(LabelRegime regime) { return regime == LabelRegime::Dense ? "dense" : "single_random"; }

LabelRegime label_regime_from(const std::string& name) {
    if (name == "dense") return LabelRegime::Dense;
    if (name == "single_random") return LabelRegime::SingleRandom;
    throw DomainError("unknown label regime '" + name + "'");
}

std::vector<AnnotatorProfile> default_profiles() {
    return {
        {AnnotatorKind::Good, 1, 0, 2, 1},
        {AnnotatorKind::Over, 2, 0, 2, 1},
        {AnnotatorKind::Under, 2, 0, 2, 1},
        {AnnotatorKind::Wrong, 1, 3, 2, 1},
        {AnnotatorKind::Blank, 0, 0, 2, 1},
    };
}

LabelMap morph_op(const LabelMap& labels, int target_class, MorphKind kind, int magnitude, Rng& rng,
                  FractureSpec fracture_spec) {
    if (target_class < 0 || target_class >= labels.classes()) throw DomainError("morph_op: class out of range");
    if (magnitude < 0 || magnitude > std::min(labels.width(), labels.height()) / 2) {
        throw DomainError("morph_op: magnitude " + std::to_string(magnitude) + " exceeds min(W, H) / 2");
    }
    switch (kind) {
        case MorphKind::Dilate: return dilate(labels, target_class, magnitude);
        case MorphKind::Erode: return erode(labels, target_class, magnitude);
        case MorphKind::Fracture: return fracture(labels, target_class, fracture_spec, rng);
        case MorphKind::Blank: return LabelMap(labels.width(), labels.height(), labels.classes());
    }
    return labels;
}

LabelMap apply_profile(const LabelMap& gt, const AnnotatorProfile& profile, Rng& rng) {
    if (profile.magnitude < 0) throw DomainError("apply_profile: negative magnitude");
    const int cls = std::min(profile.target_class, gt.classes() - 1);
    const int m = profile.magnitude;
    switch (profile.kind) {
        case AnnotatorKind::Good: {
            if (m == 0) return gt;
            const bool grow = rng.bernoulli(0.5);
            return morph_op(gt, cls, grow ? MorphKind::Dilate : MorphKind::Erode, m, rng);
        }
        case AnnotatorKind::Over: return morph_op(gt, cls, MorphKind::Dilate, m, rng);
        case AnnotatorKind::Under: return morph_op(gt, cls, MorphKind::Erode, m, rng);
        case AnnotatorKind::Wrong: {
            auto broken = morph_op(gt, cls, MorphKind::Fracture, 0, rng,
                                   {profile.fracture_count, profile.fracture_width});
            return morph_op(broken, cls, MorphKind::Dilate, m, rng);
        }
        case AnnotatorKind::Blank: return morph_op(gt, cls, MorphKind::Blank, 0, rng);
    }
    return gt;
}

std::vector<LabeledImage> synth_shapes(int count, int width, int height, int classes, Rng& rng) {
    if (count < 1) throw DomainError("synth_shapes: count must be positive");
    if (classes < 2) throw DomainError("synth_shapes: need at least two classes");
    std::vector<LabeledImage> out;
    out.reserve(count);
    const double margin = 4.0;
    for (int n = 0; n < count; ++n) {
        LabelMap gt(width, height, classes);
        const int shapes = 1 + static_cast<int>(rng.uniform_int(3));
        for (int s = 0; s < shapes; ++s) {
            const int cls = 1 + static_cast<int>(rng.uniform_int(classes - 1));
            const bool ellipse = rng.bernoulli(0.5);
            const double cx = std::round(rng.uniform(margin, width - 1 - margin));
            const double cy = std::round(rng.uniform(margin, height - 1 - margin));
            const double a = rng.uniform(1.5, 6.5);
            const double b = rng.uniform(1.5, 6.5);
            const double angle = rng.uniform(0.0, std::numbers::pi);
            const double ca = std::cos(angle);
            const double sa = std::sin(angle);
            for (int h = 0; h < height; ++h) {
                for (int w = 0; w < width; ++w) {
                    const double u = (w - cx) * ca + (h - cy) * sa;
                    const double v = -(w - cx) * sa + (h - cy) * ca;
                    const bool inside = ellipse ? (u * u) / (a * a) + (v * v) / (b * b) <= 1.0
                                                : std::abs(u) <= a && std::abs(v) <= b;
                    if (inside) gt.set(w, h, cls);
                }
            }
        }
        ImageTensor image(width, height, 1);
        for (int p = 0; p < gt.pixels(); ++p) {
            const double level = 0.15 + 0.7 * double(gt[p]) / (classes - 1);
            image.pixel(p)[0] = level + 0.12 * rng.normal();
        }
        out.push_back({std::move(image), std::move(gt)});
    }
    return out;
}

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    if (off + 4 > b.size()) throw FormatError("IDX: truncated header");
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
           std::uint32_t(b[off + 3]);
}

}  // namespace

std::vector<LabeledImage> load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                   double threshold, int limit) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw DomainError("load_idx: threshold must lie in (0, 1)");
    const auto img = slurp(images_path);
    const auto lab = slurp(labels_path);
    if (be32(img, 0) != 0x00000803) throw FormatError("IDX: bad image magic in " + images_path.string());
    if (be32(lab, 0) != 0x00000801) throw FormatError("IDX: bad label magic in " + labels_path.string());
    const std::uint32_t n = be32(img, 4);
    const std::uint32_t rows = be32(img, 8);
    const std::uint32_t cols = be32(img, 12);
    if (rows == 0 || cols == 0) throw FormatError("IDX: zero image dimensions");
    if (be32(lab, 4) != n) throw FormatError("IDX: image and label counts differ");
    if (img.size() != 16 + std::size_t(n) * rows * cols) throw FormatError("IDX: image payload size mismatch");
    if (lab.size() != 8 + std::size_t(n)) throw FormatError("IDX: label payload size mismatch");
    const std::uint32_t take = limit < 0 ? n : std::min<std::uint32_t>(n, std::uint32_t(limit));
    std::vector<LabeledImage> out;
    out.reserve(take);
    for (std::uint32_t i = 0; i < take; ++i) {
        ImageTensor image(int(cols), int(rows), 1);
        LabelMap gt(int(cols), int(rows), 2);
        const std::uint8_t* px = img.data() + 16 + std::size_t(i) * rows * cols;
        for (std::uint32_t p = 0; p < rows * cols; ++p) {
            const double v = px[p] / 255.0;
            image.pixel(int(p))[0] = v;
            if (v >= threshold) gt.set_pixel(int(p), 1);
        }
        out.push_back({std::move(image), std::move(gt)});
    }
    return out;
}

ConfusionField build_reference_cms(const LabelMap& gt, const LabelMap& noisy) {
    if (gt.width() != noisy.width() || gt.height() != noisy.height() || gt.classes() != noisy.classes()) {
        throw ShapeError("build_reference_cms: shape mismatch");
    }
    const int L = gt.classes();
    ConfusionField out(gt.width(), gt.height(), L, 1.0 / L);
    for (int p = 0; p < gt.pixels(); ++p) {
        const int j = gt[p];
        for (int i = 0; i < L; ++i) out.at(p, i, j) = (i == noisy[p]) ? 1.0 : 0.0;
    }
    return out;
}

std::vector<std::optional<LabelMap>> Dataset::visible(int n) const {
    std::vector<std::optional<LabelMap>> out(annotators);
    for (int r = 0; r < annotators; ++r) {
        if (available[n][r]) out[r] = noisy[n][r];
    }
    return out;
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
    Dataset out;
    out.classes = classes;
    out.annotators = annotators;
    for (int i : indices) {
        out.images.push_back(images.at(i));
        out.gt.push_back(gt.at(i));
        out.noisy.push_back(noisy.at(i));
        out.available.push_back(available.at(i));
    }
    return out;
}

void Dataset::validate() const {
    const std::size_t n = images.size();
    if (gt.size() != n || noisy.size() != n || available.size() != n) {
        throw ShapeError("Dataset: per-image sequences differ in length");
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto& img = images[i];
        if (gt[i].width() != img.width() || gt[i].height() != img.height() || gt[i].classes() != classes) {
            throw ShapeError("Dataset: ground truth " + std::to_string(i) + " does not match its image");
        }
        if (noisy[i].size() != std::size_t(annotators) || available[i].size() != std::size_t(annotators)) {
            throw ShapeError("Dataset: annotator count mismatch at image " + std::to_string(i));
        }
        bool any = false;
        for (int r = 0; r < annotators; ++r) {
            const auto& y = noisy[i][r];
            if (y.width() != img.width() || y.height() != img.height() || y.classes() != classes) {
                throw ShapeError("Dataset: label of annotator " + std::to_string(r) + " on image " +
                                 std::to_string(i) + " has wrong shape");
            }
            any = any || available[i][r];
        }
        if (!any) throw DomainError("Dataset: image " + std::to_string(i) + " has no available label");
    }
}

Dataset simulate_annotations(std::vector<LabeledImage> data, const std::vector<AnnotatorProfile>& profiles,
                             LabelRegime regime, int classes, const Rng& rng) {
    if (profiles.empty()) throw DomainError("simulate_annotations: no annotator profiles");
    Dataset out;
    out.classes = classes;
    out.annotators = static_cast<int>(profiles.size());
    const int R = out.annotators;
    for (std::size_t n = 0; n < data.size(); ++n) {
        std::vector<LabelMap> labels;
        labels.reserve(R);
        for (int r = 0; r < R; ++r) {
            Rng stream = rng.split(n * 1009 + r);
            labels.push_back(apply_profile(data[n].gt, profiles[r], stream));
        }
        std::vector<bool> avail(R, regime == LabelRegime::Dense);
        if (regime == LabelRegime::SingleRandom) {
            Rng pick = rng.split(n * 1009 + 1000);
            avail[pick.uniform_int(R)] = true;
        }
        out.images.push_back(std::move(data[n].image));
        out.gt.push_back(std::move(data[n].gt));
        out.noisy.push_back(std::move(labels));
        out.available.push_back(std::move(avail));
    }
    out.validate();
    return out;
}

namespace {

void write_split(const std::filesystem::path& dir, const std::string& name, const Dataset& d) {
    if (d.size() == 0) return;
    const int W = d.images[0].width();
    const int H = d.images[0].height();
    const int C = d.images[0].channels();
    const auto N = std::uint32_t(d.size());
    const auto R = std::uint32_t(d.annotators);
    std::vector<double> images;
    std::vector<std::uint8_t> gt;
    std::vector<std::uint8_t> noisy;
    std::vector<std::uint8_t> avail;
    for (int n = 0; n < d.size(); ++n) {
        images.insert(images.end(), d.images[n].values().begin(), d.images[n].values().end());
        gt.insert(gt.end(), d.gt[n].labels().begin(), d.gt[n].labels().end());
        for (std::uint32_t r = 0; r < R; ++r) {
            noisy.insert(noisy.end(), d.noisy[n][r].labels().begin(), d.noisy[n][r].labels().end());
            avail.push_back(d.available[n][r] ? 1 : 0);
        }
    }
    write_tensor(dir / (name + "_images.nlt"),
                 make_f64({N, std::uint32_t(H), std::uint32_t(W), std::uint32_t(C)}, std::move(images)));
    write_tensor(dir / (name + "_gt.nlt"), make_u8({N, std::uint32_t(H), std::uint32_t(W)}, std::move(gt)));
    write_tensor(dir / (name + "_noisy.nlt"),
                 make_u8({N, R, std::uint32_t(H), std::uint32_t(W)}, std::move(noisy)));
    write_tensor(dir / (name + "_available.nlt"), make_u8({N, R}, std::move(avail)));
}

Dataset read_split(const std::filesystem::path& dir, const std::string& name, int classes, int annotators, int count) {
    Dataset d;
    d.classes = classes;
    d.annotators = annotators;
    if (count == 0) return d;
    const auto images = read_tensor(dir / (name + "_images.nlt"));
    const auto gt = read_tensor(dir / (name + "_gt.nlt"));
    const auto noisy = read_tensor(dir / (name + "_noisy.nlt"));
    const auto avail = read_tensor(dir / (name + "_available.nlt"));
    if (images.dims.size() != 4 || images.dtype != DType::F64 || gt.dims.size() != 3 || noisy.dims.size() != 4 ||
        avail.dims.size() != 2 || images.dims[0] != std::uint32_t(count) || gt.dims[0] != std::uint32_t(count) ||
        noisy.dims[0] != std::uint32_t(count) || noisy.dims[1] != std::uint32_t(annotators) ||
        avail.dims[1] != std::uint32_t(annotators)) {
        throw FormatError("dataset split '" + name + "': tensor shapes disagree with manifest");
    }
    const int H = int(images.dims[1]);
    const int W = int(images.dims[2]);
    const int C = int(images.dims[3]);
    const std::size_t P = std::size_t(W) * H;
    for (int n = 0; n < count; ++n) {
        std::vector<double> px(images.f64.begin() + std::ptrdiff_t(n * P * C),
                               images.f64.begin() + std::ptrdiff_t((n + 1) * P * C));
        d.images.emplace_back(W, H, C, std::move(px));
        d.gt.emplace_back(W, H, classes,
                          std::vector<std::uint8_t>(gt.u8.begin() + std::ptrdiff_t(n * P),
                                                    gt.u8.begin() + std::ptrdiff_t((n + 1) * P)));
        std::vector<LabelMap> labels;
        std::vector<bool> av;
        for (int r = 0; r < annotators; ++r) {
            const std::size_t off = (std::size_t(n) * annotators + r) * P;
            labels.emplace_back(W, H, classes,
                                std::vector<std::uint8_t>(noisy.u8.begin() + std::ptrdiff_t(off),
                                                          noisy.u8.begin() + std::ptrdiff_t(off + P)));
            av.push_back(avail.u8[std::size_t(n) * annotators + r] != 0);
        }
        d.noisy.push_back(std::move(labels));
        d.available.push_back(std::move(av));
    }
    d.validate();
    return d;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& train, const Dataset& test,
                  const std::string& manifest_extra_json) {
    std::filesystem::create_directories(dir);
    const Dataset& ref = train.size() > 0 ? train : test;
    if (ref.size() == 0) throw DomainError("save_dataset: both splits are empty");
    nlohmann::ordered_json m;
    m["format"] = "nlsg-dataset";
    m["version"] = 1;
    m["width"] = ref.images[0].width();
    m["height"] = ref.images[0].height();
    m["channels"] = ref.images[0].channels();
    m["classes"] = ref.classes;
    std::vector<int> ids(ref.annotators);
    for (int r = 0; r < ref.annotators; ++r) ids[r] = r;
    m["annotator_ids"] = ids;
    m["train_count"] = train.size();
    m["test_count"] = test.size();
    m["extra"] = nlohmann::ordered_json::parse(manifest_extra_json);
    write_split(dir, "train", train);
    write_split(dir, "test", test);
    write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

DatasetSplits load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw FormatError("dataset: missing manifest.json in " + dir.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    if (m.value("format", "") != "nlsg-dataset" || m.value("version", 0) != 1) {
        throw FormatError("dataset manifest: unsupported format or version");
    }
    const int classes = m.at("classes").get<int>();
    const int annotators = static_cast<int>(m.at("annotator_ids").size());
    DatasetSplits s;
    s.train = read_split(dir, "train", classes, annotators, m.at("train_count").get<int>());
    s.test = read_split(dir, "test", classes, annotators, m.at("test_count").get<int>());
    return s;
}

}  // namespace nlsg
