#include "nlsg/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nlsg/tensor_io.hpp"

namespace nlsg {

namespace {

// ---------------------------------------------------------------------------
// Convolution kernels. Activations are W x H x C fields, pixel-major.

void conv3x3_forward(const RealField& in, std::span<const double> weight, std::span<const double> bias,
                     int out_ch, RealField& out) {
    const int W = in.width();
    const int H = in.height();
    const int C = in.depth();
    out = RealField(W, H, out_ch);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            auto dst = out.pixel(y * W + x);
            std::copy(bias.begin(), bias.end(), dst.begin());
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= H) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = x + kx - 1;
                    if (sx < 0 || sx >= W) continue;
                    auto src = in.pixel(sy * W + sx);
                    const double* k = weight.data() + std::size_t(ky * 3 + kx) * out_ch * C;
                    for (int o = 0; o < out_ch; ++o) {
                        const double* ko = k + std::size_t(o) * C;
                        double acc = 0.0;
                        for (int c = 0; c < C; ++c) acc += ko[c] * src[c];
                        dst[o] += acc;
                    }
                }
            }
        }
    }
}

void conv3x3_backward(const RealField& in, std::span<const double> weight, const RealField& dout,
                      std::span<double> dweight, std::span<double> dbias, RealField* din) {
    const int W = in.width();
    const int H = in.height();
    const int C = in.depth();
    const int out_ch = dout.depth();
    if (din) *din = RealField(W, H, C);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            auto g = dout.pixel(y * W + x);
            for (int o = 0; o < out_ch; ++o) dbias[o] += g[o];
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= H) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = x + kx - 1;
                    if (sx < 0 || sx >= W) continue;
                    auto src = in.pixel(sy * W + sx);
                    const std::size_t base = std::size_t(ky * 3 + kx) * out_ch * C;
                    double* dk = dweight.data() + base;
                    const double* k = weight.data() + base;
                    for (int o = 0; o < out_ch; ++o) {
                        const double go = g[o];
                        if (go == 0.0) continue;
                        double* dko = dk + std::size_t(o) * C;
                        for (int c = 0; c < C; ++c) dko[c] += go * src[c];
                    }
                    if (din) {
                        auto dsrc = din->pixel(sy * W + sx);
                        for (int o = 0; o < out_ch; ++o) {
                            const double go = g[o];
                            if (go == 0.0) continue;
                            const double* ko = k + std::size_t(o) * C;
                            for (int c = 0; c < C; ++c) dsrc[c] += go * ko[c];
                        }
                    }
                }
            }
        }
    }
}

// 1x1 head: out[o] = b[o] + sum_f w[o][f] * h[f].
void dense_forward(const RealField& h, std::span<const double> weight, std::span<const double> bias, int out_ch,
                   RealField& out) {
    const int F = h.depth();
    out = RealField(h.width(), h.height(), out_ch);
    for (int p = 0; p < h.pixels(); ++p) {
        auto src = h.pixel(p);
        auto dst = out.pixel(p);
        for (int o = 0; o < out_ch; ++o) {
            const double* w = weight.data() + std::size_t(o) * F;
            double acc = bias[o];
            for (int f = 0; f < F; ++f) acc += w[f] * src[f];
            dst[o] = acc;
        }
    }
}

void dense_backward(const RealField& h, std::span<const double> weight, const RealField& dout,
                    std::span<double> dweight, std::span<double> dbias, RealField& dh) {
    const int F = h.depth();
    const int out_ch = dout.depth();
    for (int p = 0; p < h.pixels(); ++p) {
        auto src = h.pixel(p);
        auto g = dout.pixel(p);
        auto dsrc = dh.pixel(p);
        for (int o = 0; o < out_ch; ++o) {
            const double go = g[o];
            if (go == 0.0) continue;
            dbias[o] += go;
            const double* w = weight.data() + std::size_t(o) * F;
            double* dw = dweight.data() + std::size_t(o) * F;
            for (int f = 0; f < F; ++f) {
                dw[f] += go * src[f];
                dsrc[f] += go * w[f];
            }
        }
    }
}

// Softmax down each column of a row-major L x L logit matrix.
void column_softmax(const double* logits, int L, double* out) {
    for (int j = 0; j < L; ++j) {
        double peak = logits[j];
        for (int i = 1; i < L; ++i) peak = std::max(peak, logits[i * L + j]);
        double sum = 0.0;
        for (int i = 0; i < L; ++i) {
            const double e = std::exp(logits[i * L + j] - peak);
            out[i * L + j] = e;
            sum += e;
        }
        for (int i = 0; i < L; ++i) out[i * L + j] /= sum;
    }
}

// Low-rank logits u = B1 B2^T + diag * I from factor rows stored [i][m].
void low_rank_logits(const double* b1, const double* b2, int L, int rank, double diag, double* u) {
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
            double acc = (i == j) ? diag : 0.0;
            for (int m = 0; m < rank; ++m) acc += b1[i * rank + m] * b2[j * rank + m];
            u[i * L + j] = acc;
        }
    }
}

struct TrunkTrace {
    std::vector<RealField> pre;
    std::vector<RealField> post;
};

struct ForwardState {
    TrunkTrace trunk;
    RealField ann_out;
    ModelOutput output;
};

void run_forward(const ModelParams& params, const ImageTensor& image, ForwardState& st) {
    const auto& arch = params.arch;
    if (image.channels() != arch.in_channels) {
        throw ShapeError("forward: image has " + std::to_string(image.channels()) + " channels, model expects " +
                         std::to_string(arch.in_channels));
    }
    const int L = arch.classes;
    const int R = arch.annotators;
    const int F = arch.trunk_channels;
    st.trunk.pre.resize(arch.trunk_layers);
    st.trunk.post.resize(arch.trunk_layers);
    const RealField* input = &image;
    for (int t = 0; t < arch.trunk_layers; ++t) {
        conv3x3_forward(*input, params.trunk_weight[t], params.trunk_bias[t], F, st.trunk.pre[t]);
        st.trunk.post[t] = st.trunk.pre[t];
        for (double& v : st.trunk.post[t].values()) v = std::max(v, 0.0);
        input = &st.trunk.post[t];
    }
    const RealField& h = st.trunk.post.back();
    auto& out = st.output;
    dense_forward(h, params.seg_weight, params.seg_bias, L, out.seg_logits);
    out.seg_probs = softmax_pixelwise(out.seg_logits);
    out.cms.clear();
    out.ann_probs.clear();
    if (R == 0) return;

    dense_forward(h, params.ann_weight, params.ann_bias, arch.ann_head_channels(), st.ann_out);
    const int P = image.pixels();
    const int block = arch.ann_head_channels() / R;
    std::vector<double> logits(std::size_t(L) * L);
    for (int r = 0; r < R; ++r) {
        ConfusionField cm(image.width(), image.height(), L);
        for (int p = 0; p < P; ++p) {
            const double* o = st.ann_out.pixel(p).data() + std::size_t(r) * block;
            if (arch.cm_mode == CmMode::Full) {
                column_softmax(o, L, cm.matrix(p).data());
            } else {
                low_rank_logits(o, o + L * arch.rank, L, arch.rank, params.diag_bias[r], logits.data());
                column_softmax(logits.data(), L, cm.matrix(p).data());
            }
        }
        out.ann_probs.push_back(cm_apply(cm, out.seg_probs));
        out.cms.push_back(std::move(cm));
    }
}

void check_labels(const ModelArch& arch, const ImageTensor& image, std::span<const std::optional<LabelMap>> labels) {
    if (labels.size() != std::size_t(arch.annotators)) {
        throw ShapeError("loss: expected " + std::to_string(arch.annotators) + " label slots, got " +
                         std::to_string(labels.size()));
    }
    bool any = false;
    for (const auto& l : labels) {
        if (!l) continue;
        any = true;
        if (l->width() != image.width() || l->height() != image.height() || l->classes() != arch.classes) {
            throw ShapeError("loss: label map shape does not match the image");
        }
    }
    if (!any) throw DomainError("loss: every annotator label is absent");
}

enum class ObjectiveKind { Annotators, Soft, FixedCms };

struct Objective {
    ObjectiveKind kind = ObjectiveKind::Annotators;
    std::span<const std::optional<LabelMap>> labels;
    double lambda = 0.0;
    const ProbabilityMap* target = nullptr;
    std::span<const ConfusionField> cms;
};

void check_finite(const ModelParams& grads) {
    for (const auto& g : param_groups(grads)) {
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            if (!std::isfinite(g.values[i])) {
                throw DomainError("non-finite gradient at " + g.name + "[" + std::to_string(i) + "]");
            }
        }
    }
}

ModelParams run_backward(const ModelParams& params, const ImageTensor& image, const Objective& obj,
                         double* loss_out) {
    const auto& arch = params.arch;
    const int L = arch.classes;
    const int R = arch.annotators;
    const int F = arch.trunk_channels;
    ForwardState st;
    run_forward(params, image, st);
    const auto& out = st.output;
    const int P = image.pixels();
    const double inv_p = 1.0 / P;

    ModelParams grads = params.zeros_like();
    RealField d_seg_logits(image.width(), image.height(), L);
    RealField d_ann(image.width(), image.height(), std::max(arch.ann_head_channels(), 1));
    std::vector<double> gp(L);
    std::vector<double> ga(std::size_t(L) * L);
    std::vector<double> du(std::size_t(L) * L);
    double loss = 0.0;

    if (obj.kind == ObjectiveKind::Soft) {
        const auto& t = *obj.target;
        for (int p = 0; p < P; ++p) {
            auto prob = out.seg_probs.pixel(p);
            auto tp = t.pixel(p);
            auto ds = d_seg_logits.pixel(p);
            double mass = 0.0;
            for (int l = 0; l < L; ++l) {
                mass += tp[l];
                if (tp[l] > 0.0) loss -= tp[l] * std::log(prob[l]) * inv_p;
            }
            for (int l = 0; l < L; ++l) ds[l] = (prob[l] * mass - tp[l]) * inv_p;
        }
    } else {
        const int block = R > 0 ? arch.ann_head_channels() / R : 0;
        for (int p = 0; p < P; ++p) {
            auto prob = out.seg_probs.pixel(p);
            std::fill(gp.begin(), gp.end(), 0.0);
            for (int r = 0; r < R; ++r) {
                if (!obj.labels[r]) continue;
                const int y = (*obj.labels[r])[p];
                const bool fixed = obj.kind == ObjectiveKind::FixedCms;
                auto a = fixed ? obj.cms[r].matrix(p) : out.cms[r].matrix(p);
                double q = 0.0;
                for (int j = 0; j < L; ++j) q += a[y * L + j] * prob[j];
                loss -= std::log(q) * inv_p;
                const double gq = -inv_p / q;
                for (int j = 0; j < L; ++j) gp[j] += gq * a[y * L + j];
                if (fixed) continue;

                for (int i = 0; i < L; ++i) {
                    loss += (obj.lambda * inv_p) * a[i * L + i];
                }
                std::fill(ga.begin(), ga.end(), 0.0);
                for (int j = 0; j < L; ++j) ga[y * L + j] = gq * prob[j];
                for (int i = 0; i < L; ++i) ga[i * L + i] += obj.lambda * inv_p;
                // Column softmax backward.
                for (int j = 0; j < L; ++j) {
                    double dot = 0.0;
                    for (int i = 0; i < L; ++i) dot += a[i * L + j] * ga[i * L + j];
                    for (int i = 0; i < L; ++i) du[i * L + j] = a[i * L + j] * (ga[i * L + j] - dot);
                }
                double* dst = d_ann.pixel(p).data() + std::size_t(r) * block;
                if (arch.cm_mode == CmMode::Full) {
                    std::copy(du.begin(), du.end(), dst);
                } else {
                    const int k = arch.rank;
                    const double* o = st.ann_out.pixel(p).data() + std::size_t(r) * block;
                    const double* b1 = o;
                    const double* b2 = o + L * k;
                    double* db1 = dst;
                    double* db2 = dst + L * k;
                    for (int i = 0; i < L; ++i) {
                        for (int j = 0; j < L; ++j) {
                            const double g = du[i * L + j];
                            for (int m = 0; m < k; ++m) {
                                db1[i * k + m] += g * b2[j * k + m];
                                db2[j * k + m] += g * b1[i * k + m];
                            }
                        }
                        grads.diag_bias[r] += du[i * L + i];
                    }
                }
            }
            // Softmax backward for the segmentation head.
            double dot = 0.0;
            for (int l = 0; l < L; ++l) dot += prob[l] * gp[l];
            auto ds = d_seg_logits.pixel(p);
            for (int l = 0; l < L; ++l) ds[l] = prob[l] * (gp[l] - dot);
        }
    }

    const RealField& h = st.trunk.post.back();
    RealField dh(h.width(), h.height(), F);
    dense_backward(h, params.seg_weight, d_seg_logits, grads.seg_weight, grads.seg_bias, dh);
    if (obj.kind == ObjectiveKind::Annotators && R > 0) {
        dense_backward(h, params.ann_weight, d_ann, grads.ann_weight, grads.ann_bias, dh);
    }
    for (int t = arch.trunk_layers - 1; t >= 0; --t) {
        const auto& pre = st.trunk.pre[t];
        auto g = dh.values();
        auto z = pre.values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!(z[i] > 0.0)) g[i] = 0.0;
        }
        const RealField& in = t == 0 ? static_cast<const RealField&>(image) : st.trunk.post[t - 1];
        RealField din;
        conv3x3_backward(in, params.trunk_weight[t], dh, grads.trunk_weight[t], grads.trunk_bias[t],
                         t == 0 ? nullptr : &din);
        if (t > 0) dh = std::move(din);
    }
    check_finite(grads);
    if (loss_out) *loss_out = loss;
    return grads;
}

}  // namespace

std::string to_string(CmMode mode) { return mode == CmMode::Full ? "full" : "low_rank"; }

CmMode cm_mode_from(const std::string& name) {
    if (name == "full") return CmMode::Full;
    if (name == "low_rank") return CmMode::LowRank;
    throw DomainError("unknown confusion-matrix mode '" + name + "'");
}

int ModelArch::ann_head_channels() const {
    if (annotators == 0) return 0;
    return cm_mode == CmMode::Full ? annotators * classes * classes : annotators * 2 * classes * rank;
}

void ModelArch::validate() const {
    if (in_channels < 1) throw DomainError("arch: in_channels must be positive");
    if (trunk_layers < 1) throw DomainError("arch: trunk_layers must be at least 1");
    if (trunk_channels < 1) throw DomainError("arch: trunk_channels must be positive");
    if (classes < 2 || classes > kMaxClasses) throw DomainError("arch: classes must lie in [2, 16]");
    if (annotators < 0) throw DomainError("arch: negative annotator count");
    if (cm_mode == CmMode::LowRank && (rank < 1 || rank >= classes)) {
        throw DomainError("arch: low-rank factor rank must lie in [1, L)");
    }
}

double identity_diag_logit(int classes) { return std::log(1000.0 * classes); }

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    for (auto& g : param_groups(z)) std::fill(g.values.begin(), g.values.end(), 0.0);
    return z;
}

std::vector<ParamGroup> param_groups(ModelParams& params) {
    std::vector<ParamGroup> out;
    for (std::size_t t = 0; t < params.trunk_weight.size(); ++t) {
        out.push_back({"trunk." + std::to_string(t) + ".weight", params.trunk_weight[t], ParamRole::Trunk});
        out.push_back({"trunk." + std::to_string(t) + ".bias", params.trunk_bias[t], ParamRole::Trunk});
    }
    out.push_back({"seg_head.weight", params.seg_weight, ParamRole::SegHead});
    out.push_back({"seg_head.bias", params.seg_bias, ParamRole::SegHead});
    if (params.arch.annotators > 0) {
        out.push_back({"ann_head.weight", params.ann_weight, ParamRole::AnnHead});
        out.push_back({"ann_head.bias", params.ann_bias, ParamRole::AnnHead});
        if (params.arch.cm_mode == CmMode::LowRank) {
            out.push_back({"ann_head.diag_bias", params.diag_bias, ParamRole::AnnHead});
        }
    }
    return out;
}

std::vector<ConstParamGroup> param_groups(const ModelParams& params) {
    std::vector<ConstParamGroup> out;
    for (auto& g : param_groups(const_cast<ModelParams&>(params))) out.push_back({g.name, g.values, g.role});
    return out;
}

std::size_t param_count(const ModelParams& params) {
    std::size_t n = 0;
    for (const auto& g : param_groups(params)) n += g.values.size();
    return n;
}

ModelParams init_params(const ModelArch& arch, Rng& rng) {
    arch.validate();
    ModelParams p;
    p.arch = arch;
    const int F = arch.trunk_channels;
    auto fill_uniform = [&rng](std::vector<double>& v, std::size_t n, double scale) {
        v.resize(n);
        for (double& x : v) x = rng.uniform(-scale, scale);
    };
    int in = arch.in_channels;
    for (int t = 0; t < arch.trunk_layers; ++t) {
        std::vector<double> w;
        fill_uniform(w, std::size_t(9) * F * in, std::sqrt(6.0 / (9.0 * in)));
        p.trunk_weight.push_back(std::move(w));
        p.trunk_bias.emplace_back(F, 0.0);
        in = F;
    }
    fill_uniform(p.seg_weight, std::size_t(arch.classes) * F, std::sqrt(3.0 / F));
    p.seg_bias.assign(arch.classes, 0.0);
    const int K = arch.ann_head_channels();
    if (arch.annotators > 0) {
        fill_uniform(p.ann_weight, std::size_t(K) * F, 0.1 * std::sqrt(3.0 / F));
        p.ann_bias.assign(K, 0.0);
        const double diag = identity_diag_logit(arch.classes);
        if (arch.cm_mode == CmMode::Full) {
            const int L = arch.classes;
            for (int r = 0; r < arch.annotators; ++r) {
                for (int i = 0; i < L; ++i) p.ann_bias[std::size_t(r) * L * L + i * L + i] = diag;
            }
        } else {
            p.diag_bias.assign(arch.annotators, diag);
        }
    }
    return p;
}

ModelOutput forward(const ModelParams& params, const ImageTensor& image) {
    ForwardState st;
    run_forward(params, image, st);
    return std::move(st.output);
}

ConfusionField low_rank_expand(const RealField& b1, const RealField& b2, double diag_logit, int classes) {
    if (b1.width() != b2.width() || b1.height() != b2.height() || b1.depth() != b2.depth()) {
        throw ShapeError("low_rank_expand: factor shapes differ");
    }
    if (classes < 2 || b1.depth() % classes != 0 || b1.depth() == 0) {
        throw ShapeError("low_rank_expand: factor depth is not a multiple of the class count");
    }
    const int rank = b1.depth() / classes;
    ConfusionField out(b1.width(), b1.height(), classes);
    std::vector<double> logits(std::size_t(classes) * classes);
    for (int p = 0; p < b1.pixels(); ++p) {
        low_rank_logits(b1.pixel(p).data(), b2.pixel(p).data(), classes, rank, diag_logit, logits.data());
        column_softmax(logits.data(), classes, out.matrix(p).data());
    }
    return out;
}

Complexity complexity_estimate(int width, int height, int classes, CmMode mode, int rank) {
    if (width < 1 || height < 1 || classes < 1) throw DomainError("complexity_estimate: dims must be positive");
    const std::int64_t wh = std::int64_t(width) * height;
    const std::int64_t L = classes;
    if (mode == CmMode::Full) return {wh * L * L, wh * (2 * L - 1) * L};
    if (rank < 1) throw DomainError("complexity_estimate: rank must be positive");
    const std::int64_t l = rank;
    // 4L(l - 1/4) - l = 4Ll - L - l
    return {2 * wh * L * l, wh * (4 * L * l - L - l)};
}

double LossBreakdown::ce_sum() const {
    double s = 0.0;
    for (std::size_t r = 0; r < ce_per_annotator.size(); ++r) {
        if (present[r]) s += ce_per_annotator[r];
    }
    return s;
}

double LossBreakdown::trace_sum() const {
    double s = 0.0;
    for (std::size_t r = 0; r < trace_per_annotator.size(); ++r) {
        if (present[r]) s += trace_per_annotator[r];
    }
    return s;
}

LossBreakdown loss_total(const ModelOutput& output, std::span<const std::optional<LabelMap>> labels, double lambda) {
    const int R = static_cast<int>(output.cms.size());
    if (labels.size() != std::size_t(R)) throw ShapeError("loss_total: one label slot per annotator required");
    LossBreakdown b;
    b.lambda = lambda;
    b.ce_per_annotator.assign(R, 0.0);
    b.trace_per_annotator.assign(R, 0.0);
    b.present.assign(R, false);
    bool any = false;
    const int P = output.seg_probs.pixels();
    for (int r = 0; r < R; ++r) {
        if (!labels[r]) continue;
        any = true;
        const auto& y = *labels[r];
        if (y.width() != output.seg_probs.width() || y.height() != output.seg_probs.height()) {
            throw ShapeError("loss_total: label map shape mismatch");
        }
        double ce = 0.0;
        for (int p = 0; p < P; ++p) ce -= std::log(output.ann_probs[r].pixel(p)[y[p]]);
        b.present[r] = true;
        b.ce_per_annotator[r] = ce / P;
        b.trace_per_annotator[r] = trace_mean(output.cms[r]);
        b.total += b.ce_per_annotator[r] + lambda * b.trace_per_annotator[r];
    }
    if (!any) throw DomainError("loss_total: every annotator label is absent");
    return b;
}

ModelParams backward(const ModelParams& params, const ImageTensor& image,
                     std::span<const std::optional<LabelMap>> labels, double lambda, LossBreakdown* loss) {
    check_labels(params.arch, image, labels);
    Objective obj;
    obj.kind = ObjectiveKind::Annotators;
    obj.labels = labels;
    obj.lambda = lambda;
    if (loss) {
        auto grads = run_backward(params, image, obj, nullptr);
        *loss = loss_total(forward(params, image), labels, lambda);
        return grads;
    }
    return run_backward(params, image, obj, nullptr);
}

double supervised_loss(const ModelOutput& output, const ProbabilityMap& target) {
    if (target.width() != output.seg_probs.width() || target.height() != output.seg_probs.height() ||
        target.classes() != output.seg_probs.classes()) {
        throw ShapeError("supervised_loss: target shape mismatch");
    }
    double loss = 0.0;
    const int P = target.pixels();
    for (int p = 0; p < P; ++p) {
        auto prob = output.seg_probs.pixel(p);
        auto t = target.pixel(p);
        for (int l = 0; l < target.classes(); ++l) {
            if (t[l] > 0.0) loss -= t[l] * std::log(prob[l]);
        }
    }
    return loss / P;
}

ModelParams backward_supervised(const ModelParams& params, const ImageTensor& image, const ProbabilityMap& target,
                                double* loss) {
    if (target.width() != image.width() || target.height() != image.height() ||
        target.classes() != params.arch.classes) {
        throw ShapeError("backward_supervised: target shape mismatch");
    }
    Objective obj;
    obj.kind = ObjectiveKind::Soft;
    obj.target = &target;
    return run_backward(params, image, obj, loss);
}

double fixed_cm_loss(const ModelOutput& output, std::span<const std::optional<LabelMap>> labels,
                     std::span<const ConfusionField> cms) {
    if (labels.size() != cms.size()) throw ShapeError("fixed_cm_loss: one confusion field per label slot");
    double loss = 0.0;
    const int P = output.seg_probs.pixels();
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (!labels[r]) continue;
        const auto q = cm_apply(cms[r], output.seg_probs);
        for (int p = 0; p < P; ++p) loss -= std::log(q.pixel(p)[(*labels[r])[p]]);
    }
    return loss / P;
}

ModelParams backward_fixed_cms(const ModelParams& params, const ImageTensor& image,
                               std::span<const std::optional<LabelMap>> labels, std::span<const ConfusionField> cms,
                               double* loss) {
    check_labels(params.arch, image, labels);
    if (cms.size() != labels.size()) throw ShapeError("backward_fixed_cms: one confusion field per label slot");
    for (const auto& cm : cms) {
        if (cm.width() != image.width() || cm.height() != image.height() || cm.classes() != params.arch.classes) {
            throw ShapeError("backward_fixed_cms: confusion field shape mismatch");
        }
    }
    Objective obj;
    obj.kind = ObjectiveKind::FixedCms;
    obj.labels = labels;
    obj.cms = cms;
    return run_backward(params, image, obj, loss);
}

double min_abs_preactivation(const ModelParams& params, const ImageTensor& image) {
    ForwardState st;
    run_forward(params, image, st);
    double m = INFINITY;
    for (const auto& z : st.trunk.pre) {
        for (double v : z.values()) m = std::min(m, std::abs(v));
    }
    return m;
}

std::string arch_to_json(const ModelArch& arch) {
    nlohmann::ordered_json j;
    j["format"] = "nlsg-checkpoint";
    j["version"] = 1;
    j["in_channels"] = arch.in_channels;
    j["trunk_layers"] = arch.trunk_layers;
    j["trunk_channels"] = arch.trunk_channels;
    j["classes"] = arch.classes;
    j["annotators"] = arch.annotators;
    j["cm_mode"] = to_string(arch.cm_mode);
    j["rank"] = arch.rank;
    return j.dump(2) + "\n";
}

ModelArch arch_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.value("format", "") != "nlsg-checkpoint" || j.value("version", 0) != 1) {
            throw FormatError("checkpoint: unsupported format or version");
        }
        ModelArch a;
        a.in_channels = j.at("in_channels").get<int>();
        a.trunk_layers = j.at("trunk_layers").get<int>();
        a.trunk_channels = j.at("trunk_channels").get<int>();
        a.classes = j.at("classes").get<int>();
        a.annotators = j.at("annotators").get<int>();
        a.cm_mode = cm_mode_from(j.at("cm_mode").get<std::string>());
        a.rank = j.at("rank").get<int>();
        a.validate();
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint arch: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params) {
    std::filesystem::create_directories(dir);
    for (const auto& g : param_groups(params)) {
        write_tensor(dir / (g.name + ".nlt"),
                     make_f64({std::uint32_t(g.values.size())}, std::vector<double>(g.values.begin(), g.values.end())));
    }
    write_file_atomic(dir / "arch.json", arch_to_json(params.arch));
}

ModelParams load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "arch.json");
    if (!in) throw FormatError("checkpoint: missing arch.json in " + dir.string());
    std::stringstream ss;
    ss << in.rdbuf();
    Rng unused(0);
    ModelParams params = init_params(arch_from_json(ss.str()), unused);
    for (auto& g : param_groups(params)) {
        const auto t = read_tensor(dir / (g.name + ".nlt"));
        if (t.dtype != DType::F64 || t.f64.size() != g.values.size()) {
            throw FormatError("checkpoint: tensor " + g.name + " has the wrong size");
        }
        std::copy(t.f64.begin(), t.f64.end(), g.values.begin());
    }
    return params;
}

}  // namespace nlsg
