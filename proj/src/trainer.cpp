#include "nlsg/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "nlsg/theory.hpp"

namespace nlsg {

namespace {

// Horizontal / vertical flip of a pixel index.
int flipped(int p, int W, int H, bool fh, bool fv) {
    int x = p % W;
    int y = p / W;
    if (fh) x = W - 1 - x;
    if (fv) y = H - 1 - y;
    return y * W + x;
}

template <class Field>
Field flip_field(const Field& in, bool fh, bool fv) {
    if (!fh && !fv) return in;
    Field out = in;
    for (int p = 0; p < in.pixels(); ++p) {
        auto src = in.pixel(p);
        auto dst = out.pixel(flipped(p, in.width(), in.height(), fh, fv));
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return out;
}

LabelMap flip_labels(const LabelMap& in, bool fh, bool fv) {
    if (!fh && !fv) return in;
    LabelMap out = in;
    for (int p = 0; p < in.pixels(); ++p) out.set_pixel(flipped(p, in.width(), in.height(), fh, fv), in[p]);
    return out;
}

ConfusionField flip_cms(const ConfusionField& in, bool fh, bool fv) {
    if (!fh && !fv) return in;
    ConfusionField out = in;
    for (int p = 0; p < in.pixels(); ++p) {
        auto src = in.matrix(p);
        auto dst = out.matrix(flipped(p, in.width(), in.height(), fh, fv));
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return out;
}

enum class Supervision { Annotators, Soft, FixedCms };

struct Sources {
    Supervision kind = Supervision::Annotators;
    const std::vector<ProbabilityMap>* targets = nullptr;
    const std::vector<std::vector<ConfusionField>>* cms = nullptr;
};

struct StepLoss {
    double total = 0.0;
    double ce = 0.0;
    double trace = 0.0;
};

class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, const ModelParams& shape) : cfg_(cfg) {
        if (cfg.optimizer == OptimizerKind::AdamDefaults) {
            m_ = shape.zeros_like();
            v_ = shape.zeros_like();
        }
    }

    void step(ModelParams& params, const ModelParams& grads, bool freeze_ann_head) {
        ++t_;
        auto p_groups = param_groups(params);
        const auto g_groups = param_groups(grads);
        if (cfg_.optimizer == OptimizerKind::Sgd) {
            for (std::size_t gi = 0; gi < p_groups.size(); ++gi) {
                if (freeze_ann_head && p_groups[gi].role == ParamRole::AnnHead) continue;
                for (std::size_t k = 0; k < p_groups[gi].values.size(); ++k) {
                    p_groups[gi].values[k] -= cfg_.learning_rate * g_groups[gi].values[k];
                }
            }
            return;
        }
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        auto m_groups = param_groups(m_);
        auto v_groups = param_groups(v_);
        const double c1 = 1.0 - std::pow(b1, t_);
        const double c2 = 1.0 - std::pow(b2, t_);
        for (std::size_t gi = 0; gi < p_groups.size(); ++gi) {
            if (freeze_ann_head && p_groups[gi].role == ParamRole::AnnHead) continue;
            auto p = p_groups[gi].values;
            auto g = g_groups[gi].values;
            auto m = m_groups[gi].values;
            auto v = v_groups[gi].values;
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = b1 * m[k] + (1 - b1) * g[k];
                v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k];
                p[k] -= cfg_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
            }
        }
    }

private:
    TrainConfig cfg_;
    ModelParams m_;
    ModelParams v_;
    long t_ = 0;
};

void accumulate(ModelParams& acc, const ModelParams& g, double weight) {
    auto a = param_groups(acc);
    const auto b = param_groups(g);
    for (std::size_t gi = 0; gi < a.size(); ++gi) {
        for (std::size_t k = 0; k < a[gi].values.size(); ++k) a[gi].values[k] += weight * b[gi].values[k];
    }
}

double val_dice(const ModelParams& params, const Dataset& data, const std::vector<int>& idx) {
    double sum = 0.0;
    for (int n : idx) sum += mean_foreground_dice(argmax(forward(params, data.images[n]).seg_probs), data.gt[n]);
    return sum / idx.size();
}

double val_cm_rmse(const ModelParams& params, const Dataset& data, const std::vector<int>& idx) {
    CmErrorAccumulator acc;
    for (int n : idx) {
        const auto out = forward(params, data.images[n]);
        for (int r = 0; r < data.annotators; ++r) {
            acc.add(out.cms[r], build_reference_cms(data.gt[n], data.noisy[n][r]), data.gt[n]);
        }
    }
    return acc.rmse(CmErrorMode::TrueColumn);
}

double trace_over(const ModelParams& params, const Dataset& data, const std::vector<int>& idx) {
    double sum = 0.0;
    for (int n : idx) {
        for (const auto& cm : forward(params, data.images[n]).cms) sum += trace_mean(cm);
    }
    return sum / (double(idx.size()) * params.arch.annotators);
}

TrainResult run_training(const Dataset& data, const ModelArch& arch, const TrainConfig& cfg, const Sources& src) {
    cfg.validate();
    arch.validate();
    data.validate();
    if (data.size() == 0) throw DomainError("train: empty dataset");
    if (data.images[0].channels() != arch.in_channels) throw ShapeError("train: image channels differ from arch");
    if (data.classes != arch.classes) throw ShapeError("train: dataset and arch disagree on the class count");
    const bool annotator_model = src.kind == Supervision::Annotators;
    if (annotator_model && arch.annotators != data.annotators) {
        throw ShapeError("train: arch annotator count differs from the dataset");
    }
    if (src.kind == Supervision::Soft && arch.annotators != 0) {
        throw DomainError("train_supervised: the architecture must have no annotator head");
    }

    const Rng root(cfg.seed);
    Rng init_rng = root.split(1);
    TrainResult result;
    result.params = init_params(arch, init_rng);
    auto [train_idx, val_idx] = validation_split(data.size(), cfg.validation_fraction, cfg.seed);

    Optimizer opt(cfg, result.params);
    ModelParams grads_sum = result.params.zeros_like();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool warm = epoch < cfg.warmup_epochs;
        const bool freeze = warm && annotator_model && cfg.warmup_mode == WarmupMode::BiasInit;
        const double lambda = (warm && cfg.warmup_mode == WarmupMode::NegativeTrace) ? -cfg.lambda : cfg.lambda;
        Rng erng = root.split(1000 + epoch);
        std::vector<int> order = train_idx;
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            std::swap(order[i], order[erng.uniform_int(i + 1)]);
        }
        const ModelParams epoch_start = result.params;
        EpochRecord rec;
        rec.epoch = epoch;
        try {
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(order.size(), start + cfg.batch_size);
                const double weight = 1.0 / double(end - start);
                grads_sum = result.params.zeros_like();
                for (std::size_t b = start; b < end; ++b) {
                    const int n = order[b];
                    const bool fh = cfg.augment_flip && erng.bernoulli(0.5);
                    const bool fv = cfg.augment_flip && erng.bernoulli(0.5);
                    const auto image = flip_field(data.images[n], fh, fv);
                    StepLoss sl;
                    ModelParams g;
                    if (src.kind == Supervision::Soft) {
                        g = backward_supervised(result.params, image, flip_field((*src.targets)[n], fh, fv), &sl.total);
                        sl.ce = sl.total;
                    } else {
                        std::vector<std::optional<LabelMap>> labels(data.annotators);
                        for (int r = 0; r < data.annotators; ++r) {
                            if (data.available[n][r]) labels[r] = flip_labels(data.noisy[n][r], fh, fv);
                        }
                        if (src.kind == Supervision::FixedCms) {
                            std::vector<ConfusionField> cms;
                            for (const auto& c : (*src.cms)[n]) cms.push_back(flip_cms(c, fh, fv));
                            g = backward_fixed_cms(result.params, image, labels, cms, &sl.total);
                            sl.ce = sl.total;
                        } else {
                            LossBreakdown lb;
                            g = backward(result.params, image, labels, lambda, &lb);
                            sl = {lb.total, lb.ce_sum(), lb.trace_sum()};
                        }
                    }
                    if (!std::isfinite(sl.total)) throw DomainError("non-finite objective");
                    accumulate(grads_sum, g, weight);
                    rec.total += sl.total;
                    rec.ce += sl.ce;
                    rec.trace += sl.trace;
                }
                opt.step(result.params, grads_sum, freeze);
            }
        } catch (const DomainError& e) {
            if (!cfg.checkpoint_dir.empty()) save_checkpoint(cfg.checkpoint_dir / "last_good", epoch_start);
            throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what(), epoch_start);
        }
        const double count = double(order.size());
        rec.total /= count;
        rec.ce /= count;
        rec.trace /= count;
        if (annotator_model) rec.train_cm_trace = trace_over(result.params, data, train_idx);
        if (!val_idx.empty()) {
            rec.val_dice = val_dice(result.params, data, val_idx);
            if (annotator_model) rec.val_cm_rmse = val_cm_rmse(result.params, data, val_idx);
        }
        result.history.epochs.push_back(rec);
        if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            save_checkpoint(cfg.checkpoint_dir / ("epoch_" + std::to_string(epoch + 1)), result.params);
        }
    }
    return result;
}

std::string fmt(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream s;
    s.precision(10);
    s << *v;
    return s.str();
}

}  // namespace

std::string to_string(WarmupMode mode) { return mode == WarmupMode::BiasInit ? "bias_init" : "negative_trace"; }

WarmupMode warmup_mode_from(const std::string& name) {
    if (name == "bias_init") return WarmupMode::BiasInit;
    if (name == "negative_trace") return WarmupMode::NegativeTrace;
    throw DomainError("unknown warm-up mode '" + name + "'");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from(const std::string& name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adam") return OptimizerKind::AdamDefaults;
    throw DomainError("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw DomainError("train config: learning_rate must be a finite non-negative number");
    }
    if (epochs < 1) throw DomainError("train config: epochs must be at least 1");
    if (batch_size < 1) throw DomainError("train config: batch_size must be at least 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) throw DomainError("train config: need 0 <= warmup_epochs < epochs");
    if (!std::isfinite(lambda)) throw DomainError("train config: lambda must be finite");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw DomainError("train config: validation_fraction must lie in [0, 1)");
    }
}

std::string TrainHistory::to_csv() const {
    std::ostringstream s;
    s.precision(10);
    s << "epoch,total,ce,trace,train_cm_trace,val_dice,val_cm_rmse\n";
    for (const auto& e : epochs) {
        s << e.epoch << ',' << e.total << ',' << e.ce << ',' << e.trace << ',' << fmt(e.train_cm_trace) << ','
          << fmt(e.val_dice) << ',' << fmt(e.val_cm_rmse) << '\n';
    }
    return s.str();
}

std::pair<std::vector<int>, std::vector<int>> validation_split(int count, double fraction, std::uint64_t seed) {
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng(seed).split(2);
    for (int i = count - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
    int held = static_cast<int>(std::floor(fraction * count + 1e-9));
    if (count < 2) held = 0;
    std::vector<int> val(idx.end() - held, idx.end());
    std::vector<int> train(idx.begin(), idx.end() - held);
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    return {train, val};
}

TrainResult train(const Dataset& data, const ModelArch& arch, const TrainConfig& cfg) {
    return run_training(data, arch, cfg, {Supervision::Annotators});
}

TrainResult train_supervised(const Dataset& data, const std::vector<ProbabilityMap>& targets, const ModelArch& arch,
                             const TrainConfig& cfg) {
    if (targets.size() != std::size_t(data.size())) throw ShapeError("train_supervised: one target per image");
    return run_training(data, arch, cfg, {Supervision::Soft, &targets, nullptr});
}

TrainResult train_with_fixed_cms(const Dataset& data, const std::vector<std::vector<ConfusionField>>& cms,
                                 const ModelArch& arch, const TrainConfig& cfg) {
    if (cms.size() != std::size_t(data.size())) throw ShapeError("train_with_fixed_cms: one CM set per image");
    Sources src{Supervision::FixedCms, nullptr, &cms};
    return run_training(data, arch, cfg, src);
}

MetricsReport evaluate(const ModelParams& params, const Dataset& data, const EvalOptions& options) {
    if (data.size() == 0) throw DomainError("evaluate: empty split");
    const int L = data.classes;
    MetricsReport rep;
    rep.dice_per_class.assign(L, 0.0);
    CmErrorAccumulator acc;
    double ged_sum = 0.0;
    int ged_count = 0;
    const bool have_cms = params.arch.annotators > 0 || options.injected_cms.has_value();
    if (options.injected_cms && options.injected_cms->size() != std::size_t(data.size())) {
        throw ShapeError("evaluate: injected CMs must cover every image");
    }
    for (int n = 0; n < data.size(); ++n) {
        const auto out = forward(params, data.images[n]);
        const auto pred = argmax(out.seg_probs);
        const auto& gt = data.gt[n];
        double mean = 0.0;
        for (int c = 1; c < L; ++c) {
            const double d = dice(pred, gt, c);
            rep.dice_per_class[c] += d;
            mean += d;
        }
        rep.dice_per_image.push_back(mean / (L - 1));
        if (data.annotators >= 2) rep.consensus_iou_per_image.push_back(consensus_iou(data.noisy[n]));

        if (!have_cms) continue;
        const auto& cms = options.injected_cms ? (*options.injected_cms)[n] : out.cms;
        if (cms.size() != std::size_t(data.annotators)) throw ShapeError("evaluate: one CM per annotator required");
        std::vector<LabelMap> predicted;
        std::vector<LabelMap> observed;
        for (int r = 0; r < data.annotators; ++r) {
            acc.add(cms[r], build_reference_cms(gt, data.noisy[n][r]), gt);
            predicted.push_back(argmax(cm_apply(cms[r], out.seg_probs)));
            if (data.available[n][r]) observed.push_back(data.noisy[n][r]);
        }
        ged_sum += ged(predicted, observed);
        ++ged_count;
    }
    for (int c = 1; c < L; ++c) rep.dice_per_class[c] /= data.size();
    rep.dice_mean = std::accumulate(rep.dice_per_image.begin(), rep.dice_per_image.end(), 0.0) / data.size();
    if (have_cms) {
        rep.cm_rmse_true_column = acc.rmse(CmErrorMode::TrueColumn);
        rep.cm_rmse_full = acc.rmse(CmErrorMode::Full);
        rep.ged = ged_sum / ged_count;
    }
    if (!rep.consensus_iou_per_image.empty()) {
        rep.subgroup_dice = subgroup_report(rep.consensus_iou_per_image, rep.dice_per_image);
    }
    return rep;
}

double mean_cm_trace(const ModelParams& params, const Dataset& data) {
    std::vector<int> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    return trace_over(params, data, all);
}

double mean_diag_dominance(const ModelParams& params, const Dataset& data) {
    double sum = 0.0;
    int count = 0;
    for (int n = 0; n < data.size(); ++n) {
        for (const auto& cm : forward(params, data.images[n]).cms) {
            sum += diag_dominance(cm);
            ++count;
        }
    }
    return count ? sum / count : 0.0;
}

}  // namespace nlsg
