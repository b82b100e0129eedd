#include "nlsg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace nlsg {

namespace {

void check_dims(int width, int height, int depth, const char* what) {
    if (width < 1 || height < 1 || depth < 1) {
        throw ShapeError(std::string(what) + ": dimensions must be positive, got " + std::to_string(width) + "x" +
                         std::to_string(height) + "x" + std::to_string(depth));
    }
}

void check_classes(int classes, const char* what) {
    if (classes < 1 || classes > kMaxClasses) {
        throw ShapeError(std::string(what) + ": class count " + std::to_string(classes) + " outside [1, 16]");
    }
}

void check_size(std::size_t got, std::size_t want, const char* what) {
    if (got != want) {
        throw ShapeError(std::string(what) + ": expected " + std::to_string(want) + " values, got " +
                         std::to_string(got));
    }
}

void check_same_grid(int w1, int h1, int l1, int w2, int h2, int l2, const char* what) {
    if (w1 != w2 || h1 != h2 || l1 != l2) {
        throw ShapeError(std::string(what) + ": shape mismatch");
    }
}

}  // namespace

RealField::RealField(int width, int height, int depth, double fill)
    : width_(width), height_(height), depth_(depth) {
    check_dims(width, height, depth, "RealField");
    values_.assign(std::size_t(width) * height * depth, fill);
}

RealField::RealField(int width, int height, int depth, std::vector<double> values)
    : width_(width), height_(height), depth_(depth), values_(std::move(values)) {
    check_dims(width, height, depth, "RealField");
    check_size(values_.size(), std::size_t(width) * height * depth, "RealField");
}

ImageTensor::ImageTensor(int width, int height, int channels, double fill)
    : RealField(width, height, channels, fill) {
    if (!std::isfinite(fill)) throw DomainError("ImageTensor: non-finite fill value");
}

ImageTensor::ImageTensor(int width, int height, int channels, std::vector<double> values)
    : RealField(width, height, channels, std::move(values)) {
    for (double v : this->values()) {
        if (!std::isfinite(v)) throw DomainError("ImageTensor: non-finite value");
    }
}

LabelMap::LabelMap(int width, int height, int classes, std::uint8_t fill)
    : width_(width), height_(height), classes_(classes) {
    check_dims(width, height, 1, "LabelMap");
    check_classes(classes, "LabelMap");
    if (fill >= classes) throw DomainError("LabelMap: fill label out of range");
    labels_.assign(std::size_t(width) * height, fill);
}

LabelMap::LabelMap(int width, int height, int classes, std::vector<std::uint8_t> labels)
    : width_(width), height_(height), classes_(classes), labels_(std::move(labels)) {
    check_dims(width, height, 1, "LabelMap");
    check_classes(classes, "LabelMap");
    check_size(labels_.size(), std::size_t(width) * height, "LabelMap");
    for (std::uint8_t l : labels_) {
        if (l >= classes) {
            throw DomainError("LabelMap: label " + std::to_string(int(l)) + " >= classes " + std::to_string(classes));
        }
    }
}

void LabelMap::set(int w, int h, int label) { set_pixel(h * width_ + w, label); }

void LabelMap::set_pixel(int p, int label) {
    if (label < 0 || label >= classes_) throw DomainError("LabelMap: label out of range");
    labels_[p] = static_cast<std::uint8_t>(label);
}

int LabelMap::count(int label) const {
    return static_cast<int>(std::count(labels_.begin(), labels_.end(), static_cast<std::uint8_t>(label)));
}

ProbabilityMap::ProbabilityMap(int width, int height, int classes, double fill)
    : width_(width), height_(height), classes_(classes) {
    check_dims(width, height, 1, "ProbabilityMap");
    check_classes(classes, "ProbabilityMap");
    probs_.assign(std::size_t(width) * height * classes, fill);
}

ProbabilityMap::ProbabilityMap(int width, int height, int classes, std::vector<double> probs)
    : width_(width), height_(height), classes_(classes), probs_(std::move(probs)) {
    check_dims(width, height, 1, "ProbabilityMap");
    check_classes(classes, "ProbabilityMap");
    check_size(probs_.size(), std::size_t(width) * height * classes, "ProbabilityMap");
}

void ProbabilityMap::validate(double tol) const {
    for (int p = 0; p < pixels(); ++p) {
        double sum = 0.0;
        for (double v : pixel(p)) {
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw DomainError("ProbabilityMap: invalid entry at pixel " + std::to_string(p));
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > tol) {
            throw DomainError("ProbabilityMap: pixel " + std::to_string(p) + " sums to " + std::to_string(sum));
        }
    }
}

ConfusionField::ConfusionField(int width, int height, int classes, double fill)
    : width_(width), height_(height), classes_(classes) {
    check_dims(width, height, 1, "ConfusionField");
    check_classes(classes, "ConfusionField");
    entries_.assign(std::size_t(width) * height * classes * classes, fill);
}

ConfusionField::ConfusionField(int width, int height, int classes, std::vector<double> entries)
    : width_(width), height_(height), classes_(classes), entries_(std::move(entries)) {
    check_dims(width, height, 1, "ConfusionField");
    check_classes(classes, "ConfusionField");
    check_size(entries_.size(), std::size_t(width) * height * classes * classes, "ConfusionField");
}

void ConfusionField::validate(double tol) const {
    const int L = classes_;
    for (int p = 0; p < pixels(); ++p) {
        for (int j = 0; j < L; ++j) {
            double sum = 0.0;
            for (int i = 0; i < L; ++i) {
                const double v = at(p, i, j);
                if (!(v >= 0.0) || !std::isfinite(v)) {
                    throw DomainError("ConfusionField: invalid entry at pixel " + std::to_string(p));
                }
                sum += v;
            }
            if (std::abs(sum - 1.0) > tol) {
                throw DomainError("ConfusionField: column " + std::to_string(j) + " of pixel " + std::to_string(p) +
                                  " sums to " + std::to_string(sum));
            }
        }
    }
}

ProbabilityMap softmax_pixelwise(const RealField& logits) {
    const int L = logits.depth();
    ProbabilityMap out(logits.width(), logits.height(), L);
    for (int p = 0; p < logits.pixels(); ++p) {
        auto in = logits.pixel(p);
        auto dst = out.pixel(p);
        double peak = -INFINITY;
        for (double v : in) {
            if (!std::isfinite(v)) throw DomainError("softmax_pixelwise: non-finite logit at pixel " + std::to_string(p));
            peak = std::max(peak, v);
        }
        double sum = 0.0;
        for (int l = 0; l < L; ++l) {
            dst[l] = std::exp(in[l] - peak);
            sum += dst[l];
        }
        for (double& v : dst) v /= sum;
    }
    return out;
}

ProbabilityMap one_hot(const LabelMap& labels, int classes) {
    ProbabilityMap out(labels.width(), labels.height(), classes);
    for (int p = 0; p < labels.pixels(); ++p) {
        const int l = labels[p];
        if (l >= classes) {
            throw DomainError("one_hot: label " + std::to_string(l) + " >= " + std::to_string(classes));
        }
        out.pixel(p)[l] = 1.0;
    }
    return out;
}

LabelMap argmax(const ProbabilityMap& probs) {
    LabelMap out(probs.width(), probs.height(), probs.classes());
    for (int p = 0; p < probs.pixels(); ++p) {
        auto v = probs.pixel(p);
        out.set_pixel(p, static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()));
    }
    return out;
}

ConfusionField normalize_columns(const RealField& raw) {
    const int depth = raw.depth();
    const int L = static_cast<int>(std::lround(std::sqrt(double(depth))));
    if (L * L != depth) throw ShapeError("normalize_columns: depth is not a square");
    ConfusionField out(raw.width(), raw.height(), L);
    for (int p = 0; p < raw.pixels(); ++p) {
        auto in = raw.pixel(p);
        auto dst = out.matrix(p);
        for (int j = 0; j < L; ++j) {
            double sum = 0.0;
            for (int i = 0; i < L; ++i) {
                const double v = in[i * L + j];
                if (!(v >= 0.0) || !std::isfinite(v)) {
                    throw DomainError("normalize_columns: negative or non-finite entry at pixel " + std::to_string(p));
                }
                sum += v;
            }
            if (!(sum > 0.0)) {
                throw DomainError("normalize_columns: zero-sum column " + std::to_string(j) + " at pixel " +
                                  std::to_string(p));
            }
            for (int i = 0; i < L; ++i) dst[i * L + j] = in[i * L + j] / sum;
        }
    }
    return out;
}

ProbabilityMap cm_apply(const ConfusionField& cms, const ProbabilityMap& probs) {
    check_same_grid(cms.width(), cms.height(), cms.classes(), probs.width(), probs.height(), probs.classes(),
                    "cm_apply");
    const int L = probs.classes();
    ProbabilityMap out(probs.width(), probs.height(), L);
    for (int p = 0; p < probs.pixels(); ++p) {
        auto a = cms.matrix(p);
        auto in = probs.pixel(p);
        auto dst = out.pixel(p);
        for (int i = 0; i < L; ++i) {
            double acc = 0.0;
            for (int j = 0; j < L; ++j) acc += a[i * L + j] * in[j];
            dst[i] = acc;
        }
    }
    return out;
}

double trace_mean(const ConfusionField& cms) {
    const int L = cms.classes();
    double total = 0.0;
    for (int p = 0; p < cms.pixels(); ++p) {
        for (int i = 0; i < L; ++i) total += cms.at(p, i, i);
    }
    return total / cms.pixels();
}

ConfusionField identity_field(int width, int height, int classes) {
    ConfusionField out(width, height, classes);
    for (int p = 0; p < out.pixels(); ++p) {
        for (int i = 0; i < classes; ++i) out.at(p, i, i) = 1.0;
    }
    return out;
}

ConfusionField uniform_field(int width, int height, int classes) {
    return ConfusionField(width, height, classes, 1.0 / classes);
}

ConfusionField constant_field(int width, int height, int classes, std::span<const double> matrix) {
    check_size(matrix.size(), std::size_t(classes) * classes, "constant_field");
    ConfusionField out(width, height, classes);
    for (int p = 0; p < out.pixels(); ++p) std::copy(matrix.begin(), matrix.end(), out.matrix(p).begin());
    return out;
}

}  // namespace nlsg
