#pragma once

// Dense pixel-grid value types and the per-pixel linear algebra kernels.
//
// All fields are stored pixel-major: pixel index p = h * width + w, and the
// per-pixel payload (channels, class probabilities, an L x L matrix) is
// contiguous. Confusion matrices are column-stochastic: entry (i, j) is
// p(observed = i | true = j) and lives at offset i * L + j.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "nlsg/error.hpp"

namespace nlsg {

/// Tolerance for simplex and column-stochastic validation.
inline constexpr double kSimplexTol = 1e-9;
inline constexpr int kMaxClasses = 16;

/// Generic dense W x H x depth real field (logits, raw confusion outputs, activations).
class RealField {
public:
    RealField() = default;
    RealField(int width, int height, int depth, double fill = 0.0);
    RealField(int width, int height, int depth, std::vector<double> values);

    int width() const { return width_; }
    int height() const { return height_; }
    int depth() const { return depth_; }
    int pixels() const { return width_ * height_; }

    double& at(int w, int h, int k) { return values_[index(w, h, k)]; }
    double at(int w, int h, int k) const { return values_[index(w, h, k)]; }

    std::span<double> pixel(int p) { return {values_.data() + std::size_t(p) * depth_, std::size_t(depth_)}; }
    std::span<const double> pixel(int p) const {
        return {values_.data() + std::size_t(p) * depth_, std::size_t(depth_)};
    }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    bool operator==(const RealField&) const = default;

private:
    std::size_t index(int w, int h, int k) const {
        return (std::size_t(h) * width_ + w) * depth_ + k;
    }

    int width_ = 0;
    int height_ = 0;
    int depth_ = 0;
    std::vector<double> values_;
};

/// Input image x in R^{W x H x C}; all values finite.
class ImageTensor : public RealField {
public:
    ImageTensor() = default;
    ImageTensor(int width, int height, int channels, double fill = 0.0);
    ImageTensor(int width, int height, int channels, std::vector<double> values);

    int channels() const { return depth(); }
};

/// Integer class map with labels in [0, classes).
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(int width, int height, int classes, std::uint8_t fill = 0);
    LabelMap(int width, int height, int classes, std::vector<std::uint8_t> labels);

    int width() const { return width_; }
    int height() const { return height_; }
    int classes() const { return classes_; }
    int pixels() const { return width_ * height_; }

    std::uint8_t at(int w, int h) const { return labels_[std::size_t(h) * width_ + w]; }
    void set(int w, int h, int label);
    std::uint8_t operator[](int p) const { return labels_[p]; }
    void set_pixel(int p, int label);

    std::span<const std::uint8_t> labels() const { return labels_; }

    /// Number of pixels equal to `label`.
    int count(int label) const;

    bool operator==(const LabelMap&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    int classes_ = 0;
    std::vector<std::uint8_t> labels_;
};

/// Per-pixel categorical distribution over L classes.
class ProbabilityMap {
public:
    ProbabilityMap() = default;
    ProbabilityMap(int width, int height, int classes, double fill = 0.0);
    ProbabilityMap(int width, int height, int classes, std::vector<double> probs);

    int width() const { return width_; }
    int height() const { return height_; }
    int classes() const { return classes_; }
    int pixels() const { return width_ * height_; }

    std::span<double> pixel(int p) { return {probs_.data() + std::size_t(p) * classes_, std::size_t(classes_)}; }
    std::span<const double> pixel(int p) const {
        return {probs_.data() + std::size_t(p) * classes_, std::size_t(classes_)};
    }
    double at(int w, int h, int l) const { return probs_[(std::size_t(h) * width_ + w) * classes_ + l]; }

    std::span<double> values() { return probs_; }
    std::span<const double> values() const { return probs_; }

    /// Throws DomainError unless every pixel lies on the simplex within `tol`.
    void validate(double tol = kSimplexTol) const;

    bool operator==(const ProbabilityMap&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    int classes_ = 0;
    std::vector<double> probs_;
};

/// Per-pixel L x L column-stochastic confusion matrix field.
class ConfusionField {
public:
    ConfusionField() = default;
    ConfusionField(int width, int height, int classes, double fill = 0.0);
    ConfusionField(int width, int height, int classes, std::vector<double> entries);

    int width() const { return width_; }
    int height() const { return height_; }
    int classes() const { return classes_; }
    int pixels() const { return width_ * height_; }

    /// Row-major L x L matrix of pixel p.
    std::span<double> matrix(int p) {
        const std::size_t n = std::size_t(classes_) * classes_;
        return {entries_.data() + std::size_t(p) * n, n};
    }
    std::span<const double> matrix(int p) const {
        const std::size_t n = std::size_t(classes_) * classes_;
        return {entries_.data() + std::size_t(p) * n, n};
    }
    double at(int p, int i, int j) const { return matrix(p)[std::size_t(i) * classes_ + j]; }
    double& at(int p, int i, int j) { return matrix(p)[std::size_t(i) * classes_ + j]; }

    std::span<double> values() { return entries_; }
    std::span<const double> values() const { return entries_; }

    /// Throws DomainError unless every column of every pixel sums to one within `tol`.
    void validate(double tol = kSimplexTol) const;

    bool operator==(const ConfusionField&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    int classes_ = 0;
    std::vector<double> entries_;
};

ProbabilityMap softmax_pixelwise(const RealField& logits);

ProbabilityMap one_hot(const LabelMap& labels, int classes);

/// Per-pixel argmax; ties resolve to the lowest class index.
LabelMap argmax(const ProbabilityMap& probs);

/// Divides every per-pixel column of `raw` (depth L*L) by its sum.
ConfusionField normalize_columns(const RealField& raw);

/// Per pixel, out_i = sum_j A(i, j) * p_j.
ProbabilityMap cm_apply(const ConfusionField& cms, const ProbabilityMap& probs);

/// Mean over pixels of the per-pixel trace.
double trace_mean(const ConfusionField& cms);

ConfusionField identity_field(int width, int height, int classes);
ConfusionField uniform_field(int width, int height, int classes);

/// Broadcasts one column-stochastic L x L matrix (row-major) to every pixel.
ConfusionField constant_field(int width, int height, int classes, std::span<const double> matrix);

}  // namespace nlsg
