#pragma once

// Toy segmentation datasets and simulated annotators.
//
// Five annotator archetypes corrupt a ground-truth map through disk-shaped
// morphology: a faithful annotator with a small jitter, an over-segmenter
// (dilation), an under-segmenter (erosion), a "wrong" annotator that first
// fractures the target mask then dilates it, and a blank annotator.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nlsg/grid.hpp"
#include "nlsg/rng.hpp"

namespace nlsg {

enum class AnnotatorKind { Good, Over, Under, Wrong, Blank };
enum class MorphKind { Dilate, Erode, Fracture, Blank };
enum class LabelRegime { Dense, SingleRandom };

std::string to_string(AnnotatorKind kind);
AnnotatorKind annotator_kind_from(const std::string& name);
std::string to_string(LabelRegime regime);
LabelRegime label_regime_from(const std::string& name);

struct AnnotatorProfile {
    AnnotatorKind kind = AnnotatorKind::Good;
    int magnitude = 1;       // disk radius in pixels
    int fracture_count = 0;  // Wrong only
    int fracture_width = 2;  // Wrong only
    int target_class = 1;    // class whose mask is corrupted

    bool operator==(const AnnotatorProfile&) const = default;
};

/// The default five-annotator panel: good, over, under, wrong, blank.
std::vector<AnnotatorProfile> default_profiles();

struct FractureSpec {
    int count = 1;
    int width = 2;
};

/// Applies one morphological corruption to the mask of `target_class`.
/// Throws DomainError when `magnitude` exceeds min(W, H) / 2.
LabelMap morph_op(const LabelMap& labels, int target_class, MorphKind kind, int magnitude, Rng& rng,
                  FractureSpec fracture = {});

LabelMap apply_profile(const LabelMap& gt, const AnnotatorProfile& profile, Rng& rng);

struct LabeledImage {
    ImageTensor image;
    LabelMap gt;
};

/// Random filled ellipses and rectangles on a noisy background; intensity grows with class index.
std::vector<LabeledImage> synth_shapes(int count, int width, int height, int classes, Rng& rng);

/// Reads an MNIST-style IDX image/label pair and thresholds intensities (scaled to [0, 1]) into
/// a binary foreground map. `threshold` must lie in (0, 1).
std::vector<LabeledImage> load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                   double threshold, int limit = -1);

/// Per pixel: column gt(w, h) is one-hot at noisy(w, h); all other columns are uniform 1/L.
ConfusionField build_reference_cms(const LabelMap& gt, const LabelMap& noisy);

/// Images, ground truth and the full set of simulated annotations. `available[n][r]` marks the
/// labels a learner may see; the hidden ones are kept for evaluation only.
struct Dataset {
    int classes = 2;
    int annotators = 0;
    std::vector<ImageTensor> images;
    std::vector<LabelMap> gt;
    std::vector<std::vector<LabelMap>> noisy;
    std::vector<std::vector<bool>> available;

    int size() const { return static_cast<int>(images.size()); }

    /// Labels visible to a learner for image n, absent slots empty.
    std::vector<std::optional<LabelMap>> visible(int n) const;

    Dataset subset(const std::vector<int>& indices) const;

    /// Throws ShapeError / DomainError on inconsistent dimensions or an image without labels.
    void validate() const;
};

/// Corrupts every ground-truth map with every profile. Annotator r of image n draws from the
/// stream split(n * 1009 + r); the single-label regime picks one visible annotator per image.
Dataset simulate_annotations(std::vector<LabeledImage> data, const std::vector<AnnotatorProfile>& profiles,
                             LabelRegime regime, int classes, const Rng& rng);

void save_dataset(const std::filesystem::path& dir, const Dataset& train, const Dataset& test,
                  const std::string& manifest_extra_json = "{}");

struct DatasetSplits {
    Dataset train;
    Dataset test;
};

DatasetSplits load_dataset(const std::filesystem::path& dir);

}  // namespace nlsg
