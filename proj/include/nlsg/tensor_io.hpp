#pragma once

// Binary tensor file format.
//
//   offset 0   4 bytes  magic "NLSG"
//   offset 4   u8       rank
//   offset 5   u8       dtype (0 = f64, 1 = u8)
//   offset 6   10 bytes zero padding
//   offset 16  rank x u32 little-endian dims
//   then       row-major payload, little-endian
//
// Grid types are stored with the row index (height) first: LabelMap as
// [H, W], ProbabilityMap and ImageTensor as [H, W, depth], ConfusionField as
// [H, W, L, L]. This is the in-memory pixel-major layout, so payloads map 1:1.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nlsg/grid.hpp"

namespace nlsg {

enum class DType : std::uint8_t { F64 = 0, U8 = 1 };

struct Tensor {
    DType dtype = DType::F64;
    std::vector<std::uint32_t> dims;
    std::vector<double> f64;
    std::vector<std::uint8_t> u8;

    std::size_t element_count() const;
    bool operator==(const Tensor&) const = default;
};

Tensor make_f64(std::vector<std::uint32_t> dims, std::vector<double> values);
Tensor make_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> values);

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

Tensor to_tensor(const LabelMap& labels);
Tensor to_tensor(const ProbabilityMap& probs);
Tensor to_tensor(const ConfusionField& cms);
Tensor to_tensor(const ImageTensor& image);

// Decoding validates the type invariants; `classes` is not stored for label maps.
LabelMap label_map_from(const Tensor& tensor, int classes);
ProbabilityMap probability_map_from(const Tensor& tensor);
ConfusionField confusion_field_from(const Tensor& tensor);
ImageTensor image_from(const Tensor& tensor);

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace nlsg
