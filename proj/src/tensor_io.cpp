#include "nlsg/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace nlsg {

namespace {

constexpr std::size_t kHeaderSize = 16;
constexpr char kMagic[4] = {'N', 'L', 'S', 'G'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

double get_f64(const std::uint8_t* p) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(p[b]) << (8 * b);
    return std::bit_cast<double>(bits);
}

void expect_rank(const Tensor& t, std::size_t rank, DType dtype, const char* what) {
    if (t.dims.size() != rank || t.dtype != dtype) {
        throw FormatError(std::string(what) + ": unexpected tensor rank or dtype");
    }
}

std::vector<std::uint32_t> grid_dims(int width, int height, std::initializer_list<int> tail) {
    std::vector<std::uint32_t> dims{std::uint32_t(height), std::uint32_t(width)};
    for (int d : tail) dims.push_back(std::uint32_t(d));
    return dims;
}

}  // namespace

std::size_t Tensor::element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

Tensor make_f64(std::vector<std::uint32_t> dims, std::vector<double> values) {
    Tensor t{DType::F64, std::move(dims), std::move(values), {}};
    if (t.element_count() != t.f64.size()) throw ShapeError("make_f64: dims do not match payload");
    return t;
}

Tensor make_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> values) {
    Tensor t{DType::U8, std::move(dims), {}, std::move(values)};
    if (t.element_count() != t.u8.size()) throw ShapeError("make_u8: dims do not match payload");
    return t;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor) {
    if (tensor.dims.size() > 255) throw ShapeError("encode_tensor: rank exceeds 255");
    std::vector<std::uint8_t> out(kHeaderSize, 0);
    std::memcpy(out.data(), kMagic, 4);
    out[4] = static_cast<std::uint8_t>(tensor.dims.size());
    out[5] = static_cast<std::uint8_t>(tensor.dtype);
    for (auto d : tensor.dims) put_u32(out, d);
    const std::size_t n = tensor.element_count();
    if (tensor.dtype == DType::F64) {
        if (tensor.f64.size() != n) throw ShapeError("encode_tensor: payload size mismatch");
        out.reserve(out.size() + 8 * n);
        for (double v : tensor.f64) put_f64(out, v);
    } else {
        if (tensor.u8.size() != n) throw ShapeError("encode_tensor: payload size mismatch");
        out.insert(out.end(), tensor.u8.begin(), tensor.u8.end());
    }
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("decode_tensor: missing NLSG magic");
    }
    const std::size_t rank = bytes[4];
    const std::uint8_t dtype = bytes[5];
    if (dtype > 1) throw FormatError("decode_tensor: unknown dtype " + std::to_string(int(dtype)));
    if (bytes.size() < kHeaderSize + 4 * rank) throw FormatError("decode_tensor: truncated dims");
    Tensor t;
    t.dtype = static_cast<DType>(dtype);
    for (std::size_t r = 0; r < rank; ++r) t.dims.push_back(get_u32(bytes.data() + kHeaderSize + 4 * r));
    const std::size_t n = t.element_count();
    const std::size_t offset = kHeaderSize + 4 * rank;
    const std::size_t width = t.dtype == DType::F64 ? 8 : 1;
    if (bytes.size() != offset + n * width) throw FormatError("decode_tensor: payload size mismatch");
    if (t.dtype == DType::F64) {
        t.f64.resize(n);
        for (std::size_t i = 0; i < n; ++i) t.f64[i] = get_f64(bytes.data() + offset + 8 * i);
    } else {
        t.u8.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
    }
    return t;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    write_file_atomic(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
    write_file_atomic(path, encode_tensor(tensor));
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open tensor file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tensor(bytes);
}

Tensor to_tensor(const LabelMap& labels) {
    return make_u8(grid_dims(labels.width(), labels.height(), {}),
                   std::vector<std::uint8_t>(labels.labels().begin(), labels.labels().end()));
}

Tensor to_tensor(const ProbabilityMap& probs) {
    return make_f64(grid_dims(probs.width(), probs.height(), {probs.classes()}),
                    std::vector<double>(probs.values().begin(), probs.values().end()));
}

Tensor to_tensor(const ConfusionField& cms) {
    return make_f64(grid_dims(cms.width(), cms.height(), {cms.classes(), cms.classes()}),
                    std::vector<double>(cms.values().begin(), cms.values().end()));
}

Tensor to_tensor(const ImageTensor& image) {
    return make_f64(grid_dims(image.width(), image.height(), {image.channels()}),
                    std::vector<double>(image.values().begin(), image.values().end()));
}

LabelMap label_map_from(const Tensor& tensor, int classes) {
    expect_rank(tensor, 2, DType::U8, "label_map_from");
    return LabelMap(int(tensor.dims[1]), int(tensor.dims[0]), classes, tensor.u8);
}

ProbabilityMap probability_map_from(const Tensor& tensor) {
    expect_rank(tensor, 3, DType::F64, "probability_map_from");
    ProbabilityMap out(int(tensor.dims[1]), int(tensor.dims[0]), int(tensor.dims[2]), tensor.f64);
    out.validate();
    return out;
}

ConfusionField confusion_field_from(const Tensor& tensor) {
    expect_rank(tensor, 4, DType::F64, "confusion_field_from");
    if (tensor.dims[2] != tensor.dims[3]) throw FormatError("confusion_field_from: non-square matrices");
    ConfusionField out(int(tensor.dims[1]), int(tensor.dims[0]), int(tensor.dims[2]), tensor.f64);
    out.validate();
    return out;
}

ImageTensor image_from(const Tensor& tensor) {
    expect_rank(tensor, 3, DType::F64, "image_from");
    return ImageTensor(int(tensor.dims[1]), int(tensor.dims[0]), int(tensor.dims[2]), tensor.f64);
}

}  // namespace nlsg
