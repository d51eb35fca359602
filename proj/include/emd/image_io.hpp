#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "emd/datamodel.hpp"

namespace emd {

struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> bytes;
};

/// Throws IoError on failure. Color PNGs are read as RGB, others converted as requested.
RawImage read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const RawImage& img);

FaceImage to_face_image(const RawImage& raw);
RawImage to_raw(const FaceImage& img);
BinaryMask to_mask(const RawImage& raw);
RawImage to_raw(const BinaryMask& mask);

/// Single-channel float map in [0, 1] as 8-bit grayscale.
RawImage gray_to_raw(const Tensor<float>& map);

}  // namespace emd
