#include "emd/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "emd/errors.hpp"

namespace emd {

RawImage read_png(const std::filesystem::path& path, int channels) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw IoError("cannot read PNG " + path.string() + ": " + image.message);
    }
    image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    RawImage out;
    out.width = static_cast<int>(image.width);
    out.height = static_cast<int>(image.height);
    out.channels = channels;
    out.bytes.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.bytes.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return out;
}

void write_png(const std::filesystem::path& path, const RawImage& img) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.bytes.data(), 0, nullptr)) {
        throw IoError("cannot write PNG " + path.string() + ": " + image.message);
    }
}

namespace {
std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}
}  // namespace

FaceImage to_face_image(const RawImage& raw) {
    if (raw.channels != 3) throw PreconditionError("to_face_image: expected RGB data");
    FaceImage img(raw.height, raw.width);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = raw.bytes[(static_cast<std::size_t>(y) * raw.width + x) * 3 + c] / 255.0f;
    return img;
}

RawImage to_raw(const FaceImage& img) {
    RawImage raw{img.width(), img.height(), 3, {}};
    raw.bytes.resize(static_cast<std::size_t>(raw.width) * raw.height * 3);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x)
            for (int c = 0; c < 3; ++c)
                raw.bytes[(static_cast<std::size_t>(y) * raw.width + x) * 3 + c] = to_byte(img.at(c, y, x));
    return raw;
}

BinaryMask to_mask(const RawImage& raw) {
    if (raw.channels != 1) throw PreconditionError("to_mask: expected grayscale data");
    BinaryMask m(raw.height, raw.width);
    for (std::size_t i = 0; i < raw.bytes.size(); ++i) {
        const auto v = raw.bytes[i];
        if (v != 0 && v != 255) throw ValidationError("mask value " + std::to_string(v) + " is not 0 or 255");
        m.values[i] = v == 255 ? 1 : 0;
    }
    return m;
}

RawImage to_raw(const BinaryMask& mask) {
    RawImage raw{mask.width, mask.height, 1, {}};
    raw.bytes.resize(mask.values.size());
    for (std::size_t i = 0; i < mask.values.size(); ++i) raw.bytes[i] = mask.values[i] ? 255 : 0;
    return raw;
}

RawImage gray_to_raw(const Tensor<float>& map) {
    const Shape s = map.shape();
    RawImage raw{s.w, s.h, 1, {}};
    raw.bytes.resize(s.plane());
    for (std::size_t i = 0; i < s.plane(); ++i) raw.bytes[i] = to_byte(map[i]);
    return raw;
}

}  // namespace emd
