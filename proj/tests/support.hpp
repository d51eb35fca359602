#pragma once

// Shared fixtures for the unit tests: scratch directories, small random
// tensors and toy-width network configurations.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "emd/fer.hpp"
#include "emd/manipnet.hpp"
#include "emd/rng.hpp"
#include "emd/synthgen.hpp"

namespace emd::test {

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("emd-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

template <class T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline FaceImage random_image(int size, Rng& rng) {
    FaceImage img(size);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(rng.uniform());
    return img;
}

inline FerConfig toy_fer_config() {
    FerConfig c;
    c.branches = 2;
    c.class_count = 3;
    c.trunk_channels = 3;
    c.branch_channels = 4;
    c.feature_channels = 4;
    c.input_size = 16;
    return c;
}

inline ManipConfig toy_manip_config() {
    ManipConfig c;
    c.input_size = 32;
    c.encoder_channels = {4, 4, 8};
    c.fer_feature_channels = 4;
    c.spp_rates = {1, 2};
    c.decoder_channels = 4;
    return c;
}

/// Small synthetic corpus settings for training smoke tests.
inline SynthConfig tiny_synth(int image_size = 32) {
    SynthConfig s;
    s.image_size = image_size;
    s.n_expression_train = 32;
    s.n_expression_test = 16;
    s.n_manip_train = 16;
    s.n_manip_test = 8;
    return s;
}

}  // namespace emd::test
