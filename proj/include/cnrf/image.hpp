#pragma once

#include <filesystem>
#include <vector>

namespace cnrf {

/// Interleaved RGB image with float channels in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, float fill = 0.0f) : width(w), height(h), data(size_t(w) * h * 3, fill) {}

    float& at(int x, int y, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
    float at(int x, int y, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }
    size_t pixel_count() const { return size_t(width) * height; }
    bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
};

/// Rounds every channel to the nearest multiple of 1/255 (after clamping).
void quantize_8bit(Image& img);

/// PNG (.png) or binary PPM (.ppm), 8-bit RGB. Other bit depths are rejected.
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& img);

/// 10 log10(1 / MSE), capped at 99 dB when MSE < 1e-10.
double psnr(const Image& a, const Image& b);
/// Gaussian-window SSIM (11x11, sigma 1.5, k1 0.01, k2 0.03, L 1) averaged
/// over valid window positions and channels.
double ssim(const Image& a, const Image& b);

}  // namespace cnrf
