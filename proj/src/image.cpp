#include "cnrf/image.hpp"

#include "cnrf/common.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cnrf {

namespace {

uint8_t to_byte(float v)
{
    return uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::string lower_ext(const std::filesystem::path& p)
{
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return e;
}

Image read_png(const std::filesystem::path& path)
{
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str()))
        throw LoadError("cannot read PNG " + path.string() + ": " + png.message);
    if (png.format & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&png);
        throw LoadError("unsupported bit depth (16-bit PNG): " + path.string());
    }
    png.format = PNG_FORMAT_RGB;
    std::vector<uint8_t> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr))
        throw LoadError("cannot decode PNG " + path.string() + ": " + png.message);
    Image img(int(png.width), int(png.height));
    for (size_t n = 0; n < buf.size(); ++n) img.data[n] = float(buf[n]) / 255.0f;
    return img;
}

void write_png(const std::filesystem::path& path, const Image& img)
{
    std::vector<uint8_t> buf(img.data.size());
    for (size_t n = 0; n < buf.size(); ++n) buf[n] = to_byte(img.data[n]);
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = png_uint_32(img.width);
    png.height = png_uint_32(img.height);
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr))
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + png.message);
}

Image read_ppm(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::string magic;
    in >> magic;
    auto next_int = [&]() {
        int v = 0;
        while (in >> std::ws && in.peek() == '#') {
            std::string skip;
            std::getline(in, skip);
        }
        in >> v;
        return v;
    };
    if (magic != "P6") throw LoadError("not a binary PPM: " + path.string());
    const int w = next_int(), h = next_int(), maxval = next_int();
    if (!in || w <= 0 || h <= 0) throw LoadError("malformed PPM header: " + path.string());
    if (maxval != 255) throw LoadError("unsupported bit depth (maxval " + std::to_string(maxval) + "): " + path.string());
    in.get();
    std::vector<uint8_t> buf(size_t(w) * h * 3);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!in) throw LoadError("truncated PPM: " + path.string());
    Image img(w, h);
    for (size_t n = 0; n < buf.size(); ++n) img.data[n] = float(buf[n]) / 255.0f;
    return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<uint8_t> buf(img.data.size());
    for (size_t n = 0; n < buf.size(); ++n) buf[n] = to_byte(img.data[n]);
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

// Valid-region separable convolution with a normalised 1-D kernel.
std::vector<double> filter_valid(const std::vector<double>& src, int w, int h, const std::vector<double>& k)
{
    const int r = int(k.size());
    const int ow = w - r + 1, oh = h - r + 1;
    std::vector<double> tmp(size_t(ow) * h), out(size_t(ow) * oh);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < r; ++i) s += k[size_t(i)] * src[size_t(y) * w + x + i];
            tmp[size_t(y) * ow + x] = s;
        }
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < r; ++i) s += k[size_t(i)] * tmp[size_t(y + i) * ow + x];
            out[size_t(y) * ow + x] = s;
        }
    return out;
}

}  // namespace

void quantize_8bit(Image& img)
{
    for (float& v : img.data) v = float(to_byte(v)) / 255.0f;
}

Image read_image(const std::filesystem::path& path)
{
    const std::string ext = lower_ext(path);
    if (ext == ".png") return read_png(path);
    if (ext == ".ppm") return read_ppm(path);
    throw LoadError("unsupported image format: " + path.string());
}

void write_image(const std::filesystem::path& path, const Image& img)
{
    const std::string ext = lower_ext(path);
    if (ext == ".png") return write_png(path, img);
    if (ext == ".ppm") return write_ppm(path, img);
    throw InvalidArgument("unsupported image format: " + path.string());
}

double psnr(const Image& a, const Image& b)
{
    if (!a.same_shape(b) || a.data.size() != b.data.size()) throw InvalidArgument("images differ in shape");
    if (a.data.empty()) throw InvalidArgument("empty image");
    double se = 0.0;
    for (size_t n = 0; n < a.data.size(); ++n) {
        const double d = double(a.data[n]) - double(b.data[n]);
        se += d * d;
    }
    const double mse = se / double(a.data.size());
    if (mse < 1e-10) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& a, const Image& b)
{
    if (!a.same_shape(b) || a.data.size() != b.data.size()) throw InvalidArgument("images differ in shape");
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    if (a.width < kWin || a.height < kWin) throw InvalidArgument("SSIM needs images of at least 11x11");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

    std::vector<double> k(kWin);
    double ksum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double x = i - kWin / 2;
        k[size_t(i)] = std::exp(-x * x / (2 * kSigma * kSigma));
        ksum += k[size_t(i)];
    }
    for (double& v : k) v /= ksum;

    const int w = a.width, h = a.height;
    const size_t np = a.pixel_count();
    double total = 0.0;
    size_t count = 0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> x(np), y(np), xx(np), yy(np), xy(np);
        for (size_t p = 0; p < np; ++p) {
            x[p] = a.data[p * 3 + c];
            y[p] = b.data[p * 3 + c];
            xx[p] = x[p] * x[p];
            yy[p] = y[p] * y[p];
            xy[p] = x[p] * y[p];
        }
        const auto mx = filter_valid(x, w, h, k), my = filter_valid(y, w, h, k);
        const auto sxx = filter_valid(xx, w, h, k), syy = filter_valid(yy, w, h, k), sxy = filter_valid(xy, w, h, k);
        for (size_t p = 0; p < mx.size(); ++p) {
            const double vx = sxx[p] - mx[p] * mx[p];
            const double vy = syy[p] - my[p] * my[p];
            const double cov = sxy[p] - mx[p] * my[p];
            total += ((2 * mx[p] * my[p] + c1) * (2 * cov + c2)) /
                     ((mx[p] * mx[p] + my[p] * my[p] + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return total / double(count);
}

}  // namespace cnrf
