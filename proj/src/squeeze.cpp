#include "covmon/squeeze.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace covmon {

Tensor bit_depth_reduce(const Tensor& image, int bits) {
    if (bits < 1 || bits > 8) throw std::invalid_argument("bit depth must be in [1,8]");
    const float levels = static_cast<float>((1 << bits) - 1);
    Tensor out = image;
    for (auto& v : out.values()) v = std::round(v * levels) / levels;
    return out;
}

Tensor median_smooth(const Tensor& image, int window) {
    if (window < 1) throw std::invalid_argument("window must be positive");
    if (image.rank() != 3) throw std::invalid_argument("median_smooth expects a CHW image");
    const int c = static_cast<int>(image.dim(0));
    const int h = static_cast<int>(image.dim(1));
    const int w = static_cast<int>(image.dim(2));
    const int lo = -(window - 1) / 2;  // window anchored like scipy's median_filter
    Tensor out(image.shape());
    std::vector<float> vals;
    vals.reserve(static_cast<size_t>(window) * window);
    for (int ch = 0; ch < c; ++ch) {
        const float* plane = image.data() + static_cast<int64_t>(ch) * h * w;
        float* oplane = out.data() + static_cast<int64_t>(ch) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                vals.clear();
                for (int dy = lo; dy < lo + window; ++dy)
                    for (int dx = lo; dx < lo + window; ++dx) {
                        int yy = std::clamp(y + dy, 0, h - 1);
                        int xx = std::clamp(x + dx, 0, w - 1);
                        vals.push_back(plane[yy * w + xx]);
                    }
                size_t mid = vals.size() / 2;
                std::nth_element(vals.begin(), vals.begin() + static_cast<ptrdiff_t>(mid), vals.end());
                oplane[y * w + x] = vals[mid];
            }
    }
    return out;
}

namespace {

// standard JPEG luminance quantization table
const int kLumaTable[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

void dct8(const double in[8][8], double out[8][8]) {
    for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int x = 0; x < 8; ++x)
                for (int y = 0; y < 8; ++y)
                    acc += in[x][y] * std::cos((2 * x + 1) * u * M_PI / 16.0) *
                           std::cos((2 * y + 1) * v * M_PI / 16.0);
            double au = u == 0 ? M_SQRT1_2 : 1.0;
            double av = v == 0 ? M_SQRT1_2 : 1.0;
            out[u][v] = 0.25 * au * av * acc;
        }
}

void idct8(const double in[8][8], double out[8][8]) {
    for (int x = 0; x < 8; ++x)
        for (int y = 0; y < 8; ++y) {
            double acc = 0.0;
            for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v) {
                    double au = u == 0 ? M_SQRT1_2 : 1.0;
                    double av = v == 0 ? M_SQRT1_2 : 1.0;
                    acc += au * av * in[u][v] * std::cos((2 * x + 1) * u * M_PI / 16.0) *
                           std::cos((2 * y + 1) * v * M_PI / 16.0);
                }
            out[x][y] = 0.25 * acc;
        }
}

}  // namespace

Tensor jpeg_like_compress(const Tensor& image, int quality) {
    if (quality < 1 || quality > 100) throw std::invalid_argument("quality must be in [1,100]");
    if (image.rank() != 3) throw std::invalid_argument("jpeg_like_compress expects a CHW image");
    const int c = static_cast<int>(image.dim(0));
    const int h = static_cast<int>(image.dim(1));
    const int w = static_cast<int>(image.dim(2));
    const int ph = (h + 7) & ~7, pw = (w + 7) & ~7;

    // libjpeg-style table scaling
    int s = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    double qt[64];
    for (int i = 0; i < 64; ++i)
        qt[i] = std::clamp((kLumaTable[i] * s + 50) / 100, 1, 255);

    Tensor out(image.shape());
    std::vector<double> padded(static_cast<size_t>(ph) * pw);
    for (int ch = 0; ch < c; ++ch) {
        const float* plane = image.data() + static_cast<int64_t>(ch) * h * w;
        float* oplane = out.data() + static_cast<int64_t>(ch) * h * w;
        for (int y = 0; y < ph; ++y)
            for (int x = 0; x < pw; ++x)
                padded[static_cast<size_t>(y) * pw + x] =
                    plane[std::min(y, h - 1) * w + std::min(x, w - 1)] * 255.0 - 128.0;
        for (int by = 0; by < ph; by += 8)
            for (int bx = 0; bx < pw; bx += 8) {
                double block[8][8], coef[8][8], rec[8][8];
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x)
                        block[y][x] = padded[static_cast<size_t>(by + y) * pw + bx + x];
                dct8(block, coef);
                for (int u = 0; u < 8; ++u)
                    for (int v = 0; v < 8; ++v)
                        coef[u][v] = std::round(coef[u][v] / qt[u * 8 + v]) * qt[u * 8 + v];
                idct8(coef, rec);
                for (int y = 0; y < 8 && by + y < h; ++y)
                    for (int x = 0; x < 8 && bx + x < w; ++x)
                        oplane[(by + y) * w + bx + x] = static_cast<float>(
                            std::clamp((rec[y][x] + 128.0) / 255.0, 0.0, 1.0));
            }
    }
    return out;
}

}  // namespace covmon
