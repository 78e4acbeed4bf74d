#pragma once

#include "covmon/tensor.hpp"

namespace covmon {

// Image -> image maps preserving the [0,1] pixel domain.

// Quantize to 2^bits levels (nearest level).
Tensor bit_depth_reduce(const Tensor& image, int bits);

// Median filter with a window x window footprint anchored at the pixel
// (clamped at the borders); even windows take the upper median.
Tensor median_smooth(const Tensor& image, int window);

// 8x8 block DCT with the standard luminance quantization table scaled by
// `quality` (1..100), inverse DCT, clip. Dependency-free stand-in for JPEG.
Tensor jpeg_like_compress(const Tensor& image, int quality);

}  // namespace covmon
