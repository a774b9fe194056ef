#pragma once

#include <string>
#include <vector>

#include "refface/rng.hpp"
#include "refface/tensor.hpp"

namespace refface {

// Interchange image: row-major H x W x C doubles in [0,1]. PNG round-trips
// quantize to 8 bit; everything downstream treats that as the source
// precision.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, 0.0) {}

    double& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    size_t size() const { return data.size(); }

    void clamp01();
    double mean() const;

    // CHW tensor with a leading batch axis of 1 when batched=false is not
    // wanted; callers stack samples themselves.
    Tensor to_chw() const;
    static Image from_chw(const Tensor& t, int64_t batch_index = 0);
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);  // throws MissingArtifactError when absent

Image resize_bilinear(const Image& src, int h2, int w2);
Image gaussian_blur(const Image& src, double sigma);
Image flip_horizontal(const Image& src);

// JPEG-like 8x8 block-DCT quantization. quality in [1,100]; 100 bypasses
// quantization entirely.
Image dct_compress(const Image& src, int quality);

double image_mse(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);  // dB, capped at 99
double ssim(const Image& a, const Image& b);

}  // namespace refface
