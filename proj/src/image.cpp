#include "refface/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "refface/errors.hpp"

namespace refface {

void Image::clamp01() {
    for (double& v : data) v = std::clamp(v, 0.0, 1.0);
}

double Image::mean() const {
    double acc = 0;
    for (double v : data) acc += v;
    return data.empty() ? 0.0 : acc / static_cast<double>(data.size());
}

Tensor Image::to_chw() const {
    Tensor t({static_cast<int64_t>(c), static_cast<int64_t>(h), static_cast<int64_t>(w)});
    for (int ch = 0; ch < c; ch++)
        for (int y = 0; y < h; y++)
            for (int x = 0; x < w; x++) t.data[(ch * h + y) * w + x] = at(y, x, ch);
    return t;
}

Image Image::from_chw(const Tensor& t, int64_t batch_index) {
    const auto& s = t.shape;
    int64_t c, h, w, off = 0;
    if (s.size() == 4) {
        c = s[1];
        h = s[2];
        w = s[3];
        off = batch_index * c * h * w;
    } else if (s.size() == 3) {
        c = s[0];
        h = s[1];
        w = s[2];
    } else {
        throw ShapeError("from_chw: expects CHW or NCHW");
    }
    Image img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    for (int64_t ch = 0; ch < c; ch++)
        for (int64_t y = 0; y < h; y++)
            for (int64_t x = 0; x < w; x++)
                img.at(static_cast<int>(y), static_cast<int>(x), static_cast<int>(ch)) =
                    t.data[off + (ch * h + y) * w + x];
    return img;
}

/*------------------------------- PNG I/O -----------------------------------*/

void write_png(const std::string& path, const Image& img) {
    if (img.c != 1 && img.c != 3) throw IoError("write_png: supports 1 or 3 channels");
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng write failure: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<unsigned char> row(static_cast<size_t>(img.w) * 3);
    for (int y = 0; y < img.h; y++) {
        for (int x = 0; x < img.w; x++)
            for (int ch = 0; ch < 3; ch++) {
                const double v = img.at(y, x, img.c == 1 ? 0 : ch);
                row[x * 3 + ch] = static_cast<unsigned char>(
                    std::clamp(std::lround(v * 255.0), 0L, 255L));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw MissingArtifactError(path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("libpng read failure: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; y++) rows[y] = raw.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Image img(h, w, 3);
    for (size_t i = 0; i < raw.size(); i++) img.data[i] = raw[i] / 255.0;
    return img;
}

/*------------------------------ resampling ---------------------------------*/

Image resize_bilinear(const Image& src, int h2, int w2) {
    if (h2 == src.h && w2 == src.w) return src;
    Image dst(h2, w2, src.c);
    const double sy = static_cast<double>(src.h) / h2;
    const double sx = static_cast<double>(src.w) / w2;
    for (int y = 0; y < h2; y++) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(src.h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < w2; x++) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(src.w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.w - 1);
            const double wx = fx - x0;
            for (int ch = 0; ch < src.c; ch++) {
                const double top = src.at(y0, x0, ch) * (1 - wx) + src.at(y0, x1, ch) * wx;
                const double bot = src.at(y1, x0, ch) * (1 - wx) + src.at(y1, x1, ch) * wx;
                dst.at(y, x, ch) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

Image gaussian_blur(const Image& src, double sigma) {
    if (sigma <= 0.0) return src;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double ksum = 0;
    for (int i = -radius; i <= radius; i++) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        ksum += kernel[i + radius];
    }
    for (double& k : kernel) k /= ksum;

    Image tmp(src.h, src.w, src.c), dst(src.h, src.w, src.c);
    for (int y = 0; y < src.h; y++)
        for (int x = 0; x < src.w; x++)
            for (int ch = 0; ch < src.c; ch++) {
                double acc = 0;
                for (int i = -radius; i <= radius; i++) {
                    const int xx = std::clamp(x + i, 0, src.w - 1);
                    acc += kernel[i + radius] * src.at(y, xx, ch);
                }
                tmp.at(y, x, ch) = acc;
            }
    for (int y = 0; y < src.h; y++)
        for (int x = 0; x < src.w; x++)
            for (int ch = 0; ch < src.c; ch++) {
                double acc = 0;
                for (int i = -radius; i <= radius; i++) {
                    const int yy = std::clamp(y + i, 0, src.h - 1);
                    acc += kernel[i + radius] * tmp.at(yy, x, ch);
                }
                dst.at(y, x, ch) = acc;
            }
    return dst;
}

Image flip_horizontal(const Image& src) {
    Image dst(src.h, src.w, src.c);
    for (int y = 0; y < src.h; y++)
        for (int x = 0; x < src.w; x++)
            for (int ch = 0; ch < src.c; ch++) dst.at(y, x, ch) = src.at(y, src.w - 1 - x, ch);
    return dst;
}

/*--------------------------- DCT compression -------------------------------*/

namespace {

// Standard JPEG luminance quantization table, applied per RGB channel.
const int kQuantTable[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

struct DctBasis {
    double cosv[8][8];  // cos((2x+1) u pi / 16)
    double alpha[8];
    DctBasis() {
        for (int u = 0; u < 8; u++) {
            alpha[u] = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int x = 0; x < 8; x++)
                cosv[x][u] = std::cos((2 * x + 1) * u * 3.14159265358979323846 / 16.0);
        }
    }
};
const DctBasis kDct;

void dct8x8(const double in[64], double out[64]) {
    for (int u = 0; u < 8; u++)
        for (int v = 0; v < 8; v++) {
            double acc = 0;
            for (int y = 0; y < 8; y++)
                for (int x = 0; x < 8; x++)
                    acc += in[y * 8 + x] * kDct.cosv[y][u] * kDct.cosv[x][v];
            out[u * 8 + v] = kDct.alpha[u] * kDct.alpha[v] * acc;
        }
}

void idct8x8(const double in[64], double out[64]) {
    for (int y = 0; y < 8; y++)
        for (int x = 0; x < 8; x++) {
            double acc = 0;
            for (int u = 0; u < 8; u++)
                for (int v = 0; v < 8; v++)
                    acc += kDct.alpha[u] * kDct.alpha[v] * in[u * 8 + v] * kDct.cosv[y][u] *
                           kDct.cosv[x][v];
            out[y * 8 + x] = acc;
        }
}

}  // namespace

Image dct_compress(const Image& src, int quality) {
    quality = std::clamp(quality, 1, 100);
    // libjpeg-style scaling; 100 maps to zero quantization strength
    const int scale_pct = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    if (scale_pct == 0) return src;

    const int hb = (src.h + 7) / 8 * 8, wb = (src.w + 7) / 8 * 8;
    Image out(src.h, src.w, src.c);
    double block[64], coef[64], rec[64];
    for (int ch = 0; ch < src.c; ch++) {
        for (int by = 0; by < hb; by += 8) {
            for (int bx = 0; bx < wb; bx += 8) {
                for (int y = 0; y < 8; y++)
                    for (int x = 0; x < 8; x++) {
                        const int sy = std::min(by + y, src.h - 1);
                        const int sx = std::min(bx + x, src.w - 1);
                        block[y * 8 + x] = src.at(sy, sx, ch) * 255.0 - 128.0;
                    }
                dct8x8(block, coef);
                for (int i = 0; i < 64; i++) {
                    const double step = kQuantTable[i] * scale_pct / 100.0;
                    if (step >= 0.5) coef[i] = std::round(coef[i] / step) * step;
                }
                idct8x8(coef, rec);
                for (int y = 0; y < 8 && by + y < src.h; y++)
                    for (int x = 0; x < 8 && bx + x < src.w; x++)
                        out.at(by + y, bx + x, ch) = (rec[y * 8 + x] + 128.0) / 255.0;
            }
        }
    }
    out.clamp01();
    return out;
}

/*-------------------------------- metrics ----------------------------------*/

double image_mse(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w || a.c != b.c) throw ShapeError("image_mse: shape mismatch");
    double acc = 0;
    for (size_t i = 0; i < a.data.size(); i++) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
    const double mse = image_mse(a, b);
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w || a.c != b.c) throw ShapeError("ssim: shape mismatch");
    // gaussian window 11x11, sigma 1.5, valid region only
    const int R = 5;
    double kern[11][11], ksum = 0;
    for (int dy = -R; dy <= R; dy++)
        for (int dx = -R; dx <= R; dx++) {
            kern[dy + R][dx + R] = std::exp(-0.5 * (dy * dy + dx * dx) / (1.5 * 1.5));
            ksum += kern[dy + R][dx + R];
        }
    for (auto& row : kern)
        for (double& v : row) v /= ksum;

    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double acc = 0;
    int64_t count = 0;
    for (int ch = 0; ch < a.c; ch++)
        for (int y = R; y < a.h - R; y++)
            for (int x = R; x < a.w - R; x++) {
                double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
                for (int dy = -R; dy <= R; dy++)
                    for (int dx = -R; dx <= R; dx++) {
                        const double k = kern[dy + R][dx + R];
                        ma += k * a.at(y + dy, x + dx, ch);
                        mb += k * b.at(y + dy, x + dx, ch);
                    }
                for (int dy = -R; dy <= R; dy++)
                    for (int dx = -R; dx <= R; dx++) {
                        const double k = kern[dy + R][dx + R];
                        const double da = a.at(y + dy, x + dx, ch) - ma;
                        const double db = b.at(y + dy, x + dx, ch) - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count++;
            }
    return count > 0 ? acc / static_cast<double>(count) : 1.0;
}

}  // namespace refface
