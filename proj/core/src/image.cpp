#include "emostyle/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "emostyle/errors.hpp"

namespace emostyle {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open '" + path + "' for reading");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng read init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng info init failed");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const std::size_t stride = png_get_rowbytes(png, info);
    pixels.resize(stride * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>(pixels[y * stride + x * 3 + c]) / 255.0f;
    return img;
}

void write_png(const std::string& path, const Image& img) {
    if (img.h == 0 || img.w == 0 || img.data.size() != 3 * img.pixels())
        throw ValidationError("write_png: empty or malformed image");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open '" + path + "' for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng write init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng info init failed");
    }
    std::vector<png_byte> bytes(img.pixels() * 3);
    std::vector<png_bytep> rows(img.h);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode PNG '" + path + "'");
    }
    png_init_io(png, fp.get());
    // pinned codec settings keep output bytes reproducible across runs
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);

    for (std::size_t y = 0; y < img.h; ++y) {
        rows[y] = bytes.data() + y * img.w * 3;
        for (std::size_t x = 0; x < img.w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
                rows[y][x * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0f));
            }
    }
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image quantize8(const Image& img) {
    Image out(img.h, img.w);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const float v = std::clamp(img.data[i], 0.0f, 1.0f);
        out.data[i] = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
    }
    return out;
}

void clamp01(Image& img) {
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

std::vector<float> luma(const Image& img) {
    std::vector<float> out(img.pixels());
    const std::size_t hw = img.pixels();
    for (std::size_t i = 0; i < hw; ++i)
        out[i] = 0.299f * img.data[i] + 0.587f * img.data[hw + i] + 0.114f * img.data[2 * hw + i];
    return out;
}

std::vector<float> sobel_magnitude(const std::vector<float>& plane, std::size_t h, std::size_t w) {
    if (plane.size() != h * w) throw ShapeError("sobel_magnitude: plane size mismatch");
    std::vector<float> out(h * w, 0.0f);
    // clamp-to-edge padding: a constant plane has zero gradient everywhere,
    // border pixels included
    auto px = [&](long y, long x) -> float {
        y = std::clamp(y, 0L, static_cast<long>(h) - 1);
        x = std::clamp(x, 0L, static_cast<long>(w) - 1);
        return plane[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    for (long y = 0; y < static_cast<long>(h); ++y)
        for (long x = 0; x < static_cast<long>(w); ++x) {
            const float gx = px(y - 1, x + 1) + 2.0f * px(y, x + 1) + px(y + 1, x + 1) - px(y - 1, x - 1) -
                             2.0f * px(y, x - 1) - px(y + 1, x - 1);
            const float gy = px(y + 1, x - 1) + 2.0f * px(y + 1, x) + px(y + 1, x + 1) - px(y - 1, x - 1) -
                             2.0f * px(y - 1, x) - px(y - 1, x + 1);
            out[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = std::sqrt(gx * gx + gy * gy);
        }
    return out;
}

std::vector<std::uint8_t> percentile_mask(const std::vector<float>& plane, double q) {
    if (plane.empty()) return {};
    std::vector<float> sorted = plane;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t idx = std::min(sorted.size() - 1,
                                     static_cast<std::size_t>(q * static_cast<double>(sorted.size())));
    const float thresh = sorted[idx];
    std::vector<std::uint8_t> mask(plane.size());
    for (std::size_t i = 0; i < plane.size(); ++i) mask[i] = plane[i] > thresh ? 1 : 0;
    return mask;
}

double edge_iou(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w) throw ShapeError("edge_iou: image sizes differ");
    const auto ma = percentile_mask(sobel_magnitude(luma(a), a.h, a.w), 0.8);
    const auto mb = percentile_mask(sobel_magnitude(luma(b), b.h, b.w), 0.8);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
        inter += (ma[i] & mb[i]);
        uni += (ma[i] | mb[i]);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double ssim(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w) throw ShapeError("ssim: image sizes differ");
    const std::size_t win = 8;
    if (a.h < win || a.w < win) throw ValidationError("ssim: image smaller than 8x8 window");
    const auto la = luma(a);
    const auto lb = luma(b);
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + win <= a.h; ++y)
        for (std::size_t x = 0; x + win <= a.w; ++x) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (std::size_t dy = 0; dy < win; ++dy)
                for (std::size_t dx = 0; dx < win; ++dx) {
                    const double va = la[(y + dy) * a.w + (x + dx)];
                    const double vb = lb[(y + dy) * a.w + (x + dx)];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            const double n = static_cast<double>(win * win);
            const double mua = sa / n, mub = sb / n;
            const double vara = saa / n - mua * mua;
            const double varb = sbb / n - mub * mub;
            const double cov = sab / n - mua * mub;
            acc += ((2 * mua * mub + c1) * (2 * cov + c2)) /
                   ((mua * mua + mub * mub + c1) * (vara + varb + c2));
            ++count;
        }
    return acc / static_cast<double>(count);
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b});
    const float mn = std::min({r, g, b});
    const float d = mx - mn;
    v = mx;
    s = mx > 0.0f ? d / mx : 0.0f;
    if (d <= 0.0f) {
        h = 0.0f;
        return;
    }
    if (mx == r) h = 60.0f * std::fmod((g - b) / d + 6.0f, 6.0f);
    else if (mx == g) h = 60.0f * ((b - r) / d + 2.0f);
    else h = 60.0f * ((r - g) / d + 4.0f);
    if (h >= 360.0f) h -= 360.0f;
    if (h < 0.0f) h += 360.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float hh = std::fmod(std::fmod(h, 360.0f) + 360.0f, 360.0f) / 60.0f;
    const int sector = static_cast<int>(hh) % 6;
    const float f = hh - static_cast<float>(static_cast<int>(hh));
    const float p = v * (1.0f - s);
    const float q = v * (1.0f - s * f);
    const float t = v * (1.0f - s * (1.0f - f));
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

}  // namespace emostyle
