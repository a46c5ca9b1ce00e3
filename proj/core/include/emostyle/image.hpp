#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emostyle/tensor.hpp"

namespace emostyle {

// Planar float RGB in [0,1], laid out channel-major so a whole image is a
// {3,H,W} tensor without copying games.
struct Image {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<float> data;  // (c*h + y)*w + x

    Image() = default;
    Image(std::size_t hh, std::size_t ww) : h(hh), w(ww), data(3 * hh * ww, 0.0f) {}

    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * h + y) * w + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * h + y) * w + x]; }
    std::size_t pixels() const { return h * w; }
};

Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// Round to the 8-bit grid the PNG codec stores, staying in float.
Image quantize8(const Image& img);
void clamp01(Image& img);

template <class S>
Tensor<S> to_tensor(const Image& img) {
    Tensor<S> t({3, img.h, img.w});
    for (std::size_t i = 0; i < img.data.size(); ++i) t.data[i] = static_cast<S>(img.data[i]);
    return t;
}

template <class S>
Image from_tensor(const Tensor<S>& t) {
    if (t.rank() != 3 || t.shape[0] != 3) throw ShapeError("from_tensor: want {3,H,W}, got " + shape_str(t.shape));
    Image img(t.shape[1], t.shape[2]);
    for (std::size_t i = 0; i < t.numel(); ++i) img.data[i] = static_cast<float>(t.data[i]);
    return img;
}

// Rec. 601 luma plane, {H*W}.
std::vector<float> luma(const Image& img);

// Gradient magnitude of a single plane, 3x3 Sobel, zero padding.
std::vector<float> sobel_magnitude(const std::vector<float>& plane, std::size_t h, std::size_t w);

// Mask of values strictly above the q-th percentile (nearest-rank) of the plane.
std::vector<std::uint8_t> percentile_mask(const std::vector<float>& plane, double q);

// IoU of edge masks from luma Sobel maps, 80th-percentile threshold per image.
// Both masks empty counts as perfect agreement (1.0).
double edge_iou(const Image& a, const Image& b);

// Mean SSIM over all 8x8 sliding windows of the luma planes.
double ssim(const Image& a, const Image& b);

// HSV with h in [0,360), s,v in [0,1].
void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v);
void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b);

}  // namespace emostyle
