#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mfpp/error.hpp"

namespace mfpp {

struct Size {
    int width = 0;
    int height = 0;

    std::size_t area() const noexcept { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    friend bool operator==(const Size&, const Size&) = default;
};

/// Interleaved RGB raster with intensities in [0, 1], row-major.
struct Image {
    static constexpr int channels = 3;

    int width = 0;
    int height = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, float fill = 0.0f)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h * channels, fill) {}

    Size size() const noexcept { return {width, height}; }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width) * height; }

    float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

    void set_pixel(int x, int y, float r, float g, float b) {
        float* p = &at(x, y, 0);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }

    /// Throws InvalidParams unless dimensions are positive, the buffer length
    /// matches, and every intensity is finite and within [0, 1].
    void validate() const {
        if (width < 1 || height < 1) throw InvalidParams("image dimensions must be positive");
        if (data.size() != pixel_count() * channels)
            throw InvalidParams("image buffer holds " + std::to_string(data.size()) + " values, expected "
                                + std::to_string(pixel_count() * channels));
        for (float v : data)
            if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw InvalidParams("image intensity outside [0,1]");
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Bilinear resampling of an interleaved plane with half-pixel centers and
/// clamp-to-edge borders (the convention of cv::resize / torchvision).
inline std::vector<float> resize_bilinear(std::span<const float> src, int src_w, int src_h, int channels, int dst_w,
                                          int dst_h) {
    std::vector<float> dst(static_cast<std::size_t>(dst_w) * dst_h * channels);
    if (src_w == dst_w && src_h == dst_h) {
        std::copy(src.begin(), src.end(), dst.begin());
        return dst;
    }
    const double sx = static_cast<double>(src_w) / dst_w;
    const double sy = static_cast<double>(src_h) / dst_h;

    struct Tap {
        int i0, i1;
        float w1;
    };
    auto taps = [](int n_dst, int n_src, double scale) {
        std::vector<Tap> t(n_dst);
        for (int i = 0; i < n_dst; ++i) {
            double s = (i + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(n_src - 1));
            const int i0 = static_cast<int>(std::floor(s));
            const int i1 = std::min(i0 + 1, n_src - 1);
            t[i] = {i0, i1, static_cast<float>(s - i0)};
        }
        return t;
    };
    const auto tx = taps(dst_w, src_w, sx);
    const auto ty = taps(dst_h, src_h, sy);

    for (int y = 0; y < dst_h; ++y) {
        const Tap& vy = ty[y];
        const float* row0 = src.data() + static_cast<std::size_t>(vy.i0) * src_w * channels;
        const float* row1 = src.data() + static_cast<std::size_t>(vy.i1) * src_w * channels;
        float* out = dst.data() + static_cast<std::size_t>(y) * dst_w * channels;
        for (int x = 0; x < dst_w; ++x) {
            const Tap& vx = tx[x];
            for (int c = 0; c < channels; ++c) {
                const float top = row0[vx.i0 * channels + c] * (1.0f - vx.w1) + row0[vx.i1 * channels + c] * vx.w1;
                const float bot = row1[vx.i0 * channels + c] * (1.0f - vx.w1) + row1[vx.i1 * channels + c] * vx.w1;
                out[x * channels + c] = top * (1.0f - vy.w1) + bot * vy.w1;
            }
        }
    }
    return dst;
}

inline Image resize_bilinear(const Image& img, int width, int height) {
    Image out;
    out.width = width;
    out.height = height;
    out.data = resize_bilinear(img.data, img.width, img.height, Image::channels, width, height);
    for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

} // namespace mfpp
