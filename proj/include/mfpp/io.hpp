#pragma once

// Image codecs (OpenCV) and the debug mask dump.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "mfpp/error.hpp"
#include "mfpp/image.hpp"
#include "mfpp/mask_pyramid.hpp"

namespace mfpp {

/// Reads any format OpenCV decodes into RGB in [0, 1].
inline Image read_image(const std::filesystem::path& path) {
    const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error("cannot read image " + path.string());
    Image img(bgr.cols, bgr.rows);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x)
            img.set_pixel(x, y, row[x][2] / 255.0f, row[x][1] / 255.0f, row[x][0] / 255.0f);
    }
    return img;
}

inline void write_png(const Image& img, const std::filesystem::path& path) {
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[x][2 - c] = cv::saturate_cast<std::uint8_t>(std::lround(img.at(x, y, c) * 255.0f));
    }
    if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write " + path.string());
}

inline void write_gray_png(std::span<const std::uint8_t> pixels, Size size, const std::filesystem::path& path) {
    if (pixels.size() != size.area()) throw DimensionMismatch("gray buffer does not match size");
    const cv::Mat gray(size.height, size.width, CV_8UC1, const_cast<std::uint8_t*>(pixels.data()));
    if (!cv::imwrite(path.string(), gray)) throw Error("cannot write " + path.string());
}

/// One 8-bit grayscale PNG per mask (mask_00000.png, ...) plus manifest.json
/// listing layer, crop offset and seed of each.
inline void dump_masks(const MaskBatch& batch, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = {{"width", batch.size.width}, {"height", batch.size.height}, {"masks", nlohmann::json::array()}};
    for (std::size_t i = 0; i < batch.count(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "mask_%05zu.png", i);
        write_gray_png(batch.mask(i), batch.size, dir / name);
        const auto& info = batch.info[i];
        manifest["masks"].push_back({{"file", name},
                                     {"layer", info.layer},
                                     {"crop_x", info.crop_x},
                                     {"crop_y", info.crop_y},
                                     {"seed", info.seed}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

} // namespace mfpp
