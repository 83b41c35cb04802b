#pragma once

// SLIC superpixels: Gaussian pre-smoothing, CIELab conversion, localized
// k-means over (L, a, b, x, y) and connectivity enforcement.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "mfpp/error.hpp"
#include "mfpp/image.hpp"

namespace mfpp {

struct SlicParams {
    int n_segments = 100;
    /// Spatial-vs-color weight m.
    double compactness = 10.0;
    /// Pre-smoothing standard deviation in pixels; controls boundary smoothness.
    double sigma = 1.0;
    int max_iters = 10;
    /// Carried into run manifests; the clustering itself is deterministic and draws no random numbers.
    std::uint64_t seed = 0;
    /// Components below this area are merged away; 0 selects area / (4 * n_segments).
    int min_size = 0;

    void validate() const {
        if (n_segments < 1) throw InvalidParams("n_segments must be positive");
        if (!(compactness > 0.0) || !std::isfinite(compactness)) throw InvalidParams("compactness must be positive");
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidParams("sigma must be non-negative");
        if (max_iters < 1) throw InvalidParams("max_iters must be positive");
        if (min_size < 0) throw InvalidParams("min_size must be non-negative");
    }

    void validate_for(Size image) const {
        validate();
        if (static_cast<std::size_t>(n_segments) > image.area())
            throw InvalidParams("n_segments (" + std::to_string(n_segments) + ") exceeds pixel count ("
                                + std::to_string(image.area()) + ")");
    }

    int effective_min_size(Size image) const {
        if (min_size > 0) return min_size;
        return static_cast<int>(image.area() / (4 * static_cast<std::size_t>(n_segments)));
    }
};

/// Per-pixel fragment ids, row-major. After segmentation the ids are contiguous
/// in [0, n_fragments) and every fragment is 4-connected.
struct LabelMap {
    int width = 0;
    int height = 0;
    std::vector<std::int32_t> labels;
    int n_fragments = 0;

    Size size() const noexcept { return {width, height}; }
    std::int32_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }

    std::vector<std::size_t> areas() const {
        std::vector<std::size_t> a(static_cast<std::size_t>(n_fragments), 0);
        for (auto l : labels) ++a[static_cast<std::size_t>(l)];
        return a;
    }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Separable Gaussian blur per channel, kernel radius ceil(3 sigma), clamp-to-edge.
/// sigma == 0 returns the input unchanged.
inline Image gaussian_smooth(const Image& img, double sigma) {
    if (sigma < 0.0 || !std::isfinite(sigma)) throw InvalidParams("sigma must be non-negative");
    if (sigma == 0.0) return img;

    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
    for (double& k : kernel) k /= norm;

    const int w = img.width, h = img.height;
    constexpr int C = Image::channels;
    std::vector<double> tmp(img.data.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::array<double, C> acc{};
            for (int i = -radius; i <= radius; ++i) {
                const int sx = std::clamp(x + i, 0, w - 1);
                for (int c = 0; c < C; ++c) acc[c] += kernel[i + radius] * img.at(sx, y, c);
            }
            for (int c = 0; c < C; ++c) tmp[(static_cast<std::size_t>(y) * w + x) * C + c] = acc[c];
        }
    }
    Image out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::array<double, C> acc{};
            for (int i = -radius; i <= radius; ++i) {
                const int sy = std::clamp(y + i, 0, h - 1);
                for (int c = 0; c < C; ++c) acc[c] += kernel[i + radius] * tmp[(static_cast<std::size_t>(sy) * w + x) * C + c];
            }
            for (int c = 0; c < C; ++c) out.at(x, y, c) = static_cast<float>(acc[c]);
        }
    }
    return out;
}

/// CIELab planes (structure of arrays).
struct LabPlanes {
    std::vector<float> L, a, b;
};

/// sRGB (D65, standard gamma) to CIELab.
inline LabPlanes rgb_to_lab(const Image& img) {
    const std::size_t n = img.pixel_count();
    LabPlanes lab{std::vector<float>(n), std::vector<float>(n), std::vector<float>(n)};
    auto linearize = [](double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); };
    auto f = [](double t) { return t > 0.008856 ? std::cbrt(t) : 7.787 * t + 16.0 / 116.0; };
    for (std::size_t i = 0; i < n; ++i) {
        const double r = linearize(img.data[3 * i]);
        const double g = linearize(img.data[3 * i + 1]);
        const double b = linearize(img.data[3 * i + 2]);
        const double X = (0.412453 * r + 0.357580 * g + 0.180423 * b) / 0.950456;
        const double Y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
        const double Z = (0.019334 * r + 0.119193 * g + 0.950227 * b) / 1.088754;
        const double fx = f(X), fy = f(Y), fz = f(Z);
        lab.L[i] = static_cast<float>(Y > 0.008856 ? 116.0 * fy - 16.0 : 903.3 * Y);
        lab.a[i] = static_cast<float>(500.0 * (fx - fy));
        lab.b[i] = static_cast<float>(200.0 * (fy - fz));
    }
    return lab;
}

/// Number of 4-neighbour pixel pairs carrying different labels.
inline std::size_t boundary_length(const LabelMap& lm) {
    std::size_t count = 0;
    for (int y = 0; y < lm.height; ++y)
        for (int x = 0; x < lm.width; ++x) {
            if (x + 1 < lm.width && lm.at(x, y) != lm.at(x + 1, y)) ++count;
            if (y + 1 < lm.height && lm.at(x, y) != lm.at(x, y + 1)) ++count;
        }
    return count;
}

/// Splits every label into its 4-connected components, merges components
/// smaller than min_size into their largest adjacent neighbour, and renumbers
/// labels contiguously in raster order of first appearance.
inline LabelMap enforce_connectivity(const LabelMap& lm, int min_size) {
    const int w = lm.width, h = lm.height;
    const std::size_t n = lm.labels.size();

    std::vector<std::int32_t> comp(n, -1);
    std::vector<std::size_t> comp_size;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < n; ++start) {
        if (comp[start] >= 0) continue;
        const auto id = static_cast<std::int32_t>(comp_size.size());
        const auto label = lm.labels[start];
        std::size_t size = 0;
        comp[start] = id;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++size;
            const int x = static_cast<int>(p % w), y = static_cast<int>(p / w);
            auto visit = [&](std::size_t q) {
                if (comp[q] < 0 && lm.labels[q] == label) {
                    comp[q] = id;
                    stack.push_back(q);
                }
            };
            if (x > 0) visit(p - 1);
            if (x + 1 < w) visit(p + 1);
            if (y > 0) visit(p - w);
            if (y + 1 < h) visit(p + w);
        }
        comp_size.push_back(size);
    }

    const std::size_t n_comp = comp_size.size();
    std::vector<std::int32_t> parent(n_comp);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::int32_t c) {
        while (parent[c] != c) {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        return c;
    };

    const auto min_area = static_cast<std::size_t>(std::max(min_size, 0));
    std::vector<std::int32_t> best(n_comp);
    for (bool changed = true; changed;) {
        changed = false;
        std::fill(best.begin(), best.end(), -1);
        auto consider = [&](std::int32_t a, std::int32_t b) {
            if (comp_size[a] >= min_area) return;
            const std::int32_t cur = best[a];
            if (cur < 0 || comp_size[b] > comp_size[cur] || (comp_size[b] == comp_size[cur] && b < cur)) best[a] = b;
        };
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                const auto ra = find(comp[p]);
                if (x + 1 < w) {
                    const auto rb = find(comp[p + 1]);
                    if (ra != rb) consider(ra, rb), consider(rb, ra);
                }
                if (y + 1 < h) {
                    const auto rb = find(comp[p + w]);
                    if (ra != rb) consider(ra, rb), consider(rb, ra);
                }
            }

        std::vector<std::int32_t> small;
        for (std::size_t c = 0; c < n_comp; ++c)
            if (best[c] >= 0) small.push_back(static_cast<std::int32_t>(c));
        std::sort(small.begin(), small.end(), [&](auto a, auto b) {
            return comp_size[a] != comp_size[b] ? comp_size[a] < comp_size[b] : a < b;
        });
        for (const auto a : small) {
            const auto ra = find(a);
            if (comp_size[ra] >= min_area) continue;
            const auto rb = find(best[a]);
            if (ra == rb) continue;
            parent[ra] = rb;
            comp_size[rb] += comp_size[ra];
            changed = true;
        }
    }

    LabelMap out{w, h, std::vector<std::int32_t>(n), 0};
    std::vector<std::int32_t> relabel(n_comp, -1);
    for (std::size_t p = 0; p < n; ++p) {
        const auto r = find(comp[p]);
        if (relabel[r] < 0) relabel[r] = out.n_fragments++;
        out.labels[p] = relabel[r];
    }
    return out;
}

namespace detail {

struct SlicCenter {
    double L, a, b, x, y;
};

/// Grid of nx * ny seeds approximating n_segments with roughly square cells.
inline std::pair<int, int> slic_grid(int n_segments, int width, int height) {
    int nx = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_segments) * width / height) - 1e-9));
    nx = std::clamp(nx, 1, width);
    int ny = static_cast<int>(std::lround(static_cast<double>(n_segments) / nx));
    ny = std::clamp(ny, 1, height);
    return {nx, ny};
}

} // namespace detail

/// SLIC superpixels followed by connectivity enforcement.
///
/// Seeds sit on a regular grid with spacing about S = sqrt(H*W / n_segments), moved
/// to the lowest-gradient pixel of their 3x3 neighbourhood. Each iteration assigns
/// every pixel in a center's 2S x 2S window to the center minimizing
/// D^2 = d_lab^2 + (d_xy / S)^2 m^2 (ties go to the lower center index) and moves
/// centers to their cluster means, stopping after max_iters or when no center
/// moves by 0.5 px or more.
inline LabelMap slic_segment(const Image& img, const SlicParams& params) {
    img.validate();
    params.validate_for(img.size());

    const int w = img.width, h = img.height;
    const std::size_t n = img.pixel_count();
    const LabPlanes lab = rgb_to_lab(gaussian_smooth(img, params.sigma));

    const double step = std::sqrt(static_cast<double>(n) / params.n_segments);
    const double spatial_weight = params.compactness * params.compactness / (step * step);

    auto gradient = [&](int x, int y) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        const std::size_t r = static_cast<std::size_t>(y) * w + std::min(x + 1, w - 1);
        const std::size_t d = static_cast<std::size_t>(std::min(y + 1, h - 1)) * w + x;
        auto sq = [&](std::size_t q) {
            const double dl = lab.L[q] - lab.L[p], da = lab.a[q] - lab.a[p], db = lab.b[q] - lab.b[p];
            return dl * dl + da * da + db * db;
        };
        return sq(r) + sq(d);
    };

    const auto [nx, ny] = detail::slic_grid(params.n_segments, w, h);
    std::vector<detail::SlicCenter> centers;
    centers.reserve(static_cast<std::size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            int cx = std::min(static_cast<int>((i + 0.5) * w / nx), w - 1);
            int cy = std::min(static_cast<int>((j + 0.5) * h / ny), h - 1);
            double best = gradient(cx, cy);
            int bx = cx, by = cy;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int x = cx + dx, y = cy + dy;
                    if (x < 0 || y < 0 || x >= w || y >= h) continue;
                    const double g = gradient(x, y);
                    if (g < best) best = g, bx = x, by = y;
                }
            const std::size_t p = static_cast<std::size_t>(by) * w + bx;
            centers.push_back({lab.L[p], lab.a[p], lab.b[p], static_cast<double>(bx), static_cast<double>(by)});
        }
    }

    std::vector<std::int32_t> labels(n, -1);
    std::vector<double> dist(n);
    const std::size_t k = centers.size();

    auto distance = [&](const detail::SlicCenter& c, std::size_t p, int x, int y) {
        const double dl = lab.L[p] - c.L, da = lab.a[p] - c.a, db = lab.b[p] - c.b;
        const double dx = x - c.x, dy = y - c.y;
        return dl * dl + da * da + db * db + (dx * dx + dy * dy) * spatial_weight;
    };

    for (int iter = 0; iter < params.max_iters; ++iter) {
        std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
        std::fill(labels.begin(), labels.end(), -1);
        for (std::size_t c = 0; c < k; ++c) {
            const auto& ctr = centers[c];
            const int x0 = std::max(0, static_cast<int>(std::floor(ctr.x - step)));
            const int x1 = std::min(w - 1, static_cast<int>(std::ceil(ctr.x + step)));
            const int y0 = std::max(0, static_cast<int>(std::floor(ctr.y - step)));
            const int y1 = std::min(h - 1, static_cast<int>(std::ceil(ctr.y + step)));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const std::size_t p = static_cast<std::size_t>(y) * w + x;
                    const double d = distance(ctr, p, x, y);
                    if (d < dist[p]) {
                        dist[p] = d;
                        labels[p] = static_cast<std::int32_t>(c);
                    }
                }
        }
        // Pixels outside every window (possible once centers drift) fall back to a global search.
        for (std::size_t p = 0; p < n; ++p) {
            if (labels[p] >= 0) continue;
            const int x = static_cast<int>(p % w), y = static_cast<int>(p / w);
            for (std::size_t c = 0; c < k; ++c) {
                const double d = distance(centers[c], p, x, y);
                if (d < dist[p]) {
                    dist[p] = d;
                    labels[p] = static_cast<std::int32_t>(c);
                }
            }
        }

        std::vector<std::array<double, 5>> sums(k, std::array<double, 5>{});
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t p = 0; p < n; ++p) {
            auto& s = sums[labels[p]];
            s[0] += lab.L[p];
            s[1] += lab.a[p];
            s[2] += lab.b[p];
            s[3] += static_cast<double>(p % w);
            s[4] += static_cast<double>(p / w);
            ++counts[labels[p]];
        }
        double max_shift = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            const double inv = 1.0 / static_cast<double>(counts[c]);
            detail::SlicCenter next{sums[c][0] * inv, sums[c][1] * inv, sums[c][2] * inv, sums[c][3] * inv,
                                    sums[c][4] * inv};
            max_shift = std::max(max_shift, std::hypot(next.x - centers[c].x, next.y - centers[c].y));
            centers[c] = next;
        }
        if (max_shift < 0.5) break;
    }

    LabelMap raw{w, h, std::move(labels), static_cast<int>(k)};
    return enforce_connectivity(raw, params.effective_min_size(img.size()));
}

} // namespace mfpp
