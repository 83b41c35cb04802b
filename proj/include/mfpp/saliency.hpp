#pragma once

// Monte Carlo saliency: S(mu) = sum_i phi_i * M_i(mu) / norm, accumulated over
// every mask of every pyramid layer in one pool.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <future>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mfpp/error.hpp"
#include "mfpp/image.hpp"
#include "mfpp/mask_pyramid.hpp"
#include "mfpp/model.hpp"
#include "mfpp/segmentation.hpp"

namespace mfpp {

enum class Normalization {
    expectation, ///< divide by p * N (E[M] = p for every pixel)
    empirical    ///< divide by the observed per-pixel mask mass, max(C, 1)
};

enum class MaskMethod {
    fragments, ///< multi-scale fragment pyramid
    grid       ///< grid-cell baseline
};

inline std::string to_string(Normalization n) { return n == Normalization::expectation ? "expectation" : "empirical"; }
inline std::string to_string(MaskMethod m) { return m == MaskMethod::fragments ? "fragments" : "grid"; }

inline Normalization parse_normalization(std::string_view s) {
    if (s == "expectation") return Normalization::expectation;
    if (s == "empirical") return Normalization::empirical;
    throw InvalidConfig("unknown normalization '" + std::string(s) + "'");
}

inline MaskMethod parse_mask_method(std::string_view s) {
    if (s == "fragments") return MaskMethod::fragments;
    if (s == "grid") return MaskMethod::grid;
    throw InvalidConfig("unknown mask method '" + std::string(s) + "'");
}

struct ExplainConfig {
    MaskMethod method = MaskMethod::fragments;
    /// Mask count, keep probability and seed are read from here for both methods.
    PyramidConfig pyramid;
    SlicParams slic;
    GridConfig grid;
    Normalization normalization = Normalization::expectation;
    int batch_size = 64;
    /// nullopt resolves to the top-1 class of the unmasked image.
    std::optional<int> target_class;
    /// Batches allowed in flight at once (mask generation + inference overlap).
    unsigned in_flight = 1;

    void validate() const {
        pyramid.validate();
        slic.validate();
        if (batch_size < 1) throw InvalidConfig("batch size must be at least 1");
        if (target_class && *target_class < 0) throw InvalidConfig("target class must be non-negative");
        if (method == MaskMethod::grid && (grid.rows < 1 || grid.cols < 1)) throw InvalidConfig("grid needs at least 1x1 cells");
    }
};

// JSON forms, also used by run manifests. Missing fields keep their defaults.

inline void to_json(nlohmann::json& j, const SlicParams& p) {
    j = {{"n_segments", p.n_segments}, {"compactness", p.compactness}, {"sigma", p.sigma},
         {"max_iters", p.max_iters},   {"seed", p.seed},               {"min_size", p.min_size}};
}

inline void from_json(const nlohmann::json& j, SlicParams& p) {
    p.n_segments = j.value("n_segments", p.n_segments);
    p.compactness = j.value("compactness", p.compactness);
    p.sigma = j.value("sigma", p.sigma);
    p.max_iters = j.value("max_iters", p.max_iters);
    p.seed = j.value("seed", p.seed);
    p.min_size = j.value("min_size", p.min_size);
}

inline void to_json(nlohmann::json& j, const PyramidConfig& c) {
    j = {{"layer_fragment_counts", c.layer_fragment_counts},
         {"upscale_offset", c.upscale_offset},
         {"keep_prob", c.keep_prob},
         {"n_masks_total", c.n_masks_total},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PyramidConfig& c) {
    c.layer_fragment_counts = j.value("layer_fragment_counts", c.layer_fragment_counts);
    c.upscale_offset = j.value("upscale_offset", c.upscale_offset);
    c.keep_prob = j.value("keep_prob", c.keep_prob);
    c.n_masks_total = j.value("n_masks_total", c.n_masks_total);
    c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const ExplainConfig& c) {
    j = {{"method", to_string(c.method)},
         {"pyramid", c.pyramid},
         {"slic", c.slic},
         {"grid", {{"rows", c.grid.rows}, {"cols", c.grid.cols}}},
         {"normalization", to_string(c.normalization)},
         {"batch_size", c.batch_size},
         {"target_class", c.target_class ? nlohmann::json(*c.target_class) : nlohmann::json("top-1")},
         {"in_flight", c.in_flight}};
}

inline void from_json(const nlohmann::json& j, ExplainConfig& c) {
    if (j.contains("method")) c.method = parse_mask_method(j["method"].get<std::string>());
    if (j.contains("pyramid")) j["pyramid"].get_to(c.pyramid);
    if (j.contains("slic")) j["slic"].get_to(c.slic);
    if (j.contains("grid")) {
        c.grid.rows = j["grid"].value("rows", c.grid.rows);
        c.grid.cols = j["grid"].value("cols", c.grid.cols);
    }
    if (j.contains("normalization")) c.normalization = parse_normalization(j["normalization"].get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.in_flight = j.value("in_flight", c.in_flight);
    if (j.contains("target_class")) {
        const auto& t = j["target_class"];
        if (t.is_number_integer())
            c.target_class = t.get<int>();
        else
            c.target_class.reset();
    }
}

/// 64-bit FNV-1a as 16 lowercase hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Hash of the canonical JSON of the fields that determine the output values
/// (batch size and in-flight count are excluded).
inline std::string config_hash(const ExplainConfig& cfg) {
    nlohmann::json j = cfg;
    j.erase("batch_size");
    j.erase("in_flight");
    return fnv1a_hex(j.dump());
}

/// Wall-clock seconds spent in each stage of one explanation.
struct PhaseTimes {
    double segmentation = 0.0;
    double masking = 0.0;
    double inference = 0.0;
    double aggregation = 0.0;

    double sum() const noexcept { return segmentation + masking + inference + aggregation; }
};

struct SaliencyMap {
    struct Meta {
        std::size_t n_masks = 0;
        Normalization normalization = Normalization::expectation;
        std::uint64_t seed = 0;
        std::string config_hash;
        /// Pixels no mask ever kept.
        std::size_t uncovered = 0;
        std::vector<std::string> warnings;
    };

    int width = 0;
    int height = 0;
    std::vector<double> values;
    int target_class = 0;
    Meta meta;

    Size size() const noexcept { return {width, height}; }
    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }

    /// Row-major index of the maximum; ties go to the lowest index.
    std::size_t argmax() const {
        return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
    }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Per-pixel sum of phi * mask (mask as raw unorm8) with Neumaier compensation,
/// plus the exact integer sum of mask bytes.
class Accumulator {
public:
    explicit Accumulator(std::size_t pixels) : sum_(pixels, 0.0), comp_(pixels, 0.0), mass_(pixels, 0), partial_(pixels) {}

    void add_batch(std::span<const std::uint8_t> masks, std::span<const float> scores) {
        const std::size_t n = sum_.size();
        std::fill(partial_.begin(), partial_.end(), 0.0);
        for (std::size_t j = 0; j < scores.size(); ++j) {
            const double phi = scores[j];
            const std::uint8_t* m = masks.data() + j * n;
            for (std::size_t p = 0; p < n; ++p) {
                partial_[p] += phi * m[p];
                mass_[p] += m[p];
            }
        }
        for (std::size_t p = 0; p < n; ++p) {
            const double t = sum_[p] + partial_[p];
            if (std::abs(sum_[p]) >= std::abs(partial_[p]))
                comp_[p] += (sum_[p] - t) + partial_[p];
            else
                comp_[p] += (partial_[p] - t) + sum_[p];
            sum_[p] = t;
        }
    }

    /// sum_i phi_i * M_i(p), with M in [0, 1].
    double weighted(std::size_t p) const { return (sum_[p] + comp_[p]) / 255.0; }
    /// sum_i M_i(p).
    double mass(std::size_t p) const { return static_cast<double>(mass_[p]) / 255.0; }
    bool covered(std::size_t p) const { return mass_[p] > 0; }

private:
    std::vector<double> sum_, comp_;
    std::vector<std::uint64_t> mass_;
    std::vector<double> partial_;
};

inline int checked_argmax(std::span<const float> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

} // namespace detail

/// Argmax of the scores for the unmasked image; ties go to the lowest class.
inline int top_class(const Image& img, const Predictor& model) {
    const PredictResponse resp = predict_batch(model, PredictRequest::single(img));
    return detail::checked_argmax(resp.scores.row(0));
}

/// Runs every mask of `sampler` through the model and reduces the target-class
/// scores into a saliency map. Sampler must expose count(), target(),
/// keep_prob() and render(i, out).
template <class Sampler>
SaliencyMap accumulate_saliency(const Image& img, const Predictor& model, const Sampler& sampler, int target,
                                const ExplainConfig& cfg, PhaseTimes* times = nullptr) {
    const Size size = img.size();
    if (sampler.target() != size) throw DimensionMismatch("mask size differs from image size");
    const std::size_t n_masks = sampler.count();
    const std::size_t pixels = size.area();
    const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t n_batches = (n_masks + batch - 1) / batch;

    struct BatchResult {
        std::vector<std::uint8_t> masks;
        PredictRequest req;
        std::vector<float> scores;
        double masking = 0.0, inference = 0.0;
    };

    // batch buffers are recycled through a pool
    std::mutex pool_mutex;
    std::vector<BatchResult> pool;
    auto acquire = [&] {
        std::lock_guard lock(pool_mutex);
        if (pool.empty()) return BatchResult{};
        BatchResult r = std::move(pool.back());
        pool.pop_back();
        return r;
    };

    auto run_batch = [&](std::size_t b) {
        BatchResult r = acquire();
        const std::size_t first = b * batch;
        const std::size_t count = std::min(batch, n_masks - first);
        auto t0 = detail::Clock::now();
        r.masks.resize(count * pixels);
        r.req.batch = static_cast<int>(count);
        r.req.height = size.height;
        r.req.width = size.width;
        r.req.pixels.resize(count * pixels * Image::channels);
        for (std::size_t j = 0; j < count; ++j) {
            std::span<std::uint8_t> m{r.masks.data() + j * pixels, pixels};
            sampler.render(first + j, m);
            apply_mask_into(img, m, {r.req.pixels.data() + j * pixels * Image::channels, pixels * Image::channels});
        }
        r.masking = detail::seconds_since(t0);
        t0 = detail::Clock::now();
        PredictResponse resp;
        try {
            resp = predict_batch(model, r.req);
        } catch (const std::exception& e) {
            throw PredictorError(first, e.what());
        }
        if (target >= resp.scores.cols)
            throw InvalidConfig("target class " + std::to_string(target) + " outside the model's "
                                + std::to_string(resp.scores.cols) + " classes");
        r.scores.resize(count);
        for (std::size_t j = 0; j < count; ++j) r.scores[j] = resp.scores.at(static_cast<int>(j), target);
        r.inference = detail::seconds_since(t0);
        return r;
    };

    detail::Accumulator acc(pixels);
    PhaseTimes local;
    auto consume = [&](BatchResult r) {
        local.masking += r.masking;
        local.inference += r.inference;
        const auto t0 = detail::Clock::now();
        acc.add_batch(r.masks, r.scores);
        local.aggregation += detail::seconds_since(t0);
        std::lock_guard lock(pool_mutex);
        pool.push_back(std::move(r));
    };

    if (cfg.in_flight <= 1) {
        for (std::size_t b = 0; b < n_batches; ++b) consume(run_batch(b));
    } else {
        std::deque<std::future<BatchResult>> pending;
        std::size_t next = 0;
        for (std::size_t done = 0; done < n_batches; ++done) {
            while (next < n_batches && pending.size() < cfg.in_flight)
                pending.push_back(std::async(std::launch::async, run_batch, next++));
            consume(pending.front().get());
            pending.pop_front();
        }
    }

    const auto t0 = detail::Clock::now();
    SaliencyMap map;
    map.width = size.width;
    map.height = size.height;
    map.values.resize(pixels);
    map.target_class = target;
    map.meta.n_masks = n_masks;
    map.meta.normalization = cfg.normalization;
    map.meta.seed = cfg.pyramid.seed;
    map.meta.config_hash = config_hash(cfg);
    const double expectation_norm = sampler.keep_prob() * static_cast<double>(n_masks);
    for (std::size_t p = 0; p < pixels; ++p) {
        if (!acc.covered(p)) ++map.meta.uncovered;
        if (cfg.normalization == Normalization::expectation)
            map.values[p] = expectation_norm > 0.0 ? acc.weighted(p) / expectation_norm : 0.0;
        else
            map.values[p] = acc.covered(p) ? acc.weighted(p) / std::max(acc.mass(p), 1.0) : 0.0;
    }
    if (map.meta.uncovered > 0 && cfg.normalization == Normalization::empirical)
        map.meta.warnings.push_back(std::to_string(map.meta.uncovered)
                                    + " pixels were never kept by any mask; their saliency is set to 0");
    local.aggregation += detail::seconds_since(t0);
    if (times) {
        times->masking += local.masking;
        times->inference += local.inference;
        times->aggregation += local.aggregation;
    }
    return map;
}

inline int resolve_target(const Image& img, const Predictor& model, const ExplainConfig& cfg, PhaseTimes* times) {
    if (cfg.target_class) return *cfg.target_class;
    const auto t0 = detail::Clock::now();
    int t;
    try {
        t = top_class(img, model);
    } catch (const PredictorError&) {
        throw;
    } catch (const std::exception& e) {
        throw PredictorError(0, std::string("top-1 resolution: ") + e.what());
    }
    if (times) times->inference += detail::seconds_since(t0);
    return t;
}

/// Saliency over masks drawn from an existing pyramid (method is taken as fragments).
inline SaliencyMap explain_with_pyramid(const Image& img, const Predictor& model, const FragmentPyramid& pyr,
                                        const ExplainConfig& cfg, PhaseTimes* times = nullptr) {
    cfg.validate();
    const int target = resolve_target(img, model, cfg, times);
    const FragmentMaskSampler sampler(pyr, cfg.pyramid, img.size());
    return accumulate_saliency(img, model, sampler, target, cfg, times);
}

/// Full pipeline: resolve target, build masks (fragment pyramid or grid), run
/// batched predictions and reduce.
inline SaliencyMap saliency(const Image& img, const Predictor& model, const ExplainConfig& cfg,
                            PhaseTimes* times = nullptr) {
    img.validate();
    cfg.validate();
    if (cfg.method == MaskMethod::grid) {
        const int target = resolve_target(img, model, cfg, times);
        const GridMaskSampler sampler(static_cast<std::size_t>(cfg.pyramid.n_masks_total), cfg.grid,
                                      cfg.pyramid.keep_prob, img.size(), cfg.pyramid.seed);
        return accumulate_saliency(img, model, sampler, target, cfg, times);
    }
    const int target = resolve_target(img, model, cfg, times);
    const auto t0 = detail::Clock::now();
    const FragmentPyramid pyr = build_pyramid(img, cfg.pyramid, cfg.slic);
    if (times) times->segmentation += detail::seconds_since(t0);
    ExplainConfig resolved = cfg;
    resolved.target_class = target;
    return explain_with_pyramid(img, model, pyr, resolved, times);
}

struct FragmentAttribution {
    LabelMap labels;
    /// Mean saliency over each fragment's pixels, indexed by label.
    std::vector<double> scores;
    SaliencyMap map;

    /// Labels sorted by descending score (ties by label).
    std::vector<int> ranking() const {
        std::vector<int> order(scores.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
        return order;
    }
};

/// Single-scale attribution: one layer of `n_segments` fragments without
/// upscaling, pixel saliency averaged per fragment.
inline FragmentAttribution fragment_attribution(const Image& img, const Predictor& model, int n_segments,
                                                int target_class, int n_masks, SlicParams slic = {},
                                                std::uint64_t seed = 0, double keep_prob = 0.5) {
    ExplainConfig cfg;
    cfg.pyramid.layer_fragment_counts = {n_segments};
    cfg.pyramid.upscale_offset = 1.0;
    cfg.pyramid.n_masks_total = n_masks;
    cfg.pyramid.keep_prob = keep_prob;
    cfg.pyramid.seed = seed;
    cfg.slic = slic;
    cfg.normalization = Normalization::expectation;
    cfg.target_class = target_class;
    cfg.validate();

    const FragmentPyramid pyr = build_pyramid(img, cfg.pyramid, cfg.slic);
    FragmentAttribution out;
    out.labels = pyr.layers.front();
    out.map = explain_with_pyramid(img, model, pyr, cfg);
    out.scores.assign(static_cast<std::size_t>(out.labels.n_fragments), 0.0);
    const auto areas = out.labels.areas();
    for (std::size_t p = 0; p < out.labels.labels.size(); ++p) out.scores[out.labels.labels[p]] += out.map.values[p];
    for (std::size_t f = 0; f < out.scores.size(); ++f) out.scores[f] /= static_cast<double>(areas[f]);
    return out;
}

// ---------------------------------------------------------------------------
// Raster + sidecar files: <name>.f32 holds width*height little-endian float32
// values row-major; <name>.json holds the metadata.

inline nlohmann::json saliency_sidecar(const SaliencyMap& map) {
    return {{"width", map.width},
            {"height", map.height},
            {"target_class", map.target_class},
            {"n_masks", map.meta.n_masks},
            {"normalization", to_string(map.meta.normalization)},
            {"seed", map.meta.seed},
            {"config_hash", map.meta.config_hash}};
}

inline std::filesystem::path sidecar_path(std::filesystem::path raster) { return raster.replace_extension(".json"); }

inline void save_saliency(const SaliencyMap& map, const std::filesystem::path& raster) {
    std::vector<float> values(map.values.begin(), map.values.end());
    std::string bytes;
    wire::detail::put_f32(bytes, values);
    std::ofstream out(raster, std::ios::binary);
    if (!out) throw Error("cannot write " + raster.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    std::ofstream side(sidecar_path(raster));
    if (!side) throw Error("cannot write " + sidecar_path(raster).string());
    side << saliency_sidecar(map).dump(2) << '\n';
}

inline SaliencyMap load_saliency(const std::filesystem::path& raster) {
    std::ifstream side(sidecar_path(raster));
    if (!side) throw FormatError("missing sidecar " + sidecar_path(raster).string());
    const auto j = nlohmann::json::parse(side, nullptr, false);
    if (j.is_discarded() || !j.contains("width") || !j.contains("height")) throw FormatError("malformed sidecar");
    SaliencyMap map;
    map.width = j["width"].get<int>();
    map.height = j["height"].get<int>();
    map.target_class = j.value("target_class", 0);
    map.meta.n_masks = j.value("n_masks", std::size_t{0});
    map.meta.normalization = parse_normalization(j.value("normalization", std::string("expectation")));
    map.meta.seed = j.value("seed", std::uint64_t{0});
    map.meta.config_hash = j.value("config_hash", std::string{});

    std::ifstream in(raster, std::ios::binary);
    if (!in) throw FormatError("cannot read " + raster.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != static_cast<std::size_t>(map.width) * map.height * 4)
        throw FormatError("raster size does not match sidecar dimensions");
    const auto values = wire::detail::get_f32(bytes);
    map.values.assign(values.begin(), values.end());
    return map;
}

} // namespace mfpp
