#pragma once

// The opaque predictor boundary: request/response types, the binary wire
// framing shared with remote model servers, and in-process toy predictors.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mfpp/error.hpp"
#include "mfpp/image.hpp"
#include "mfpp/segmentation.hpp"

namespace mfpp {

/// Row-major B x C score matrix.
struct ScoreMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::span<const float> row(int r) const { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }

    friend bool operator==(const ScoreMatrix&, const ScoreMatrix&) = default;
};

/// B images of H x W x 3 float RGB in [0, 1], packed contiguously.
struct PredictRequest {
    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    std::size_t image_floats() const noexcept { return static_cast<std::size_t>(height) * width * Image::channels; }
    std::span<const float> image(int i) const { return {pixels.data() + i * image_floats(), image_floats()}; }

    void validate() const {
        if (batch < 1 || height < 1 || width < 1) throw ProtocolError("request dimensions must be positive");
        if (pixels.size() != static_cast<std::size_t>(batch) * image_floats())
            throw ProtocolError("request payload holds " + std::to_string(pixels.size()) + " floats, expected "
                                + std::to_string(static_cast<std::size_t>(batch) * image_floats()));
    }

    static PredictRequest single(const Image& img) { return {1, img.height, img.width, img.data}; }

    friend bool operator==(const PredictRequest&, const PredictRequest&) = default;
};

struct PredictResponse {
    ScoreMatrix scores;
    std::vector<std::string> class_names;

    friend bool operator==(const PredictResponse&, const PredictResponse&) = default;
};

struct ModelInfo {
    int classes = 0;
    std::vector<std::string> class_names;
    std::string model;
};

/// A black-box classifier. Implementations must be safe to call concurrently
/// and deterministic for identical payloads.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual PredictResponse predict(const PredictRequest& req) const = 0;
    virtual ModelInfo info() const = 0;
};

/// Calls the predictor and checks the response shape against the request.
inline PredictResponse predict_batch(const Predictor& model, const PredictRequest& req) {
    req.validate();
    PredictResponse resp = model.predict(req);
    const auto& s = resp.scores;
    if (s.rows != req.batch || s.cols < 1 || s.data.size() != static_cast<std::size_t>(s.rows) * s.cols)
        throw ProtocolError("response shape " + std::to_string(s.rows) + "x" + std::to_string(s.cols)
                            + " does not match request batch " + std::to_string(req.batch));
    for (float v : s.data)
        if (!std::isfinite(v)) throw ProtocolError("response contains non-finite scores");
    return resp;
}

namespace wire {

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(std::string_view in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
    return v;
}

inline void put_f32(std::string& out, std::span<const float> values) {
    const std::size_t start = out.size();
    out.resize(start + values.size() * 4);
    char* dst = out.data() + start;
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(dst, values.data(), values.size() * 4);
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const auto bits = std::bit_cast<std::uint32_t>(values[i]);
            for (int b = 0; b < 4; ++b) dst[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        }
    }
}

inline std::vector<float> get_f32(std::string_view in) {
    std::vector<float> values(in.size() / 4);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(values.data(), in.data(), values.size() * 4);
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[4 * i + b])) << (8 * b);
            values[i] = std::bit_cast<float>(bits);
        }
    }
    return values;
}

/// Splits a frame into its JSON header and raw tensor bytes.
inline std::pair<nlohmann::json, std::string_view> split_frame(std::string_view body) {
    if (body.size() < 8) throw ProtocolError("frame shorter than its 8-byte length prefix");
    const std::uint64_t header_len = get_u64(body);
    if (header_len > body.size() - 8) throw ProtocolError("frame header length exceeds body");
    nlohmann::json header = nlohmann::json::parse(body.substr(8, header_len), nullptr, false);
    if (header.is_discarded() || !header.is_object()) throw ProtocolError("frame header is not a JSON object");
    return {std::move(header), body.substr(8 + header_len)};
}

inline int positive_field(const nlohmann::json& header, const char* key) {
    const auto it = header.find(key);
    if (it == header.end() || !it->is_number_integer() || it->get<std::int64_t>() < 1
        || it->get<std::int64_t>() > std::numeric_limits<int>::max())
        throw ProtocolError(std::string("frame header field '") + key + "' missing or not a positive integer");
    return it->get<int>();
}

inline std::string frame(const nlohmann::ordered_json& header, std::span<const float> tensor) {
    const std::string h = header.dump();
    std::string out;
    out.reserve(8 + h.size() + tensor.size() * 4);
    put_u64(out, h.size());
    out += h;
    put_f32(out, tensor);
    return out;
}

} // namespace detail

/// [u64 LE header length][{"b","h","w","c":3,"dtype":"f32"}][B*H*W*3 float32 LE]
inline std::string encode_request(const PredictRequest& req) {
    req.validate();
    nlohmann::ordered_json header;
    header["b"] = req.batch;
    header["h"] = req.height;
    header["w"] = req.width;
    header["c"] = Image::channels;
    header["dtype"] = "f32";
    return detail::frame(header, req.pixels);
}

inline PredictRequest decode_request(std::string_view body) {
    auto [header, tensor] = detail::split_frame(body);
    PredictRequest req;
    req.batch = detail::positive_field(header, "b");
    req.height = detail::positive_field(header, "h");
    req.width = detail::positive_field(header, "w");
    if (detail::positive_field(header, "c") != Image::channels) throw ProtocolError("only 3-channel requests are supported");
    if (header.value("dtype", std::string{}) != "f32") throw ProtocolError("dtype must be \"f32\"");
    const std::size_t expected = static_cast<std::size_t>(req.batch) * req.image_floats() * 4;
    if (tensor.size() != expected)
        throw ProtocolError("request tensor has " + std::to_string(tensor.size()) + " bytes, expected "
                            + std::to_string(expected));
    req.pixels = detail::get_f32(tensor);
    return req;
}

/// [u64 LE header length][{"b","classes"}][B*C float32 LE]
inline std::string encode_response(const PredictResponse& resp) {
    nlohmann::ordered_json header;
    header["b"] = resp.scores.rows;
    header["classes"] = resp.scores.cols;
    return detail::frame(header, resp.scores.data);
}

inline PredictResponse decode_response(std::string_view body) {
    auto [header, tensor] = detail::split_frame(body);
    PredictResponse resp;
    resp.scores.rows = detail::positive_field(header, "b");
    resp.scores.cols = detail::positive_field(header, "classes");
    const std::size_t expected = static_cast<std::size_t>(resp.scores.rows) * resp.scores.cols * 4;
    if (tensor.size() != expected)
        throw ProtocolError("response tensor has " + std::to_string(tensor.size()) + " bytes, expected "
                            + std::to_string(expected));
    resp.scores.data = detail::get_f32(tensor);
    return resp;
}

inline nlohmann::json info_to_json(const ModelInfo& info) {
    return {{"classes", info.classes}, {"class_names", info.class_names}, {"model", info.model}};
}

inline ModelInfo info_from_json(const nlohmann::json& j) {
    ModelInfo info;
    if (!j.is_object() || !j.contains("classes") || !j["classes"].is_number_integer())
        throw ProtocolError("info response lacks an integer 'classes' field");
    info.classes = j["classes"].get<int>();
    if (j.contains("class_names") && j["class_names"].is_array())
        info.class_names = j["class_names"].get<std::vector<std::string>>();
    info.model = j.value("model", std::string{});
    return info;
}

} // namespace wire

// ---------------------------------------------------------------------------
// Toy predictors

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Rect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool empty() const noexcept { return x1 <= x0 || y1 <= y0; }
    bool contains(int x, int y) const noexcept { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    friend bool operator==(const Rect&, const Rect&) = default;
};

/// Applies a per-image scoring function to every image of the batch.
class FunctionPredictor : public Predictor {
public:
    using Fn = std::function<std::vector<float>(std::span<const float> rgb, Size size)>;

    FunctionPredictor(Fn fn, int classes, std::string name = "function")
        : fn_(std::move(fn)), classes_(classes), name_(std::move(name)) {
        if (classes_ < 1) throw InvalidParams("predictor needs at least one class");
    }

    PredictResponse predict(const PredictRequest& req) const override {
        req.validate();
        PredictResponse resp;
        resp.scores.rows = req.batch;
        resp.scores.cols = classes_;
        resp.scores.data.reserve(static_cast<std::size_t>(req.batch) * classes_);
        for (int i = 0; i < req.batch; ++i) {
            auto row = fn_(req.image(i), {req.width, req.height});
            if (static_cast<int>(row.size()) != classes_) throw ProtocolError("scoring function returned wrong class count");
            resp.scores.data.insert(resp.scores.data.end(), row.begin(), row.end());
        }
        return resp;
    }

    ModelInfo info() const override { return {classes_, {}, name_}; }

private:
    Fn fn_;
    int classes_;
    std::string name_;
};

struct ToyPredictorSpec {
    enum class Kind { constant, region_mean, fragment_linear };

    Kind kind = Kind::constant;
    double constant = 1.0;
    Rect region;
    LabelMap fragments;
    std::vector<double> weights;

    void validate() const {
        switch (kind) {
        case Kind::constant:
            if (!std::isfinite(constant)) throw InvalidParams("constant predictor value must be finite");
            break;
        case Kind::region_mean:
            if (region.empty() || region.x0 < 0 || region.y0 < 0) throw InvalidParams("region must be a non-empty rectangle inside the image");
            break;
        case Kind::fragment_linear:
            if (fragments.labels.empty()) throw InvalidParams("fragment_linear needs a label map");
            if (weights.size() != static_cast<std::size_t>(fragments.n_fragments))
                throw InvalidParams("fragment_linear needs one weight per fragment");
            for (double a : weights)
                if (!std::isfinite(a)) throw InvalidParams("fragment weights must be finite");
            break;
        }
    }
};

namespace detail {

inline float channel_mean(std::span<const float> rgb, std::size_t p) {
    return (rgb[3 * p] + rgb[3 * p + 1] + rgb[3 * p + 2]) / 3.0f;
}

} // namespace detail

/// Builds an in-process single-class predictor:
///   constant        -> c
///   region_mean     -> mean channel-averaged intensity over the region
///   fragment_linear -> sum_f a_f * mean channel-averaged intensity of fragment f
inline std::unique_ptr<Predictor> make_toy(const ToyPredictorSpec& spec) {
    spec.validate();
    using Kind = ToyPredictorSpec::Kind;
    switch (spec.kind) {
    case Kind::constant: {
        const auto c = static_cast<float>(spec.constant);
        return std::make_unique<FunctionPredictor>([c](std::span<const float>, Size) { return std::vector<float>{c}; },
                                                   1, "toy:constant");
    }
    case Kind::region_mean: {
        const Rect r = spec.region;
        return std::make_unique<FunctionPredictor>(
            [r](std::span<const float> rgb, Size size) {
                if (r.x1 > size.width || r.y1 > size.height) throw InvalidParams("region exceeds image bounds");
                double sum = 0.0;
                for (int y = r.y0; y < r.y1; ++y)
                    for (int x = r.x0; x < r.x1; ++x)
                        sum += detail::channel_mean(rgb, static_cast<std::size_t>(y) * size.width + x);
                const double area = static_cast<double>(r.x1 - r.x0) * (r.y1 - r.y0);
                return std::vector<float>{static_cast<float>(sum / area)};
            },
            1, "toy:region_mean");
    }
    case Kind::fragment_linear: {
        auto lm = std::make_shared<const LabelMap>(spec.fragments);
        auto areas = std::make_shared<const std::vector<std::size_t>>(lm->areas());
        auto weights = spec.weights;
        return std::make_unique<FunctionPredictor>(
            [lm, areas, weights](std::span<const float> rgb, Size size) {
                if (size != lm->size()) throw InvalidParams("image size differs from the predictor's label map");
                std::vector<double> sums(weights.size(), 0.0);
                for (std::size_t p = 0; p < lm->labels.size(); ++p) sums[lm->labels[p]] += detail::channel_mean(rgb, p);
                double score = 0.0;
                for (std::size_t f = 0; f < weights.size(); ++f)
                    if ((*areas)[f] > 0) score += weights[f] * sums[f] / static_cast<double>((*areas)[f]);
                return std::vector<float>{static_cast<float>(score)};
            },
            1, "toy:fragment_linear");
    }
    }
    throw InvalidParams("unknown toy predictor kind");
}

/// Parses the command-line toy syntax: "constant:<c>" or "region:<x0>,<y0>,<x1>,<y1>".
inline ToyPredictorSpec parse_toy_spec(std::string_view text) {
    const auto colon = text.find(':');
    const std::string kind(text.substr(0, colon));
    const std::string args = colon == std::string_view::npos ? std::string{} : std::string(text.substr(colon + 1));
    ToyPredictorSpec spec;
    try {
        if (kind == "constant") {
            spec.kind = ToyPredictorSpec::Kind::constant;
            spec.constant = args.empty() ? 1.0 : std::stod(args);
        } else if (kind == "region" || kind == "region_mean") {
            spec.kind = ToyPredictorSpec::Kind::region_mean;
            int v[4];
            std::size_t pos = 0;
            for (int i = 0; i < 4; ++i) {
                std::size_t used = 0;
                v[i] = std::stoi(args.substr(pos), &used);
                pos += used;
                if (i < 3) {
                    if (pos >= args.size() || args[pos] != ',') throw InvalidParams("expected 4 comma-separated values");
                    ++pos;
                }
            }
            spec.region = {v[0], v[1], v[2], v[3]};
        } else {
            throw InvalidParams("unknown toy predictor '" + kind + "'");
        }
    } catch (const std::logic_error&) {
        throw InvalidParams("cannot parse toy predictor spec '" + std::string(text) + "'");
    }
    spec.validate();
    return spec;
}

} // namespace mfpp
