#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <thread>

#include "mfpp/model.hpp"
#include "mfpp/remote.hpp"
#include "support.hpp"

using namespace mfpp;

namespace {

Image gray_image(int w, int h, float v) { return Image(w, h, v); }

float score(const Predictor& model, const Image& img) {
    return predict_batch(model, PredictRequest::single(img)).scores.at(0, 0);
}

PredictRequest random_request(std::mt19937_64& gen) {
    std::uniform_int_distribution<int> dim(1, 9);
    std::uniform_real_distribution<float> val(0.0f, 1.0f);
    PredictRequest req{dim(gen), dim(gen), dim(gen), {}};
    req.pixels.resize(static_cast<std::size_t>(req.batch) * req.image_floats());
    for (auto& v : req.pixels) v = val(gen);
    return req;
}

/// Runs an httplib server on an ephemeral loopback port for the lifetime of the object.
class LoopbackServer {
public:
    template <class Setup>
    explicit LoopbackServer(Setup&& setup) {
        setup(server_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LoopbackServer() {
        server_.stop();
        thread_.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

RemoteOptions fast_retries() {
    RemoteOptions o;
    o.backoff = std::chrono::milliseconds(1);
    o.timeout = std::chrono::milliseconds(2000);
    return o;
}

} // namespace

TEST(ToyPredictor, Constant) {
    ToyPredictorSpec spec;
    spec.constant = 2.5;
    const auto model = make_toy(spec);
    EXPECT_FLOAT_EQ(score(*model, gray_image(5, 4, 0.1f)), 2.5f);
    EXPECT_FLOAT_EQ(score(*model, gray_image(9, 9, 0.9f)), 2.5f);
    EXPECT_EQ(model->info().classes, 1);
}

TEST(ToyPredictor, RegionMean) {
    ToyPredictorSpec spec;
    spec.kind = ToyPredictorSpec::Kind::region_mean;
    spec.region = {0, 0, 2, 2};
    const auto model = make_toy(spec);
    Image img(4, 4, 0.0f);
    img.set_pixel(0, 0, 1, 1, 1);
    img.set_pixel(1, 1, 0.3f, 0.6f, 0.9f);
    img.set_pixel(3, 3, 1, 1, 1);
    EXPECT_NEAR(score(*model, img), (1.0 + 0.6) / 4.0, 1e-6);
}

TEST(ToyPredictor, FragmentLinear) {
    ToyPredictorSpec spec;
    spec.kind = ToyPredictorSpec::Kind::fragment_linear;
    spec.fragments = mfpp::testing::quadrant_labels(8, 8);
    spec.weights = {1, 2, 0, 0};
    const auto model = make_toy(spec);
    EXPECT_NEAR(score(*model, gray_image(8, 8, 1.0f)), 3.0, 1e-6);
    EXPECT_NEAR(score(*model, gray_image(8, 8, 0.5f)), 1.5, 1e-6);
    EXPECT_THROW(score(*model, gray_image(6, 8, 1.0f)), InvalidParams);
}

TEST(ToyPredictor, InvalidSpecs) {
    ToyPredictorSpec spec;
    spec.kind = ToyPredictorSpec::Kind::region_mean;
    spec.region = {3, 3, 3, 5};
    EXPECT_THROW(make_toy(spec), InvalidParams);
    spec.kind = ToyPredictorSpec::Kind::fragment_linear;
    spec.fragments = mfpp::testing::quadrant_labels(4, 4);
    spec.weights = {1, 2};
    EXPECT_THROW(make_toy(spec), InvalidParams);
    spec.kind = ToyPredictorSpec::Kind::constant;
    spec.constant = std::nan("");
    EXPECT_THROW(make_toy(spec), InvalidParams);
}

TEST(ToyPredictor, ParseSpec) {
    const auto c = parse_toy_spec("constant:1.5");
    EXPECT_EQ(c.kind, ToyPredictorSpec::Kind::constant);
    EXPECT_DOUBLE_EQ(c.constant, 1.5);
    const auto r = parse_toy_spec("region:10,20,30,40");
    EXPECT_EQ(r.kind, ToyPredictorSpec::Kind::region_mean);
    EXPECT_EQ(r.region, (Rect{10, 20, 30, 40}));
    EXPECT_THROW(parse_toy_spec("region:1,2,3"), InvalidParams);
    EXPECT_THROW(parse_toy_spec("region:a,b,c,d"), InvalidParams);
    EXPECT_THROW(parse_toy_spec("resnet"), InvalidParams);
}

TEST(ToyPredictor, BatchEqualsSingleCalls) {
    ToyPredictorSpec spec;
    spec.kind = ToyPredictorSpec::Kind::region_mean;
    spec.region = {1, 1, 5, 4};
    const auto model = make_toy(spec);
    std::mt19937_64 gen(3);
    PredictRequest req = random_request(gen);
    req.height = 6;
    req.width = 7;
    req.batch = 5;
    req.pixels.assign(static_cast<std::size_t>(req.batch) * req.image_floats(), 0.0f);
    std::uniform_real_distribution<float> val(0.0f, 1.0f);
    for (auto& v : req.pixels) v = val(gen);
    const auto batch = predict_batch(*model, req);
    for (int i = 0; i < req.batch; ++i) {
        const auto img = req.image(i);
        PredictRequest one{1, req.height, req.width, {img.begin(), img.end()}};
        EXPECT_EQ(predict_batch(*model, one).scores.at(0, 0), batch.scores.at(i, 0));
    }
}

TEST(PredictBatch, RejectsMalformedResponses) {
    const Image img(2, 2, 0.5f);
    FunctionPredictor nan_model([](std::span<const float>, Size) { return std::vector<float>{NAN}; }, 1);
    EXPECT_THROW(predict_batch(nan_model, PredictRequest::single(img)), ProtocolError);

    class ShortPredictor : public Predictor {
        PredictResponse predict(const PredictRequest&) const override { return {{0, 1, {}}, {}}; }
        ModelInfo info() const override { return {1, {}, "short"}; }
    } short_model;
    EXPECT_THROW(predict_batch(short_model, PredictRequest::single(img)), ProtocolError);

    PredictRequest bad{2, 2, 2, std::vector<float>(12, 0.0f)};
    EXPECT_THROW(predict_batch(nan_model, bad), ProtocolError);
}

TEST(Wire, RequestByteLayout) {
    PredictRequest req{1, 1, 1, {1.0f, 0.0f, 0.5f}};
    const std::string header = R"({"b":1,"h":1,"w":1,"c":3,"dtype":"f32"})";
    std::string expected;
    expected.push_back(static_cast<char>(header.size()));
    expected.append(7, '\0');
    expected += header;
    const unsigned char floats[] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3f};
    expected.append(reinterpret_cast<const char*>(floats), sizeof floats);
    EXPECT_EQ(wire::encode_request(req), expected);
    EXPECT_EQ(wire::decode_request(expected), req);
}

TEST(Wire, ResponseByteLayout) {
    PredictResponse resp;
    resp.scores = {1, 2, {2.0f, -1.0f}};
    const std::string header = R"({"b":1,"classes":2})";
    std::string expected;
    expected.push_back(static_cast<char>(header.size()));
    expected.append(7, '\0');
    expected += header;
    const unsigned char floats[] = {0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x80, 0xbf};
    expected.append(reinterpret_cast<const char*>(floats), sizeof floats);
    EXPECT_EQ(wire::encode_response(resp), expected);
    EXPECT_EQ(wire::decode_response(expected).scores, resp.scores);
}

TEST(Wire, RandomizedRoundTripIsLossless) {
    std::mt19937_64 gen(2024);
    std::uniform_int_distribution<int> classes(1, 20);
    std::uniform_int_distribution<std::uint32_t> bits;
    for (int trial = 0; trial < 200; ++trial) {
        PredictRequest req = random_request(gen);
        // Arbitrary finite bit patterns, including denormals and negative zero.
        for (std::size_t i = 0; i < req.pixels.size(); i += 7) {
            float f = std::bit_cast<float>(bits(gen));
            if (std::isfinite(f)) req.pixels[i] = f;
        }
        const auto decoded = wire::decode_request(wire::encode_request(req));
        ASSERT_EQ(decoded.batch, req.batch);
        ASSERT_EQ(std::memcmp(decoded.pixels.data(), req.pixels.data(), req.pixels.size() * 4), 0);

        PredictResponse resp;
        resp.scores.rows = req.batch;
        resp.scores.cols = classes(gen);
        resp.scores.data.resize(static_cast<std::size_t>(resp.scores.rows) * resp.scores.cols);
        for (auto& v : resp.scores.data) v = std::bit_cast<float>(bits(gen) & 0xbf7fffffu);
        const auto back = wire::decode_response(wire::encode_response(resp)).scores;
        ASSERT_EQ(back.rows, resp.scores.rows);
        ASSERT_EQ(back.cols, resp.scores.cols);
        ASSERT_EQ(std::memcmp(back.data.data(), resp.scores.data.data(), back.data.size() * 4), 0);
    }
}

TEST(Wire, DecodeErrors) {
    const std::string good = wire::encode_request({1, 2, 2, std::vector<float>(12, 0.25f)});
    EXPECT_THROW(wire::decode_request(good.substr(0, 5)), ProtocolError);
    EXPECT_THROW(wire::decode_request(good.substr(0, good.size() - 4)), ProtocolError);
    EXPECT_THROW(wire::decode_request(good + "xxxx"), ProtocolError);

    std::string huge_len = good;
    huge_len[7] = 1;
    EXPECT_THROW(wire::decode_request(huge_len), ProtocolError);

    auto with_header = [](const std::string& header, std::size_t floats) {
        std::string out;
        wire::detail::put_u64(out, header.size());
        out += header;
        out.append(floats * 4, '\0');
        return out;
    };
    EXPECT_THROW(wire::decode_request(with_header("not json", 3)), ProtocolError);
    EXPECT_THROW(wire::decode_request(with_header(R"({"b":1,"h":1,"w":1,"c":1,"dtype":"f32"})", 1)), ProtocolError);
    EXPECT_THROW(wire::decode_request(with_header(R"({"b":1,"h":1,"w":1,"c":3,"dtype":"f16"})", 3)), ProtocolError);
    EXPECT_THROW(wire::decode_request(with_header(R"({"b":0,"h":1,"w":1,"c":3,"dtype":"f32"})", 0)), ProtocolError);
    EXPECT_THROW(wire::decode_request(with_header(R"({"h":1,"w":1,"c":3,"dtype":"f32"})", 3)), ProtocolError);
    EXPECT_NO_THROW(wire::decode_request(with_header(R"({"dtype":"f32","c":3,"w":1,"h":1,"b":1})", 3)));
    EXPECT_THROW(wire::decode_response(with_header(R"({"b":2,"classes":3})", 5)), ProtocolError);
}

TEST(Wire, InfoJson) {
    const ModelInfo info{2, {"cat", "dog"}, "toy"};
    const auto back = wire::info_from_json(wire::info_to_json(info));
    EXPECT_EQ(back.classes, 2);
    EXPECT_EQ(back.class_names, info.class_names);
    EXPECT_EQ(back.model, "toy");
    EXPECT_THROW(wire::info_from_json(nlohmann::json::parse(R"({"model":"x"})")), ProtocolError);
}

TEST(Remote, RoundTripThroughServer) {
    ToyPredictorSpec spec;
    spec.kind = ToyPredictorSpec::Kind::region_mean;
    spec.region = {0, 0, 3, 3};
    const auto model = make_toy(spec);
    LoopbackServer server([&](httplib::Server& s) { mount_predictor(s, *model); });
    const RemotePredictor remote(server.url(), fast_retries());
    std::mt19937_64 gen(5);
    for (int trial = 0; trial < 10; ++trial) {
        PredictRequest req = random_request(gen);
        req.height = 3 + trial % 4;
        req.width = 4 + trial % 3;
        req.pixels.assign(static_cast<std::size_t>(req.batch) * req.image_floats(), 0.0f);
        std::uniform_real_distribution<float> val(0.0f, 1.0f);
        for (auto& v : req.pixels) v = val(gen);
        EXPECT_EQ(predict_batch(remote, req).scores, predict_batch(*model, req).scores);
    }
    const ModelInfo info = remote.info();
    EXPECT_EQ(info.classes, 1);
    EXPECT_EQ(info.model, "toy:region_mean");
}

TEST(Remote, UrlPrefixAndRequestIdEcho) {
    std::atomic<int> calls{0};
    std::string seen_id;
    LoopbackServer server([&](httplib::Server& s) {
        s.Post("/api/v1/predict", [&](const httplib::Request& req, httplib::Response& res) {
            ++calls;
            seen_id = req.get_header_value(kRequestIdHeader);
            res.set_header(kRequestIdHeader, seen_id);
            const auto decoded = wire::decode_request(req.body);
            PredictResponse resp;
            resp.scores = {decoded.batch, 1, std::vector<float>(decoded.batch, 7.0f)};
            res.set_content(wire::encode_response(resp), "application/octet-stream");
        });
    });
    const RemotePredictor remote(server.url() + "/api/", fast_retries());
    const auto resp = remote.predict(PredictRequest::single(Image(2, 2, 0.5f)));
    EXPECT_EQ(resp.scores.at(0, 0), 7.0f);
    EXPECT_EQ(calls.load(), 1);
    EXPECT_FALSE(seen_id.empty());
}

TEST(Remote, MismatchedRequestIdRejected) {
    LoopbackServer server([&](httplib::Server& s) {
        s.Post("/v1/predict", [&](const httplib::Request&, httplib::Response& res) {
            res.set_header(kRequestIdHeader, "bogus");
            res.set_content(wire::encode_response({{1, 1, {1.0f}}, {}}), "application/octet-stream");
        });
    });
    const RemotePredictor remote(server.url(), fast_retries());
    EXPECT_THROW(remote.predict(PredictRequest::single(Image(1, 1, 0.5f))), ProtocolError);
}

TEST(Remote, ServerErrorsAreRetried) {
    std::atomic<int> calls{0};
    LoopbackServer server([&](httplib::Server& s) {
        s.Post("/v1/predict", [&](const httplib::Request& req, httplib::Response& res) {
            if (++calls < 3) {
                res.status = 503;
                return;
            }
            const auto decoded = wire::decode_request(req.body);
            res.set_content(wire::encode_response({{decoded.batch, 1, std::vector<float>(decoded.batch, 1.0f)}, {}}),
                            "application/octet-stream");
        });
    });
    const RemotePredictor remote(server.url(), fast_retries());
    EXPECT_NO_THROW(remote.predict(PredictRequest::single(Image(1, 1, 0.5f))));
    EXPECT_EQ(calls.load(), 3);

    calls = -10;
    EXPECT_THROW(remote.predict(PredictRequest::single(Image(1, 1, 0.5f))), TransportError);
    EXPECT_EQ(calls.load(), -7);
}

TEST(Remote, ClientErrorsAreNotRetried) {
    std::atomic<int> calls{0};
    LoopbackServer server([&](httplib::Server& s) {
        s.Post("/v1/predict", [&](const httplib::Request&, httplib::Response& res) {
            ++calls;
            res.status = 400;
            res.set_content("bad frame", "text/plain");
        });
    });
    const RemotePredictor remote(server.url(), fast_retries());
    EXPECT_THROW(remote.predict(PredictRequest::single(Image(1, 1, 0.5f))), ProtocolError);
    EXPECT_EQ(calls.load(), 1);
}

TEST(Remote, UnreachableEndpointIsTransportError) {
    const RemotePredictor remote("http://127.0.0.1:1", fast_retries());
    EXPECT_THROW(remote.predict(PredictRequest::single(Image(1, 1, 0.5f))), TransportError);
    EXPECT_THROW(remote.info(), TransportError);
}

TEST(Remote, MountedServerRejectsMalformedFrames) {
    const auto model = make_toy(ToyPredictorSpec{});
    LoopbackServer server([&](httplib::Server& s) { mount_predictor(s, *model); });
    httplib::Client cli(server.url());
    auto res = cli.Post("/v1/predict", "garbage", "application/octet-stream");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);

    ToyPredictorSpec spec;
    spec.kind = ToyPredictorSpec::Kind::region_mean;
    spec.region = {0, 0, 50, 50};
    const auto small = make_toy(spec);
    LoopbackServer failing([&](httplib::Server& s) { mount_predictor(s, *small); });
    httplib::Client cli2(failing.url());
    res = cli2.Post("/v1/predict", httplib::Headers{{kRequestIdHeader, "42"}},
                    wire::encode_request(PredictRequest::single(Image(4, 4, 0.5f))), "application/octet-stream");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 500);
    EXPECT_EQ(res->get_header_value(kRequestIdHeader), "42");
}
