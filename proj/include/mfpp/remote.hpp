#pragma once

// HTTP transport for the predictor wire protocol:
//   POST /v1/predict   framed request -> framed response
//   GET  /v1/info      {"classes": C, "class_names": [...], "model": "..."}

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include <httplib.h>

#include "mfpp/model.hpp"

namespace mfpp {

inline constexpr const char* kModelUrlEnv = "MFPP_MODEL_URL";
inline constexpr const char* kRequestIdHeader = "X-Request-Id";

struct RemoteOptions {
    int attempts = 3;
    std::chrono::milliseconds timeout{60'000};
    std::chrono::milliseconds backoff{100};
};

/// Client for a model server. Each call opens its own connection, so one
/// instance may be shared by concurrent in-flight batches.
class RemotePredictor : public Predictor {
public:
    explicit RemotePredictor(std::string url, RemoteOptions options = {}) : options_(options) {
        // httplib wants scheme://host:port; keep any path as a prefix.
        const auto scheme_end = url.find("://");
        const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
        if (path_start != std::string::npos) {
            prefix_ = url.substr(path_start);
            url.resize(path_start);
        }
        while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
        base_ = std::move(url);
        if (base_.empty()) throw InvalidConfig("empty model URL");
    }

    /// Endpoint from MFPP_MODEL_URL, if set.
    static std::optional<std::string> env_url() {
        if (const char* v = std::getenv(kModelUrlEnv); v && *v) return std::string(v);
        return std::nullopt;
    }

    PredictResponse predict(const PredictRequest& req) const override {
        const std::string body = wire::encode_request(req);
        const std::string id = std::to_string(next_id_.fetch_add(1));
        auto res = with_retries([&](httplib::Client& cli) {
            return cli.Post(prefix_ + "/v1/predict", httplib::Headers{{kRequestIdHeader, id}}, body,
                            "application/octet-stream");
        });
        if (res->has_header(kRequestIdHeader) && res->get_header_value(kRequestIdHeader) != id)
            throw ProtocolError("response request id " + res->get_header_value(kRequestIdHeader) + " does not match "
                                + id);
        PredictResponse resp = wire::decode_response(res->body);
        if (resp.scores.rows != req.batch)
            throw ProtocolError("server returned " + std::to_string(resp.scores.rows) + " rows for a batch of "
                                + std::to_string(req.batch));
        return resp;
    }

    ModelInfo info() const override {
        auto res = with_retries([&](httplib::Client& cli) { return cli.Get(prefix_ + "/v1/info"); });
        auto j = nlohmann::json::parse(res->body, nullptr, false);
        if (j.is_discarded()) throw ProtocolError("info response is not JSON");
        return wire::info_from_json(j);
    }

    const std::string& url() const noexcept { return base_; }

private:
    template <class Call>
    httplib::Result with_retries(Call&& call) const {
        std::string last_error;
        for (int attempt = 0; attempt < options_.attempts; ++attempt) {
            if (attempt > 0) std::this_thread::sleep_for(options_.backoff * (1 << (attempt - 1)));
            httplib::Client cli(base_);
            const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
            const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
            cli.set_connection_timeout(secs.count(), usecs.count());
            cli.set_read_timeout(secs.count(), usecs.count());
            cli.set_write_timeout(secs.count(), usecs.count());
            auto res = call(cli);
            if (!res) {
                last_error = httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
                continue;
            }
            if (res->status != 200)
                throw ProtocolError("HTTP " + std::to_string(res->status) + " from " + base_ + ": " + res->body);
            return res;
        }
        throw TransportError("model endpoint " + base_ + " failed after " + std::to_string(options_.attempts)
                             + " attempts: " + last_error);
    }

    std::string base_;
    std::string prefix_;
    RemoteOptions options_;
    mutable std::atomic<std::uint64_t> next_id_{0};
};

/// Serves `model` over the wire protocol on `server`. Framing errors map to
/// HTTP 400, predictor failures to 500. The request id header is echoed.
inline void mount_predictor(httplib::Server& server, const Predictor& model) {
    server.Post("/v1/predict", [&model](const httplib::Request& req, httplib::Response& res) {
        if (req.has_header(kRequestIdHeader)) res.set_header(kRequestIdHeader, req.get_header_value(kRequestIdHeader));
        try {
            const PredictRequest decoded = wire::decode_request(req.body);
            res.set_content(wire::encode_response(predict_batch(model, decoded)), "application/octet-stream");
        } catch (const ProtocolError& e) {
            res.status = 400;
            res.set_content(e.what(), "text/plain");
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(e.what(), "text/plain");
        }
    });
    server.Get("/v1/info", [&model](const httplib::Request&, httplib::Response& res) {
        res.set_content(wire::info_to_json(model.info()).dump(), "application/json");
    });
}

} // namespace mfpp
