#ifndef OWSD_HTTP_CLOUD_HPP
#define OWSD_HTTP_CLOUD_HPP

#include <atomic>
#include <string>
#include <thread>

#include "owsd/cloud.hpp"
#include "owsd/pipeline.hpp"
#include "owsd/wire.hpp"

// httplib pulls in <resolv.h>, whose _res macro mangles Eigen parameter
// names; Eigen must already be included by the headers above.
#include <httplib.h>

namespace owsd {

namespace detail {

inline void json_reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void error_reply(httplib::Response& res, int status, const std::string& code,
                        const std::string& message) {
  json_reply(res, status, json{{"error_code", code}, {"message", message}});
}

}  // namespace detail

// Serves a frozen CloudModel over HTTP. The model never learns whether an
// input is scrambled; there is a single code path for all images.
class CloudServer {
 public:
  explicit CloudServer(CloudModel model) : model_(std::move(model)) {
    server_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      detail::json_reply(res, 200, json{{"status", "ok"}, {"model_id", model_.model_id}});
    });
    server_.Post("/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
      handle_predict(req, res);
    });
  }

  // Binds and serves on a background thread; port 0 picks a free port.
  // Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
      if (port_ < 0) throw port_in_use_error("cloud server: no free port on " + host);
    } else {
      if (!server_.bind_to_port(host, port)) {
        throw port_in_use_error("cloud server: cannot bind " + host + ":" +
                                std::to_string(port));
      }
      port_ = port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  // Blocks until the server is stopped (serve-forever mode for the CLI).
  void wait() {
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  const CloudModel& model() const { return model_; }

  ~CloudServer() { stop(); }

 private:
  void handle_predict(const httplib::Request& req, httplib::Response& res) {
    PredictRequest preq;
    try {
      preq = PredictRequest::from_json(json::parse(req.body));
    } catch (const std::exception& e) {
      detail::error_reply(res, 400, "bad_request", e.what());
      return;
    }
    Tensor image;
    try {
      image = pixels_from_b64(preq.image_b64, preq.height, preq.width, preq.channels);
    } catch (const std::exception& e) {
      detail::error_reply(res, 422, "shape_mismatch", e.what());
      return;
    }
    if (image.shape != model_.net.input_shape()) {
      detail::error_reply(res, 422, "shape_mismatch",
                          "model expects " + shape_str(model_.net.input_shape()) + ", got " +
                              shape_str(image.shape));
      return;
    }
    try {
      ClassificationVector v = model_.classify(image);
      PredictResponse out;
      out.model_id = v.model_id;
      out.probabilities = v.probs;
      out.labels = model_.label_names;
      detail::json_reply(res, 200, out.to_json());
    } catch (const std::exception& e) {
      detail::error_reply(res, 422, "shape_mismatch", e.what());
    }
  }

  CloudModel model_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

// Client-side view of a served CMLS, usable wherever InProcessChannel is.
class HttpChannel final : public CloudChannel {
 public:
  explicit HttpChannel(std::string base_url) : url_(std::move(base_url)), client_(url_) {
    client_.set_connection_timeout(5, 0);
    client_.set_read_timeout(30, 0);
    auto res = client_.Get("/v1/health");
    if (!res || res->status != 200) {
      throw cloud_unreachable_error("no healthy cloud at " + url_);
    }
    const json h = json::parse(res->body);
    model_id_ = h.at("model_id").get<std::string>();
  }

  ClassificationVector submit(const ScrambledImage& image) override {
    PredictRequest preq = make_predict_request(image.pixels);
    auto res = client_.Post("/v1/predict", preq.to_json().dump(), "application/json");
    if (!res) throw cloud_unreachable_error("cloud at " + url_ + " did not respond");
    if (res->status != 200) {
      throw cloud_unreachable_error("cloud returned status " + std::to_string(res->status) +
                                    ": " + res->body);
    }
    PredictResponse pres = PredictResponse::from_json(json::parse(res->body));
    check_distribution(pres.probabilities, "http classify");
    labels_ = pres.labels;
    ClassificationVector v;
    v.probs = pres.probabilities;
    v.model_id = pres.model_id;
    return v;
  }

  std::string model_id() const override { return model_id_; }
  std::size_t vector_len() const override {
    if (!labels_.empty()) return labels_.size();
    throw invalid_argument_error("http channel: vector length unknown before first submit");
  }
  std::vector<std::string> labels() const override { return labels_; }

 private:
  std::string url_;
  httplib::Client client_;
  std::string model_id_;
  std::vector<std::string> labels_;
};

}  // namespace owsd

#endif  // OWSD_HTTP_CLOUD_HPP
